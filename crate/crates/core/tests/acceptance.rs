//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use patchtrace::fixtures::{isolate_image_to_final_encoder_layer, random_image, random_question, sample_for, tiny_config};
use patchtrace::hooks::RecordingTap;
use patchtrace::metrics::GridMeta;
use patchtrace::rng::RngState;
use patchtrace::trace::{capture_clean, corrupt_image, draw_noise, run_patched};
use patchtrace::{
    gamma, gamma_of_nu, trace_grid, Component, CorruptionMode, CorruptionSpec, Gamma, GammaGrid, ModelConfig, PatchSet,
    RunTriple, TraceSettings, VlModel,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bits(p: &[f64]) -> Vec<u64> {
    p.iter().map(|v| v.to_bits()).collect()
}

fn endpoint_identities() -> Outcome {
    let mut rng = RngState::new(20_240_601);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    while n < 1000 {
        let p_clean = rng.next_uniform();
        let p_corrupt = rng.next_uniform();
        if (p_clean - p_corrupt).abs() < 1e-9 {
            continue;
        }
        n += 1;
        let full = gamma(&RunTriple { p_clean, p_corrupt, p_patched: p_clean }).map_err(|e| e.to_string())?;
        let none = gamma(&RunTriple { p_clean, p_corrupt, p_patched: p_corrupt }).map_err(|e| e.to_string())?;
        match (full, none) {
            (Gamma::Value(a), Gamma::Value(b)) => worst = worst.max((a - 1.0).abs()).max(b.abs()),
            _ => return Err(format!("degenerate result for ({p_clean}, {p_corrupt})")),
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("1000 cases, max deviation {worst:e}"))
}

fn zero_noise_identity() -> Outcome {
    let mut cells = 0;
    for seed in 0..5 {
        let model = VlModel::random(tiny_config(), seed).map_err(|e| e.to_string())?;
        let sample = sample_for(&model, &format!("z{seed}"), seed).map_err(|e| e.to_string())?;
        for mode in [CorruptionMode::Scalar, CorruptionMode::PerElement] {
            let out = corrupt_image(&sample.image, &CorruptionSpec { nu: 0.0, seed: 99, mode })
                .map_err(|e| e.to_string())?;
            ensure(bits(out.tensor().data()) == bits(sample.image.tensor().data()), || {
                format!("nu=0 {mode:?} changed the image (seed {seed})")
            })?;
            let o = trace_grid(&model, &sample, &TraceSettings::new(0.0, 3, 7, mode)).map_err(|e| e.to_string())?;
            for g in [o.encoder.as_ref().unwrap(), o.decoder.as_ref().unwrap()] {
                ensure(g.all_degenerate(), || format!("numeric Γ at nu=0 in {} grid", g.component))?;
                cells += g.layers * g.tokens;
            }
            ensure(o.runs.iter().all(|r| r.p_clean.to_bits() == r.p_corrupt.to_bits()), || {
                "p_corrupt differs from p_clean at nu=0".into()
            })?;
        }
    }
    Ok(format!("image bitwise unchanged; {cells} cells, all degenerate"))
}

fn full_restoration() -> Outcome {
    for seed in 0..50 {
        let model = VlModel::random(tiny_config(), 1000 + seed).map_err(|e| e.to_string())?;
        let sample = sample_for(&model, "r", seed).map_err(|e| e.to_string())?;
        let cache = capture_clean(&model, &sample.tokens, &sample.image).map_err(|e| e.to_string())?;
        let spec = CorruptionSpec { nu: 5.0, seed, mode: CorruptionMode::PerElement };
        let corrupted = corrupt_image(&sample.image, &spec).map_err(|e| e.to_string())?;
        let all = PatchSet::whole_image(model.config().num_patches);
        let d = run_patched(&model, &sample.tokens, &corrupted, &cache, &all).map_err(|e| e.to_string())?;
        ensure(bits(d.probs()) == bits(cache.clean_distribution().probs()), || {
            format!("model {seed}: restored distribution differs from clean")
        })?;
    }
    Ok("50 models, bitwise equal".into())
}

fn last_layer_override() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let model = VlModel::random(tiny_config(), 2000 + seed).map_err(|e| e.to_string())?;
        let cfg = model.config().clone();
        let sample = sample_for(&model, "o", seed).map_err(|e| e.to_string())?;
        let cache = capture_clean(&model, &sample.tokens, &sample.image).map_err(|e| e.to_string())?;
        let spec = CorruptionSpec { nu: 10.0, seed, mode: CorruptionMode::Scalar };
        let corrupted = corrupt_image(&sample.image, &spec).map_err(|e| e.to_string())?;
        let patches = PatchSet::layer(Component::Encoder, cfg.enc_layers - 1, sample.tokens.len())
            .union(PatchSet::layer(Component::Decoder, cfg.dec_layers - 1, cfg.decoder_len()));
        let d = run_patched(&model, &sample.tokens, &corrupted, &cache, &patches).map_err(|e| e.to_string())?;
        for (a, b) in d.probs().iter().zip(cache.clean_distribution().probs()) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("50 models, max deviation {worst:e}, {:.2}s", elapsed.as_secs_f64()))
}

fn oracle_grid_equivalence() -> Outcome {
    let cfg = tiny_config();
    ensure(cfg.enc_layers == 2 && cfg.dec_layers == 2 && cfg.max_question_len == 3, || "fixture geometry".into())?;
    let mut worst: f64 = 0.0;
    let mut cells = 0;
    for (seed, mode, nu) in [(1, CorruptionMode::Scalar, 5.0), (2, CorruptionMode::PerElement, 1.0)] {
        let model = VlModel::random(cfg.clone(), seed).map_err(|e| e.to_string())?;
        let sample = sample_for(&model, "grid", seed).map_err(|e| e.to_string())?;
        ensure(sample.tokens.len() == 3, || "fixture must have 3 tokens".into())?;
        let settings = TraceSettings::new(nu, 5, 42, mode);
        let out = trace_grid(&model, &sample, &settings).map_err(|e| e.to_string())?;
        for c in [Component::Encoder, Component::Decoder] {
            let want = common::oracle_grid(&model, &sample, &settings, c);
            let got = out.grid(c).unwrap();
            for (l, (row, wrow)) in got.values.iter().zip(&want).enumerate() {
                for (t, (v, w)) in row.iter().zip(wrow).enumerate() {
                    cells += 1;
                    match (v, w) {
                        (Some(v), Some(w)) => worst = worst.max((v - w).abs()),
                        (None, None) => {}
                        _ => return Err(format!("{c} L{l} T{t}: degeneracy differs")),
                    }
                }
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("{cells} cells, max deviation {worst:e}"))
}

fn hooks_transparent_and_causal() -> Outcome {
    let cfg = tiny_config();
    for i in 0..100u64 {
        let model = VlModel::random(cfg.clone(), 3000 + i).map_err(|e| e.to_string())?;
        let q = random_question(&cfg, 1 + (i as usize % 3), i).map_err(|e| e.to_string())?;
        let img = random_image(&cfg, i + 500).map_err(|e| e.to_string())?;

        let plain = model.forward(&q, &img, None).map_err(|e| e.to_string())?;
        let mut rec = RecordingTap::default();
        let tapped = model.forward(&q, &img, Some(&mut rec)).map_err(|e| e.to_string())?;
        ensure(bits(plain.probs()) == bits(tapped.probs()), || format!("input {i}: recording tap changed output"))?;

        // Changing decoder token k leaves every earlier position untouched.
        let enc = model.encode_question(&q, &img, None).map_err(|e| e.to_string())?;
        let mut rng = RngState::new(i);
        let len = cfg.max_question_len;
        let toks: Vec<u32> = (0..len).map(|_| (rng.next_uniform() * cfg.vocab_size as f64) as u32).collect();
        let k = (i as usize) % len;
        let mut edited = toks.clone();
        edited[k] = (edited[k] + 1) % cfg.vocab_size as u32;
        let a = model.decode_answer(&enc, &toks, None).map_err(|e| e.to_string())?;
        let b = model.decode_answer(&enc, &edited, None).map_err(|e| e.to_string())?;
        for p in 0..k {
            ensure(bits(a.row(p)) == bits(b.row(p)), || format!("input {i}: position {p} saw token {k}"))?;
        }
        ensure(bits(a.row(k)) != bits(b.row(k)), || format!("input {i}: edited position unchanged"))?;
    }
    Ok("100 inputs: tap bitwise transparent, decoder causal".into())
}

fn trace_tree(dir: &Path, name: &str, manifest: &Path, data: &Path, seed: &str) -> Result<std::collections::BTreeMap<String, Vec<u8>>, String> {
    let out = dir.join(name);
    let status = Command::new(env!("CARGO_BIN_EXE_patchtrace"))
        .args(["trace", "--samples", "3", "--runs", "3", "--nu", "5", "--seed", seed, "--model"])
        .arg(manifest)
        .arg("--dataset")
        .arg(data)
        .arg("--out")
        .arg(&out)
        .env_remove("PATCHTRACE_THREADS")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
    Ok(common::tree(&out))
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (manifest, data, _, _) = common::write_bundle(dir.path(), 3, 9);
    let a = trace_tree(dir.path(), "a", &manifest, &data, "100")?;
    let b = trace_tree(dir.path(), "b", &manifest, &data, "100")?;
    ensure(a == b, || "identical invocations produced different trees".into())?;
    let c = trace_tree(dir.path(), "c", &manifest, &data, "101")?;
    let mut changed = 0;
    for (name, bytes) in &a {
        if name.starts_with("grids/") && !name.ends_with("runs.json") {
            let ga: GammaGrid = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
            let gc: GammaGrid = serde_json::from_slice(&c[name]).map_err(|e| e.to_string())?;
            changed += ga.cells().zip(gc.cells()).filter(|(x, y)| x != y).count();
        }
    }
    ensure(changed > 0, || "--seed change left every cell unchanged".into())?;
    Ok(format!("{} files byte-identical; seed change altered {changed} cells", a.len()))
}

fn corruption_statistics() -> Outcome {
    let n = 100_000usize;
    let nu = 0.5;
    let spec = CorruptionSpec { nu, seed: 31_337, mode: CorruptionMode::PerElement };
    let eps = draw_noise(&spec, &[n]).map_err(|e| e.to_string())?;
    let d = eps.data();
    let mean = d.iter().sum::<f64>() / n as f64;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mean_tol = 4.0 * nu / (n as f64).sqrt();
    // Standard error of a normal sample's standard deviation.
    let sd_tol = 4.0 * nu / (2.0 * (n as f64 - 1.0)).sqrt();
    ensure((mean - 1.0).abs() <= mean_tol, || format!("mean {mean} outside 1 ± {mean_tol}"))?;
    ensure((sd - nu).abs() <= sd_tol, || format!("sd {sd} outside {nu} ± {sd_tol}"))?;
    Ok(format!("mean {mean:.5} (±{mean_tol:.5}), sd {sd:.5} (±{sd_tol:.5})"))
}

fn aggregation_oracle() -> Outcome {
    let mut rng = RngState::new(77);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let n_grids = 1 + (rng.next_uniform() * 4.0) as usize;
        let layers = 1 + (rng.next_uniform() * 4.0) as usize;
        let mut grids = Vec::new();
        let mut flat = Vec::new();
        let mut n_deg = 0;
        for g in 0..n_grids {
            let tokens = 1 + (rng.next_uniform() * 5.0) as usize;
            let values: Vec<Vec<Option<f64>>> = (0..layers)
                .map(|_| {
                    (0..tokens)
                        .map(|_| {
                            let v = rng.next_uniform() * 3.0 - 1.0;
                            (rng.next_uniform() > 0.3).then_some(v)
                        })
                        .collect()
                })
                .collect();
            for v in values.iter().flatten() {
                match v {
                    Some(v) => flat.push(*v),
                    None => n_deg += 1,
                }
            }
            let meta = GridMeta {
                nu: 5.0,
                runs: 1,
                base_seed: 0,
                mode: CorruptionMode::Scalar,
                sample_ids: vec![format!("g{g}")],
                token_labels: vec![],
            };
            grids.push(GammaGrid::from_cells(Component::Encoder, values, meta).map_err(|e| e.to_string())?);
        }
        let n_cells = flat.len() + n_deg;
        match gamma_of_nu(&grids) {
            Ok(p) => {
                ensure(!flat.is_empty(), || format!("case {case}: expected all-degenerate error"))?;
                let want = flat.iter().sum::<f64>() / flat.len() as f64;
                worst = worst.max((p.gamma_avg - want).abs());
                ensure(p.n_cells == n_cells && p.n_degenerate == n_deg, || {
                    format!("case {case}: counts {}/{} vs {n_cells}/{n_deg}", p.n_cells, p.n_degenerate)
                })?;
            }
            Err(patchtrace::Error::Degenerate(_)) => {
                ensure(flat.is_empty(), || format!("case {case}: spurious degenerate error"))?
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("200 random grid sets, max deviation {worst:e}, degenerate counts exact"))
}

/// The rigged fixture is model seed 4000 with a 4-layer encoder. Only its
/// final encoder layer reads the image, so every earlier encoder state is
/// identical in clean and corrupted runs and its Γ is exactly 0. The peak then
/// sits in the final layer whenever some final-layer cell has Γ > 0, which
/// holds for most but not all random weight draws; the population count is
/// reported, not asserted.
fn rigged_final_layer() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig { enc_layers: 4, ..tiny_config() };
    let last = cfg.enc_layers - 1;
    let mut fixture_peak = None;
    let mut peaks_last = 0;
    let population = 30;
    for seed in 0..population {
        let mut model = VlModel::random(cfg.clone(), 4000 + seed).map_err(|e| e.to_string())?;
        isolate_image_to_final_encoder_layer(&mut model);
        let sample = sample_for(&model, &format!("rig{seed}"), seed).map_err(|e| e.to_string())?;
        let out = trace_grid(&model, &sample, &TraceSettings::new(5.0, 10, 0, CorruptionMode::Scalar))
            .map_err(|e| e.to_string())?;
        let grid = out.encoder.unwrap();
        for l in 0..last {
            ensure(grid.values[l].iter().all(|v| *v == Some(0.0)), || {
                format!("model {seed}: layer {l} has non-zero Γ {:?}", grid.values[l])
            })?;
        }
        let peak = grid.argmax().ok_or_else(|| format!("model {seed}: every cell degenerate"))?;
        if peak.0 == last {
            peaks_last += 1;
        }
        if seed == 0 {
            fixture_peak = Some(peak);
        }
    }
    let (l, t, v) = fixture_peak.unwrap();
    ensure(l == last, || format!("rigged fixture: max Γ {v} at layer {l}, token {t}"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "fixture max Γ {v:.3} at layer {l}, token {t}; layers 0-{} exactly 0 on all {population} draws; \
         {peaks_last}/{population} draws peak in layer {last}; {:.2}s",
        last - 1,
        elapsed.as_secs_f64()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gamma endpoint identities", endpoint_identities),
        ("zero-noise identity and degeneracy", zero_noise_identity),
        ("full image restoration", full_restoration),
        ("last-layer total override", last_layer_override),
        ("oracle grid equivalence", oracle_grid_equivalence),
        ("hook transparency and decoder causality", hooks_transparent_and_causal),
        ("trace determinism and seed sensitivity", cli_determinism),
        ("per-element corruption statistics", corruption_statistics),
        ("noise-level aggregation oracle", aggregation_oracle),
        ("rigged fixture peaks in final encoder layer", rigged_final_layer),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS [{:02}] {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{:02}] {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
