#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use patchtrace::fixtures::{random_image, random_question, tiny_config};
use patchtrace::harness::{write_dataset, Category, Dataset, VqaSample};
use patchtrace::model::container::DType;
use patchtrace::model::manifest::save_model;
use patchtrace::rng::derive_seed;
use patchtrace::hooks::{OverrideTap, RecordingTap};
use patchtrace::trace::corrupt_image;
use patchtrace::{Component, CorruptionSpec, StateAddress, TraceSample, TraceSettings, VlModel};

/// `n` samples for `model`; question lengths cycle 3, 2, 1 and categories
/// cycle color, object, number, location. Answers are the greedy prediction.
pub fn dataset_for(model: &VlModel, n: usize, seed: u64) -> Dataset {
    let cfg = model.config();
    let mut ds = Dataset::default();
    for i in 0..n {
        let len = cfg.max_question_len - i % cfg.max_question_len;
        let q = random_question(cfg, len, derive_seed(seed, "q", i as u64)).unwrap();
        let img = random_image(cfg, derive_seed(seed, "img", i as u64)).unwrap();
        let answer_id = model.greedy_answer(&q, &img).unwrap();
        let image_ref = format!("img/{i}");
        ds.embeddings.insert(image_ref.clone(), img.into_tensor());
        ds.samples.push(VqaSample {
            sample_id: format!("s{i:03}"),
            image_ref,
            question: q.ids().to_vec(),
            question_text: String::new(),
            answer_id,
            answer_text: String::new(),
            category: Category::ALL[i % 4],
        });
    }
    ds
}

/// Tiny model and `n`-sample dataset written under `dir`.
pub fn write_bundle(dir: &Path, n: usize, seed: u64) -> (PathBuf, PathBuf, VlModel, Dataset) {
    let model = VlModel::random(tiny_config(), seed).unwrap();
    let manifest = save_model(&model, dir, "model", DType::F64).unwrap();
    let ds = dataset_for(&model, n, seed);
    let path = dir.join("data.jsonl");
    write_dataset(&path, &ds).unwrap();
    (manifest, path, model, ds)
}

/// Relative path → bytes for every file under `root`.
pub fn tree(root: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Per-cell trace script: direct corrupt → record → override → forward calls.
/// Returns `grid[l][t]`: = mean over non-degenerate runs of Γ, or `None`.
pub fn oracle_grid(
    model: &VlModel,
    sample: &TraceSample,
    settings: &TraceSettings,
    component: Component,
) -> Vec<Vec<Option<f64>>> {
    let cfg = model.config();
    let mut clean_tap = RecordingTap::default();
    let clean = model.forward(&sample.tokens, &sample.image, Some(&mut clean_tap)).unwrap();
    let p_clean = clean.probs()[sample.answer_id as usize];
    let (layers, tokens) = match component {
        Component::Encoder => (cfg.enc_layers, sample.tokens.len()),
        _ => (cfg.dec_layers, cfg.decoder_prompt.len()),
    };
    let mut sums = vec![vec![(0.0, 0usize); tokens]; layers];
    for run in 0..settings.runs {
        let spec = CorruptionSpec {
            nu: settings.nu,
            seed: derive_seed(settings.base_seed, &sample.sample_id, run as u64),
            mode: settings.mode,
        };
        let corrupted = corrupt_image(&sample.image, &spec).unwrap();
        let p_corrupt = model.forward(&sample.tokens, &corrupted, None).unwrap().probs()[sample.answer_id as usize];
        for l in 0..layers {
            for t in 0..tokens {
                let addr = match component {
                    Component::Encoder => StateAddress::Encoder { layer: l, token: t },
                    _ => StateAddress::Decoder { layer: l, token: t },
                };
                let replacements = BTreeMap::from([(addr, clean_tap.states[&addr].clone())]);
                let mut tap = OverrideTap { replacements: &replacements };
                let p_patched = model.forward(&sample.tokens, &corrupted, Some(&mut tap)).unwrap().probs()
                    [sample.answer_id as usize];
                let denom = p_clean - p_corrupt;
                if denom.abs() >= 1e-9 {
                    sums[l][t].0 += (p_patched - p_corrupt) / denom;
                    sums[l][t].1 += 1;
                }
            }
        }
    }
    sums.into_iter()
        .map(|row| row.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect())
        .collect()
}

