//! `patchtrace` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 model or dataset load failure,
//! 3 runtime failure. Diagnostics go to stderr.
//!
//! `PATCHTRACE_THREADS`, when set, caps the worker threads used by sweeps.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::fixtures::write_demo;
use crate::harness::dataset::{load_dataset, split_by_category, Category, Dataset};
use crate::harness::sweep::{self, run_trace_sweep, SweepConfig, SweepResult, DEFAULT_NU, DEFAULT_RUNS, DEFAULT_SAMPLES};
use crate::harness::evaluate_split;
use crate::hooks::Component;
use crate::io::write_atomic;
use crate::metrics::GammaGrid;
use crate::model::manifest::load_model;
use crate::model::VlModel;
use crate::report::curve::render_curve_svg;
use crate::report::heatmap::{render_ppm, render_svg, HeatmapRender};
use crate::trace::CorruptionMode;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_LOAD: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const THREADS_ENV: &str = "PATCHTRACE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "patchtrace", version, about = "Causal tracing for vision-language transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Trace encoder/decoder grids at one noise level and render heatmaps.
    Trace(TraceArgs),
    /// Trace at several noise levels and write the Γ-versus-ν curve.
    NoiseSweep(SweepArgs),
    /// Greedy-answer accuracy per question category.
    Eval(EvalArgs),
    /// Write a random demo model and dataset.
    InitDemo(DemoArgs),
    /// Render a saved grid JSON as a heatmap.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
struct Inputs {
    /// Model manifest (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Dataset JSONL; embeddings are read from the sibling .vltc file.
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Debug, Args)]
struct TraceCommon {
    #[command(flatten)]
    inputs: Inputs,
    /// Corruption runs per sample.
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    runs: usize,
    /// Number of samples, taken from the start of the dataset.
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Scalar)]
    mode: ModeArg,
    /// Base seed for corruption noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Stacks to trace.
    #[arg(long, value_delimiter = ',', default_value = "encoder,decoder")]
    components: Vec<ComponentArg>,
    /// Free-form label recorded in index.json.
    #[arg(long)]
    stamp: Option<String>,
}

#[derive(Debug, Args)]
struct TraceArgs {
    #[command(flatten)]
    common: TraceCommon,
    /// Noise standard deviation.
    #[arg(long, default_value_t = DEFAULT_NU)]
    nu: f64,
    #[command(flatten)]
    render: RenderOpts,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: TraceCommon,
    /// Comma-separated noise levels.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1,2,5,10,20,30")]
    nu_grid: Vec<f64>,
    /// Also write curve.<component>.svg.
    #[arg(long)]
    plot: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Only evaluate this category.
    #[arg(long)]
    category: Option<Category>,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct RenderOpts {
    /// Γ mapped to white.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    scale_min: f64,
    /// Γ mapped to the darkest colour.
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    scale_max: f64,
    /// Pixels per cell.
    #[arg(long, default_value_t = 16)]
    cell_px: usize,
}

#[derive(Debug, Args)]
struct RenderArgs {
    /// Grid JSON as written by `trace`.
    #[arg(long)]
    grid: PathBuf,
    /// Output file; `.ppm` or `.svg`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    render: RenderOpts,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Scalar,
    PerElement,
}

impl From<ModeArg> for CorruptionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Scalar => CorruptionMode::Scalar,
            ModeArg::PerElement => CorruptionMode::PerElement,
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum ComponentArg {
    Encoder,
    Decoder,
}

impl From<ComponentArg> for Component {
    fn from(c: ComponentArg) -> Self {
        match c {
            ComponentArg::Encoder => Component::Encoder,
            ComponentArg::Decoder => Component::Decoder,
        }
    }
}

/// Failure with its exit code.
struct Failure {
    code: i32,
    error: Error,
}

fn usage(e: Error) -> Failure {
    Failure { code: EXIT_USAGE, error: e }
}

fn load(e: Error) -> Failure {
    Failure { code: EXIT_LOAD, error: e }
}

fn runtime(e: Error) -> Failure {
    Failure { code: EXIT_RUNTIME, error: e }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run(args: Vec<OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Trace(a) => cmd_trace(a),
        Command::NoiseSweep(a) => cmd_noise_sweep(a),
        Command::Eval(a) => cmd_eval(a),
        Command::InitDemo(a) => cmd_init_demo(a),
        Command::Render(a) => cmd_render(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.error);
            f.code
        }
    }
}

fn threads_from_env() -> std::result::Result<Option<usize>, Failure> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(usage(Error::Parameter(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            )))),
        },
    }
}

fn load_inputs(inputs: &Inputs) -> std::result::Result<(VlModel, Dataset), Failure> {
    let model = load_model(&inputs.model).map_err(load)?;
    let dataset = load_dataset(&inputs.dataset, model.config()).map_err(load)?;
    Ok((model, dataset))
}

fn sweep_config(common: &TraceCommon, nu_values: Vec<f64>) -> std::result::Result<SweepConfig, Failure> {
    let cfg = SweepConfig {
        nu_values,
        samples: common.samples,
        runs_per_sample: common.runs,
        components: common.components.iter().map(|&c| c.into()).collect(),
        mode: common.mode.into(),
        base_seed: common.seed,
        out_dir: common.out.clone(),
        threads: threads_from_env()?,
        stamp: common.stamp.clone(),
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn heatmap_render(opts: &RenderOpts) -> std::result::Result<HeatmapRender, Failure> {
    HeatmapRender::new(opts.scale_min, opts.scale_max, opts.cell_px).map_err(usage)
}

fn write_heatmaps(out_dir: &Path, grid: &GammaGrid, render: &HeatmapRender) -> Result<Vec<PathBuf>> {
    let stem = format!("{}.{}", sweep::nu_key(grid.meta.nu), grid.component);
    let ppm = out_dir.join("heatmaps").join(format!("{stem}.ppm"));
    let svg = out_dir.join("heatmaps").join(format!("{stem}.svg"));
    write_atomic(&ppm, &render_ppm(grid, render)?)?;
    write_atomic(&svg, render_svg(grid, render)?.as_bytes())?;
    Ok(vec![ppm, svg])
}

fn report_degenerate(result: &SweepResult) {
    for d in &result.index.degenerate {
        eprintln!(
            "warning: {} grid of {} at nu={} is entirely degenerate",
            d.component, d.sample_id, d.nu
        );
    }
}

fn cmd_trace(a: TraceArgs) -> CmdResult {
    let cfg = sweep_config(&a.common, vec![a.nu])?;
    let render = heatmap_render(&a.render)?;
    let (model, dataset) = load_inputs(&a.common.inputs)?;
    let result = run_trace_sweep(&model, &cfg, &dataset).map_err(runtime)?;
    report_degenerate(&result);
    let mut stdout = std::io::stdout().lock();
    for grid in &result.mean_grids {
        write_heatmaps(&cfg.out_dir, grid, &render).map_err(runtime)?;
        match grid.argmax() {
            Some((l, t, v)) => {
                let _ = writeln!(
                    stdout,
                    "{}: max mean Γ {v:.4} at layer {l}, token {t} ({} samples, nu={})",
                    grid.component,
                    grid.meta.sample_ids.len(),
                    grid.meta.nu
                );
            }
            None => {
                let _ = writeln!(stdout, "{}: every cell degenerate", grid.component);
            }
        }
    }
    let _ = writeln!(stdout, "wrote {}", cfg.out_dir.display());
    Ok(())
}

fn cmd_noise_sweep(a: SweepArgs) -> CmdResult {
    let cfg = sweep_config(&a.common, a.nu_grid.clone())?;
    let (model, dataset) = load_inputs(&a.common.inputs)?;
    let result = run_trace_sweep(&model, &cfg, &dataset).map_err(runtime)?;
    report_degenerate(&result);
    if a.plot {
        for &c in &cfg.components {
            let path = cfg.out_dir.join(format!("curve.{c}.svg"));
            write_atomic(&path, render_curve_svg(&result.curve, c).as_bytes()).map_err(runtime)?;
        }
    }
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{:>8}  {:<8}  {:>10}  {:>8}  {:>8}", "nu", "stack", "gamma_avg", "cells", "degen");
    for r in &result.curve {
        let g = r.gamma_avg.map_or_else(|| "-".to_string(), |g| format!("{g:.6}"));
        let _ = writeln!(
            stdout,
            "{:>8}  {:<8}  {:>10}  {:>8}  {:>8}",
            r.nu, r.component, g, r.n_cells, r.n_degenerate
        );
    }
    let _ = writeln!(stdout, "wrote {}", cfg.out_dir.join(sweep::CURVE_FILE).display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let (model, dataset) = load_inputs(&a.inputs)?;
    let buckets = split_by_category(&dataset.samples);
    let wanted: Vec<Category> = match a.category {
        Some(c) => vec![c],
        None => Category::ALL.to_vec(),
    };
    let mut rows = Vec::new();
    for c in wanted {
        let samples = &buckets[&c];
        if samples.is_empty() {
            if a.category.is_some() {
                return Err(runtime(Error::Parameter(format!("no samples in category {c}"))));
            }
            continue;
        }
        let acc = evaluate_split(&model, &dataset, samples).map_err(runtime)?;
        rows.push((c, samples.len(), acc));
    }
    if rows.is_empty() {
        return Err(runtime(Error::Parameter("dataset has no samples to evaluate".into())));
    }
    let mut stdout = std::io::stdout().lock();
    if a.json {
        let obj: serde_json::Map<String, serde_json::Value> = rows
            .iter()
            .map(|(c, n, acc)| (c.to_string(), serde_json::json!({ "n": n, "accuracy": acc })))
            .collect();
        let _ = writeln!(stdout, "{}", serde_json::Value::Object(obj));
    } else {
        let _ = writeln!(stdout, "{:<10} {:>6} {:>9}", "category", "n", "accuracy");
        for (c, n, acc) in &rows {
            let _ = writeln!(stdout, "{:<10} {:>6} {:>8.2}%", c.as_str(), n, acc * 100.0);
        }
    }
    Ok(())
}

fn cmd_init_demo(a: DemoArgs) -> CmdResult {
    if a.samples == 0 {
        return Err(usage(Error::Parameter("--samples must be >= 1".into())));
    }
    let bundle = write_demo(&a.out, a.samples, a.seed).map_err(runtime)?;
    println!("model:   {}", bundle.manifest.display());
    println!("dataset: {}", bundle.dataset.display());
    Ok(())
}

fn cmd_render(a: RenderArgs) -> CmdResult {
    let render = heatmap_render(&a.render)?;
    let grid: GammaGrid = sweep::read_json(&a.grid).map_err(load)?;
    let bytes = match a.out.extension().and_then(|e| e.to_str()) {
        Some("ppm") => render_ppm(&grid, &render).map_err(runtime)?,
        Some("svg") => render_svg(&grid, &render).map_err(runtime)?.into_bytes(),
        _ => return Err(usage(Error::Parameter("--out must end in .ppm or .svg".into()))),
    };
    write_atomic(&a.out, &bytes).map_err(runtime)?;
    Ok(())
}
