//! `dynammo`: run experiments, count FLOPs, plot and re-evaluate run directories.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use dynammo::metrics::{builtin_architecture, dynamic_inference_cost, flops_of, read_architecture, write_json, AccuracyRecord};
use dynammo::pipeline::{evaluate_run_dir, run_experiment, ExperimentConfig, FlopsSummary, METRICS_FILE};

/// Default output root when `--out` is omitted.
const OUT_ENV: &str = "DYNAMMO_OUT";

#[derive(Parser)]
#[command(name = "dynammo", version, about = "Class-incremental learning with merged adapters")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configured experiment.
    Run(RunArgs),
    /// Static FLOPs analysis of an architecture spec.
    Flops(FlopsArgs),
    /// Render accuracy curves and confusion heatmaps as SVG.
    Plot(PlotArgs),
    /// Reload the latest checkpoint of a run and re-evaluate it.
    Eval(EvalArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to `$DYNAMMO_OUT/<config>-seed<N>` (or `runs/`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct FlopsArgs {
    /// Architecture file (one layer per line).
    #[arg(long, conflicts_with = "builtin", required_unless_present = "builtin")]
    arch: Option<PathBuf>,
    /// Shipped architecture: resnet18 or resnet18-adapters.
    #[arg(long)]
    builtin: Option<String>,
    /// Overrides the architecture's input height and width, e.g. 224x224.
    #[arg(long, value_parser = parse_hw)]
    input_size: Option<(usize, usize)>,
    /// Also report the multi-pass cost of N task-specific forward passes.
    #[arg(long)]
    tasks: Option<u64>,
    /// Report file; defaults to `$DYNAMMO_OUT/flops_report.json` (or the working directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Run directory; repeat to compare several runs in one figure.
    #[arg(long = "report", required = true)]
    reports: Vec<PathBuf>,
    /// SVG file for the accuracy curves; heatmaps go next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `dynammo run`.
    #[arg(long)]
    run: PathBuf,
}

/// Failure with its exit code: 1 runtime, 2 usage or validation.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

type CmdResult = Result<(), Failure>;

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    let (h, w) = (p(h)?, p(w)?);
    if h == 0 || w == 0 {
        return Err("input size must be positive".into());
    }
    Ok((h, w))
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn prepare_out(out: &Path, overwrite: bool) -> CmdResult {
    if out.exists() {
        if !overwrite {
            return Err(usage(anyhow!(
                "{} already exists; pass --overwrite to replace it",
                out.display()
            )));
        }
        if out.is_dir() {
            fs::remove_dir_all(out).with_context(|| format!("removing {}", out.display()))?;
        } else {
            return Err(usage(anyhow!("{} exists and is not a directory", out.display())));
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(())
}

fn cmd_run(a: RunArgs) -> CmdResult {
    if !a.config.is_file() {
        return Err(usage(anyhow!("config file {} not found", a.config.display())));
    }
    let mut cfg = ExperimentConfig::read(&a.config).map_err(|e| usage(e.into()))?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let out = a.out.unwrap_or_else(|| {
        let stem = a.config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out_root().join(format!("{stem}-seed{}", cfg.seed))
    });
    prepare_out(&out, a.overwrite)?;
    let report = run_experiment(&cfg, Some(&out)).context("experiment failed")?;
    for t in &report.tasks {
        println!("task {}: A = {:.2}  avg = {:.2}", t.task_id, t.accuracy, t.average_so_far);
    }
    if let Some(err) = &report.error {
        return Err(anyhow!("run stopped early: {err} (partial results in {})", out.display()).into());
    }
    if let Some(avg) = report.average_accuracy {
        println!("average accuracy {avg:.2}, last accuracy {:.2}", report.last_accuracy.unwrap_or(0.0));
    }
    println!("run directory: {}", out.display());
    Ok(())
}

fn cmd_flops(a: FlopsArgs) -> CmdResult {
    let mut arch = match (&a.arch, &a.builtin) {
        (Some(path), _) => read_architecture(path).map_err(|e| usage(e.into()))?,
        (None, Some(name)) => builtin_architecture(name)
            .ok_or_else(|| usage(anyhow!("unknown builtin architecture `{name}` (expected resnet18 or resnet18-adapters)")))?,
        (None, None) => unreachable!("clap requires one of --arch/--builtin"),
    };
    if let Some((h, w)) = a.input_size {
        arch.input[1] = h;
        arch.input[2] = w;
    }
    let report = flops_of(&arch).map_err(|e| usage(e.into()))?;
    println!("{:>4}  {:<32} {:<8} {:>16} {:>14} {:>12}", "#", "layer", "kind", "output", "MACs", "params");
    for l in &report.layers {
        let shape = format!("{}x{}x{}", l.output[0], l.output[1], l.output[2]);
        println!(
            "{:>4}  {:<32} {:<8} {:>16} {:>14} {:>12}",
            l.index, l.name, l.kind, shape, l.macs, l.params
        );
    }
    println!("total: {} FLOPs (MACs) = {:.4} GFLOPs, {} params", report.total_flops(), report.gflops(), report.total_params);
    let path = a.out.unwrap_or_else(|| match std::env::var_os(OUT_ENV) {
        Some(root) => PathBuf::from(root).join("flops_report.json"),
        None => PathBuf::from("flops_report.json"),
    });
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    match a.tasks {
        Some(n) => {
            let cost = dynamic_inference_cost(&report, n).map_err(|e| usage(e.into()))?;
            println!(
                "tasks {n}: merged single pass {} FLOPs; multi-pass {} FLOPs ({:.4} GFLOPs)",
                cost.merged,
                cost.multi_pass,
                cost.multi_pass as f64 / 1e9
            );
            let summary = FlopsSummary { report, inference: cost };
            write_json(&path, &summary).context("writing report")?;
        }
        None => write_json(&path, &report).context("writing report")?,
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> CmdResult {
    let mut runs = Vec::with_capacity(a.reports.len());
    for dir in &a.reports {
        runs.push(plot::RunData::load(dir).map_err(usage)?);
    }
    let written = plot::render(&runs, &a.out)?;
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    if !a.run.join("config.txt").is_file() {
        return Err(usage(anyhow!("{} is not a run directory (no config.txt)", a.run.display())));
    }
    let (t, acc) = evaluate_run_dir(&a.run).context("evaluation failed")?;
    println!("task {t}: accuracy {acc:.4}");
    let metrics = a.run.join(METRICS_FILE);
    if metrics.is_file() {
        let rows = AccuracyRecord::read_csv(&metrics).context("reading metrics")?;
        if let Some(&(_, recorded, _)) = rows.iter().find(|r| r.0 == t) {
            let status = if (recorded - acc).abs() < 1e-9 { "matches" } else { "DIFFERS from" };
            println!("{status} recorded A_{t} = {recorded:.4}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Flops(a) => cmd_flops(a),
        Command::Plot(a) => cmd_plot(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
