//! Command-line interface: `train`, `sweep`, `verify`, and `report`.
//!
//! Exit codes are a stable contract: 0 success, 1 verification or other
//! runtime failure, 2 configuration error, 3 numeric abort. Every run
//! writes only under its output directory, echoes its fully-resolved
//! config there, and produces byte-identical metrics for identical
//! config and seed.

pub mod cfgfile;
pub mod report;
pub mod verify;

use crate::error::{Error, Result};
use crate::metrics::{read_metrics_csv, token_weight_trace, write_metrics_csv,
    write_token_trace_csv, MetricsRecord};
use crate::trainer::{load_checkpoint, run_with_observer, save_checkpoint, Checkpoint};
use cfgfile::RunSpec;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use report::{ManifestCell, RunSummary, SweepCell, SweepManifest};
use std::path::{Path, PathBuf};
use verify::VerifyLevel;

#[derive(Parser)]
#[command(
    name = "rapid",
    version,
    about = "Off-policy policy-gradient training on enumerable synthetic tasks",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy; writes metrics, checkpoints, and a summary.
    Train(TrainArgs),
    /// Run a batch-size-ratio cross product and aggregate the cells.
    Sweep(SweepArgs),
    /// Check the estimators against exact oracles.
    Verify(VerifyArgs),
    /// Regenerate summaries from a run or sweep directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file: `key = value` lines under [task]/[policy]/[train]/
    /// [cost]/[output] sections.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set train.eta=1.5` or `--set H=4`.
    /// Repeatable; later overrides win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory; relative paths are joined under RAPID_OUT_ROOT
    /// when that variable is set.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker threads for sampling (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    /// Base config file; each cell inherits it.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one base-config key. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Batch-size ratios to sweep, e.g. `--h 2,4,8,16`. Needs at least
    /// two values. Each cell keeps n_step and the total gradient-step
    /// budget of the base config, so H only redistributes the budget.
    #[arg(long = "h", value_name = "LIST", value_delimiter = ',', required = true)]
    h: Vec<usize>,

    /// Seeds per ratio, numbered base-seed, base-seed+1, and so on.
    #[arg(long, default_value_t = 3)]
    seeds: u64,

    /// Base seed (defaults to the config's seed).
    #[arg(long)]
    seed: Option<u64>,

    /// Sweep root directory; cells land in h{H}_seed{S} below it.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Parallel cells (default: all cores). Cells are independent and
    /// individually deterministic.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    /// `quick` for the core checks, `full` to add bias-direction and
    /// clipping-bias monotonicity checks.
    #[arg(long, default_value = "quick")]
    level: String,

    /// Directory for verify_failure.json when checks fail.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// A run directory (resolved.cfg) or sweep root (sweep_manifest.json).
    dir: PathBuf,
}

/// Parses the process arguments and runs the selected command, returning
/// the process exit code.
pub fn run_cli() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = err.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Verify(args) => cmd_verify(&args),
        Command::Report(args) => cmd_report(&args),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

/// Bounds the global worker pool when `--jobs` is given. Results never
/// depend on the thread count; this only bounds resource use.
fn configure_jobs(jobs: Option<usize>) -> Result<()> {
    let Some(jobs) = jobs else { return Ok(()) };
    if jobs == 0 {
        return Err(Error::config("--jobs must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| Error::config(format!("cannot configure {jobs} worker threads: {e}")))
}

/// Joins a relative path under RAPID_OUT_ROOT, mirroring config
/// resolution for paths that come straight from flags.
fn out_rooted(dir: PathBuf) -> PathBuf {
    match std::env::var_os(cfgfile::OUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir,
    }
}

/// Runs one resolved spec to completion and writes its artifacts:
/// resolved.cfg, metrics.csv, checkpoints, summary.json, and on numeric
/// abort the offending mini-batch. Shared by `train` and sweep cells.
fn execute_run(spec: &RunSpec) -> Result<RunSummary> {
    let task = spec.build_task()?;
    let initial = spec.build_policy(&task);
    // Fail config problems before the output directory exists, so a bad
    // invocation leaves nothing behind.
    spec.train.validate()?;
    let dir = &spec.output.dir;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("resolved.cfg"), cfgfile::render_resolved(spec))?;

    let outcome = run_with_observer(&spec.train, &task, &initial, |event| {
        let step = event.record.global_step;
        let checkpoints = spec.output.checkpoint_cadence as u64;
        if checkpoints > 0 && step % checkpoints == 0 {
            let snapshot = Checkpoint::from_policy(event.policy, &spec.task_name, step);
            save_checkpoint(&dir.join(format!("checkpoint_step{step}.bin")), &snapshot)?;
        }
        let traces = spec.output.token_trace_cadence as u64;
        if traces > 0 && step % traces == 0 {
            if let Some(sample) = event.minibatch.first().and_then(|g| g.samples().first()) {
                let trace = token_weight_trace(sample, event.policy)?;
                write_token_trace_csv(&dir.join(format!("token_trace_step{step}.csv")), &trace)?;
            }
        }
        Ok(())
    });
    let output = match outcome {
        Ok(output) => output,
        Err(Error::NonFiniteGradient { outer, inner, dump }) => {
            let path = dir.join("numeric_abort.json");
            std::fs::write(&path, &dump)?;
            eprintln!("numeric abort: offending mini-batch dumped to {}", path.display());
            return Err(Error::NonFiniteGradient { outer, inner, dump });
        }
        Err(err) => return Err(err),
    };

    let cadence = spec.output.metric_cadence as u64;
    let mut records: Vec<MetricsRecord> = output
        .metrics
        .iter()
        .filter(|r| r.global_step % cadence == 0)
        .cloned()
        .collect();
    // The final row always stays so summaries see the end state.
    let last = output.metrics.last().expect("a validated run records at least one step");
    if records.last().map(|r| r.global_step) != Some(last.global_step) {
        records.push(last.clone());
    }
    write_metrics_csv(&dir.join("metrics.csv"), &records)?;

    let checkpoint =
        Checkpoint::from_policy(&output.policy, &spec.task_name, output.counters.gradient_steps);
    save_checkpoint(&dir.join("checkpoint_final.bin"), &checkpoint)?;

    let summary = report::summarize_run(spec, &records, &checkpoint)?;
    report::write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    configure_jobs(args.jobs)?;
    let spec =
        cfgfile::load(args.config.as_deref(), &args.sets, args.seed, args.out.as_deref())?;
    let summary = execute_run(&spec)?;
    let oracle = summary
        .final_oracle_j
        .map(|j| format!(", exact objective {j:.4}"))
        .unwrap_or_default();
    println!(
        "run complete: task {}, algorithm {}, {} gradient steps",
        summary.task, summary.algorithm, summary.gradient_steps
    );
    println!("final mean reward {:.4}{oracle}", summary.final_mean_reward);
    println!("outputs in {}", spec.output.dir.display());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    configure_jobs(args.jobs)?;
    let mut h_values = args.h.clone();
    h_values.sort_unstable();
    h_values.dedup();
    if h_values.len() < 2 {
        return Err(Error::config(format!(
            "sweep needs at least two distinct batch-size ratios, got {:?}",
            args.h
        )));
    }
    if args.seeds == 0 {
        return Err(Error::config("--seeds must be at least 1"));
    }
    let base = cfgfile::load(args.config.as_deref(), &args.sets, args.seed, None)?;
    let budget = base.train.total_steps();
    for &h in &h_values {
        if h == 0 {
            return Err(Error::config("batch-size ratio 0 is not valid"));
        }
        if budget % h != 0 {
            return Err(Error::config(format!(
                "gradient-step budget {budget} from the base config is not divisible \
                 by H={h}; adjust outer_steps so every cell gets a whole number of \
                 inference phases"
            )));
        }
    }
    let seeds: Vec<u64> = (0..args.seeds).map(|s| base.train.seed + s).collect();
    let root = out_rooted(args.out.clone().unwrap_or_else(|| {
        PathBuf::from(format!("sweeps/{}_{}", base.task_name, base.train.algorithm.as_str()))
    }));

    // Build and validate every cell before any filesystem writes.
    let mut plans: Vec<(usize, u64, String, RunSpec)> = Vec::new();
    for &h in &h_values {
        for &seed in &seeds {
            let name = format!("h{h}_seed{seed}");
            let mut spec = base.clone();
            spec.train.n_inference = h * spec.train.n_step;
            spec.train.outer_steps = budget / h;
            spec.train.seed = seed;
            spec.output.dir = root.join(&name);
            spec.train
                .validate()
                .map_err(|e| Error::config(format!("cell {name}: {e}")))?;
            plans.push((h, seed, name, spec));
        }
    }

    std::fs::create_dir_all(&root)?;
    std::fs::write(root.join("base_resolved.cfg"), cfgfile::render_resolved(&base))?;

    let outcomes: Vec<(usize, u64, String, Result<RunSummary>)> = plans
        .par_iter()
        .map(|(h, seed, name, spec)| (*h, *seed, name.clone(), execute_run(spec)))
        .collect();

    let mut cells = Vec::new();
    let mut manifest_cells = Vec::new();
    for (h, seed, name, outcome) in outcomes {
        match outcome {
            Ok(summary) => {
                println!(
                    "cell {name}: final mean reward {:.4}, mean drift {:.4}",
                    summary.final_mean_reward, summary.mean_staleness
                );
                manifest_cells.push(ManifestCell {
                    h,
                    seed,
                    dir: name.clone(),
                    status: "ok".to_string(),
                });
                cells.push(report::cell_from_summary(h, seed, name, &summary));
            }
            Err(err) => {
                let status = format!("failed: {err}");
                eprintln!("cell {name}: {status}");
                manifest_cells.push(ManifestCell {
                    h,
                    seed,
                    dir: name.clone(),
                    status: status.clone(),
                });
                cells.push(SweepCell {
                    h,
                    seed,
                    dir: name,
                    status,
                    final_mean_reward: None,
                    final_oracle_j: None,
                    mean_staleness: None,
                    mean_clip_fraction: None,
                    total_sim_cost: None,
                });
            }
        }
    }

    let manifest = SweepManifest {
        h_values: h_values.clone(),
        seeds: seeds.clone(),
        gradient_step_budget: budget,
        cells: manifest_cells,
    };
    report::write_json(&root.join("sweep_manifest.json"), &manifest)?;
    let summary = report::summarize_sweep(&base, budget, &h_values, &seeds, cells);
    report::write_json(&root.join("sweep_summary.json"), &summary)?;

    let completed = summary.cells.iter().filter(|c| c.status == "ok").count();
    println!(
        "sweep complete: {completed} of {} cells in {}",
        summary.cells.len(),
        root.display()
    );
    let print_r = |label: &str, r: Option<f64>| match r {
        Some(r) => println!("r(H, {label}) = {r:.4}"),
        None => println!("r(H, {label}) undefined"),
    };
    print_r("staleness", summary.r_h_staleness);
    print_r("final reward", summary.r_h_final_reward);
    print_r("simulated cost", summary.r_h_sim_cost);
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<()> {
    let level: VerifyLevel = args.level.parse()?;
    let results = verify::run_checks(level);
    for result in &results {
        println!("{}", verify::format_line(result));
    }
    let failed: Vec<&verify::CheckResult> = results.iter().filter(|r| !r.pass).collect();
    if failed.is_empty() {
        println!("verify: all {} checks passed", results.len());
        return Ok(());
    }
    let mut payload = serde_json::to_string_pretty(&failed)?;
    payload.push('\n');
    if let Some(out) = &args.out {
        let out = out_rooted(out.clone());
        std::fs::create_dir_all(&out)?;
        let path = out.join("verify_failure.json");
        std::fs::write(&path, payload)?;
        eprintln!("failing checks serialized to {}", path.display());
    } else {
        print!("{payload}");
    }
    Err(Error::VerifyFailed(format!(
        "{} of {} checks failed",
        failed.len(),
        results.len()
    )))
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    if args.dir.join("sweep_manifest.json").is_file() {
        return report_sweep(&args.dir);
    }
    let summary = regenerate_run_summary(&args.dir)?;
    println!("regenerated {}", args.dir.join("summary.json").display());
    println!(
        "final mean reward {:.4} after {} gradient steps",
        summary.final_mean_reward, summary.gradient_steps
    );
    Ok(())
}

/// Rebuilds summary.json for one run directory from resolved.cfg,
/// metrics.csv, and checkpoint_final.bin alone.
fn regenerate_run_summary(dir: &Path) -> Result<RunSummary> {
    let spec = cfgfile::spec_from_run_dir(dir)?;
    let records = read_metrics_csv(&dir.join("metrics.csv"))?;
    let checkpoint = load_checkpoint(&dir.join("checkpoint_final.bin"))?;
    let summary = report::summarize_run(&spec, &records, &checkpoint)?;
    report::write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn report_sweep(root: &Path) -> Result<()> {
    let manifest: SweepManifest =
        serde_json::from_str(&std::fs::read_to_string(root.join("sweep_manifest.json"))?)?;
    let mut entries = Vec::new();
    cfgfile::parse_file(&root.join("base_resolved.cfg"), &mut entries)?;
    let base = cfgfile::resolve(&entries, None, None)?;

    let mut cells = Vec::new();
    for cell in &manifest.cells {
        if cell.status != "ok" {
            cells.push(SweepCell {
                h: cell.h,
                seed: cell.seed,
                dir: cell.dir.clone(),
                status: cell.status.clone(),
                final_mean_reward: None,
                final_oracle_j: None,
                mean_staleness: None,
                mean_clip_fraction: None,
                total_sim_cost: None,
            });
            continue;
        }
        let summary = regenerate_run_summary(&root.join(&cell.dir))?;
        cells.push(report::cell_from_summary(cell.h, cell.seed, cell.dir.clone(), &summary));
    }
    let summary = report::summarize_sweep(
        &base,
        manifest.gradient_step_budget,
        &manifest.h_values,
        &manifest.seeds,
        cells,
    );
    report::write_json(&root.join("sweep_summary.json"), &summary)?;
    println!("regenerated {}", root.join("sweep_summary.json").display());
    Ok(())
}
