//! `mgp`: data collection, two-stage training, evaluation, ablations and
//! analysis exports for the masked generative policy experiments.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 I/O or file
//! format error, 4 training divergence, 1 anything else.

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mgp_core::env::{TaskKind, DRIFT_ONSET};
use mgp_core::harness::{
    self, confidence_analysis, flip_rate_csv, flip_rate_experiment, policy_for, run_episodes, Checkpoint, EpisodePlan,
    ExperimentConfig, RunPaths,
};
use mgp_core::samplers::{MaskSelection, Method};
use mgp_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "mgp",
    version,
    about = "Masked generative policy experiments on toy control tasks"
)]
struct Cli {
    /// Experiment config (TOML, dotted or sectioned keys). Keys left out take
    /// the defaults of the configured task.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(flatten)]
    set: SetArgs,

    /// Task: point_reach, dynamic_target or button_sequence (reach, dynamic, button also accepted).
    #[arg(long, global = true)]
    task: Option<String>,

    /// Base seed; corpus, tokenizer and transformer seeds derive from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory holding the corpus, checkpoints and reports.
    #[arg(long, global = true, value_name = "DIR")]
    output: Option<PathBuf>,

    /// Rollout worker threads. Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Record expert demonstrations into the run directory.
    Collect {
        #[command(flatten)]
        set: SetArgs,
    },
    /// Stage 1: train the action tokenizer on the stored corpus.
    TrainTokenizer {
        #[command(flatten)]
        set: SetArgs,
    },
    /// Stage 2: train the masked transformers on top of the stage-1 tokenizer.
    TrainMgt {
        #[command(flatten)]
        set: SetArgs,
    },
    /// Evaluate sampling variants and write eval.csv and eval_timing.csv.
    Eval {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate variants across values of one sampler or eval key and write ablate.csv.
    Ablate {
        /// `key=v1,v2,...`; a key without a section refers to the sampler.
        #[arg(long, value_name = "KEY=V1,V2,...")]
        sweep: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Export confidence and mask matrices of MGP-Long rollouts and the
    /// bottom/top remasking flip rates.
    Analyze {
        /// Episodes to run (defaults to eval.episodes).
        #[arg(long)]
        episodes: Option<usize>,
        #[command(flatten)]
        set: SetArgs,
    },
    /// Print the sections, configs and parameter counts of a checkpoint as JSON.
    InspectCheckpoint { path: PathBuf },
}

/// Overrides given before and after the subcommand apply in command-line order.
#[derive(Debug, clap::Args)]
struct SetArgs {
    /// Override one config key, e.g. `--set sampler.remask_ratio=0.5`. Repeatable; applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// Variant(s) to evaluate, comma separated: mgp-short, short-hold, mgp-long, full-seq, without-sm, score-reuse, random.
    #[arg(long = "variant", value_delimiter = ',')]
    variants: Vec<String>,
    /// Episodes per variant.
    #[arg(long)]
    episodes: Option<usize>,
    /// Observation dropout probability.
    #[arg(long)]
    dropout: Option<f64>,
    #[command(flatten)]
    set: SetArgs,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Parameter(_) | Error::Compatibility(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Training { .. } => 4,
        _ => 1,
    }
}

fn load_config(cli: &Cli, local: &SetArgs, extra: Vec<String>) -> Result<ExperimentConfig> {
    let mut overrides = cli.set.overrides.clone();
    if let Some(t) = &cli.task {
        let task: TaskKind = t.parse()?;
        overrides.push(format!("task=\"{}\"", task.name()));
    }
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &cli.output {
        overrides.push(format!("output_dir={}", toml_string(&o.to_string_lossy())));
    }
    if let Some(j) = cli.jobs {
        overrides.push(format!("eval.jobs={j}"));
    }
    overrides.extend(local.overrides.iter().cloned());
    overrides.extend(extra);
    match &cli.config {
        Some(path) => ExperimentConfig::load(path, &overrides),
        None => ExperimentConfig::from_toml_str("", &overrides),
    }
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn run_overrides(run: &RunArgs) -> Result<Vec<String>> {
    let mut out = Vec::new();
    if !run.variants.is_empty() {
        let methods = run
            .variants
            .iter()
            .map(|v| v.trim().parse::<Method>().map(|m| toml_string(m.name())))
            .collect::<Result<Vec<_>>>()?;
        out.push(format!("eval.variants=[{}]", methods.join(",")));
    }
    if let Some(e) = run.episodes {
        out.push(format!("eval.episodes={e}"));
    }
    if let Some(p) = run.dropout {
        out.push(format!("eval.dropout={p}"));
    }
    Ok(out)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Collect { set } => {
            let cfg = load_config(cli, set, Vec::new())?;
            log::info!(
                "collecting {} {} demonstrations into {}",
                cfg.corpus.demos,
                cfg.task,
                cfg.output_dir.display()
            );
            let outputs = harness::collect(&cfg)?;
            harness::write_manifest(&cfg, "collect", &outputs)?;
        }
        Command::TrainTokenizer { set } => {
            let cfg = load_config(cli, set, Vec::new())?;
            log::info!("stage 1: tokenizer with |K| = {}", cfg.tokenizer.codebook_size);
            let (_, report, outputs) = harness::run_stage1(&cfg)?;
            log::info!(
                "held-out L1 {:.3e}, replay {}/{}, codebook usage {:.3}",
                report.held_out_l1,
                report.replay_successes,
                report.held_out,
                report.usage_fraction
            );
            harness::write_manifest(&cfg, "train-tokenizer", &outputs)?;
        }
        Command::TrainMgt { set } => {
            let cfg = load_config(cli, set, Vec::new())?;
            log::info!("stage 2: transformers for {:?}", cfg.mgt_modes);
            let (_, _, outputs) = harness::run_stage2(&cfg)?;
            harness::write_manifest(&cfg, "train-mgt", &outputs)?;
        }
        Command::Eval { run } => {
            let cfg = load_config(cli, &run.set, run_overrides(run)?)?;
            let ck = harness::load_model(&cfg)?;
            let report = harness::evaluate(&cfg, &ck, &cfg.eval.variants)?;
            let paths = RunPaths::new(&cfg.output_dir);
            let outputs = write_report(&paths, "eval", &report)?;
            harness::write_manifest(&cfg, "eval", &outputs)?;
        }
        Command::Ablate { sweep, run } => {
            let cfg = load_config(cli, &run.set, run_overrides(run)?)?;
            let (key, values) = sweep
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--sweep `{sweep}` is not key=v1,v2,...")))?;
            let values: Vec<String> = values
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            harness::sweep_configs(&cfg, key.trim(), &values)?;
            let ck = harness::load_model(&cfg)?;
            let report = harness::ablate(&cfg, &ck, &cfg.eval.variants, key.trim(), &values)?;
            let paths = RunPaths::new(&cfg.output_dir);
            let outputs = write_report(&paths, "ablate", &report)?;
            harness::write_manifest(&cfg, "ablate", &outputs)?;
        }
        Command::Analyze { episodes, set } => {
            let cfg = load_config(cli, set, Vec::new())?;
            let ck = harness::load_model(&cfg)?;
            let episodes = episodes.unwrap_or(cfg.eval.episodes);
            let outputs = analyze(&cfg, &ck, episodes)?;
            harness::write_manifest(&cfg, "analyze", &outputs)?;
        }
        Command::InspectCheckpoint { path } => {
            let ck = Checkpoint::load(path)?;
            // A closed pipe on stdout is not an error worth reporting.
            let _ = writeln!(std::io::stdout(), "{}", inspect(&ck));
        }
    }
    Ok(())
}

fn write_report(paths: &RunPaths, name: &str, report: &harness::EvalReport) -> Result<Vec<PathBuf>> {
    let main = paths.file(&format!("{name}.csv"));
    let timing = paths.file(&format!("{name}_timing.csv"));
    write(&main, report.to_csv())?;
    write(&timing, report.timing_csv())?;
    for r in &report.rows {
        let label = if r.setting.is_empty() {
            r.method.to_string()
        } else {
            format!("{} {}", r.setting, r.method)
        };
        log::info!(
            "{label}: success {:.2} ({}/{}), {:.2} passes/plan",
            r.success_rate,
            r.successes,
            r.episodes,
            r.passes_per_plan
        );
    }
    // Timing varies between machines and is left out of the manifest.
    Ok(vec![main])
}

fn write(path: &std::path::Path, text: String) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn analyze(cfg: &ExperimentConfig, ck: &Checkpoint, episodes: usize) -> Result<Vec<PathBuf>> {
    let dir = cfg.output_dir.join("analysis");
    let policy = policy_for(ck, &cfg.sampler, Method::MgpLong)?;
    let plan = EpisodePlan {
        episodes,
        ..EpisodePlan::from_config(cfg)
    };
    let traces: Vec<_> = run_episodes(&policy, &plan)?.into_iter().map(|r| r.trace).collect();
    let onset = (cfg.task == TaskKind::DynamicTarget).then_some(DRIFT_ONSET);
    let summary = confidence_analysis(&traces, &dir, onset)?;
    if let (Some(b), Some(a)) = (summary.mean_before, summary.mean_after) {
        log::info!("mean pending confidence before drift onset {b:.4}, after {a:.4}");
    }
    let mut outputs = summary.files.clone();
    let mut flips = Vec::with_capacity(2);
    for sel in [MaskSelection::Bottom, MaskSelection::Top] {
        let r = flip_rate_experiment(cfg, ck, sel, episodes)?;
        log::info!(
            "{sel:?} remasking: flip rate {}/{} = {:.3}, success {:.2}",
            r.flipped_tokens,
            r.masked_tokens,
            r.flip_rate,
            r.success_rate
        );
        flips.push(r);
    }
    let flip_path = dir.join("flip_rate.csv");
    write(&flip_path, flip_rate_csv(&cfg.hash(), cfg.sampler.remask_ratio, &flips))?;
    outputs.push(flip_path);
    let summary_path = dir.join("confidence_summary.json");
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    write(&summary_path, text)?;
    outputs.push(summary_path);
    Ok(outputs)
}

fn inspect(ck: &Checkpoint) -> String {
    let tok = &ck.tokenizer;
    let mut sections = vec![serde_json::json!({
        "name": "tokenizer",
        "config": tok.config(),
        "tensors": tok.params().len(),
        "scalars": tok.params().num_scalars(),
        "codebook_entries": tok.codebook().len(),
        "codebook_usage": tok.codebook().usage_fraction(),
    })];
    for (mode, model) in &ck.models {
        sections.push(serde_json::json!({
            "name": format!("mgt.{}", mode.name()),
            "config": model.config(),
            "tensors": model.params().len(),
            "scalars": model.params().num_scalars(),
        }));
    }
    let v = serde_json::json!({ "config_hash": ck.config_hash, "sections": sections });
    serde_json::to_string_pretty(&v).expect("json serializes")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
