use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::eval::{run_episodes, EpisodePlan};
use super::{Checkpoint, ExperimentConfig};
use crate::binio::{read_file, sha256_hex, write_file};
use crate::env::{collect_demonstrations, export_csv, read_corpus, write_corpus, Demonstration, MAX_STEP};
use crate::error::{Error, Result};
use crate::samplers::{Method, Policy};
use crate::tokenizer::{train_tokenizer, ActionTokenizer};
use crate::transformer::{train_mgt_observed, MaskedTransformer, PlanMode};

/// File layout of a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunPaths { dir: dir.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.dir.join("corpus.mgpd")
    }

    pub fn tokenizer(&self) -> PathBuf {
        self.dir.join("tokenizer.mgp")
    }

    pub fn model(&self) -> PathBuf {
        self.dir.join("model.mgp")
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage1Report {
    pub config_hash: String,
    pub codebook_size: usize,
    pub demos: usize,
    pub held_out: usize,
    pub final_loss: f64,
    pub usage_fraction: f64,
    pub total_resets: usize,
    /// Mean over held-out steps of the summed per-axis absolute error of
    /// reconstructed actions, in workspace units.
    pub held_out_l1: f64,
    pub replay_successes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodicEval {
    pub mode: PlanMode,
    pub step: usize,
    pub successes: usize,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage2Report {
    pub config_hash: String,
    pub loss_curves: Vec<(PlanMode, Vec<f64>)>,
    pub periodic: Vec<PeriodicEval>,
}

impl Stage2Report {
    /// Mean of the best `top` periodic success rates of `mode`.
    pub fn periodic_top_mean(&self, mode: PlanMode, top: usize) -> Option<f64> {
        let mut rates: Vec<f64> = self
            .periodic
            .iter()
            .filter(|p| p.mode == mode && p.episodes > 0)
            .map(|p| p.successes as f64 / p.episodes as f64)
            .collect();
        if rates.is_empty() || top == 0 {
            return None;
        }
        rates.sort_by(|a, b| b.total_cmp(a));
        rates.truncate(top);
        Some(rates.iter().sum::<f64>() / rates.len() as f64)
    }
}

/// Expert demonstrations for the configured task.
pub fn demonstrations(config: &ExperimentConfig) -> Result<Vec<Demonstration>> {
    collect_demonstrations(config.task, config.corpus.demos, config.corpus_seed())
}

/// Trains the tokenizer on `demos` and measures it on a separately collected
/// held-out corpus.
pub fn train_stage1(config: &ExperimentConfig, demos: &[Demonstration]) -> Result<(ActionTokenizer, Stage1Report)> {
    let data: Vec<_> = demos.iter().map(|d| d.actions.clone()).collect();
    let (tok, report) = train_tokenizer(
        &data,
        &config.tokenizer,
        &config.tokenizer_training,
        config.tokenizer_seed(),
    )?;
    let held = if config.corpus.held_out == 0 {
        Vec::new()
    } else {
        collect_demonstrations(config.task, config.corpus.held_out, config.held_out_seed())?
    };
    let mut err = 0.0;
    let mut steps = 0usize;
    let mut replay_successes = 0;
    for d in &held {
        let r = tok.reconstruct(&d.actions)?;
        for t in 0..d.horizon() {
            err += (0..d.actions.cols())
                .map(|j| (r.get(t, j) - d.actions.get(t, j)).abs())
                .sum::<f64>();
        }
        steps += d.horizon();
        replay_successes += d.replay(&r) as usize;
    }
    let report = Stage1Report {
        config_hash: config.hash(),
        codebook_size: config.tokenizer.codebook_size,
        demos: demos.len(),
        held_out: held.len(),
        final_loss: report.loss_curve.last().copied().unwrap_or(f64::NAN),
        usage_fraction: report.usage_fraction,
        total_resets: report.total_resets,
        held_out_l1: if steps == 0 { 0.0 } else { err / steps as f64 * MAX_STEP },
        replay_successes,
    };
    Ok((tok, report))
}

/// Trains one transformer per configured plan mode.
pub fn train_stage2(
    config: &ExperimentConfig,
    demos: &[Demonstration],
    tokenizer: &ActionTokenizer,
) -> Result<(Vec<(PlanMode, MaskedTransformer)>, Stage2Report)> {
    let mut models = Vec::with_capacity(config.mgt_modes.len());
    let mut report = Stage2Report {
        config_hash: config.hash(),
        loss_curves: Vec::new(),
        periodic: Vec::new(),
    };
    let plan = EpisodePlan::from_config(config);
    for &mode in &config.mgt_modes {
        let method = match mode {
            PlanMode::Long => Method::MgpLong,
            PlanMode::Short => Method::MgpShort,
        };
        let mut periodic = Vec::new();
        let observe = |step: usize, model: &MaskedTransformer| -> Result<()> {
            let every = config.eval.eval_every;
            if !config.eval.periodic_eval || !step.is_multiple_of(every) {
                return Ok(());
            }
            let policy = Policy::new(model, tokenizer, config.sampler.with_method(method))?;
            let results = run_episodes(&policy, &plan)?;
            let successes = results.iter().filter(|r| r.trace.success).count();
            log::info!("{} step {step}: {method} {successes}/{}", config.task, results.len());
            periodic.push(PeriodicEval {
                mode,
                step,
                successes,
                episodes: results.len(),
            });
            Ok(())
        };
        let (model, rep) = train_mgt_observed(
            demos,
            tokenizer,
            &config.transformer,
            mode,
            &config.mgt_training,
            config.mgt_seed(),
            observe,
        )?;
        log::info!(
            "{} {} transformer: loss {:.4} -> {:.4}",
            config.task,
            mode.name(),
            rep.loss_curve.first().copied().unwrap_or(f64::NAN),
            rep.loss_curve.last().copied().unwrap_or(f64::NAN)
        );
        report.periodic.extend(periodic);
        report.loss_curves.push((mode, rep.loss_curve));
        models.push((mode, model));
    }
    Ok((models, report))
}

/// Records what a command produced, for reproducibility audits. Contains no
/// timestamps so reruns write identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub task: String,
    pub crate_version: String,
    pub checkpoint_format: u16,
    pub corpus_format: u16,
    pub outputs: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

/// Writes the resolved config as `config-<command>.toml` and
/// `manifest-<command>.json` listing the digests of it and `outputs`.
pub fn write_manifest(config: &ExperimentConfig, command: &str, outputs: &[PathBuf]) -> Result<PathBuf> {
    let config_path = config.output_dir.join(format!("config-{command}.toml"));
    write_file(&config_path, config.to_flat_toml().as_bytes())?;
    let outputs: Vec<&PathBuf> = std::iter::once(&config_path).chain(outputs).collect();
    let mut entries = Vec::with_capacity(outputs.len());
    for p in outputs {
        let bytes = read_file(p)?;
        let file = p
            .strip_prefix(&config.output_dir)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/");
        entries.push(ManifestEntry {
            file,
            sha256: sha256_hex(&bytes),
        });
    }
    let m = Manifest {
        command: command.to_string(),
        config_hash: config.hash(),
        seed: config.seed,
        task: config.task.name().to_string(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        checkpoint_format: 1,
        corpus_format: 1,
        outputs: entries,
    };
    let path = config.output_dir.join(format!("manifest-{command}.json"));
    write_json(&path, &m)?;
    Ok(path)
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn write_text(path: PathBuf, text: &str, outputs: &mut Vec<PathBuf>) -> Result<()> {
    write_file(&path, text.as_bytes())?;
    outputs.push(path);
    Ok(())
}

/// Collects the corpus into the run directory (binary plus CSV export).
pub fn collect(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let paths = RunPaths::new(&config.output_dir);
    let demos = demonstrations(config)?;
    let mut outputs = Vec::new();
    write_corpus(&paths.corpus(), &demos)?;
    outputs.push(paths.corpus());
    export_csv(&paths.file("corpus.csv"), &demos)?;
    outputs.push(paths.file("corpus.csv"));
    Ok(outputs)
}

fn load_corpus(config: &ExperimentConfig, paths: &RunPaths) -> Result<Vec<Demonstration>> {
    let demos = read_corpus(&paths.corpus())?;
    if let Some(d) = demos.iter().find(|d| d.task != config.task) {
        return Err(Error::Compatibility(format!(
            "corpus holds {} demonstrations, config task is {}",
            d.task, config.task
        )));
    }
    Ok(demos)
}

/// Stage 1: trains the tokenizer on the stored corpus and writes the frozen
/// tokenizer checkpoint plus its report.
pub fn run_stage1(config: &ExperimentConfig) -> Result<(Checkpoint, Stage1Report, Vec<PathBuf>)> {
    let paths = RunPaths::new(&config.output_dir);
    let demos = load_corpus(config, &paths)?;
    let (tokenizer, report) = train_stage1(config, &demos)?;
    let ck = Checkpoint {
        config_hash: config.hash(),
        tokenizer,
        models: Vec::new(),
    };
    let mut outputs = Vec::new();
    ck.save(&paths.tokenizer())?;
    outputs.push(paths.tokenizer());
    write_json(&paths.file("tokenizer_report.json"), &report)?;
    outputs.push(paths.file("tokenizer_report.json"));
    Ok((ck, report, outputs))
}

/// Stage 2: trains transformers on top of the stage-1 tokenizer and writes
/// the full checkpoint and one loss curve per plan mode.
pub fn run_stage2(config: &ExperimentConfig) -> Result<(Checkpoint, Stage2Report, Vec<PathBuf>)> {
    let paths = RunPaths::new(&config.output_dir);
    let stage1 = Checkpoint::load(&paths.tokenizer())?;
    stage1.check_tokenizer(&config.tokenizer, &config.transformer)?;
    let demos = load_corpus(config, &paths)?;
    let (models, report) = train_stage2(config, &demos, &stage1.tokenizer)?;
    let ck = Checkpoint {
        config_hash: config.hash(),
        tokenizer: stage1.tokenizer,
        models,
    };
    let mut outputs = Vec::new();
    ck.save(&paths.model())?;
    outputs.push(paths.model());
    for (mode, curve) in &report.loss_curves {
        let mut s = String::from("step,loss\n");
        for (i, l) in curve.iter().enumerate() {
            writeln!(s, "{i},{l}").expect("write to string");
        }
        write_text(paths.file(&format!("mgt_loss_{}.csv", mode.name())), &s, &mut outputs)?;
    }
    if config.eval.periodic_eval {
        let mut s = String::from("mode,step,successes,episodes\n");
        for p in &report.periodic {
            writeln!(s, "{},{},{},{}", p.mode.name(), p.step, p.successes, p.episodes).expect("write to string");
        }
        write_text(paths.file("periodic_eval.csv"), &s, &mut outputs)?;
        let top = config.eval.periodic_top;
        let mut s = String::from("mode,top,mean_success_rate\n");
        for mode in &config.mgt_modes {
            if let Some(m) = report.periodic_top_mean(*mode, top) {
                writeln!(s, "{},{top},{m}", mode.name()).expect("write to string");
            }
        }
        write_text(paths.file("periodic_summary.csv"), &s, &mut outputs)?;
    }
    Ok((ck, report, outputs))
}

/// Loads the stage-2 checkpoint and checks it against `config`.
pub fn load_model(config: &ExperimentConfig) -> Result<Checkpoint> {
    let ck = Checkpoint::load(&RunPaths::new(&config.output_dir).model())?;
    ck.check_tokenizer(&config.tokenizer, &config.transformer)?;
    Ok(ck)
}
