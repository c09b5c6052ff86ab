use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{Checkpoint, ExperimentConfig};
use crate::env::{DropoutEnv, TaskKind, ToyEnv};
use crate::error::{Error, Result};
use crate::numeric::RngStream;
use crate::samplers::{Method, Policy, RolloutTrace, SamplerConfig};
use crate::transformer::PlanMode;

/// Stream indices splitting an episode seed into environment dropout and
/// sampler randomness.
const DROPOUT_STREAM: u64 = 7;
const SAMPLER_STREAM: u64 = 8;

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub seed: u64,
    pub trace: RolloutTrace,
    pub wall: Duration,
}

/// Episode schedule shared by every evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodePlan {
    pub task: TaskKind,
    pub episodes: usize,
    pub seed_base: u64,
    pub dropout: f64,
    pub keep_first: bool,
    pub jobs: usize,
}

impl EpisodePlan {
    pub fn from_config(config: &ExperimentConfig) -> Self {
        EpisodePlan {
            task: config.task,
            episodes: config.eval.episodes,
            seed_base: config.eval.seed_base,
            dropout: config.eval.dropout,
            keep_first: config.eval.keep_first,
            jobs: config.eval.jobs,
        }
    }

    pub fn seed(&self, i: usize) -> u64 {
        self.seed_base + i as u64
    }
}

/// Runs one closed-loop episode from its seed.
pub fn run_episode(policy: &Policy, plan: &EpisodePlan, seed: u64) -> Result<EpisodeResult> {
    let env = DropoutEnv::new(
        ToyEnv::new(plan.task, seed),
        plan.dropout,
        plan.keep_first,
        RngStream::new(seed, DROPOUT_STREAM),
    )?;
    let mut rng = RngStream::new(seed, SAMPLER_STREAM);
    let start = Instant::now();
    let trace = policy.rollout(env, &mut rng)?;
    Ok(EpisodeResult {
        seed,
        trace,
        wall: start.elapsed(),
    })
}

/// Runs every episode of `plan` on up to `plan.jobs` threads. Results are in
/// episode order and do not depend on the thread count.
pub fn run_episodes(policy: &Policy, plan: &EpisodePlan) -> Result<Vec<EpisodeResult>> {
    let jobs = plan.jobs.clamp(1, plan.episodes.max(1));
    if jobs == 1 {
        return (0..plan.episodes)
            .map(|i| run_episode(policy, plan, plan.seed(i)))
            .collect();
    }
    let mut slots: Vec<Option<Result<EpisodeResult>>> = (0..plan.episodes).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                s.spawn(move || {
                    (j..plan.episodes)
                        .step_by(jobs)
                        .map(|i| (i, run_episode(policy, plan, plan.seed(i))))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("rollout worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every episode ran")).collect()
}

/// Policy for `method` built from the matching model in `checkpoint`.
pub fn policy_for<'a>(checkpoint: &'a Checkpoint, sampler: &SamplerConfig, method: Method) -> Result<Policy<'a>> {
    let mode = if method.is_short() {
        PlanMode::Short
    } else {
        PlanMode::Long
    };
    let model = checkpoint
        .model(mode)
        .ok_or_else(|| Error::Config(format!("{method} needs a {} model, checkpoint has none", mode.name())))?;
    Policy::new(model, &checkpoint.tokenizer, sampler.with_method(method))
}

/// One evaluated method. Counts are exact; rates are derived from them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    /// Sweep setting that produced the row; empty outside ablations.
    pub setting: String,
    pub task: TaskKind,
    pub method: Method,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub dropout: f64,
    pub plans: usize,
    pub forward_passes: usize,
    pub scoring_passes: usize,
    pub passes_per_plan: f64,
    pub passes_per_episode: f64,
    pub masked_tokens: usize,
    pub flipped_tokens: usize,
    pub sampler_errors: usize,
}

/// Wall-clock for one row; machine dependent, so kept out of the report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub setting: String,
    pub method: Method,
    pub wall_seconds: f64,
    pub wall_per_plan_ms: f64,
    pub wall_per_episode_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub rows: Vec<EvalRow>,
    pub timings: Vec<TimingRow>,
}

impl EvalRow {
    pub fn from_results(
        setting: &str,
        task: TaskKind,
        method: Method,
        dropout: f64,
        results: &[EpisodeResult],
    ) -> Self {
        let n = results.len();
        let sum = |f: &dyn Fn(&RolloutTrace) -> usize| results.iter().map(|r| f(&r.trace)).sum::<usize>();
        let successes = sum(&|t| t.success as usize);
        let plans = sum(&|t| t.plans());
        let forward_passes = sum(&|t| t.forward_passes);
        EvalRow {
            setting: setting.to_string(),
            task,
            method,
            episodes: n,
            successes,
            success_rate: ratio(successes, n),
            dropout,
            plans,
            forward_passes,
            scoring_passes: sum(&|t| t.scoring_passes),
            passes_per_plan: ratio(forward_passes, plans),
            passes_per_episode: ratio(forward_passes, n),
            masked_tokens: sum(&|t| t.masked_tokens),
            flipped_tokens: sum(&|t| t.flipped_tokens),
            sampler_errors: sum(&|t| t.error.is_some() as usize),
        }
    }
}

impl TimingRow {
    pub fn from_results(setting: &str, method: Method, results: &[EpisodeResult]) -> Self {
        let wall: f64 = results.iter().map(|r| r.wall.as_secs_f64()).sum();
        let plans: usize = results.iter().map(|r| r.trace.plans()).sum();
        TimingRow {
            setting: setting.to_string(),
            method,
            wall_seconds: wall,
            wall_per_plan_ms: if plans == 0 { 0.0 } else { wall * 1e3 / plans as f64 },
            wall_per_episode_ms: if results.is_empty() {
                0.0
            } else {
                wall * 1e3 / results.len() as f64
            },
        }
    }
}

pub(crate) fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    pub fn row(&self, method: Method) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn success_rate(&self, method: Method) -> Option<f64> {
        self.row(method).map(|r| r.success_rate)
    }

    pub fn push(&mut self, setting: &str, task: TaskKind, method: Method, dropout: f64, results: &[EpisodeResult]) {
        self.rows
            .push(EvalRow::from_results(setting, task, method, dropout, results));
        self.timings.push(TimingRow::from_results(setting, method, results));
    }

    /// Deterministic results table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "config_hash,setting,task,method,episodes,successes,success_rate,dropout,plans,forward_passes,\
             scoring_passes,passes_per_plan,passes_per_episode,masked_tokens,flipped_tokens,sampler_errors\n",
        );
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                self.config_hash,
                r.setting,
                r.task,
                r.method,
                r.episodes,
                r.successes,
                r.success_rate,
                r.dropout,
                r.plans,
                r.forward_passes,
                r.scoring_passes,
                r.passes_per_plan,
                r.passes_per_episode,
                r.masked_tokens,
                r.flipped_tokens,
                r.sampler_errors
            )
            .expect("write to string");
        }
        s
    }

    /// Wall-clock table tagged with the host platform.
    pub fn timing_csv(&self) -> String {
        let host = format!(
            "{}-{}-{}threads",
            std::env::consts::OS,
            std::env::consts::ARCH,
            std::thread::available_parallelism().map_or(1, |n| n.get())
        );
        let mut s =
            String::from("config_hash,machine,setting,method,wall_seconds,wall_per_plan_ms,wall_per_episode_ms\n");
        for t in &self.timings {
            writeln!(
                s,
                "{},{host},{},{},{:.6},{:.4},{:.4}",
                self.config_hash, t.setting, t.method, t.wall_seconds, t.wall_per_plan_ms, t.wall_per_episode_ms
            )
            .expect("write to string");
        }
        s
    }
}

/// Evaluates each method over the configured episodes.
pub fn evaluate(config: &ExperimentConfig, checkpoint: &Checkpoint, methods: &[Method]) -> Result<EvalReport> {
    evaluate_setting(config, checkpoint, methods, "")
}

pub(crate) fn evaluate_setting(
    config: &ExperimentConfig,
    checkpoint: &Checkpoint,
    methods: &[Method],
    setting: &str,
) -> Result<EvalReport> {
    let plan = EpisodePlan::from_config(config);
    let mut report = EvalReport {
        config_hash: config.hash(),
        ..EvalReport::default()
    };
    for &method in methods {
        let policy = policy_for(checkpoint, &config.sampler, method)?;
        let results = run_episodes(&policy, &plan)?;
        log::info!(
            "{} {method}: {}/{} successes",
            config.task,
            results.iter().filter(|r| r.trace.success).count(),
            results.len()
        );
        report.push(setting, config.task, method, plan.dropout, &results);
    }
    Ok(report)
}

/// Setting label and config for each sweep value; only sampler and eval keys
/// may vary because the checkpoint is fixed.
pub fn sweep_configs(
    config: &ExperimentConfig,
    key: &str,
    values: &[String],
) -> Result<Vec<(String, ExperimentConfig)>> {
    let key = if key.contains('.') {
        key.to_string()
    } else {
        format!("sampler.{key}")
    };
    if !(key.starts_with("sampler.") || key.starts_with("eval.")) {
        return Err(Error::Config(format!(
            "cannot sweep `{key}` against a trained checkpoint; only sampler.* and eval.* keys vary at evaluation"
        )));
    }
    if values.is_empty() {
        return Err(Error::Config(format!("sweep over `{key}` has no values")));
    }
    values
        .iter()
        .map(|v| {
            let setting = format!("{key}={v}");
            let cfg = config.with_overrides(std::slice::from_ref(&setting))?;
            Ok((setting, cfg))
        })
        .collect()
}

/// One report row per method and sweep value.
pub fn ablate(
    config: &ExperimentConfig,
    checkpoint: &Checkpoint,
    methods: &[Method],
    key: &str,
    values: &[String],
) -> Result<EvalReport> {
    let settings = sweep_configs(config, key, values)?;
    let mut report = EvalReport {
        config_hash: config.hash(),
        ..EvalReport::default()
    };
    for (setting, cfg) in &settings {
        let part = evaluate_setting(cfg, checkpoint, methods, setting)?;
        report.rows.extend(part.rows);
        report.timings.extend(part.timings);
    }
    Ok(report)
}
