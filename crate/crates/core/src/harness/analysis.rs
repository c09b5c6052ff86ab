use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::eval::{policy_for, ratio, run_episodes, EpisodePlan};
use super::{Checkpoint, ExperimentConfig};
use crate::binio::write_file;
use crate::error::{Error, Result};
use crate::samplers::{MaskSelection, Method, RolloutTrace, Variant};

/// Token-by-replan matrices of one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMatrices {
    /// Environment step of each replan column.
    pub steps: Vec<usize>,
    /// `confidence[token][replan]`; `None` where the token was not scored.
    pub confidence: Vec<Vec<Option<f64>>>,
    /// `masks[token][replan]`: 0 unmasked, 1 first pass, 2 later pass, 3 executed.
    pub masks: Vec<Vec<u8>>,
}

impl ConfidenceMatrices {
    /// `None` for short-chunk traces or traces without replans.
    pub fn from_trace(trace: &RolloutTrace) -> Option<Self> {
        if trace.variant == Variant::Short || trace.records.is_empty() {
            return None;
        }
        let n = trace.seq_len;
        let mut m = ConfidenceMatrices {
            steps: Vec::with_capacity(trace.records.len()),
            confidence: vec![Vec::with_capacity(trace.records.len()); n],
            masks: vec![Vec::with_capacity(trace.records.len()); n],
        };
        for r in &trace.records {
            m.steps.push(r.step);
            let states = r.mask_states();
            for i in 0..n {
                let executed = i < r.executed;
                m.confidence[i].push(if executed {
                    None
                } else {
                    r.confidence.get(i).copied().flatten()
                });
                m.masks[i].push(states.get(i).copied().unwrap_or(0));
            }
        }
        Some(m)
    }

    pub fn tokens(&self) -> usize {
        self.confidence.len()
    }

    pub fn replans(&self) -> usize {
        self.steps.len()
    }

    fn header(&self) -> String {
        let mut s = String::from("token");
        for st in &self.steps {
            write!(s, ",step_{st}").expect("write to string");
        }
        s.push('\n');
        s
    }

    pub fn confidence_csv(&self) -> String {
        let mut s = self.header();
        for (i, row) in self.confidence.iter().enumerate() {
            s.push_str(&i.to_string());
            for c in row {
                s.push(',');
                if let Some(v) = c {
                    s.push_str(&v.to_string());
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn masks_csv(&self) -> String {
        let mut s = self.header();
        for (i, row) in self.masks.iter().enumerate() {
            s.push_str(&i.to_string());
            for m in row {
                write!(s, ",{m}").expect("write to string");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceSummary {
    pub rollouts: usize,
    pub files: Vec<PathBuf>,
    /// Mean scored pending confidence at replans before and from `onset`.
    pub mean_before: Option<f64>,
    pub mean_after: Option<f64>,
}

/// Mean scored pending confidence at replans before and from step `onset`.
pub fn pending_confidence_split(matrices: &[ConfidenceMatrices], onset: usize) -> (Option<f64>, Option<f64>) {
    let mut acc = [(0.0, 0usize); 2];
    for m in matrices {
        for (col, &step) in m.steps.iter().enumerate() {
            let side = usize::from(step >= onset);
            for row in &m.confidence {
                if let Some(c) = row[col] {
                    acc[side].0 += c;
                    acc[side].1 += 1;
                }
            }
        }
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    (mean(acc[0]), mean(acc[1]))
}

/// Writes `confidence_NNN.csv` and `masks_NNN.csv` (rows = token index,
/// columns = replan step) for every refining rollout in `traces`. With an
/// `onset` step the summary splits mean pending confidence around it.
pub fn confidence_analysis(traces: &[RolloutTrace], dir: &Path, onset: Option<usize>) -> Result<ConfidenceSummary> {
    let matrices: Vec<ConfidenceMatrices> = traces.iter().filter_map(ConfidenceMatrices::from_trace).collect();
    if matrices.is_empty() {
        return Err(Error::Empty("no full-horizon rollouts with replans to analyse".into()));
    }
    let mut files = Vec::with_capacity(2 * matrices.len());
    for (i, m) in matrices.iter().enumerate() {
        let c = dir.join(format!("confidence_{i:03}.csv"));
        write_file(&c, m.confidence_csv().as_bytes())?;
        let k = dir.join(format!("masks_{i:03}.csv"));
        write_file(&k, m.masks_csv().as_bytes())?;
        files.push(c);
        files.push(k);
    }
    let (mean_before, mean_after) = onset.map_or((None, None), |o| pending_confidence_split(&matrices, o));
    Ok(ConfidenceSummary {
        rollouts: matrices.len(),
        files,
        mean_before,
        mean_after,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlipRateResult {
    pub selection: MaskSelection,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub masked_tokens: usize,
    pub flipped_tokens: usize,
    /// `flipped_tokens / masked_tokens`, or 0 when nothing was masked.
    pub flip_rate: f64,
    /// Set when no token was masked and the rate is undefined.
    pub undefined: bool,
}

impl FlipRateResult {
    pub fn from_traces(selection: MaskSelection, traces: &[RolloutTrace]) -> Self {
        let successes = traces.iter().filter(|t| t.success).count();
        let masked: usize = traces.iter().map(|t| t.masked_tokens).sum();
        let flipped: usize = traces.iter().map(|t| t.flipped_tokens).sum();
        FlipRateResult {
            selection,
            episodes: traces.len(),
            successes,
            success_rate: ratio(successes, traces.len()),
            masked_tokens: masked,
            flipped_tokens: flipped,
            flip_rate: ratio(flipped, masked),
            undefined: masked == 0,
        }
    }
}

/// MGP-Long rollouts that remask the `selection` end of the confidence
/// ranking at the configured ratio.
pub fn flip_rate_experiment(
    config: &ExperimentConfig,
    checkpoint: &Checkpoint,
    selection: MaskSelection,
    episodes: usize,
) -> Result<FlipRateResult> {
    let mut sampler = config.sampler.clone();
    sampler.selection = selection;
    let policy = policy_for(checkpoint, &sampler, Method::MgpLong)?;
    let plan = EpisodePlan {
        episodes,
        ..EpisodePlan::from_config(config)
    };
    let traces: Vec<RolloutTrace> = run_episodes(&policy, &plan)?.into_iter().map(|r| r.trace).collect();
    Ok(FlipRateResult::from_traces(selection, &traces))
}

pub fn flip_rate_csv(config_hash: &str, ratio: f64, results: &[FlipRateResult]) -> String {
    let mut s = String::from(
        "config_hash,selection,remask_ratio,episodes,successes,success_rate,masked_tokens,flipped_tokens,flip_rate,undefined\n",
    );
    for r in results {
        let sel = match r.selection {
            MaskSelection::Bottom => "bottom",
            MaskSelection::Top => "top",
        };
        writeln!(
            s,
            "{config_hash},{sel},{ratio},{},{},{},{},{},{},{}",
            r.episodes, r.successes, r.success_rate, r.masked_tokens, r.flipped_tokens, r.flip_rate, r.undefined
        )
        .expect("write to string");
    }
    s
}
