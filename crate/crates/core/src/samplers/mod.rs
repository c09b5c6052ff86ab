//! Parallel masked decoding: MGP-Short chunk planning and MGP-Long
//! full-horizon planning with adaptive token refinement, plus ablations.

mod ops;
mod rollout;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ops::{
    gumbel_max_sample, remask_count, sample_token, score_and_remask, token_score, ConfidenceScores, InferenceSession,
};
pub use rollout::{autoregressive_sample, ContextHistory, Policy, ReplanRecord, RolloutTrace, Termination};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Short chunks replanned from scratch.
    Short,
    /// Full-horizon plan refined at every replan point.
    Long,
    /// Full-horizon plan executed open loop.
    FullSeq,
    /// Full-horizon plan with every pending token remasked at each replan.
    WithoutSm,
}

/// How pending tokens are ranked for remasking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringPolicy {
    /// Posterior confidence under the new observation.
    Atr,
    /// Scores stored when each token was last sampled or scored.
    ScoreReuse,
    /// Uniform random scores.
    Random,
}

/// Which end of the ranking is remasked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSelection {
    Bottom,
    Top,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub variant: Variant,
    pub scoring: ScoringPolicy,
    pub selection: MaskSelection,
    /// Forward passes per plan (MGP-Short) or per refinement (MGP-Long).
    pub refinement_steps: usize,
    pub temperature: f64,
    /// Fraction of ranked pending tokens remasked.
    pub remask_ratio: f64,
    /// Actions executed between MGP-Long replans.
    pub exec_steps_long: usize,
    /// Actions executed from each MGP-Short chunk.
    pub exec_steps_short: usize,
    /// MGP-Short plan length in tokens.
    pub short_tokens: usize,
    /// Spend a fresh scoring pass before every refinement pass, not only the first.
    pub score_every_pass: bool,
    /// MGP-Short stays still on steps whose observation is withheld.
    pub short_hold: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            variant: Variant::Long,
            scoring: ScoringPolicy::Atr,
            selection: MaskSelection::Bottom,
            refinement_steps: 2,
            temperature: 1.0,
            remask_ratio: 0.7,
            exec_steps_long: 12,
            exec_steps_short: 4,
            short_tokens: 2,
            score_every_pass: false,
            short_hold: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.refinement_steps == 0 {
            return Err(Error::Config("refinement_steps must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.remask_ratio) {
            return Err(Error::Config(format!(
                "remask_ratio {} outside [0, 1]",
                self.remask_ratio
            )));
        }
        if self.exec_steps_long == 0 || self.exec_steps_short == 0 || self.short_tokens == 0 {
            return Err(Error::Config(
                "execution lengths and short_tokens must be positive".into(),
            ));
        }
        Ok(())
    }

    /// This configuration with the variant and scoring rule of `method`.
    pub fn with_method(&self, method: Method) -> Self {
        let (variant, scoring) = method.parts();
        SamplerConfig {
            variant,
            scoring,
            short_hold: method == Method::ShortHold,
            ..self.clone()
        }
    }
}

/// Named evaluation method: a variant plus a scoring rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    MgpShort,
    /// MGP-Short that holds still whenever the current observation is missing.
    ShortHold,
    MgpLong,
    FullSeq,
    WithoutSm,
    ScoreReuse,
    #[serde(rename = "random")]
    RandomScore,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::MgpShort,
        Method::ShortHold,
        Method::MgpLong,
        Method::FullSeq,
        Method::WithoutSm,
        Method::ScoreReuse,
        Method::RandomScore,
    ];

    pub fn parts(self) -> (Variant, ScoringPolicy) {
        match self {
            Method::MgpShort | Method::ShortHold => (Variant::Short, ScoringPolicy::Atr),
            Method::MgpLong => (Variant::Long, ScoringPolicy::Atr),
            Method::FullSeq => (Variant::FullSeq, ScoringPolicy::Atr),
            Method::WithoutSm => (Variant::WithoutSm, ScoringPolicy::Atr),
            Method::ScoreReuse => (Variant::Long, ScoringPolicy::ScoreReuse),
            Method::RandomScore => (Variant::Long, ScoringPolicy::Random),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::MgpShort => "mgp-short",
            Method::ShortHold => "short-hold",
            Method::MgpLong => "mgp-long",
            Method::FullSeq => "full-seq",
            Method::WithoutSm => "without-sm",
            Method::ScoreReuse => "score-reuse",
            Method::RandomScore => "random",
        }
    }

    /// Whether the method needs the short-chunk model.
    pub fn is_short(self) -> bool {
        matches!(self, Method::MgpShort | Method::ShortHold)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("unknown variant '{s}' (expected one of {})", names.join(", ")))
        })
    }
}
