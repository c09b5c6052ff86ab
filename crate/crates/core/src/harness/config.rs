use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::binio::sha256_hex;
use crate::env::TaskKind;
use crate::error::{Error, Result};
use crate::samplers::{Method, SamplerConfig};
use crate::tokenizer::{TokenizerConfig, TokenizerTraining};
use crate::transformer::{CorruptionSpec, MgtTraining, PlanMode, TransformerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Training demonstrations.
    pub demos: usize,
    /// Demonstrations collected separately for the tokenizer report.
    pub held_out: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            demos: 10,
            held_out: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Episode `i` uses environment seed `seed_base + i`.
    pub seed_base: u64,
    pub dropout: f64,
    /// Never withhold the first observation.
    pub keep_first: bool,
    /// Worker threads for rollouts; results do not depend on it.
    pub jobs: usize,
    pub variants: Vec<Method>,
    /// Evaluate during stage 2 every `eval_every` steps and report the mean
    /// of the best `periodic_top` success rates.
    pub periodic_eval: bool,
    pub eval_every: usize,
    pub periodic_top: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 20,
            seed_base: 10_000,
            dropout: 0.0,
            keep_first: true,
            jobs: 1,
            variants: vec![Method::MgpLong, Method::MgpShort],
            periodic_eval: false,
            eval_every: 1000,
            periodic_top: 5,
        }
    }
}

/// Everything needed to regenerate a run. Stage seeds derive from `seed`:
/// corpus `seed`, tokenizer `seed + 1`, transformer `seed + 2`, held-out
/// corpus `seed + 99`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Plan modes trained in stage 2.
    pub mgt_modes: Vec<PlanMode>,
    pub corpus: CorpusConfig,
    pub tokenizer: TokenizerConfig,
    pub tokenizer_training: TokenizerTraining,
    pub transformer: TransformerConfig,
    pub mgt_training: MgtTraining,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_task(TaskKind::PointReach)
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults tuned per task.
    pub fn for_task(task: TaskKind) -> Self {
        let tokens = task.horizon() / TokenizerConfig::default().factor();
        let k = match task {
            TaskKind::ButtonSequence => 256,
            _ => 32,
        };
        let mut cfg = ExperimentConfig {
            task,
            seed: 0,
            output_dir: PathBuf::from("runs").join(task.name()),
            mgt_modes: vec![PlanMode::Long, PlanMode::Short],
            corpus: CorpusConfig::default(),
            tokenizer: TokenizerConfig {
                codebook_size: k,
                ..TokenizerConfig::default()
            },
            tokenizer_training: TokenizerTraining::default(),
            transformer: TransformerConfig {
                codebook_size: k,
                d_model: 64,
                max_tokens: tokens,
                obs_dim: task.obs_dim(),
                ..TransformerConfig::default()
            },
            mgt_training: MgtTraining::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        };
        match task {
            TaskKind::PointReach => {}
            TaskKind::DynamicTarget => {
                cfg.mgt_training.corruption = CorruptionSpec {
                    splice: 1.0,
                    ..CorruptionSpec::default()
                };
            }
            TaskKind::ButtonSequence => {
                cfg.corpus.demos = 48;
                cfg.mgt_training.steps = 4000;
                cfg.mgt_training.corruption.perturb = 0.1;
                cfg.sampler.temperature = 0.5;
            }
        }
        cfg
    }

    pub fn corpus_seed(&self) -> u64 {
        self.seed
    }

    pub fn tokenizer_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn mgt_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    pub fn held_out_seed(&self) -> u64 {
        self.seed.wrapping_add(99)
    }

    /// Parses a config file body and applies `key=value` overrides. Keys the
    /// text leaves out take the defaults of the task it names.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config parse error: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    fn from_table(table: Table) -> Result<Self> {
        let task = match table.get("task") {
            None => TaskKind::PointReach,
            Some(Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("task must be a string, got {other}"))),
        };
        let base =
            Value::try_from(Self::for_task(task)).map_err(|e| Error::Config(format!("cannot encode defaults: {e}")))?;
        let mut merged = match base {
            Value::Table(t) => t,
            _ => unreachable!("config encodes as a table"),
        };
        merge(&mut merged, table);
        let cfg: Self = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// This config with further overrides applied.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = match Value::try_from(self) {
            Ok(Value::Table(t)) => t,
            _ => return Err(Error::Config("config does not encode as a table".into())),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.transformer.validate()?;
        self.sampler.validate()?;
        self.mgt_training.corruption.validate()?;
        if self.corpus.demos == 0 {
            return Err(Error::Config("corpus.demos must be at least 1".into()));
        }
        if self.transformer.obs_dim != self.task.obs_dim() {
            return Err(Error::Config(format!(
                "transformer.obs_dim {} does not match {} observations ({})",
                self.transformer.obs_dim,
                self.task,
                self.task.obs_dim()
            )));
        }
        if !(0.0..=1.0).contains(&self.eval.dropout) {
            return Err(Error::Config(format!(
                "eval.dropout {} outside [0, 1]",
                self.eval.dropout
            )));
        }
        if self.eval.jobs == 0 {
            return Err(Error::Config("eval.jobs must be at least 1".into()));
        }
        if self.eval.periodic_eval && (self.eval.eval_every == 0 || self.eval.periodic_top == 0) {
            return Err(Error::Config(
                "periodic evaluation needs positive eval_every and periodic_top".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 over the settings that determine results. The output directory
    /// and the worker count are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.eval.jobs = 1;
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    /// Flat `dotted.key = value` listing, one line per leaf, sorted by key.
    pub fn to_flat_toml(&self) -> String {
        let value = Value::try_from(self).expect("config encodes");
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        leaf => out.push(format!("{prefix} = {leaf}")),
    }
}

/// Recursively overlays `over` onto `base`.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of an override; bare words become strings.
fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => {
            if let Some(items) = raw.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                return Value::Array(
                    items
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(parse_value)
                        .collect(),
                );
            }
            Value::String(raw.to_string())
        }
    }
}

/// Applies one `dotted.key=value` override to a config table.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let (last, path) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `{key}`: `{p}` is not a table"))),
        };
    }
    cur.insert(last.to_string(), parse_value(raw));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_flat_text() {
        for task in TaskKind::ALL {
            let cfg = ExperimentConfig::for_task(task);
            let back = ExperimentConfig::from_toml_str(&cfg.to_flat_toml(), &[]).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn task_selects_its_defaults() {
        let cfg = ExperimentConfig::from_toml_str("task = \"button\"", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::for_task(TaskKind::ButtonSequence));
        let cfg = ExperimentConfig::from_toml_str("", &["task=dynamic".into()]).unwrap();
        assert_eq!(cfg.task, TaskKind::DynamicTarget);
    }

    #[test]
    fn overrides_use_dotted_keys() {
        let cfg = ExperimentConfig::from_toml_str(
            "[sampler]\nremask_ratio = 0.5\n",
            &[
                "sampler.remask_ratio=0.85".into(),
                "eval.variants=[mgp-long, full-seq]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.sampler.remask_ratio, 0.85);
        assert_eq!(cfg.eval.variants, vec![Method::MgpLong, Method::FullSeq]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = ExperimentConfig::from_toml_str("[sampler]\nremask_ration = 0.5\n", &[]).unwrap_err();
        assert!(matches!(e, Error::Config(ref m) if m.contains("remask_ration")), "{e}");
        let e = ExperimentConfig::from_toml_str("", &["bogus=1".into()]).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for o in [
            "sampler.temperature=0",
            "eval.dropout=1.5",
            "corpus.demos=0",
            "transformer.obs_dim=3",
        ] {
            let e = ExperimentConfig::from_toml_str("", &[o.into()]).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{o}: {e}");
        }
    }

    #[test]
    fn hash_ignores_output_dir_and_jobs() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.eval.jobs = 8;
        assert_eq!(a.hash(), b.hash());
        b.sampler.temperature = 0.7;
        assert_ne!(a.hash(), b.hash());
    }
}
