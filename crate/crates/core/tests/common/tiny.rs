//! Small untrained models for accounting and format tests.

#![allow(dead_code)]

use mgp_core::env::TaskKind;
use mgp_core::harness::{Checkpoint, ExperimentConfig};
use mgp_core::numeric::RngStream;
use mgp_core::tokenizer::{ActionTokenizer, TokenizerConfig};
use mgp_core::transformer::{MaskedTransformer, PlanMode, TransformerConfig};

pub const K: usize = 16;

pub fn tokenizer_config() -> TokenizerConfig {
    TokenizerConfig {
        codebook_size: K,
        code_dim: 4,
        channels: 8,
        ..TokenizerConfig::default()
    }
}

pub fn transformer_config(task: TaskKind) -> TransformerConfig {
    TransformerConfig {
        codebook_size: K,
        d_model: 16,
        max_tokens: 32,
        obs_dim: task.obs_dim(),
        perception_hidden: 16,
        ..TransformerConfig::default()
    }
}

pub fn tokenizer(seed: u64) -> ActionTokenizer {
    ActionTokenizer::init(tokenizer_config(), &mut RngStream::new(seed, 0)).unwrap()
}

pub fn model(task: TaskKind, seed: u64) -> MaskedTransformer {
    MaskedTransformer::init(transformer_config(task), &mut RngStream::new(seed, 1)).unwrap()
}

/// Untrained checkpoint with both plan modes.
pub fn checkpoint(task: TaskKind, seed: u64) -> Checkpoint {
    Checkpoint {
        config_hash: format!("tiny-{seed}"),
        tokenizer: tokenizer(seed),
        models: vec![
            (PlanMode::Long, model(task, seed)),
            (PlanMode::Short, model(task, seed + 1)),
        ],
    }
}

/// Experiment config matching the tiny models, with short training runs.
pub fn config(task: TaskKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::for_task(task);
    c.tokenizer = tokenizer_config();
    c.transformer = transformer_config(task);
    c.tokenizer_training.steps = 5;
    c.mgt_training.steps = 5;
    c.corpus.demos = 3;
    c.corpus.held_out = 2;
    c.eval.episodes = 3;
    c
}
