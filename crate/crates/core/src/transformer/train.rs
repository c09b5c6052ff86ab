use serde::{Deserialize, Serialize};

use super::{
    corrupt, mgt_loss, splice, CorruptionSpec, ExampleSource, ExampleSpec, MaskedTransformer, MgtExample, MgtInput,
    PlanMode, TransformerConfig,
};
use crate::env::Demonstration;
use crate::error::{Error, Result};
use crate::numeric::{cosine_lr, AdamConfig, Graph, RngStream};
use crate::tokenizer::ActionTokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MgtTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine decay floor as a fraction of `lr`.
    pub lr_final_fraction: f64,
    pub clip_norm: f64,
    pub masked_only_loss: bool,
    pub corruption: CorruptionSpec,
    pub examples: ExampleSpec,
}

impl Default for MgtTraining {
    fn default() -> Self {
        MgtTraining {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            lr_final_fraction: 0.1,
            clip_norm: 1.0,
            masked_only_loss: false,
            corruption: CorruptionSpec::default(),
            examples: ExampleSpec::default(),
        }
    }
}

impl MgtTraining {
    pub fn lr_at(&self, step: usize) -> f64 {
        cosine_lr(self.lr, self.lr_final_fraction, step, self.steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgtReport {
    pub loss_curve: Vec<f64>,
}

pub(crate) fn to_input(ex: &MgtExample, tokens: Vec<usize>) -> MgtInput {
    MgtInput {
        tokens,
        executed: ex.executed,
        observations: ex.observations.clone(),
        states: ex.states.clone(),
        positions: None,
    }
}

/// Checks that a transformer config can consume this tokenizer and corpus.
pub fn check_compatible(
    config: &TransformerConfig,
    tokenizer: &ActionTokenizer,
    demos: &[Demonstration],
) -> Result<()> {
    let tk = tokenizer.config();
    if config.codebook_size != tk.codebook_size {
        return Err(Error::Compatibility(format!(
            "transformer expects |K| = {}, tokenizer has {}",
            config.codebook_size, tk.codebook_size
        )));
    }
    if let Some(d) = demos.first() {
        if d.observations.cols() != config.obs_dim || d.states.cols() != config.state_dim {
            return Err(Error::Compatibility(format!(
                "corpus observation/state widths {}/{} differ from config {}/{}",
                d.observations.cols(),
                d.states.cols(),
                config.obs_dim,
                config.state_dim
            )));
        }
    }
    Ok(())
}

/// Trains a masked transformer on corrupted token targets drawn from `demos`.
pub fn train_mgt(
    demos: &[Demonstration],
    tokenizer: &ActionTokenizer,
    config: &TransformerConfig,
    mode: PlanMode,
    training: &MgtTraining,
    seed: u64,
) -> Result<(MaskedTransformer, MgtReport)> {
    train_mgt_observed(demos, tokenizer, config, mode, training, seed, |_, _| Ok(()))
}

/// `train_mgt` that hands the model to `observe` after every optimiser step,
/// with the number of completed steps.
pub fn train_mgt_observed(
    demos: &[Demonstration],
    tokenizer: &ActionTokenizer,
    config: &TransformerConfig,
    mode: PlanMode,
    training: &MgtTraining,
    seed: u64,
    mut observe: impl FnMut(usize, &MaskedTransformer) -> Result<()>,
) -> Result<(MaskedTransformer, MgtReport)> {
    config.validate()?;
    training.corruption.validate()?;
    check_compatible(config, tokenizer, demos)?;
    let source = ExampleSource::new(demos, tokenizer, mode, training.examples.clone(), config.history)?;
    if source.seq_len() > config.max_tokens {
        return Err(Error::Capacity {
            len: source.seq_len(),
            max: config.max_tokens,
        });
    }
    let mut model = MaskedTransformer::init(config.clone(), &mut RngStream::new(seed, 0))?;
    let mut rng = RngStream::new(seed, 1);
    let vocab = model.vocab();
    let mut curve = Vec::with_capacity(training.steps);
    for step in 0..training.steps {
        let mut inputs = Vec::with_capacity(training.batch_size);
        let mut targets = Vec::with_capacity(training.batch_size);
        let mut masks = Vec::with_capacity(training.batch_size);
        for _ in 0..training.batch_size.max(1) {
            let ex = source.sample(&mut rng);
            let spliced = rng.bernoulli(training.corruption.splice);
            let donor = source.donor(&mut rng);
            let base = if spliced {
                splice(&ex.tokens, &donor, ex.executed, &mut rng)?
            } else {
                ex.tokens.clone()
            };
            let (c, _) = corrupt(&base, ex.executed, &training.corruption, vocab, &mut rng)?;
            inputs.push(to_input(&ex, c.tokens));
            targets.extend_from_slice(&ex.tokens);
            masks.extend_from_slice(&c.masked);
        }
        let mut g = Graph::new();
        let logits = model.forward_graph(&mut g, &inputs)?;
        let masked = training.masked_only_loss.then_some(masks.as_slice());
        let ce = mgt_loss(&mut g, logits, &targets, masked, vocab)?;
        let value = g.value(ce.loss).item();
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("transformer loss is {value}"),
            });
        }
        curve.push(value);
        if ce.all_ignored() {
            observe(step + 1, &model)?;
            continue;
        }
        let grads = g.backward(ce.loss)?;
        let pg = grads.params(model.params());
        let adam = AdamConfig {
            lr: training.lr_at(step),
            clip_norm: Some(training.clip_norm),
            ..AdamConfig::default()
        };
        model.params_mut().adam_step(&pg, &adam).map_err(|e| match e {
            Error::Training { reason, .. } => Error::Training { step, reason },
            other => other,
        })?;
        observe(step + 1, &model)?;
    }
    Ok((model, MgtReport { loss_curve: curve }))
}
