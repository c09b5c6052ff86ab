use serde::{Deserialize, Serialize};

use super::{pad_actions, vq_loss, ActionTokenizer, Codebook, TokenizerConfig};
use crate::error::{Error, Result};
use crate::numeric::{cosine_lr, AdamConfig, Graph, RngStream, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate at the last step as a fraction of `lr` (cosine decay).
    pub lr_final_fraction: f64,
    pub clip_norm: f64,
    /// Random crop lengths in actions; each must be a multiple of the token factor.
    pub crop_lengths: Vec<usize>,
    pub dead_code_resets: bool,
}

impl Default for TokenizerTraining {
    fn default() -> Self {
        TokenizerTraining {
            steps: 4000,
            batch_size: 8,
            lr: 2e-3,
            lr_final_fraction: 0.05,
            clip_norm: 1.0,
            crop_lengths: vec![8, 16, 32],
            dead_code_resets: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerReport {
    pub loss_curve: Vec<f64>,
    pub usage_fraction: f64,
    pub total_resets: usize,
}

/// Trains encoder, decoder and codebook on random crops of `dataset`.
pub fn train_tokenizer(
    dataset: &[Tensor],
    config: &TokenizerConfig,
    training: &TokenizerTraining,
    seed: u64,
) -> Result<(ActionTokenizer, TokenizerReport)> {
    if dataset.is_empty() {
        return Err(Error::Empty("tokenizer training set".into()));
    }
    let factor = config.factor();
    if training.crop_lengths.is_empty() || training.crop_lengths.iter().any(|&l| l == 0 || l % factor != 0) {
        return Err(Error::Config(format!(
            "crop lengths must be positive multiples of {factor}"
        )));
    }
    let mut init_rng = RngStream::new(seed, 0);
    let mut rng = RngStream::new(seed, 1);
    let mut tok = ActionTokenizer::init(config.clone(), &mut init_rng)?;
    let data: Vec<Tensor> = dataset.iter().map(|a| pad_actions(a, factor)).collect();
    let mut curve = Vec::with_capacity(training.steps);
    let mut total_resets = 0;

    for step in 0..training.steps {
        let crops: Vec<Tensor> = (0..training.batch_size.max(1))
            .map(|_| random_crop(&data, &training.crop_lengths, factor, &mut rng))
            .collect();

        let mut g = Graph::new();
        let mut inputs = Vec::with_capacity(crops.len());
        let mut latents = Vec::with_capacity(crops.len());
        for c in &crops {
            let a = g.constant(c.clone());
            let z = tok.encode_graph(&mut g, a)?;
            inputs.push(a);
            latents.push(z);
        }
        let batch_latents = stack_rows(latents.iter().map(|&z| g.value(z)))?;
        if step == 0 {
            *tok.codebook_mut() = Codebook::from_latents(config.codebook_size, &batch_latents, &mut init_rng)?;
        }

        let mut losses = Vec::with_capacity(crops.len());
        let mut assignments = Vec::with_capacity(batch_latents.rows());
        for (&a, &z) in inputs.iter().zip(&latents) {
            let grid = tok.quantize(g.value(z))?;
            assignments.extend_from_slice(&grid.indices);
            let q = g.straight_through(z, grid.quantized.clone())?;
            let recon = tok.decode_graph(&mut g, q)?;
            let l = vq_loss(&mut g, a, recon, z, &grid.quantized, config.lambda_rec, config.beta)?;
            losses.push(l);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l)?;
        }
        let loss = g.scale(total, 1.0 / losses.len() as f64);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("tokenizer loss is {value}"),
            });
        }
        curve.push(value);

        let grads = g.backward(loss)?;
        let pg = grads.params(tok.params());
        let adam = AdamConfig {
            lr: cosine_lr(training.lr, training.lr_final_fraction, step, training.steps),
            clip_norm: Some(training.clip_norm),
            ..AdamConfig::default()
        };
        tok.params_mut().adam_step(&pg, &adam).map_err(|e| match e {
            Error::Training { reason, .. } => Error::Training { step, reason },
            other => other,
        })?;
        tok.codebook_mut()
            .ema_update(&batch_latents, &assignments, config.ema_decay)?;
        if training.dead_code_resets && step > 0 && step % config.reset_every == 0 {
            total_resets += tok
                .codebook_mut()
                .reset_dead_codes(&batch_latents, config.dead_threshold, &mut rng)?;
        }
    }

    let usage_fraction = tok.codebook().usage_fraction();
    Ok((
        tok,
        TokenizerReport {
            loss_curve: curve,
            usage_fraction,
            total_resets,
        },
    ))
}

fn stack_rows<'a>(parts: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = 0;
    for p in parts {
        rows += p.rows();
        cols = p.cols();
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, cols], data)
}

fn random_crop(data: &[Tensor], lengths: &[usize], factor: usize, rng: &mut RngStream) -> Tensor {
    let seq = &data[rng.below(data.len())];
    let len = lengths[rng.below(lengths.len())];
    let t = seq.rows();
    if t <= len {
        return pad_actions(seq, factor);
    }
    let start = rng.below(t - len + 1);
    let d = seq.cols();
    Tensor::new(vec![len, d], seq.data()[start * d..(start + len) * d].to_vec()).expect("crop within bounds")
}
