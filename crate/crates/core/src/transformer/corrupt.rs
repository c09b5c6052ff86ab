use serde::{Deserialize, Serialize};

use super::Vocab;
use crate::error::{Error, Result};
use crate::numeric::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSpec {
    /// Mask ratio is drawn uniformly from `[ratio_min, ratio_max]` per sample.
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// Fraction of visible code tokens replaced by random codes.
    pub perturb: f64,
    /// Fraction of samples whose pending tokens from a random cut onward are
    /// taken from another demonstration before masking.
    pub splice: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec {
            ratio_min: 0.5,
            ratio_max: 1.0,
            perturb: 0.3,
            splice: 0.0,
        }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if !ok(self.ratio_min)
            || !ok(self.ratio_max)
            || self.ratio_min > self.ratio_max
            || !ok(self.perturb)
            || !ok(self.splice)
        {
            return Err(Error::Config(format!("invalid corruption spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corrupted {
    pub tokens: Vec<usize>,
    pub masked: Vec<bool>,
    pub perturbed: Vec<bool>,
}

impl Corrupted {
    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn perturbed_count(&self) -> usize {
        self.perturbed.iter().filter(|&&m| m).count()
    }
}

/// Masks each position at or after `executed` with probability `ratio`, then
/// replaces each still-visible code token, executed prefix included, by a
/// uniform random code with probability `perturb`. END and PAD can be masked
/// but are never perturbed; the executed prefix is never masked.
pub fn corrupt_with_ratio(
    tokens: &[usize],
    executed: usize,
    ratio: f64,
    perturb: f64,
    vocab: Vocab,
    rng: &mut RngStream,
) -> Result<Corrupted> {
    if tokens.contains(&vocab.mask()) {
        return Err(Error::Contract("tokens to corrupt already contain MASK".into()));
    }
    if !(0.0..=1.0).contains(&ratio) || !(0.0..=1.0).contains(&perturb) {
        return Err(Error::Parameter(format!(
            "ratio {ratio} / perturb {perturb} outside [0, 1]"
        )));
    }
    let mut out = tokens.to_vec();
    let mut masked = vec![false; tokens.len()];
    let mut perturbed = vec![false; tokens.len()];
    for i in 0..tokens.len() {
        // all draws are always taken so the stream position is data-independent
        let m = rng.uniform() < ratio && i >= executed;
        let p = rng.uniform() < perturb;
        let code = rng.below(vocab.codes());
        if m {
            out[i] = vocab.mask();
            masked[i] = true;
        } else if p && vocab.is_code(tokens[i]) {
            out[i] = code;
            perturbed[i] = true;
        }
    }
    Ok(Corrupted {
        tokens: out,
        masked,
        perturbed,
    })
}

/// `tokens` with the positions from a uniform cut in `[executed, len)` onward
/// copied from `donor`.
pub fn splice(tokens: &[usize], donor: &[usize], executed: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if donor.len() != tokens.len() {
        return Err(Error::Shape("splice donor length differs from the target".into()));
    }
    let mut out = tokens.to_vec();
    if executed < tokens.len() {
        let cut = executed + rng.below(tokens.len() - executed);
        out[cut..].copy_from_slice(&donor[cut..]);
    }
    Ok(out)
}

/// Draws a ratio from `spec` and corrupts. Returns the ratio used.
pub fn corrupt(
    tokens: &[usize],
    executed: usize,
    spec: &CorruptionSpec,
    vocab: Vocab,
    rng: &mut RngStream,
) -> Result<(Corrupted, f64)> {
    let ratio = spec.ratio_min + (spec.ratio_max - spec.ratio_min) * rng.uniform();
    Ok((
        corrupt_with_ratio(tokens, executed, ratio, spec.perturb, vocab, rng)?,
        ratio,
    ))
}
