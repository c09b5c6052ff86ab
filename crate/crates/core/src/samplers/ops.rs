use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numeric::RngStream;
use crate::transformer::{Logits, MaskedTransformer, MgtInput, Vocab};

/// Index of `max(e_n / τ + g_n)` with Gumbel noise `g_n = −ln(−ln u_n)`.
/// Entries at −∞ are never chosen; ties keep the lowest index.
pub fn gumbel_max_sample(logits: &[f64], temperature: f64, rng: &mut RngStream) -> Result<usize> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Parameter(format!("temperature {temperature} must be positive")));
    }
    if logits.is_empty() {
        return Err(Error::Parameter("empty logit vector".into()));
    }
    let mut best = None;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &e) in logits.iter().enumerate() {
        // one draw per entry keeps the stream position independent of the values
        let g = -(-rng.open01().ln()).ln();
        if e == f64::NEG_INFINITY {
            continue;
        }
        let v = e / temperature + g;
        if best.is_none() || v > best_val {
            best = Some(i);
            best_val = v;
        }
    }
    best.ok_or_else(|| Error::Parameter("every logit is −∞".into()))
}

/// Softmax probability of `token` at `pos`; zero for MASK.
pub fn token_score(logits: &Logits, pos: usize, token: usize) -> f64 {
    let Some(class) = logits.vocab().class_of(token) else {
        return 0.0;
    };
    let row = logits.row(pos);
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    (row[class] - max).exp() / sum
}

/// Per-position confidence of the current tokens; `None` marks positions
/// outside the ranking set (executed prefix, PAD tail).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceScores {
    pub scores: Vec<Option<f64>>,
}

impl ConfidenceScores {
    pub fn ranked(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.scores.iter().enumerate().filter_map(|(i, s)| s.map(|s| (i, s)))
    }

    pub fn mean(&self) -> Option<f64> {
        let (n, sum) = self.ranked().fold((0, 0.0), |(n, s), (_, v)| (n + 1, s + v));
        (n > 0).then(|| sum / n as f64)
    }
}

/// Number of positions to mask: `floor(ratio · pending)`, at least one when
/// both are positive.
pub fn remask_count(pending: usize, ratio: f64) -> usize {
    if pending == 0 || ratio <= 0.0 {
        return 0;
    }
    ((ratio * pending as f64).floor() as usize).clamp(1, pending)
}

/// Masks the `remask_count` lowest-scored ranked positions (highest with
/// `highest`); ties mask the earlier position first.
pub fn score_and_remask(scores: &ConfidenceScores, ratio: f64, highest: bool) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Parameter(format!("remask ratio {ratio} outside [0, 1]")));
    }
    let mut ranked: Vec<(usize, f64)> = scores.ranked().collect();
    let k = remask_count(ranked.len(), ratio);
    ranked.sort_by(|a, b| {
        let by_score = a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal);
        let by_score = if highest { by_score.reverse() } else { by_score };
        by_score.then(a.0.cmp(&b.0))
    });
    let mut mask = vec![false; scores.scores.len()];
    for &(i, _) in &ranked[..k] {
        mask[i] = true;
    }
    Ok(mask)
}

/// Counts forward passes; every transformer evaluation during sampling goes
/// through here.
#[derive(Debug)]
pub struct InferenceSession<'a> {
    model: &'a MaskedTransformer,
    passes: usize,
    scoring_passes: usize,
}

impl<'a> InferenceSession<'a> {
    pub fn new(model: &'a MaskedTransformer) -> Self {
        InferenceSession {
            model,
            passes: 0,
            scoring_passes: 0,
        }
    }

    pub fn model(&self) -> &'a MaskedTransformer {
        self.model
    }

    pub fn vocab(&self) -> Vocab {
        self.model.vocab()
    }

    pub fn forward(&mut self, input: &MgtInput) -> Result<Logits> {
        self.passes += 1;
        let mut out = self.model.forward_logits(std::slice::from_ref(input))?;
        Ok(out.remove(0))
    }

    /// Total forward passes so far.
    pub fn passes(&self) -> usize {
        self.passes
    }

    /// Passes spent on posterior confidence.
    pub fn scoring_passes(&self) -> usize {
        self.scoring_passes
    }

    /// Posterior confidence of `input.tokens` under the input's context: one
    /// forward pass with the whole buffer visible. Only positions where
    /// `rank[i]` holds are scored.
    pub fn posterior_confidence(&mut self, input: &MgtInput, rank: &[bool]) -> Result<ConfidenceScores> {
        if rank.len() != input.tokens.len() {
            return Err(Error::Shape("ranking flags do not match the token buffer".into()));
        }
        let logits = self.forward(input)?;
        self.scoring_passes += 1;
        let scores = input
            .tokens
            .iter()
            .zip(rank)
            .enumerate()
            .map(|(i, (&t, &r))| r.then(|| token_score(&logits, i, t)))
            .collect();
        Ok(ConfidenceScores { scores })
    }
}

/// Draws a prediction class at `pos` with PAD excluded and returns its token.
pub fn sample_token(logits: &Logits, pos: usize, temperature: f64, rng: &mut RngStream) -> Result<usize> {
    let vocab = logits.vocab();
    let mut row = logits.row(pos).to_vec();
    let pad = vocab.class_of(vocab.pad()).expect("PAD has a class");
    row[pad] = f64::NEG_INFINITY;
    let class = gumbel_max_sample(&row, temperature, rng)?;
    Ok(vocab.token_of(class))
}
