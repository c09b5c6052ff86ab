use serde::{Deserialize, Serialize};

use super::Vocab;
use crate::env::Demonstration;
use crate::error::{Error, Result};
use crate::numeric::{RngStream, Tensor};
use crate::tokenizer::ActionTokenizer;

/// Which plan the model is trained to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    /// Full-horizon plan with an executed prefix.
    Long,
    /// Short chunk from the current window.
    Short,
}

impl PlanMode {
    pub fn name(self) -> &'static str {
        match self {
            PlanMode::Long => "long",
            PlanMode::Short => "short",
        }
    }
}

/// A clean training target with its conditioning window.
#[derive(Debug, Clone, PartialEq)]
pub struct MgtExample {
    pub tokens: Vec<usize>,
    pub executed: usize,
    pub observations: Tensor,
    pub states: Tensor,
}

/// The `history` rows ending at row `t` (oldest first); rows before 0 repeat row 0.
pub fn window(rows: &Tensor, t: usize, history: usize) -> Tensor {
    let t = t.min(rows.rows() - 1);
    let mut data = Vec::with_capacity(history * rows.cols());
    for k in 0..history {
        let r = (t + k + 1).saturating_sub(history);
        data.extend_from_slice(rows.row(r));
    }
    Tensor::new(vec![history, rows.cols()], data).expect("window shape")
}

/// Long-plan target: the first `active` codes, END, then PAD up to `len`.
/// Without room for END the codes fill the whole sequence.
pub fn long_target(codes: &[usize], active: usize, len: usize, vocab: Vocab, use_end: bool) -> Vec<usize> {
    if !use_end || active >= len {
        return codes[..len].to_vec();
    }
    let mut out = codes[..active].to_vec();
    out.push(vocab.end());
    out.resize(len, vocab.pad());
    out
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExampleSpec {
    /// Probability that a long example has an empty executed prefix.
    pub initial_fraction: f64,
    /// End long targets with END after the active part of the demo.
    pub use_end: bool,
    /// Tokens kept after the last one touching the active part, so the
    /// decoder sees how the motion settles.
    pub end_margin: usize,
    /// Fraction of long targets truncated at a random length with END.
    pub truncate_fraction: f64,
    /// Tokens in a short plan.
    pub short_tokens: usize,
}

impl Default for ExampleSpec {
    fn default() -> Self {
        ExampleSpec {
            initial_fraction: 0.3,
            use_end: true,
            end_margin: 1,
            truncate_fraction: 0.0,
            short_tokens: 2,
        }
    }
}

#[derive(Debug, Clone)]
struct TokenizedDemo {
    observations: Tensor,
    states: Tensor,
    codes: Vec<usize>,
    active: usize,
    /// Codes of the `short_tokens`-token chunk starting at each step.
    short: Vec<Vec<usize>>,
}

/// Draws training examples from tokenized demonstrations.
#[derive(Debug, Clone)]
pub struct ExampleSource {
    demos: Vec<TokenizedDemo>,
    mode: PlanMode,
    spec: ExampleSpec,
    factor: usize,
    history: usize,
    vocab: Vocab,
    seq_len: usize,
}

impl ExampleSource {
    pub fn new(
        demos: &[Demonstration],
        tokenizer: &ActionTokenizer,
        mode: PlanMode,
        spec: ExampleSpec,
        history: usize,
    ) -> Result<Self> {
        if demos.is_empty() {
            return Err(Error::Empty("no demonstrations for transformer training".into()));
        }
        let factor = tokenizer.config().factor();
        if spec.short_tokens == 0 {
            return Err(Error::Config("short_tokens must be positive".into()));
        }
        let vocab = Vocab::new(tokenizer.config().codebook_size);
        let horizon = demos[0].horizon();
        if demos.iter().any(|d| d.horizon() != horizon) || !horizon.is_multiple_of(factor) {
            return Err(Error::Shape(format!(
                "demonstrations must share a horizon divisible by {factor}"
            )));
        }
        let short_len = spec.short_tokens * factor;
        let mut out = Vec::with_capacity(demos.len());
        for d in demos {
            let codes = tokenizer.tokenize(&d.actions)?;
            let short = if mode == PlanMode::Short {
                (0..=horizon.saturating_sub(short_len))
                    .map(|t| {
                        let cols = d.actions.cols();
                        let chunk = Tensor::new(
                            vec![short_len, cols],
                            d.actions.data()[t * cols..(t + short_len) * cols].to_vec(),
                        )?;
                        tokenizer.tokenize(&chunk)
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            out.push(TokenizedDemo {
                observations: d.observations.clone(),
                states: d.states.clone(),
                active: (d.active_length().div_ceil(factor) + spec.end_margin).min(codes.len()),
                codes,
                short,
            });
        }
        let seq_len = match mode {
            PlanMode::Long => horizon / factor,
            PlanMode::Short => spec.short_tokens,
        };
        Ok(ExampleSource {
            demos: out,
            mode,
            spec,
            factor,
            history,
            vocab,
            seq_len,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn mode(&self) -> PlanMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    /// Clean long target of demo `i` (used for overfit checks).
    pub fn long_tokens(&self, i: usize) -> Vec<usize> {
        let d = &self.demos[i];
        long_target(&d.codes, d.active, self.seq_len, self.vocab, self.spec.use_end)
    }

    /// Example from demo `i` with an executed prefix of `executed` tokens.
    pub fn long_example(&self, i: usize, executed: usize) -> MgtExample {
        let d = &self.demos[i];
        let t = executed * self.factor;
        MgtExample {
            tokens: self.long_tokens(i),
            executed,
            observations: window(&d.observations, t, self.history),
            states: window(&d.states, t, self.history),
        }
    }

    /// Example from demo `i` for the short chunk starting at step `t`.
    pub fn short_example(&self, i: usize, t: usize) -> MgtExample {
        let d = &self.demos[i];
        let t = t.min(d.short.len() - 1);
        MgtExample {
            tokens: d.short[t].clone(),
            executed: 0,
            observations: window(&d.observations, t, self.history),
            states: window(&d.states, t, self.history),
        }
    }

    /// Clean tokens of a random example, used as a splice donor.
    pub fn donor(&self, rng: &mut RngStream) -> Vec<usize> {
        let i = rng.below(self.demos.len());
        match self.mode {
            PlanMode::Short => self.demos[i].short[rng.below(self.demos[i].short.len())].clone(),
            PlanMode::Long => self.long_tokens(i),
        }
    }

    pub fn sample(&self, rng: &mut RngStream) -> MgtExample {
        let i = rng.below(self.demos.len());
        match self.mode {
            PlanMode::Short => {
                let t = rng.below(self.demos[i].short.len());
                self.short_example(i, t)
            }
            PlanMode::Long => {
                let d = &self.demos[i];
                let initial = rng.bernoulli(self.spec.initial_fraction);
                let executed = if initial || d.active == 0 {
                    0
                } else {
                    1 + rng.below(d.active)
                };
                let mut ex = self.long_example(i, executed);
                if rng.bernoulli(self.spec.truncate_fraction) && self.seq_len > executed + 1 {
                    let cut = executed + 1 + rng.below(self.seq_len - executed - 1);
                    ex.tokens[cut] = self.vocab.end();
                    for t in &mut ex.tokens[cut + 1..] {
                        *t = self.vocab.pad();
                    }
                }
                ex
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_repeats_first_row() {
        let rows = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(window(&rows, 0, 3).data(), &[0.0, 0.0, 0.0]);
        assert_eq!(window(&rows, 1, 3).data(), &[0.0, 0.0, 1.0]);
        assert_eq!(window(&rows, 9, 2).data(), &[1.0, 2.0]);
    }

    #[test]
    fn long_target_layout() {
        let v = Vocab::new(10);
        let t = long_target(&[1, 2, 3, 4, 5], 2, 5, v, true);
        assert_eq!(t, vec![1, 2, v.end(), v.pad(), v.pad()]);
        assert_eq!(long_target(&[1, 2, 3], 3, 3, v, true), vec![1, 2, 3]);
        assert_eq!(long_target(&[1, 2, 3], 1, 3, v, false), vec![1, 2, 3]);
    }
}
