//! Conditional masked token transformer: a perception encoder over an
//! observation/state window, cross-attention into that context, then
//! bidirectional self-attention over the token buffer.

mod corrupt;
mod data;
mod model;
mod train;
mod vocab;

pub use corrupt::{corrupt, corrupt_with_ratio, splice, Corrupted, CorruptionSpec};
pub use data::{long_target, window, ExampleSource, ExampleSpec, MgtExample, PlanMode};
pub use model::{Logits, MaskedTransformer, MgtInput, TransformerConfig};
pub use train::{check_compatible, train_mgt, train_mgt_observed, MgtReport, MgtTraining};
pub use vocab::Vocab;

use crate::error::{Error, Result};
use crate::numeric::{CrossEntropyOut, Graph, Var};

/// Mean cross-entropy over non-PAD targets; with `masked` given, only masked
/// positions count.
pub fn mgt_loss(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    masked: Option<&[bool]>,
    vocab: Vocab,
) -> Result<CrossEntropyOut> {
    if let Some(m) = masked {
        if m.len() != targets.len() {
            return Err(Error::Shape("mask and targets differ in length".into()));
        }
    }
    let classes: Vec<Option<usize>> = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if t == vocab.pad() || masked.is_some_and(|m| !m[i]) {
                None
            } else {
                vocab.class_of(t)
            }
        })
        .collect();
    if targets.iter().any(|&t| t == vocab.mask() || t >= vocab.size()) {
        return Err(Error::Contract("loss targets must be codes, END or PAD".into()));
    }
    g.cross_entropy(logits, &classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{RngStream, Tensor};

    fn tiny() -> TransformerConfig {
        TransformerConfig {
            codebook_size: 6,
            d_model: 8,
            heads: 2,
            max_tokens: 6,
            history: 2,
            obs_dim: 3,
            state_dim: 2,
            perception_hidden: 5,
            ..TransformerConfig::default()
        }
    }

    fn input(tokens: Vec<usize>, executed: usize) -> MgtInput {
        MgtInput {
            tokens,
            executed,
            observations: Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(),
            states: Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.6, 0.4]).unwrap(),
            positions: None,
        }
    }

    #[test]
    fn mask_logit_is_negative_infinity() {
        let m = MaskedTransformer::init(tiny(), &mut RngStream::new(0, 0)).unwrap();
        let v = m.vocab();
        let l = &m.forward_logits(&[input(vec![v.mask(); 4], 0)]).unwrap()[0];
        for p in 0..4 {
            assert_eq!(l.token_logit(p, v.mask()), f64::NEG_INFINITY);
            assert!(l.token_logit(p, v.end()).is_finite());
        }
    }

    #[test]
    fn capacity_error_when_too_long() {
        let m = MaskedTransformer::init(tiny(), &mut RngStream::new(0, 0)).unwrap();
        let err = m.forward_logits(&[input(vec![0; 7], 0)]).unwrap_err();
        assert!(matches!(err, Error::Capacity { len: 7, max: 6 }));
    }

    #[test]
    fn zero_observations_give_finite_logits() {
        let m = MaskedTransformer::init(tiny(), &mut RngStream::new(0, 0)).unwrap();
        let mut x = input(vec![1, 2, 3], 1);
        x.observations = Tensor::zeros(&[2, 3]);
        x.states = Tensor::zeros(&[2, 2]);
        let l = &m.forward_logits(&[x.clone()]).unwrap()[0];
        assert!(l.values().is_finite());
        assert_eq!(l, &m.forward_logits(&[x]).unwrap()[0]);
    }

    #[test]
    fn positional_relabeling_permutes_logits() {
        let m = MaskedTransformer::init(tiny(), &mut RngStream::new(1, 0)).unwrap();
        let v = m.vocab();
        let toks = vec![1, v.mask(), 2, v.mask()];
        let base = &m.forward_logits(&[input(toks.clone(), 0)]).unwrap()[0];
        let mut swapped = input(toks, 0);
        swapped.positions = Some(vec![0, 3, 2, 1]);
        // swapping both the ids and their positions at slots 1 and 3 is a
        // pure relabeling of which row is which
        swapped.tokens = vec![1, v.mask(), 2, v.mask()];
        let s = &m.forward_logits(&[swapped]).unwrap()[0];
        for c in 0..v.classes() {
            assert!((s.row(1)[c] - base.row(3)[c]).abs() < 1e-12);
            assert!((s.row(3)[c] - base.row(1)[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_equals_single() {
        let m = MaskedTransformer::init(tiny(), &mut RngStream::new(2, 0)).unwrap();
        let a = input(vec![1, 2, 3], 1);
        let b = input(vec![4, 0, 5], 0);
        let both = m.forward_logits(&[a.clone(), b.clone()]).unwrap();
        let sa = m.forward_logits(&[a]).unwrap();
        let sb = m.forward_logits(&[b]).unwrap();
        assert!(both[0].values().max_abs_diff(sa[0].values()) < 1e-12);
        assert!(both[1].values().max_abs_diff(sb[0].values()) < 1e-12);
    }

    #[test]
    fn loss_examples() {
        let v = Vocab::new(3);
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[2, v.classes()]));
        let ce = mgt_loss(&mut g, l, &[0, v.end()], None, v).unwrap();
        assert!((g.value(ce.loss).item() - (v.classes() as f64).ln()).abs() < 1e-12);

        let pad_logits = |x: f64| {
            let mut g = Graph::new();
            let mut data = vec![0.0; 2 * v.classes()];
            data[v.classes()] = x;
            let l = g.constant(Tensor::new(vec![2, v.classes()], data).unwrap());
            let ce = mgt_loss(&mut g, l, &[1, v.pad()], None, v).unwrap();
            g.value(ce.loss).item()
        };
        assert_eq!(pad_logits(0.0), pad_logits(4.0));
    }
}
