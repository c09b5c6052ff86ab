use crate::error::{Error, Result};
use crate::numeric::{RngStream, Tensor};

/// Quantised latents for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub latents: Tensor,
    pub quantized: Tensor,
    pub indices: Vec<usize>,
}

/// Code vectors with EMA usage statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    codes: Tensor,
    ema_counts: Vec<f64>,
    ema_sums: Vec<f64>,
}

const EMA_EPS: f64 = 1e-9;

impl Codebook {
    pub fn new(codes: Tensor) -> Result<Self> {
        if codes.rank() != 2 || codes.rows() < 2 {
            return Err(Error::Config(format!(
                "codebook needs at least 2 codes of shape [K×d], got {:?}",
                codes.shape()
            )));
        }
        let (k, d) = (codes.rows(), codes.cols());
        Ok(Codebook {
            codes,
            ema_counts: vec![0.0; k],
            ema_sums: vec![0.0; k * d],
        })
    }

    pub fn with_stats(codes: Tensor, ema_counts: Vec<f64>, ema_sums: Vec<f64>) -> Result<Self> {
        let mut cb = Self::new(codes)?;
        if ema_counts.len() != cb.len() || ema_sums.len() != cb.codes.numel() {
            return Err(Error::Shape("codebook statistics do not match codes".into()));
        }
        if ema_counts.iter().any(|&c| c.is_nan() || c < 0.0) {
            return Err(Error::Shape("negative codebook usage".into()));
        }
        cb.ema_counts = ema_counts;
        cb.ema_sums = ema_sums;
        Ok(cb)
    }

    /// Codes drawn uniformly (with replacement) from `latents` rows.
    pub fn from_latents(k: usize, latents: &Tensor, rng: &mut RngStream) -> Result<Self> {
        if latents.rank() != 2 || latents.rows() == 0 {
            return Err(Error::Config("codebook init needs a non-empty latent batch".into()));
        }
        let d = latents.cols();
        let mut data = Vec::with_capacity(k * d);
        for _ in 0..k {
            data.extend_from_slice(latents.row(rng.below(latents.rows())));
        }
        Self::new(Tensor::new(vec![k, d], data)?)
    }

    pub fn len(&self) -> usize {
        self.codes.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    pub fn codes(&self) -> &Tensor {
        &self.codes
    }

    pub fn ema_counts(&self) -> &[f64] {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &[f64] {
        &self.ema_sums
    }

    /// Nearest code per latent row under squared Euclidean distance; ties go
    /// to the lowest index.
    pub fn quantize(&self, latents: &Tensor) -> Result<LatentGrid> {
        let d = self.dim();
        if latents.rank() != 2 || latents.cols() != d {
            return Err(Error::dim("quantize", latents.shape(), self.codes.shape()));
        }
        let codes = self.codes.data();
        let mut indices = Vec::with_capacity(latents.rows());
        let mut quantized = Vec::with_capacity(latents.numel());
        for r in 0..latents.rows() {
            let row = latents.row(r);
            let mut best = f64::INFINITY;
            let mut best_k = 0;
            for (k, code) in codes.chunks(d).enumerate() {
                let mut dist = 0.0;
                let mut pruned = false;
                for (x, c) in row.iter().zip(code) {
                    dist += (x - c) * (x - c);
                    // a partial sum already above the best cannot win
                    if dist > best {
                        pruned = true;
                        break;
                    }
                }
                if !pruned && dist < best {
                    best = dist;
                    best_k = k;
                }
            }
            indices.push(best_k);
            quantized.extend_from_slice(self.codes.row(best_k));
        }
        Ok(LatentGrid {
            latents: latents.clone(),
            quantized: Tensor::new(latents.shape().to_vec(), quantized)?,
            indices,
        })
    }

    /// Code rows for `indices`.
    pub fn lookup(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::Shape("no tokens to look up".into()));
        }
        let mut out = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Contract(format!(
                    "token id {i} is not a codebook entry (|K| = {})",
                    self.len()
                )));
            }
            out.extend_from_slice(self.codes.row(i));
        }
        Tensor::new(vec![indices.len(), self.dim()], out)
    }

    /// EMA update from latent rows and their assigned codes. Codes with no
    /// accumulated usage keep their current vector.
    pub fn ema_update(&mut self, latents: &Tensor, assignments: &[usize], decay: f64) -> Result<()> {
        let d = self.dim();
        if latents.rank() != 2 || latents.cols() != d || latents.rows() != assignments.len() {
            return Err(Error::dim("ema_update", latents.shape(), &[assignments.len(), d]));
        }
        let k = self.len();
        let mut counts = vec![0.0; k];
        let mut sums = vec![0.0; k * d];
        for (r, &a) in assignments.iter().enumerate() {
            if a >= k {
                return Err(Error::Contract(format!("assignment {a} outside codebook")));
            }
            counts[a] += 1.0;
            for (s, x) in sums[a * d..(a + 1) * d].iter_mut().zip(latents.row(r)) {
                *s += x;
            }
        }
        for c in 0..k {
            self.ema_counts[c] = decay * self.ema_counts[c] + (1.0 - decay) * counts[c];
            for j in 0..d {
                let s = &mut self.ema_sums[c * d + j];
                *s = decay * *s + (1.0 - decay) * sums[c * d + j];
            }
            if self.ema_counts[c] > 0.0 {
                let denom = self.ema_counts[c] + EMA_EPS;
                let sums = &self.ema_sums[c * d..(c + 1) * d];
                for (x, s) in self.codes.row_mut(c).iter_mut().zip(sums) {
                    *x = s / denom;
                }
            }
        }
        Ok(())
    }

    /// Replaces every code whose usage EMA is below `threshold` by a uniformly
    /// drawn latent row and clears its statistics. Returns the reset count.
    pub fn reset_dead_codes(&mut self, latents: &Tensor, threshold: f64, rng: &mut RngStream) -> Result<usize> {
        let d = self.dim();
        if latents.rank() != 2 || latents.cols() != d {
            return Err(Error::dim("reset_dead_codes", latents.shape(), self.codes.shape()));
        }
        let mut resets = 0;
        for c in 0..self.len() {
            if self.ema_counts[c] < threshold {
                let src = latents.row(rng.below(latents.rows())).to_vec();
                self.codes.row_mut(c).copy_from_slice(&src);
                self.ema_counts[c] = 0.0;
                self.ema_sums[c * d..(c + 1) * d].fill(0.0);
                resets += 1;
            }
        }
        Ok(resets)
    }

    /// Fraction of codes with strictly positive usage EMA.
    pub fn usage_fraction(&self) -> f64 {
        self.ema_counts.iter().filter(|&&c| c > 0.0).count() as f64 / self.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb(rows: &[Vec<f64>]) -> Codebook {
        Codebook::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    fn lat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn nearest_code_examples() {
        let c = cb(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert_eq!(c.quantize(&lat(&[vec![0.2, 0.1]])).unwrap().indices, vec![0]);
        let g = c.quantize(&lat(&[vec![1.0, 1.0]])).unwrap();
        assert_eq!(g.indices, vec![1]);
        assert_eq!(g.quantized.data(), &[1.0, 1.0]);
        assert_eq!(c.quantize(&lat(&[vec![0.5, 0.5]])).unwrap().indices, vec![0]);
    }

    #[test]
    fn single_code_is_a_config_error() {
        assert!(matches!(Codebook::new(Tensor::zeros(&[1, 2])), Err(Error::Config(_))));
    }

    #[test]
    fn lookup_rejects_special_ids() {
        let c = cb(&[vec![0.0], vec![1.0]]);
        assert!(matches!(c.lookup(&[2]), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_code_keeps_vector() {
        let mut c = cb(&[vec![0.0], vec![5.0]]);
        c.ema_update(&lat(&[vec![1.0]]), &[0], 0.9).unwrap();
        c.ema_update(&lat(&[vec![1.0]]), &[0], 0.9).unwrap();
        assert_eq!(c.codes().get(1, 0), 5.0);
        // ratio of sums and counts is preserved under pure decay
        let before = c.codes().get(0, 0);
        c.ema_update(&lat(&[vec![9.0]]), &[1], 0.9).unwrap();
        assert!((c.codes().get(0, 0) - before).abs() < 1e-9);
    }

    #[test]
    fn repeated_latent_converges() {
        let mut c = cb(&[vec![0.0, 0.0], vec![3.0, 3.0]]);
        for _ in 0..500 {
            c.ema_update(&lat(&[vec![0.4, -0.2]]), &[0], 0.99).unwrap();
        }
        assert!((c.codes().get(0, 0) - 0.4).abs() < 1e-6);
        assert!((c.codes().get(0, 1) + 0.2).abs() < 1e-6);
    }

    #[test]
    fn zero_decay_gives_batch_mean() {
        let mut c = cb(&[vec![0.0], vec![3.0]]);
        c.ema_update(&lat(&[vec![1.0], vec![2.0], vec![9.0]]), &[0, 0, 1], 0.0)
            .unwrap();
        assert!((c.codes().get(0, 0) - 1.5).abs() < 1e-8);
        assert!((c.codes().get(1, 0) - 9.0).abs() < 1e-8);
    }

    #[test]
    fn reset_thresholds() {
        let mut rng = RngStream::new(1, 0);
        let mut c = Codebook::with_stats(
            Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap(),
            vec![1.0, 1.0],
            vec![0.0, 1.0],
        )
        .unwrap();
        let before = c.clone();
        let batch = lat(&[vec![7.0], vec![8.0]]);
        assert_eq!(c.reset_dead_codes(&batch, 1e-3, &mut rng).unwrap(), 0);
        assert_eq!(c, before);
        assert_eq!(c.reset_dead_codes(&batch, f64::INFINITY, &mut rng).unwrap(), 2);
        assert!(c.codes().data().iter().all(|&v| v == 7.0 || v == 8.0));
        assert!(c.ema_counts().iter().all(|&v| v == 0.0));
    }
}
