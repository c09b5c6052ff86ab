//! VQ-VAE action tokenizer: strided 1-D conv encoder, EMA codebook, and a
//! mirrored upsampling decoder. Every `factor()` actions map to one token.

mod codebook;
mod train;

pub use codebook::{Codebook, LatentGrid};
pub use train::{train_tokenizer, TokenizerReport, TokenizerTraining};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, ParameterStore, RngStream, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Relu,
}

impl Activation {
    pub(crate) fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Silu => g.silu(x),
            Activation::Relu => g.relu(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub codebook_size: usize,
    pub code_dim: usize,
    pub action_dim: usize,
    pub channels: usize,
    pub kernel: usize,
    pub down_blocks: usize,
    pub down_rate: usize,
    pub activation: Activation,
    pub lambda_rec: f64,
    pub beta: f64,
    pub ema_decay: f64,
    pub dead_threshold: f64,
    pub reset_every: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            codebook_size: 1024,
            code_dim: 16,
            action_dim: 2,
            channels: 64,
            kernel: 3,
            down_blocks: 2,
            down_rate: 2,
            activation: Activation::Silu,
            lambda_rec: 1.0,
            beta: 0.02,
            ema_decay: 0.99,
            dead_threshold: 1e-3,
            reset_every: 50,
        }
    }
}

impl TokenizerConfig {
    /// Actions per token.
    pub fn factor(&self) -> usize {
        self.down_rate.pow(self.down_blocks as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("tokenizer: {m}")));
        if self.codebook_size < 2 {
            return bad("codebook_size must be at least 2");
        }
        if self.code_dim == 0 || self.action_dim == 0 || self.channels == 0 {
            return bad("dimensions must be positive");
        }
        if self.kernel.is_multiple_of(2) {
            return bad("kernel must be odd for same padding");
        }
        if self.down_rate < 2 || self.down_blocks == 0 {
            return bad("need at least one downsampling block with rate >= 2");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if self.reset_every == 0 {
            return bad("reset_every must be positive");
        }
        Ok(())
    }
}

/// Pads `actions` by repeating the last row until the length is a multiple of
/// `factor`.
pub fn pad_actions(actions: &Tensor, factor: usize) -> Tensor {
    let t = actions.rows();
    let rem = t % factor;
    if rem == 0 {
        return actions.clone();
    }
    let mut data = actions.data().to_vec();
    let last = actions.row(t - 1).to_vec();
    for _ in 0..factor - rem {
        data.extend_from_slice(&last);
    }
    Tensor::new(vec![t + factor - rem, actions.cols()], data).expect("consistent shape")
}

/// Frozen or in-training tokenizer weights plus codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTokenizer {
    config: TokenizerConfig,
    params: ParameterStore,
    codebook: Codebook,
}

fn conv_params(store: &mut ParameterStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut RngStream) {
    store.insert_xavier(format!("{name}.w"), &[cout, cin, k], cin * k, cout * k, rng);
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn conv(g: &mut Graph, store: &ParameterStore, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    let y = g.conv1d(x, w, stride, pad)?;
    g.add_col(y, b)
}

impl ActionTokenizer {
    /// Fresh weights; the codebook holds random codes until training replaces
    /// it with encoder outputs.
    pub fn init(config: TokenizerConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let k = config.kernel;
        let mut p = ParameterStore::new();
        conv_params(&mut p, "enc.in", config.action_dim, c, k, rng);
        for b in 0..config.down_blocks {
            conv_params(&mut p, &format!("enc.res{b}.c1"), c, c, k, rng);
            conv_params(&mut p, &format!("enc.res{b}.c2"), c, c, k, rng);
            conv_params(&mut p, &format!("enc.down{b}"), c, c, config.down_rate, rng);
        }
        conv_params(&mut p, "enc.out", c, config.code_dim, 1, rng);
        conv_params(&mut p, "dec.in", config.code_dim, c, k, rng);
        for b in 0..config.down_blocks {
            conv_params(&mut p, &format!("dec.up{b}"), c, c, k, rng);
            conv_params(&mut p, &format!("dec.res{b}.c1"), c, c, k, rng);
            conv_params(&mut p, &format!("dec.res{b}.c2"), c, c, k, rng);
        }
        conv_params(&mut p, "dec.out", c, config.action_dim, k, rng);
        let mut codes = ParameterStore::new();
        codes.insert_xavier(
            "codes",
            &[config.codebook_size, config.code_dim],
            1,
            config.code_dim,
            rng,
        );
        let codebook = Codebook::new(codes.get("codes").expect("inserted").clone())?;
        Ok(ActionTokenizer {
            config,
            params: p,
            codebook,
        })
    }

    pub fn from_parts(config: TokenizerConfig, params: ParameterStore, codebook: Codebook) -> Result<Self> {
        config.validate()?;
        if codebook.len() != config.codebook_size || codebook.dim() != config.code_dim {
            return Err(Error::Compatibility(format!(
                "codebook is {}×{}, config expects {}×{}",
                codebook.len(),
                codebook.dim(),
                config.codebook_size,
                config.code_dim
            )));
        }
        let reference = Self::init(config.clone(), &mut RngStream::new(0, 0))?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(Error::Compatibility(format!(
                        "tokenizer parameter `{name}` missing or misshapen"
                    )))
                }
            }
        }
        Ok(ActionTokenizer {
            config,
            params,
            codebook,
        })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub(crate) fn codebook_mut(&mut self) -> &mut Codebook {
        &mut self.codebook
    }

    fn res_block(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let pad = self.config.kernel / 2;
        let act = self.config.activation;
        let h = act.apply(g, x);
        let h = conv(g, &self.params, &format!("{name}.c1"), h, 1, pad)?;
        let h = act.apply(g, h);
        let h = conv(g, &self.params, &format!("{name}.c2"), h, 1, pad)?;
        g.add(x, h)
    }

    /// Records the encoder on `g`: `[T×j]` actions to `[N×d]` latents.
    pub fn encode_graph(&self, g: &mut Graph, actions: Var) -> Result<Var> {
        let shape = g.value(actions).shape().to_vec();
        self.check_actions(&shape)?;
        let pad = self.config.kernel / 2;
        let act = self.config.activation;
        let x = g.transpose(actions)?;
        let mut h = conv(g, &self.params, "enc.in", x, 1, pad)?;
        for b in 0..self.config.down_blocks {
            h = self.res_block(g, &format!("enc.res{b}"), h)?;
            h = conv(g, &self.params, &format!("enc.down{b}"), h, self.config.down_rate, 0)?;
        }
        let h = act.apply(g, h);
        let z = conv(g, &self.params, "enc.out", h, 1, 0)?;
        g.transpose(z)
    }

    /// Records the decoder on `g`: `[N×d]` code vectors to `[T×j]` actions.
    pub fn decode_graph(&self, g: &mut Graph, codes: Var) -> Result<Var> {
        let pad = self.config.kernel / 2;
        let act = self.config.activation;
        let x = g.transpose(codes)?;
        let mut h = conv(g, &self.params, "dec.in", x, 1, pad)?;
        for b in 0..self.config.down_blocks {
            h = g.upsample(h, self.config.down_rate)?;
            h = conv(g, &self.params, &format!("dec.up{b}"), h, 1, pad)?;
            h = self.res_block(g, &format!("dec.res{b}"), h)?;
        }
        let h = act.apply(g, h);
        let y = conv(g, &self.params, "dec.out", h, 1, pad)?;
        g.transpose(y)
    }

    fn check_actions(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.config.action_dim {
            return Err(Error::Shape(format!(
                "expected actions of shape [T×{}], got {shape:?}",
                self.config.action_dim
            )));
        }
        let f = self.config.factor();
        if !shape[0].is_multiple_of(f) {
            return Err(Error::Shape(format!(
                "sequence length {} is not a multiple of {f}; pad by repeating the last action",
                shape[0]
            )));
        }
        Ok(())
    }

    pub fn encode(&self, actions: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let a = g.constant(actions.clone());
        let z = self.encode_graph(&mut g, a)?;
        Ok(g.value(z).clone())
    }

    pub fn quantize(&self, latents: &Tensor) -> Result<LatentGrid> {
        self.codebook.quantize(latents)
    }

    /// Decodes codebook ids; special token ids are a contract error.
    pub fn decode(&self, indices: &[usize]) -> Result<Tensor> {
        let codes = self.codebook.lookup(indices)?;
        let mut g = Graph::inference();
        let c = g.constant(codes);
        let y = self.decode_graph(&mut g, c)?;
        Ok(g.value(y).clone())
    }

    pub fn tokenize(&self, actions: &Tensor) -> Result<Vec<usize>> {
        Ok(self.quantize(&self.encode(actions)?)?.indices)
    }

    pub fn reconstruct(&self, actions: &Tensor) -> Result<Tensor> {
        self.decode(&self.tokenize(actions)?)
    }

    /// Code of a chunk inside a long run of zero actions.
    pub fn idle_code(&self) -> Result<usize> {
        let f = self.config.factor();
        let zeros = Tensor::zeros(&[8 * f, self.config.action_dim]);
        Ok(self.tokenize(&zeros)?[4])
    }
}

/// `λ_rec·mean|a−â| + β·mean_n‖ŷ_n − sg[y_n]‖²`. `quantized` enters as a
/// constant so no gradient reaches the codebook.
pub fn vq_loss(
    g: &mut Graph,
    actions: Var,
    recon: Var,
    latents: Var,
    quantized: &Tensor,
    lambda_rec: f64,
    beta: f64,
) -> Result<Var> {
    let diff = g.sub(recon, actions)?;
    let abs = g.abs(diff);
    let rec = g.mean(abs);
    let q = g.constant(quantized.clone());
    let dz = g.sub(latents, q)?;
    let sq = g.mul(dz, dz)?;
    let total = g.sum(sq);
    let rows = quantized.rows() as f64;
    let commit = g.scale(total, beta / rows);
    let rec = g.scale(rec, lambda_rec);
    g.add(rec, commit)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TokenizerConfig {
        TokenizerConfig {
            codebook_size: 8,
            code_dim: 4,
            channels: 6,
            ..TokenizerConfig::default()
        }
    }

    #[test]
    fn encode_shapes() {
        let tok = ActionTokenizer::init(TokenizerConfig::default(), &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(tok.encode(&Tensor::zeros(&[8, 2])).unwrap().shape(), &[2, 16]);
        assert_eq!(tok.encode(&Tensor::zeros(&[4, 2])).unwrap().shape(), &[1, 16]);
    }

    #[test]
    fn encode_rejects_unpadded_length() {
        let tok = ActionTokenizer::init(small(), &mut RngStream::new(0, 0)).unwrap();
        let err = tok.encode(&Tensor::zeros(&[6, 2])).unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
    }

    #[test]
    fn decode_two_tokens_gives_eight_actions() {
        let tok = ActionTokenizer::init(small(), &mut RngStream::new(0, 0)).unwrap();
        let a = tok.decode(&[0, 3]).unwrap();
        assert_eq!(a.shape(), &[8, 2]);
        assert_eq!(a, tok.decode(&[0, 3]).unwrap());
        assert!(matches!(tok.decode(&[8]), Err(Error::Contract(_))));
    }

    #[test]
    fn pad_repeats_last_action() {
        let a = Tensor::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]]).unwrap();
        let p = pad_actions(&a, 4);
        assert_eq!(p.rows(), 4);
        assert_eq!(p.row(3), &[0.5, 0.6]);
    }

    #[test]
    fn vq_loss_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let r = g.constant(Tensor::new(vec![1, 2], vec![1.5, 2.5]).unwrap());
        let y = Tensor::new(vec![1, 2], vec![0.3, 0.1]).unwrap();
        let z = g.constant(y.clone());
        let l = vq_loss(&mut g, a, r, z, &y, 1.0, 0.02).unwrap();
        assert!((g.value(l).item() - 0.5).abs() < 1e-15);
        let l0 = vq_loss(&mut g, a, a, z, &y, 1.0, 0.02).unwrap();
        assert_eq!(g.value(l0).item(), 0.0);
    }

    #[test]
    fn commitment_gradient_only_reaches_latents() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[4, 2]));
        let y = Tensor::new(vec![1, 3], vec![0.5, -0.5, 1.0]).unwrap();
        let z = g.variable(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap());
        let l = vq_loss(&mut g, a, a, z, &y, 1.0, 0.02).unwrap();
        let grads = g.backward(l).unwrap();
        let dz = grads.get(z).unwrap();
        // d/dz β·‖z−y‖² = 2β(z−y)
        assert!((dz.data()[0] + 0.02).abs() < 1e-15);
        assert!((dz.data()[2] + 0.04).abs() < 1e-15);
    }
}
