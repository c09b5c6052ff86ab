use serde::{Deserialize, Serialize};

use super::Vocab;
use crate::error::{Error, Result};
use crate::numeric::{Graph, ParameterStore, RngStream, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub codebook_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub cross_layers: usize,
    pub self_layers: usize,
    pub ff_mult: usize,
    /// Longest token sequence the positional table covers.
    pub max_tokens: usize,
    /// Observation history length in the conditioning window.
    pub history: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub perception_hidden: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            codebook_size: 1024,
            d_model: 128,
            heads: 1,
            cross_layers: 2,
            self_layers: 2,
            ff_mult: 2,
            max_tokens: 32,
            history: 4,
            obs_dim: 8,
            state_dim: 2,
            perception_hidden: 64,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("transformer: {m}")));
        if self.codebook_size < 2 {
            return bad("codebook_size must be at least 2");
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return bad("d_model must be positive and even");
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("heads must divide d_model");
        }
        if self.max_tokens == 0 || self.history == 0 {
            return bad("max_tokens and history must be positive");
        }
        if self.obs_dim == 0 || self.state_dim == 0 || self.perception_hidden == 0 || self.ff_mult == 0 {
            return bad("dimensions must be positive");
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.codebook_size)
    }
}

/// One conditioning window plus a (possibly corrupted) token buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct MgtInput {
    pub tokens: Vec<usize>,
    /// Length of the executed prefix; those positions get the history embedding.
    pub executed: usize,
    /// `[history × obs_dim]`, oldest first.
    pub observations: Tensor,
    /// `[history × state_dim]`, oldest first.
    pub states: Tensor,
    /// Positional ids; `None` means `0..len`.
    pub positions: Option<Vec<usize>>,
}

/// Per-position class logits; class `c < K` is code `c`, then END, then PAD.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    values: Tensor,
    vocab: Vocab,
}

impl Logits {
    pub fn new(values: Tensor, vocab: Vocab) -> Result<Self> {
        if values.rank() != 2 || values.cols() != vocab.classes() {
            return Err(Error::dim("logits", values.shape(), &[0, vocab.classes()]));
        }
        Ok(Logits { values, vocab })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    /// Raw class logits at `pos`.
    pub fn row(&self, pos: usize) -> &[f64] {
        self.values.row(pos)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Logit of `token` at `pos`; MASK (never a prediction target) is −∞.
    pub fn token_logit(&self, pos: usize, token: usize) -> f64 {
        match self.vocab.class_of(token) {
            Some(c) => self.values.get(pos, c),
            None => f64::NEG_INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTransformer {
    config: TransformerConfig,
    params: ParameterStore,
}

fn linear_params(p: &mut ParameterStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut RngStream) {
    p.insert_xavier(format!("{name}.w"), &[fan_in, fan_out], fan_in, fan_out, rng);
    p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

fn ln_params(p: &mut ParameterStore, name: &str, d: usize) {
    p.insert(format!("{name}.g"), Tensor::ones(&[d]));
    p.insert(format!("{name}.b"), Tensor::zeros(&[d]));
}

impl MaskedTransformer {
    pub fn init(config: TransformerConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let h = config.perception_hidden;
        let vocab = config.vocab();
        let mut p = ParameterStore::new();
        p.insert_xavier("tok_emb", &[vocab.size(), d], vocab.size(), d, rng);
        p.insert_xavier("pos_emb", &[config.max_tokens, d], config.max_tokens, d, rng);
        p.insert_xavier("exec_emb", &[2, d], 2, d, rng);
        p.insert_xavier("ctx_pos", &[config.history, d], config.history, d, rng);
        linear_params(&mut p, "perc.obs.l1", config.obs_dim, h, rng);
        linear_params(&mut p, "perc.obs.l2", h, d / 2, rng);
        linear_params(&mut p, "perc.state.l1", config.state_dim, h, rng);
        linear_params(&mut p, "perc.state.l2", h, d / 2, rng);
        ln_params(&mut p, "ctx_ln", d);
        let blocks = (0..config.cross_layers)
            .map(|i| format!("cross{i}"))
            .chain((0..config.self_layers).map(|i| format!("self{i}")));
        for b in blocks {
            ln_params(&mut p, &format!("{b}.ln1"), d);
            for proj in ["q", "k", "v", "o"] {
                linear_params(&mut p, &format!("{b}.{proj}"), d, d, rng);
            }
            ln_params(&mut p, &format!("{b}.ln2"), d);
            linear_params(&mut p, &format!("{b}.ff1"), d, d * config.ff_mult, rng);
            linear_params(&mut p, &format!("{b}.ff2"), d * config.ff_mult, d, rng);
        }
        ln_params(&mut p, "out_ln", d);
        linear_params(&mut p, "head", d, vocab.classes(), rng);
        Ok(MaskedTransformer { config, params: p })
    }

    pub fn from_parts(config: TransformerConfig, params: ParameterStore) -> Result<Self> {
        let reference = Self::init(config.clone(), &mut RngStream::new(0, 0))?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(Error::Compatibility(format!(
                        "transformer parameter `{name}` missing or misshapen"
                    )))
                }
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Compatibility("unexpected transformer parameters".into()));
        }
        Ok(MaskedTransformer { config, params })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    fn linear(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let w = g.param(&self.params, &format!("{name}.w"))?;
        let b = g.param(&self.params, &format!("{name}.b"))?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let gamma = g.param(&self.params, &format!("{name}.g"))?;
        let beta = g.param(&self.params, &format!("{name}.b"))?;
        g.layer_norm(x, gamma, beta)
    }

    fn block(&self, g: &mut Graph, name: &str, x: Var, ctx: Option<Var>, batch: usize) -> Result<Var> {
        let h = self.norm(g, &format!("{name}.ln1"), x)?;
        let kv_src = ctx.unwrap_or(h);
        let q = self.linear(g, &format!("{name}.q"), h)?;
        let k = self.linear(g, &format!("{name}.k"), kv_src)?;
        let v = self.linear(g, &format!("{name}.v"), kv_src)?;
        let a = g.attention(q, k, v, batch, self.config.heads)?;
        let a = self.linear(g, &format!("{name}.o"), a)?;
        let x = g.add(x, a)?;
        let h = self.norm(g, &format!("{name}.ln2"), x)?;
        let h = self.linear(g, &format!("{name}.ff1"), h)?;
        let h = g.silu(h);
        let h = self.linear(g, &format!("{name}.ff2"), h)?;
        g.add(x, h)
    }

    fn check_input(&self, input: &MgtInput, len: usize) -> Result<()> {
        let cfg = &self.config;
        if input.tokens.len() != len {
            return Err(Error::Shape(format!(
                "batch mixes sequence lengths {len} and {}",
                input.tokens.len()
            )));
        }
        if input.tokens.len() > cfg.max_tokens {
            return Err(Error::Capacity {
                len: input.tokens.len(),
                max: cfg.max_tokens,
            });
        }
        if let Some(&bad) = input.tokens.iter().find(|&&t| t >= self.vocab().size()) {
            return Err(Error::Shape(format!("token id {bad} outside vocabulary")));
        }
        if input.observations.shape() != [cfg.history, cfg.obs_dim] {
            return Err(Error::Shape(format!(
                "observation window {:?}, expected [{}, {}]",
                input.observations.shape(),
                cfg.history,
                cfg.obs_dim
            )));
        }
        if input.states.shape() != [cfg.history, cfg.state_dim] {
            return Err(Error::Shape(format!(
                "state window {:?}, expected [{}, {}]",
                input.states.shape(),
                cfg.history,
                cfg.state_dim
            )));
        }
        if let Some(p) = &input.positions {
            if p.len() != len || p.iter().any(|&i| i >= cfg.max_tokens) {
                return Err(Error::Shape("positional ids do not match the sequence".into()));
            }
        }
        Ok(())
    }

    /// Perception encoder: `[B·history × d_model]` context rows.
    pub fn context_graph(&self, g: &mut Graph, batch: &[MgtInput]) -> Result<Var> {
        let obs: Vec<Vec<f64>> = batch
            .iter()
            .flat_map(|b| (0..b.observations.rows()).map(|r| b.observations.row(r).to_vec()))
            .collect();
        let states: Vec<Vec<f64>> = batch
            .iter()
            .flat_map(|b| (0..b.states.rows()).map(|r| b.states.row(r).to_vec()))
            .collect();
        let o = g.constant(Tensor::from_rows(&obs)?);
        let s = g.constant(Tensor::from_rows(&states)?);
        let o = self.linear(g, "perc.obs.l1", o)?;
        let o = g.silu(o);
        let o = self.linear(g, "perc.obs.l2", o)?;
        let s = self.linear(g, "perc.state.l1", s)?;
        let s = g.silu(s);
        let s = self.linear(g, "perc.state.l2", s)?;
        let c = g.concat_cols(&[o, s])?;
        let pos: Vec<usize> = (0..batch.len()).flat_map(|_| 0..self.config.history).collect();
        let table = g.param(&self.params, "ctx_pos")?;
        let pe = g.gather(table, &pos)?;
        let c = g.add(c, pe)?;
        self.norm(g, "ctx_ln", c)
    }

    /// Records the full forward pass; returns `[B·N × classes]` logits.
    pub fn forward_graph(&self, g: &mut Graph, batch: &[MgtInput]) -> Result<Var> {
        let first = batch.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let n = first.tokens.len();
        if n == 0 {
            return Err(Error::Shape("empty token sequence".into()));
        }
        for b in batch {
            self.check_input(b, n)?;
        }
        let ids: Vec<usize> = batch.iter().flat_map(|b| b.tokens.iter().copied()).collect();
        let pos: Vec<usize> = batch
            .iter()
            .flat_map(|b| b.positions.clone().unwrap_or_else(|| (0..n).collect()))
            .collect();
        let flags: Vec<usize> = batch
            .iter()
            .flat_map(|b| (0..n).map(move |i| usize::from(i < b.executed)))
            .collect();
        let tok_table = g.param(&self.params, "tok_emb")?;
        let pos_table = g.param(&self.params, "pos_emb")?;
        let exec_table = g.param(&self.params, "exec_emb")?;
        let te = g.gather(tok_table, &ids)?;
        let pe = g.gather(pos_table, &pos)?;
        let ee = g.gather(exec_table, &flags)?;
        let x = g.add(te, pe)?;
        let mut x = g.add(x, ee)?;
        let ctx = self.context_graph(g, batch)?;
        for i in 0..self.config.cross_layers {
            x = self.block(g, &format!("cross{i}"), x, Some(ctx), batch.len())?;
        }
        for i in 0..self.config.self_layers {
            x = self.block(g, &format!("self{i}"), x, None, batch.len())?;
        }
        let x = self.norm(g, "out_ln", x)?;
        self.linear(g, "head", x)
    }

    /// Inference forward pass for each input (no gradient bookkeeping).
    pub fn forward_logits(&self, batch: &[MgtInput]) -> Result<Vec<Logits>> {
        let mut g = Graph::inference();
        let out = self.forward_graph(&mut g, batch)?;
        let n = batch[0].tokens.len();
        let classes = self.vocab().classes();
        let all = g.value(out);
        batch
            .iter()
            .enumerate()
            .map(|(b, _)| {
                let rows = all.data()[b * n * classes..(b + 1) * n * classes].to_vec();
                Logits::new(Tensor::new(vec![n, classes], rows)?, self.vocab())
            })
            .collect()
    }
}
