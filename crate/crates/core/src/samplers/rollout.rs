use serde::{Deserialize, Serialize};

use super::ops::{sample_token, score_and_remask, token_score, ConfidenceScores, InferenceSession};
use super::{MaskSelection, SamplerConfig, ScoringPolicy, Variant};
use crate::env::{DropoutEnv, Observation};
use crate::error::{Error, Result};
use crate::numeric::{RngStream, Tensor};
use crate::tokenizer::ActionTokenizer;
use crate::transformer::{window, MaskedTransformer, MgtInput, Vocab};

/// Observation and state rows seen so far; a withheld observation repeats
/// the last available one.
#[derive(Debug, Clone)]
pub struct ContextHistory {
    history: usize,
    obs: Vec<f64>,
    states: Vec<f64>,
    obs_dim: usize,
    state_dim: usize,
    last: Option<(Vec<f64>, Vec<f64>)>,
}

impl ContextHistory {
    pub fn new(history: usize, obs_dim: usize, state_dim: usize) -> Self {
        ContextHistory {
            history,
            obs: Vec::new(),
            states: Vec::new(),
            obs_dim,
            state_dim,
            last: None,
        }
    }

    pub fn push(&mut self, obs: &Observation, state: &[f64]) -> Result<()> {
        if obs.vector.len() != self.obs_dim || state.len() != self.state_dim {
            return Err(Error::Shape(format!(
                "observation {}/{} does not match the model's {}/{}",
                obs.vector.len(),
                state.len(),
                self.obs_dim,
                self.state_dim
            )));
        }
        if obs.available {
            self.last = Some((obs.vector.clone(), state.to_vec()));
        }
        let (o, s) = match &self.last {
            Some((o, s)) => (o.clone(), s.clone()),
            None => (obs.vector.clone(), state.to_vec()),
        };
        self.obs.extend(o);
        self.states.extend(s);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.obs.len() / self.obs_dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    /// `(observations, states)` windows ending at the latest row.
    pub fn window(&self) -> Result<(Tensor, Tensor)> {
        let t = self.len();
        if t == 0 {
            return Err(Error::Empty("no observations yet".into()));
        }
        let o = Tensor::new(vec![t, self.obs_dim], self.obs.clone())?;
        let s = Tensor::new(vec![t, self.state_dim], self.states.clone())?;
        Ok((window(&o, t - 1, self.history), window(&s, t - 1, self.history)))
    }
}

/// Why a rollout stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Success,
    /// Episode ended without success (wrong press or horizon reached).
    Failure,
    /// The plan ran out at an END token before the episode finished.
    EndToken,
    /// A sampler error cut the rollout short.
    Error,
}

/// One replan point (one plan for MGP-Short).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplanRecord {
    /// Environment step at which the replan happens.
    pub step: usize,
    /// Executed-prefix length in tokens.
    pub executed: usize,
    pub observed: bool,
    pub refined: bool,
    pub tokens_before: Vec<usize>,
    pub tokens_after: Vec<usize>,
    /// Scores used to rank pending tokens for the first remask.
    pub confidence: Vec<Option<f64>>,
    /// Positions masked in each refinement pass.
    pub masks: Vec<Vec<bool>>,
    /// Actions executed since the previous record.
    pub actions: Vec<[f64; 2]>,
    pub observation: Vec<f64>,
    pub passes: usize,
}

impl ReplanRecord {
    /// 0 unmasked, 1 masked in the first pass only, 2 masked in a later pass,
    /// 3 executed.
    pub fn mask_states(&self) -> Vec<u8> {
        (0..self.tokens_after.len())
            .map(|i| {
                if i < self.executed {
                    3
                } else if self.masks.iter().skip(1).any(|m| m[i]) {
                    2
                } else if self.masks.first().is_some_and(|m| m[i]) {
                    1
                } else {
                    0
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub variant: Variant,
    pub seq_len: usize,
    pub initial_tokens: Vec<usize>,
    pub initial_passes: usize,
    pub records: Vec<ReplanRecord>,
    pub forward_passes: usize,
    pub scoring_passes: usize,
    pub steps: usize,
    pub success: bool,
    pub termination: Termination,
    /// Tokens selected for remasking across all refinements.
    pub masked_tokens: usize,
    /// Selected tokens whose id differs after refinement.
    pub flipped_tokens: usize,
    pub error: Option<String>,
}

impl RolloutTrace {
    pub fn plans(&self) -> usize {
        match self.variant {
            Variant::Short => self.records.len(),
            _ => 1 + self.records.iter().filter(|r| r.refined).count(),
        }
    }
}

/// Trained model, tokenizer and sampling rule for closed-loop control.
#[derive(Debug, Clone)]
pub struct Policy<'a> {
    model: &'a MaskedTransformer,
    tokenizer: &'a ActionTokenizer,
    config: SamplerConfig,
    idle: usize,
}

/// Ranking scores, applied masks and selected positions of one refinement.
type Refinement = (Vec<Option<f64>>, Vec<Vec<bool>>, Vec<bool>);

struct Canvas {
    tokens: Vec<usize>,
    executed: usize,
    scores: Vec<Option<f64>>,
}

impl<'a> Policy<'a> {
    pub fn new(model: &'a MaskedTransformer, tokenizer: &'a ActionTokenizer, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        if model.config().codebook_size != tokenizer.config().codebook_size {
            return Err(Error::Compatibility(format!(
                "transformer expects {} codes, tokenizer has {}",
                model.config().codebook_size,
                tokenizer.config().codebook_size
            )));
        }
        Ok(Policy {
            model,
            tokenizer,
            config,
            idle: tokenizer.idle_code()?,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    fn vocab(&self) -> Vocab {
        self.model.vocab()
    }

    fn input(&self, tokens: &[usize], executed: usize, ctx: &(Tensor, Tensor)) -> MgtInput {
        MgtInput {
            tokens: tokens.to_vec(),
            executed,
            observations: ctx.0.clone(),
            states: ctx.1.clone(),
            positions: None,
        }
    }

    /// Positions from `executed` up to and including the first END.
    fn rankable(&self, tokens: &[usize], executed: usize) -> Vec<bool> {
        let end = self.vocab().end();
        let mut open = true;
        (0..tokens.len())
            .map(|i| {
                if i < executed || !open {
                    return false;
                }
                if tokens[i] == end {
                    open = false;
                }
                true
            })
            .collect()
    }

    /// Tokens after the first pending END become PAD and leave the ranking set.
    fn normalize_end(&self, c: &mut Canvas) {
        let v = self.vocab();
        if let Some(e) = (c.executed..c.tokens.len()).find(|&i| c.tokens[i] == v.end()) {
            for i in e + 1..c.tokens.len() {
                c.tokens[i] = v.pad();
                c.scores[i] = None;
            }
        }
    }

    fn ranking(&self, c: &Canvas) -> ConfidenceScores {
        let rank = self.rankable(&c.tokens, c.executed);
        ConfidenceScores {
            scores: c
                .scores
                .iter()
                .zip(&rank)
                .map(|(s, &r)| if r { Some(s.unwrap_or(0.0)) } else { None })
                .collect(),
        }
    }

    fn random_scores(&self, c: &Canvas, rng: &mut RngStream) -> ConfidenceScores {
        let rank = self.rankable(&c.tokens, c.executed);
        ConfidenceScores {
            scores: rank.iter().map(|&r| r.then(|| rng.uniform())).collect(),
        }
    }

    fn select(&self, scores: &ConfidenceScores) -> Result<Vec<bool>> {
        score_and_remask(
            scores,
            self.config.remask_ratio,
            self.config.selection == MaskSelection::Top,
        )
    }

    /// Mask-and-resample for `passes` passes starting from `mask`. Between
    /// passes the sampled positions are rescored and the ranking set remasked.
    /// Returns the masks applied and the positions selected by ranking.
    #[allow(clippy::too_many_arguments)]
    fn iterate(
        &self,
        session: &mut InferenceSession,
        c: &mut Canvas,
        ctx: &(Tensor, Tensor),
        mut mask: Vec<bool>,
        passes: usize,
        rng: &mut RngStream,
    ) -> Result<(Vec<Vec<bool>>, Vec<bool>)> {
        let v = self.vocab();
        let mut applied = Vec::with_capacity(passes);
        let mut selected = mask.clone();
        for pass in 0..passes {
            // remasking END reopens the PAD tail behind it
            if let Some(e) = (c.executed..c.tokens.len()).find(|&i| mask[i] && c.tokens[i] == v.end()) {
                for m in &mut mask[e + 1..] {
                    *m = true;
                }
            }
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    c.tokens[i] = v.mask();
                }
            }
            let logits = session.forward(&self.input(&c.tokens, c.executed, ctx))?;
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    let t = sample_token(&logits, i, self.config.temperature, rng)?;
                    c.tokens[i] = t;
                    c.scores[i] = Some(token_score(&logits, i, t));
                }
            }
            self.normalize_end(c);
            applied.push(mask.clone());
            if pass + 1 < passes {
                let scores = match self.config.scoring {
                    ScoringPolicy::Random => self.random_scores(c, rng),
                    ScoringPolicy::Atr if self.config.score_every_pass => {
                        let rank = self.rankable(&c.tokens, c.executed);
                        let s = session.posterior_confidence(&self.input(&c.tokens, c.executed, ctx), &rank)?;
                        for (dst, src) in c.scores.iter_mut().zip(&s.scores) {
                            if src.is_some() {
                                *dst = *src;
                            }
                        }
                        s
                    }
                    _ => self.ranking(c),
                };
                mask = self.select(&scores)?;
                for (s, &m) in selected.iter_mut().zip(&mask) {
                    *s |= m;
                }
            }
        }
        Ok((applied, selected))
    }

    /// Full-sequence plan decoded from an all-MASK canvas.
    fn generate(
        &self,
        session: &mut InferenceSession,
        len: usize,
        ctx: &(Tensor, Tensor),
        rng: &mut RngStream,
    ) -> Result<(Canvas, Vec<Vec<bool>>)> {
        let mut c = Canvas {
            tokens: vec![self.vocab().mask(); len],
            executed: 0,
            scores: vec![None; len],
        };
        let (masks, _) = self.iterate(session, &mut c, ctx, vec![true; len], self.config.refinement_steps, rng)?;
        Ok((c, masks))
    }

    /// Actions of the code prefix before the first non-code token. The rest of
    /// the buffer decodes as idle chunks so the prefix ends the way demos do.
    pub fn plan_actions(&self, tokens: &[usize]) -> Result<Vec<[f64; 2]>> {
        let v = self.vocab();
        let n = tokens.iter().position(|&t| !v.is_code(t)).unwrap_or(tokens.len());
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut codes = tokens[..n].to_vec();
        codes.resize(tokens.len(), self.idle);
        let a = self.tokenizer.decode(&codes)?;
        let keep = n * self.tokenizer.config().factor();
        Ok((0..keep).map(|t| [a.get(t, 0), a.get(t, 1)]).collect())
    }

    /// One MGP-Short plan of `len` tokens under `ctx`; exactly `r` passes.
    pub fn short_plan(
        &self,
        session: &mut InferenceSession,
        len: usize,
        ctx: &(Tensor, Tensor),
        rng: &mut RngStream,
    ) -> Result<(Vec<usize>, Vec<Vec<bool>>)> {
        let (c, masks) = self.generate(session, len, ctx, rng)?;
        Ok((c.tokens, masks))
    }

    /// One refinement at a replan point. Returns the record fields
    /// (ranking scores, applied masks, selected positions).
    fn refine(
        &self,
        session: &mut InferenceSession,
        c: &mut Canvas,
        ctx: &(Tensor, Tensor),
        rng: &mut RngStream,
    ) -> Result<Refinement> {
        let r = self.config.refinement_steps;
        if self.config.variant == Variant::WithoutSm {
            let mask: Vec<bool> = (0..c.tokens.len()).map(|i| i >= c.executed).collect();
            let (masks, _) = self.iterate(session, c, ctx, mask, r, rng)?;
            return Ok((vec![None; c.tokens.len()], masks, vec![false; c.tokens.len()]));
        }
        let scores = match self.config.scoring {
            ScoringPolicy::Atr => {
                let rank = self.rankable(&c.tokens, c.executed);
                let s = session.posterior_confidence(&self.input(&c.tokens, c.executed, ctx), &rank)?;
                for (dst, src) in c.scores.iter_mut().zip(&s.scores) {
                    if src.is_some() {
                        *dst = *src;
                    }
                }
                s
            }
            ScoringPolicy::ScoreReuse => self.ranking(c),
            ScoringPolicy::Random => self.random_scores(c, rng),
        };
        let mask = self.select(&scores)?;
        let (masks, selected) = self.iterate(session, c, ctx, mask, r, rng)?;
        Ok((scores.scores, masks, selected))
    }

    /// Closed-loop episode with the configured variant.
    pub fn rollout(&self, env: DropoutEnv, rng: &mut RngStream) -> Result<RolloutTrace> {
        let cfg = self.model.config();
        if env.inner().task().obs_dim() != cfg.obs_dim {
            return Err(Error::Compatibility(format!(
                "task {} has {} observation features, model expects {}",
                env.inner().task(),
                env.inner().task().obs_dim(),
                cfg.obs_dim
            )));
        }
        let factor = self.tokenizer.config().factor();
        let seq_len = match self.config.variant {
            Variant::Short => self.config.short_tokens,
            _ => env.inner().horizon().div_ceil(factor),
        };
        if seq_len > cfg.max_tokens {
            return Err(Error::Capacity {
                len: seq_len,
                max: cfg.max_tokens,
            });
        }
        let mut trace = RolloutTrace {
            variant: self.config.variant,
            seq_len,
            initial_tokens: Vec::new(),
            initial_passes: 0,
            records: Vec::new(),
            forward_passes: 0,
            scoring_passes: 0,
            steps: 0,
            success: false,
            termination: Termination::Failure,
            masked_tokens: 0,
            flipped_tokens: 0,
            error: None,
        };
        let mut session = InferenceSession::new(self.model);
        let mut env = env;
        let outcome = match self.config.variant {
            Variant::Short => self.run_short(&mut env, &mut session, &mut trace, rng),
            _ => self.run_long(&mut env, &mut session, &mut trace, rng),
        };
        trace.forward_passes = session.passes();
        trace.scoring_passes = session.scoring_passes();
        trace.steps = env.inner().step_count();
        trace.success = env.inner().succeeded();
        match outcome {
            Ok(t) => trace.termination = t,
            Err(e) => {
                trace.termination = Termination::Error;
                trace.error = Some(e.to_string());
            }
        }
        Ok(trace)
    }

    fn finished(env: &DropoutEnv) -> Option<Termination> {
        let inner = env.inner();
        if inner.succeeded() {
            Some(Termination::Success)
        } else if inner.done() {
            Some(Termination::Failure)
        } else {
            None
        }
    }

    fn run_long(
        &self,
        env: &mut DropoutEnv,
        session: &mut InferenceSession,
        trace: &mut RolloutTrace,
        rng: &mut RngStream,
    ) -> Result<Termination> {
        let cfg = self.model.config();
        let factor = self.tokenizer.config().factor();
        let mut hist = ContextHistory::new(cfg.history, cfg.obs_dim, cfg.state_dim);
        let mut obs = env.observe();
        hist.push(&obs, &env.inner().robot_state())?;

        let (mut canvas, _) = self.generate(session, trace.seq_len, &hist.window()?, rng)?;
        trace.initial_tokens = canvas.tokens.clone();
        trace.initial_passes = session.passes();
        let mut actions = self.plan_actions(&canvas.tokens)?;
        let mut cursor = 0;
        loop {
            let mut executed_actions = Vec::new();
            while executed_actions.len() < self.config.exec_steps_long && cursor < actions.len() {
                let a = actions[cursor];
                let out = env.step(a);
                cursor += 1;
                executed_actions.push(a);
                obs = out.observation;
                hist.push(&obs, &env.inner().robot_state())?;
                if out.done {
                    break;
                }
            }
            if let Some(t) = Self::finished(env) {
                return Ok(t);
            }
            // an exhausted plan still gets a refinement, which may move END
            canvas.executed = (cursor / factor).min(canvas.tokens.len());
            let before = canvas.tokens.clone();
            let refine = self.config.variant != Variant::FullSeq && obs.available;
            let passes_before = session.passes();
            let (confidence, masks) = if refine {
                let (conf, masks, selected) = self.refine(session, &mut canvas, &hist.window()?, rng)?;
                for (i, &s) in selected.iter().enumerate() {
                    if s {
                        trace.masked_tokens += 1;
                        trace.flipped_tokens += usize::from(before[i] != canvas.tokens[i]);
                    }
                }
                debug_assert_eq!(before[..canvas.executed], canvas.tokens[..canvas.executed]);
                actions = self.plan_actions(&canvas.tokens)?;
                (conf, masks)
            } else {
                (vec![None; canvas.tokens.len()], Vec::new())
            };
            trace.records.push(ReplanRecord {
                step: env.inner().step_count(),
                executed: canvas.executed,
                observed: obs.available,
                refined: refine,
                tokens_before: before,
                tokens_after: canvas.tokens.clone(),
                confidence,
                masks,
                actions: executed_actions,
                observation: obs.vector.clone(),
                passes: session.passes() - passes_before,
            });
            if cursor >= actions.len() {
                return Ok(Termination::EndToken);
            }
        }
    }

    fn run_short(
        &self,
        env: &mut DropoutEnv,
        session: &mut InferenceSession,
        trace: &mut RolloutTrace,
        rng: &mut RngStream,
    ) -> Result<Termination> {
        let cfg = self.model.config();
        let mut hist = ContextHistory::new(cfg.history, cfg.obs_dim, cfg.state_dim);
        let mut obs = env.observe();
        hist.push(&obs, &env.inner().robot_state())?;
        let mut actions: Vec<[f64; 2]> = Vec::new();
        let mut cursor = 0;
        let mut executed_actions = Vec::new();
        loop {
            if let Some(t) = Self::finished(env) {
                return Ok(t);
            }
            let due = cursor >= self.config.exec_steps_short || cursor >= actions.len();
            if due && obs.available {
                let passes_before = session.passes();
                let (tokens, masks) = self.short_plan(session, trace.seq_len, &hist.window()?, rng)?;
                actions = self.plan_actions(&tokens)?;
                cursor = 0;
                trace.records.push(ReplanRecord {
                    step: env.inner().step_count(),
                    executed: 0,
                    observed: true,
                    refined: true,
                    tokens_before: vec![self.vocab().mask(); tokens.len()],
                    tokens_after: tokens,
                    confidence: vec![None; trace.seq_len],
                    masks,
                    actions: std::mem::take(&mut executed_actions),
                    observation: obs.vector.clone(),
                    passes: session.passes() - passes_before,
                });
                if actions.is_empty() {
                    return Ok(Termination::EndToken);
                }
            }
            // hold still once the current chunk is used up and no replan is possible
            let hold = self.config.short_hold && !obs.available;
            let a = if cursor < actions.len() && !hold {
                let a = actions[cursor];
                cursor += 1;
                a
            } else {
                [0.0, 0.0]
            };
            let out = env.step(a);
            executed_actions.push(a);
            obs = out.observation;
            hist.push(&obs, &env.inner().robot_state())?;
        }
    }
}

/// Reference left-to-right decode: one forward pass per token.
pub fn autoregressive_sample(
    session: &mut InferenceSession,
    len: usize,
    ctx: &(Tensor, Tensor),
    temperature: f64,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    let v = session.vocab();
    let mut tokens = vec![v.mask(); len];
    for i in 0..len {
        let input = MgtInput {
            tokens: tokens.clone(),
            executed: 0,
            observations: ctx.0.clone(),
            states: ctx.1.clone(),
            positions: None,
        };
        let logits = session.forward(&input)?;
        tokens[i] = sample_token(&logits, i, temperature, rng)?;
    }
    Ok(tokens)
}
