//! End-to-end acceptance checks on trained toy-task models. Prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.

#[path = "../common/gradcases.rs"]
mod gradcases;

use std::io::Write as _;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use mgp_core::env::{read_corpus, write_corpus, TaskKind, DRIFT_ONSET};
use mgp_core::harness::{
    confidence_analysis, demonstrations, evaluate, flip_rate_experiment, policy_for, run_episodes, train_stage1,
    train_stage2, Checkpoint, EpisodePlan, ExperimentConfig, Stage1Report,
};
use mgp_core::numeric::{ParameterStore, RngStream, Tensor};
use mgp_core::samplers::{
    autoregressive_sample, gumbel_max_sample, ContextHistory, InferenceSession, MaskSelection, Method, Policy,
    RolloutTrace,
};
use mgp_core::tokenizer::Codebook;
use mgp_core::transformer::PlanMode;
use mgp_core::{Error, Result};
use statrs::distribution::{ChiSquared, ContinuousCDF};

const GRAD_BUDGET: Duration = Duration::from_secs(60);
const TOKENIZER_BUDGET: Duration = Duration::from_secs(15 * 60);
const BUTTON_BUDGET: Duration = Duration::from_secs(30 * 60);
const RECON_L1: f64 = 5e-3;
const QUANTIZE_VECTORS: usize = 10_000;
const GUMBEL_DRAWS: usize = 10_000;
const CHI_SQUARE_P: f64 = 0.01;
const SEEDS: usize = 50;
const PREFIX_ROLLOUTS: usize = 100;
const BUTTON_ROLLOUTS: usize = 20;
const BUTTON_LONG_MIN: f64 = 0.8;
const BUTTON_SHORT_MAX: f64 = 0.2;
const DROPOUT_LEVELS: [f64; 3] = [0.35, 0.5, 0.7];
const DROPOUT_MAX_DROP: f64 = 0.15;
const HOLD_MARGIN: f64 = 0.2;

struct Trained {
    config: ExperimentConfig,
    checkpoint: Checkpoint,
    stage1: Stage1Report,
    tokenizer_time: Duration,
    total_time: Duration,
}

fn train(task: TaskKind, modes: &[PlanMode]) -> Result<Trained> {
    let mut config = ExperimentConfig::for_task(task);
    config.mgt_modes = modes.to_vec();
    config.eval.jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let start = Instant::now();
    let demos = demonstrations(&config)?;
    let (tokenizer, stage1) = train_stage1(&config, &demos)?;
    let tokenizer_time = start.elapsed();
    let (models, _) = train_stage2(&config, &demos, &tokenizer)?;
    let checkpoint = Checkpoint {
        config_hash: config.hash(),
        tokenizer,
        models,
    };
    Ok(Trained {
        config,
        checkpoint,
        stage1,
        tokenizer_time,
        total_time: start.elapsed(),
    })
}

fn trained(task: TaskKind) -> Result<&'static Trained> {
    static REACH: OnceLock<Trained> = OnceLock::new();
    static DYNAMIC: OnceLock<Trained> = OnceLock::new();
    static BUTTON: OnceLock<Trained> = OnceLock::new();
    let (cell, modes): (_, &[PlanMode]) = match task {
        TaskKind::PointReach => (&REACH, &[PlanMode::Long, PlanMode::Short]),
        TaskKind::DynamicTarget => (&DYNAMIC, &[PlanMode::Long]),
        TaskKind::ButtonSequence => (&BUTTON, &[PlanMode::Long, PlanMode::Short]),
    };
    if let Some(t) = cell.get() {
        return Ok(t);
    }
    eprintln!("training {task} models");
    let t = train(task, modes)?;
    eprintln!(
        "{task}: tokenizer {:.0}s, total {:.0}s",
        t.tokenizer_time.as_secs_f64(),
        t.total_time.as_secs_f64()
    );
    Ok(cell.get_or_init(|| t))
}

/// Success rate per method over `episodes` seeds with sampler/eval overrides.
fn rates(task: TaskKind, episodes: usize, overrides: &[String], methods: &[Method]) -> Result<Vec<f64>> {
    let t = trained(task)?;
    let mut config = t.config.with_overrides(overrides)?;
    config.eval.episodes = episodes;
    let report = evaluate(&config, &t.checkpoint, methods)?;
    Ok(methods
        .iter()
        .map(|&m| report.success_rate(m).unwrap_or(f64::NAN))
        .collect())
}

fn traces(task: TaskKind, method: Method, episodes: usize) -> Result<Vec<RolloutTrace>> {
    let t = trained(task)?;
    let policy = policy_for(&t.checkpoint, &t.config.sampler, method)?;
    let plan = EpisodePlan {
        episodes,
        ..EpisodePlan::from_config(&t.config)
    };
    Ok(run_episodes(&policy, &plan)?.into_iter().map(|r| r.trace).collect())
}

type Check = Result<(bool, String)>;
type Criterion = (&'static str, fn() -> Check);

fn gradients() -> Check {
    let start = Instant::now();
    let results = gradcases::run_all();
    let elapsed = start.elapsed();
    let failed: Vec<String> = results
        .iter()
        .filter(|(_, r)| !r.passes(gradcases::REL_TOL))
        .map(|(name, r)| format!("{name} ({:.2e})", r.max_rel_err))
        .collect();
    let worst = results.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    Ok((
        failed.is_empty() && elapsed < GRAD_BUDGET,
        format!(
            "{} ops x {} instances, worst rel err {worst:.2e}, {:.1}s{}",
            results.len(),
            gradcases::INSTANCES,
            elapsed.as_secs_f64(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failing: {}", failed.join(", "))
            }
        ),
    ))
}

fn tokenizer_fidelity() -> Check {
    let t = trained(TaskKind::PointReach)?;
    let s = &t.stage1;
    Ok((
        s.held_out_l1 < RECON_L1
            && s.replay_successes == s.held_out
            && s.held_out == 10
            && t.tokenizer_time < TOKENIZER_BUDGET,
        format!(
            "{} demos, held-out L1 {:.3e} per step, replay {}/{}, {:.0}s",
            s.demos,
            s.held_out_l1,
            s.replay_successes,
            s.held_out,
            t.tokenizer_time.as_secs_f64()
        ),
    ))
}

fn nearest(codes: &Tensor, row: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for k in 0..codes.rows() {
        let d: f64 = codes.row(k).iter().zip(row).map(|(c, x)| (c - x).powi(2)).sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

fn quantizer() -> Check {
    let trained_codes = trained(TaskKind::PointReach)?.checkpoint.tokenizer.codebook().clone();
    let mut rng = RngStream::new(31, 0);
    let random_codes = {
        let (k, d) = (256, 4);
        Codebook::new(Tensor::new(
            vec![k, d],
            (0..k * d).map(|_| rng.uniform() * 2.0 - 1.0).collect(),
        )?)?
    };
    let mut agree = 0;
    let mut total = 0;
    for book in [&trained_codes, &random_codes] {
        let d = book.dim();
        let scale = book.codes().data().iter().fold(0.0f64, |m, v| m.max(v.abs())) * 1.5;
        let data: Vec<f64> = (0..QUANTIZE_VECTORS * d)
            .map(|_| (rng.uniform() * 2.0 - 1.0) * scale)
            .collect();
        let latents = Tensor::new(vec![QUANTIZE_VECTORS, d], data)?;
        let grid = book.quantize(&latents)?;
        for r in 0..QUANTIZE_VECTORS {
            agree += usize::from(grid.indices[r] == nearest(book.codes(), latents.row(r)));
            total += 1;
        }
    }
    Ok((
        agree == total,
        format!(
            "{agree}/{total} indices agree (trained K={} and random K=256)",
            trained_codes.len()
        ),
    ))
}

fn gumbel() -> Check {
    let mut rng = RngStream::new(11, 0);
    let logits: Vec<f64> = (0..8).map(|_| rng.uniform() * 4.0 - 2.0).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut counts = [0usize; 8];
    let mut draw = RngStream::new(3, 0);
    for _ in 0..GUMBEL_DRAWS {
        counts[gumbel_max_sample(&logits, 1.0, &mut draw)?] += 1;
    }
    let stat: f64 = counts
        .iter()
        .zip(&w)
        .map(|(&c, wi)| {
            let e = wi / z * GUMBEL_DRAWS as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let p = ChiSquared::new(7.0).expect("valid dof").sf(stat);
    Ok((
        p > CHI_SQUARE_P,
        format!("chi-square {stat:.2} on 7 dof, p = {p:.3}, counts {counts:?}"),
    ))
}

fn pass_structure() -> Check {
    let t = trained(TaskKind::ButtonSequence)?;
    let model = t.checkpoint.model(PlanMode::Short).expect("short model trained");
    let cfg = model.config();
    let mut sampler = t.config.sampler.with_method(Method::MgpShort);
    sampler.refinement_steps = 2;
    let policy = Policy::new(model, &t.checkpoint.tokenizer, sampler)?;
    let env = mgp_core::env::ToyEnv::new(TaskKind::ButtonSequence, 5);
    let mut hist = ContextHistory::new(cfg.history, cfg.obs_dim, cfg.state_dim);
    hist.push(&env.observe(), &env.robot_state())?;
    let ctx = hist.window()?;
    let mut short = Vec::new();
    let mut ar = Vec::new();
    for len in [2, 8, 32] {
        let mut s = InferenceSession::new(model);
        policy.short_plan(&mut s, len, &ctx, &mut RngStream::new(len as u64, 0))?;
        short.push(s.passes());
        let mut a = InferenceSession::new(model);
        autoregressive_sample(&mut a, len, &ctx, 1.0, &mut RngStream::new(len as u64, 1))?;
        ar.push(a.passes());
    }
    Ok((
        short == [2, 2, 2] && ar == [2, 8, 32],
        format!("plan lengths [2, 8, 32]: MGP-Short passes {short:?}, autoregressive passes {ar:?}"),
    ))
}

fn refinement_benefit() -> Check {
    let r1 = rates(
        TaskKind::DynamicTarget,
        SEEDS,
        &["sampler.refinement_steps=1".into()],
        &[Method::MgpLong],
    )?[0];
    let r2 = rates(
        TaskKind::DynamicTarget,
        SEEDS,
        &["sampler.refinement_steps=2".into()],
        &[Method::MgpLong],
    )?[0];
    Ok((r2 >= r1, format!("r=1 {r1:.2}, r=2 {r2:.2}, margin {:+.2}", r2 - r1)))
}

fn prefix_violations(t: &RolloutTrace) -> (usize, usize) {
    let mut violations = 0;
    let mut checks = 0;
    let mut prev = &t.initial_tokens;
    for r in &t.records {
        let e = r.executed;
        checks += 1;
        violations += usize::from(r.tokens_before[..e] != prev[..e] || r.tokens_after[..e] != r.tokens_before[..e]);
        prev = &r.tokens_after;
    }
    (violations, checks)
}

fn prefix_retention() -> Check {
    let ts = traces(TaskKind::DynamicTarget, Method::MgpLong, PREFIX_ROLLOUTS)?;
    let (mut violations, mut checks, mut refined) = (0, 0, 0);
    for t in &ts {
        let (v, c) = prefix_violations(t);
        violations += v;
        checks += c;
        refined += t.records.iter().filter(|r| r.refined).count();
    }
    Ok((
        violations == 0 && refined > 0,
        format!(
            "{} rollouts, {checks} replans ({refined} refined), {violations} prefix violations",
            ts.len()
        ),
    ))
}

fn non_markovian() -> Check {
    let start = Instant::now();
    let r = rates(
        TaskKind::ButtonSequence,
        BUTTON_ROLLOUTS,
        &[],
        &[Method::MgpLong, Method::MgpShort],
    )?;
    let t = trained(TaskKind::ButtonSequence)?;
    let total = t.total_time + start.elapsed();
    Ok((
        r[0] >= BUTTON_LONG_MIN && r[1] <= BUTTON_SHORT_MAX && total < BUTTON_BUDGET,
        format!(
            "MGP-Long {:.2}, MGP-Short {:.2} over {BUTTON_ROLLOUTS} rollouts, training + eval {:.0}s",
            r[0],
            r[1],
            total.as_secs_f64()
        ),
    ))
}

fn dropout_robustness() -> Check {
    let at = |p: f64, methods: &[Method]| rates(TaskKind::PointReach, SEEDS, &[format!("eval.dropout={p}")], methods);
    let base = at(0.0, &[Method::MgpLong])?[0];
    let mut ok = true;
    let mut detail = format!("p=0 {base:.2}");
    let mut long_07 = f64::NAN;
    for p in DROPOUT_LEVELS {
        let r = at(p, &[Method::MgpLong])?[0];
        ok &= base - r < DROPOUT_MAX_DROP;
        detail.push_str(&format!(", p={p} {r:.2}"));
        long_07 = r;
    }
    let hold = at(0.7, &[Method::ShortHold, Method::MgpShort])?;
    let hold_0 = at(0.0, &[Method::ShortHold])?[0];
    ok &= long_07 - hold[0] >= HOLD_MARGIN;
    detail.push_str(&format!(
        "; short-hold at p=0.7 {:.2} (gap {:+.2}), short-hold at p=0 {hold_0:.2}, MGP-Short at p=0.7 {:.2}",
        hold[0],
        long_07 - hold[0],
        hold[1]
    ));
    Ok((ok, detail))
}

fn variant_ordering() -> Check {
    let r = rates(
        TaskKind::DynamicTarget,
        SEEDS,
        &[],
        &[Method::MgpLong, Method::WithoutSm, Method::FullSeq],
    )?;
    Ok((
        r[0] >= r[1] && r[1] >= r[2] && r[2] < r[0] && r[2] < r[1],
        format!("MGP-Long {:.2}, w/o-SM {:.2}, FullSeq {:.2}", r[0], r[1], r[2]),
    ))
}

fn scoring_ordering() -> Check {
    let r = rates(
        TaskKind::DynamicTarget,
        SEEDS,
        &[],
        &[Method::MgpLong, Method::ScoreReuse, Method::RandomScore],
    )?;
    Ok((
        r[0] >= r[1] && r[1] >= r[2],
        format!("ATR {:.2}, ScoreReuse {:.2}, Random {:.2}", r[0], r[1], r[2]),
    ))
}

fn flip_rate() -> Check {
    let t = trained(TaskKind::ButtonSequence)?;
    let bottom = flip_rate_experiment(&t.config, &t.checkpoint, MaskSelection::Bottom, BUTTON_ROLLOUTS)?;
    let top = flip_rate_experiment(&t.config, &t.checkpoint, MaskSelection::Top, BUTTON_ROLLOUTS)?;
    let ratio = t.config.sampler.remask_ratio;
    Ok((
        !bottom.undefined && !top.undefined && bottom.flip_rate > top.flip_rate,
        format!(
            "remask ratio {ratio}: bottom {}/{} = {:.3}, top {}/{} = {:.3}",
            bottom.flipped_tokens,
            bottom.masked_tokens,
            bottom.flip_rate,
            top.flipped_tokens,
            top.masked_tokens,
            top.flip_rate
        ),
    ))
}

/// Parameter values only; optimizer moments are not part of a checkpoint.
fn same_values(a: &ParameterStore, b: &ParameterStore) -> bool {
    a.iter().count() == b.iter().count()
        && a.iter().zip(b.iter()).all(|((n1, t1), (n2, t2))| {
            n1 == n2
                && t1.shape() == t2.shape()
                && t1.data().iter().zip(t2.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

fn flip_one(path: &std::path::Path, offset: usize) -> Result<()> {
    let mut bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let i = offset % bytes.len();
    bytes[i] ^= 0x40;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn persistence() -> Check {
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::path::Path::new("tempdir"), e))?;
    let t = trained(TaskKind::ButtonSequence)?;
    let ck_path = dir.path().join("model.mgp");
    t.checkpoint.save(&ck_path)?;
    let loaded = Checkpoint::load(&ck_path)?;
    let ck_exact = loaded.encode() == t.checkpoint.encode()
        && same_values(loaded.tokenizer.params(), t.checkpoint.tokenizer.params())
        && loaded
            .models
            .iter()
            .zip(&t.checkpoint.models)
            .all(|(a, b)| a.0 == b.0 && same_values(a.1.params(), b.1.params()));

    let demos = demonstrations(&t.config)?;
    let corpus_path = dir.path().join("corpus.mgpd");
    write_corpus(&corpus_path, &demos)?;
    let back = read_corpus(&corpus_path)?;
    let corpus_exact = back == demos;

    let mut rejected = 0;
    let mut deterministic = 0;
    let trials = 16;
    for k in 0..trials {
        for (path, original) in [
            (&ck_path, t.checkpoint.encode()),
            (&corpus_path, std::fs::read(&corpus_path).expect("corpus written")),
        ] {
            let bad = dir.path().join("bad");
            std::fs::write(&bad, &original).map_err(|e| Error::io(&bad, e))?;
            flip_one(&bad, 7 + k * 977)?;
            let (a, b) = if path == &ck_path {
                (
                    Checkpoint::load(&bad).err().map(|e| e.to_string()),
                    Checkpoint::load(&bad).err().map(|e| e.to_string()),
                )
            } else {
                (
                    read_corpus(&bad).err().map(|e| e.to_string()),
                    read_corpus(&bad).err().map(|e| e.to_string()),
                )
            };
            rejected += usize::from(a.is_some());
            deterministic += usize::from(a.is_some() && a == b);
        }
    }
    Ok((
        ck_exact && corpus_exact && rejected == 2 * trials && deterministic == 2 * trials,
        format!(
            "checkpoint round-trip {}, corpus round-trip {}, corrupted files rejected {rejected}/{} with identical errors {deterministic}/{}",
            if ck_exact { "exact" } else { "differs" },
            if corpus_exact { "exact" } else { "differs" },
            2 * trials,
            2 * trials
        ),
    ))
}

fn confidence_drift() {
    let result = (|| -> Result<String> {
        let ts = traces(TaskKind::DynamicTarget, Method::MgpLong, 10)?;
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::path::Path::new("tempdir"), e))?;
        let s = confidence_analysis(&ts, dir.path(), Some(DRIFT_ONSET))?;
        Ok(format!(
            "dynamic_target pending confidence before drift {:.3}, after {:.3} over {} rollouts",
            s.mean_before.unwrap_or(f64::NAN),
            s.mean_after.unwrap_or(f64::NAN),
            s.rollouts
        ))
    })();
    match result {
        Ok(line) => println!("INFO {line}"),
        Err(e) => println!("INFO confidence analysis unavailable: {e}"),
    }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 13] = [
        ("gradient soundness", gradients),
        ("tokenizer fidelity", tokenizer_fidelity),
        ("quantizer exactness", quantizer),
        ("gumbel-max correctness", gumbel),
        ("parallel decoding pass structure", pass_structure),
        ("refinement benefit", refinement_benefit),
        ("prefix retention", prefix_retention),
        ("non-markovian separation", non_markovian),
        ("dropout robustness", dropout_robustness),
        ("variant ordering", variant_ordering),
        ("scoring-policy ordering", scoring_ordering),
        ("flip-rate calibration", flip_rate),
        ("persistence", persistence),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (pass, detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
        failures += usize::from(!pass);
        println!(
            "{} {:>2} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed().as_secs_f64()
        );
        let _ = std::io::stdout().flush();
    }
    confidence_drift();
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
