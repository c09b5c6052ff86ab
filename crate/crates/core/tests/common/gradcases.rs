//! Randomised finite-difference cases, one per differentiable graph op.

use mgp_core::numeric::{check_gradients, GradCheck, Graph, RngStream, Tensor, Var};
use mgp_core::Result;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;
pub const INSTANCES: usize = 20;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn rand_t(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    // keep away from the kinks of relu/abs
    let data = (0..n)
        .map(|_| {
            let v = rng.uniform() * 2.0 - 1.0;
            if v.abs() < 0.05 {
                v.signum() * 0.05 + v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weighted sum so every output entry gets a distinct upstream gradient.
fn weigh(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

/// Cases for instance `i`; shapes vary with the instance.
pub fn cases(i: usize) -> Vec<Case> {
    let mut rng = RngStream::new(1000 + i as u64, 7);
    let m = 1 + i % 3;
    let k = 2 + i % 4;
    let n = 1 + (i / 2) % 3;
    let mut out: Vec<Case> = Vec::new();
    let mut add = |name, inputs: Vec<Tensor>, out_shape: &[usize], rng: &mut RngStream, f: Build| {
        let w = rand_t(rng, out_shape);
        out.push(Case {
            name,
            inputs,
            build: Box::new(move |g, v| {
                let y = f(g, v)?;
                weigh(g, y, &w)
            }),
        });
    };

    let (a, b) = (rand_t(&mut rng, &[m, k]), rand_t(&mut rng, &[k, n]));
    add(
        "matmul",
        vec![a, b],
        &[m, n],
        &mut rng,
        Box::new(|g, v| g.matmul(v[0], v[1])),
    );
    let a = rand_t(&mut rng, &[m, k]);
    add(
        "transpose",
        vec![a],
        &[k, m],
        &mut rng,
        Box::new(|g, v| g.transpose(v[0])),
    );
    let (a, b) = (rand_t(&mut rng, &[m, k]), rand_t(&mut rng, &[m, k]));
    add(
        "add",
        vec![a.clone(), b.clone()],
        &[m, k],
        &mut rng,
        Box::new(|g, v| g.add(v[0], v[1])),
    );
    add(
        "sub",
        vec![a.clone(), b.clone()],
        &[m, k],
        &mut rng,
        Box::new(|g, v| g.sub(v[0], v[1])),
    );
    add("mul", vec![a, b], &[m, k], &mut rng, Box::new(|g, v| g.mul(v[0], v[1])));
    let (a, r) = (rand_t(&mut rng, &[m, k]), rand_t(&mut rng, &[k]));
    add(
        "add_row",
        vec![a, r],
        &[m, k],
        &mut rng,
        Box::new(|g, v| g.add_row(v[0], v[1])),
    );
    let (a, c) = (rand_t(&mut rng, &[m, k]), rand_t(&mut rng, &[m]));
    add(
        "add_col",
        vec![a, c],
        &[m, k],
        &mut rng,
        Box::new(|g, v| g.add_col(v[0], v[1])),
    );
    let a = rand_t(&mut rng, &[m, k]);
    add(
        "scale",
        vec![a.clone()],
        &[m, k],
        &mut rng,
        Box::new(|g, v| Ok(g.scale(v[0], -1.7))),
    );
    add(
        "silu",
        vec![a.clone()],
        &[m, k],
        &mut rng,
        Box::new(|g, v| Ok(g.silu(v[0]))),
    );
    add(
        "relu",
        vec![a.clone()],
        &[m, k],
        &mut rng,
        Box::new(|g, v| Ok(g.relu(v[0]))),
    );
    add(
        "tanh",
        vec![a.clone()],
        &[m, k],
        &mut rng,
        Box::new(|g, v| Ok(g.tanh(v[0]))),
    );
    add(
        "abs",
        vec![a.clone()],
        &[m, k],
        &mut rng,
        Box::new(|g, v| Ok(g.abs(v[0]))),
    );
    let tau = 0.5 + (i % 4) as f64 * 0.5;
    add(
        "softmax_rows",
        vec![a.clone()],
        &[m, k],
        &mut rng,
        Box::new(move |g, v| g.softmax_rows(v[0], tau)),
    );
    let (gm, bt) = (rand_t(&mut rng, &[k]), rand_t(&mut rng, &[k]));
    add(
        "layer_norm",
        vec![a.clone(), gm, bt],
        &[m, k],
        &mut rng,
        Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
    );

    let (cin, cout, t) = (1 + i % 2, 1 + (i / 3) % 3, 4 + 2 * (i % 3));
    let x = rand_t(&mut rng, &[cin, t]);
    let w3 = rand_t(&mut rng, &[cout, cin, 3]);
    add(
        "conv1d_same",
        vec![x.clone(), w3],
        &[cout, t],
        &mut rng,
        Box::new(|g, v| g.conv1d(v[0], v[1], 1, 1)),
    );
    let w2 = rand_t(&mut rng, &[cout, cin, 2]);
    add(
        "conv1d_strided",
        vec![x.clone(), w2],
        &[cout, t / 2],
        &mut rng,
        Box::new(|g, v| g.conv1d(v[0], v[1], 2, 0)),
    );
    add(
        "upsample",
        vec![x],
        &[cin, 2 * t],
        &mut rng,
        Box::new(|g, v| g.upsample(v[0], 2)),
    );

    let table = rand_t(&mut rng, &[5, k]);
    let ids: Vec<usize> = (0..4).map(|j| (j * 3 + i) % 5).collect();
    add(
        "gather",
        vec![table],
        &[4, k],
        &mut rng,
        Box::new(move |g, v| g.gather(v[0], &ids)),
    );
    let (a, b) = (rand_t(&mut rng, &[m, k]), rand_t(&mut rng, &[m, n]));
    add(
        "concat_cols",
        vec![a, b],
        &[m, k + n],
        &mut rng,
        Box::new(|g, v| g.concat_cols(&[v[0], v[1]])),
    );
    let (a, b) = (rand_t(&mut rng, &[m, k]), rand_t(&mut rng, &[n, k]));
    add(
        "concat_rows",
        vec![a, b],
        &[m + n, k],
        &mut rng,
        Box::new(|g, v| g.concat_rows(&[v[0], v[1]])),
    );
    let a = rand_t(&mut rng, &[m, k + 2]);
    add(
        "slice_cols",
        vec![a],
        &[m, k],
        &mut rng,
        Box::new(move |g, v| g.slice_cols(v[0], 1, k)),
    );
    let a = rand_t(&mut rng, &[m, k]);
    add(
        "reshape",
        vec![a.clone()],
        &[k * m],
        &mut rng,
        Box::new(move |g, v| g.reshape(v[0], &[k * m])),
    );
    add("sum", vec![a.clone()], &[1], &mut rng, Box::new(|g, v| Ok(g.sum(v[0]))));
    add(
        "mean",
        vec![a.clone()],
        &[1],
        &mut rng,
        Box::new(|g, v| Ok(g.mean(v[0]))),
    );
    let targets: Vec<Option<usize>> = (0..m).map(|r| if r == 1 { None } else { Some((r + i) % k) }).collect();
    add(
        "cross_entropy",
        vec![a.clone()],
        &[1],
        &mut rng,
        Box::new(move |g, v| Ok(g.cross_entropy(v[0], &targets)?.loss)),
    );
    // replacement tracks the input at a fixed offset, so the identity
    // backward is also the true derivative
    let offset = rand_t(&mut rng, &[m, k]);
    add(
        "straight_through",
        vec![a],
        &[m, k],
        &mut rng,
        Box::new(move |g, v| {
            let shifted = g
                .value(v[0])
                .data()
                .iter()
                .zip(offset.data())
                .map(|(x, o)| x + o)
                .collect();
            let repl = Tensor::new(offset.shape().to_vec(), shifted)?;
            g.straight_through(v[0], repl)
        }),
    );

    let (batch, heads, nq, nk) = (1 + i % 2, 1 + i % 2, 2 + i % 2, 3);
    let d = 2 * heads;
    let q = rand_t(&mut rng, &[batch * nq, d]);
    let kk = rand_t(&mut rng, &[batch * nk, d]);
    let vv = rand_t(&mut rng, &[batch * nk, d]);
    add(
        "attention",
        vec![q, kk, vv],
        &[batch * nq, d],
        &mut rng,
        Box::new(move |g, v| g.attention(v[0], v[1], v[2], batch, heads)),
    );
    out
}

/// Runs every case for `INSTANCES` instances; returns the worst error per op.
pub fn run_all() -> Vec<(&'static str, GradCheck)> {
    let mut worst: Vec<(&'static str, GradCheck)> = Vec::new();
    for i in 0..INSTANCES {
        for case in cases(i) {
            let r = check_gradients(&case.inputs, STEP, |g, v| (case.build)(g, v)).unwrap();
            match worst.iter_mut().find(|(n, _)| *n == case.name) {
                Some((_, w)) => {
                    w.entries += r.entries;
                    w.max_rel_err = w.max_rel_err.max(r.max_rel_err);
                }
                None => worst.push((case.name, r)),
            }
        }
    }
    worst
}
