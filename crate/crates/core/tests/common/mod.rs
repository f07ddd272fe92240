#![allow(dead_code)]

use pnp_depth::graph::NodeId;
use pnp_depth::loss::LossKind;
use pnp_depth::{Graph, Result, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-7;
pub const FD_MIN_COORDS: usize = 100;

pub fn rng(seed: u64) -> ChaCha8Rng {
    pnp_depth::rng::seeded(seed)
}

pub fn random(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Uniform magnitude in `[lo, hi)` with a random sign.
pub fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(lo..hi);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub type Builder = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

#[derive(Debug, Clone)]
pub struct FdReport {
    pub op: String,
    pub coords: usize,
    pub failures: usize,
    pub worst: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.coords >= FD_MIN_COORDS
    }
}

fn eval(build: &Builder, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), false).unwrap()).collect();
    let out = build(&mut g, &ids).unwrap();
    g.value(out).item()
}

/// Central finite differences against the reverse-mode gradient of the scalar
/// `build(inputs)`, on every coordinate of every input not excluded by `skip`
/// (input index, flat index).
pub fn fd_check(op: &str, build: Builder, inputs: Vec<Tensor>, skip: &dyn Fn(usize, usize) -> bool) -> FdReport {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true).unwrap()).collect();
    let out = build(&mut g, &ids).unwrap();
    g.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(&inputs)
        .map(|(&id, t)| g.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut report = FdReport {
        op: op.to_string(),
        coords: 0,
        failures: 0,
        worst: 0.0,
    };
    for (k, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            if skip(k, i) {
                continue;
            }
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&build, &plus) - eval(&build, &minus)) / (2.0 * FD_STEP);
            let err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            report.coords += 1;
            let rel = if scale > 0.0 { err / scale } else { 0.0 };
            if err > FD_ABS_FLOOR && rel > FD_REL_TOL {
                report.failures += 1;
            }
            if err > FD_ABS_FLOOR {
                report.worst = report.worst.max(rel);
            }
        }
    }
    report
}

fn no_skip(_: usize, _: usize) -> bool {
    false
}

/// Random readout weights turning any tensor into a scalar, so every output
/// coordinate carries a distinct upstream gradient.
fn readout(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Finite-difference reports for every differentiable graph op.
pub fn check_all_ops(seed: u64) -> Vec<FdReport> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    for (name, stride, pad) in [("conv2d", 1, 1), ("conv2d stride 2", 2, 1), ("conv2d no pad", 1, 0)] {
        let x = random(&mut r, &[2, 2, 6, 5], -1.0, 1.0);
        let w = random(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
        let (oh, ow) = ((6 + 2 * pad - 3) / stride + 1, (5 + 2 * pad - 3) / stride + 1);
        let ro = readout(&mut r, 2 * 3 * oh * ow);
        out.push(fd_check(
            name,
            Box::new(move |g, ids| {
                let y = g.conv2d(ids[0], ids[1], stride, pad)?;
                g.weighted_sum(y, &ro)
            }),
            vec![x, w],
            &no_skip,
        ));
    }

    let x = away_from_zero(&mut r, &[1, 4, 6, 6], 0.05, 1.0);
    let ro = readout(&mut r, 144);
    out.push(fd_check(
        "relu",
        Box::new(move |g, ids| {
            let y = g.relu(ids[0])?;
            g.weighted_sum(y, &ro)
        }),
        vec![x],
        &no_skip,
    ));

    let (a, b) = (random(&mut r, &[1, 2, 6, 6], -1.0, 1.0), random(&mut r, &[1, 2, 6, 6], -1.0, 1.0));
    let ro = readout(&mut r, 72);
    out.push(fd_check(
        "add",
        Box::new(move |g, ids| {
            let y = g.add(ids[0], ids[1])?;
            g.weighted_sum(y, &ro)
        }),
        vec![a, b],
        &no_skip,
    ));

    let (a, b) = (random(&mut r, &[2, 1, 6, 6], -1.0, 1.0), random(&mut r, &[2, 2, 6, 6], -1.0, 1.0));
    let ro = readout(&mut r, 216);
    out.push(fd_check(
        "concat",
        Box::new(move |g, ids| {
            let y = g.concat(&[ids[0], ids[1]])?;
            g.weighted_sum(y, &ro)
        }),
        vec![a, b],
        &no_skip,
    ));

    let x = random(&mut r, &[1, 2, 8, 8], -1.0, 1.0);
    let ro = readout(&mut r, 512);
    out.push(fd_check(
        "upsample2x",
        Box::new(move |g, ids| {
            let y = g.upsample2x(ids[0])?;
            g.weighted_sum(y, &ro)
        }),
        vec![x],
        &no_skip,
    ));

    let x = random(&mut r, &[1, 2, 10, 10], -1.0, 1.0);
    let ro = readout(&mut r, 50);
    out.push(fd_check(
        "downsample2x",
        Box::new(move |g, ids| {
            let y = g.downsample2x(ids[0])?;
            g.weighted_sum(y, &ro)
        }),
        vec![x],
        &no_skip,
    ));

    let x = random(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
    let b = random(&mut r, &[3], -1.0, 1.0);
    let ro = readout(&mut r, 150);
    out.push(fd_check(
        "bias",
        Box::new(move |g, ids| {
            let y = g.bias(ids[0], ids[1])?;
            g.weighted_sum(y, &ro)
        }),
        vec![x, b],
        &no_skip,
    ));

    let x = random(&mut r, &[1, 2, 8, 8], -1.0, 1.0);
    let ro = readout(&mut r, 128);
    out.push(fd_check(
        "scale",
        Box::new(move |g, ids| {
            let y = g.scale(ids[0], -2.5)?;
            g.weighted_sum(y, &ro)
        }),
        vec![x],
        &no_skip,
    ));

    let x = random(&mut r, &[1, 2, 8, 8], -1.0, 1.0);
    out.push(fd_check("sum_squares", Box::new(|g, ids| g.sum_squares(ids[0])), vec![x], &no_skip));

    let x = random(&mut r, &[1, 2, 8, 8], -1.0, 1.0);
    let ro = readout(&mut r, 128);
    out.push(fd_check(
        "weighted_sum",
        Box::new(move |g, ids| g.weighted_sum(ids[0], &ro)),
        vec![x],
        &no_skip,
    ));

    for kind in [LossKind::L1, LossKind::L2, LossKind::BerHu] {
        for normalize in [true, false] {
            let shape = [1, 1, 14, 14];
            let target = random(&mut r, &shape, 1.0, 5.0);
            let mut mask = Tensor::from_fn(&shape, |_| if r.random_bool(0.8) { 1.0 } else { 0.0 });
            mask.data_mut()[0] = 1.0;
            // residual magnitudes drawn away from 0 and, for berHu, from c
            let mut resid = Tensor::from_fn(&shape, |_| {
                let m = if r.random_bool(0.5) {
                    r.random_range(0.05..0.15)
                } else {
                    r.random_range(0.3..1.0)
                };
                if r.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            });
            // pins the berHu threshold at 0.2, between the two bands
            resid.data_mut()[0] = 1.0;
            let mut pred = target.clone();
            pred.data_mut().iter_mut().zip(resid.data()).for_each(|(p, d)| *p += d);
            // the berHu threshold follows the largest observed residual; its
            // own coordinate is the one place the threshold moves with the input
            let argmax = (0..pred.len())
                .filter(|&i| mask.data()[i] != 0.0)
                .max_by(|&a, &b| resid.data()[a].abs().total_cmp(&resid.data()[b].abs()))
                .unwrap();
            let (t, m) = (target.clone(), mask.clone());
            let skip = move |_: usize, i: usize| kind == LossKind::BerHu && i == argmax;
            out.push(fd_check(
                &format!("masked_loss {kind} normalize={normalize}"),
                Box::new(move |g, ids| g.masked_loss(ids[0], &t, &m, kind, normalize)),
                vec![pred],
                &skip,
            ));
        }
    }
    out
}
