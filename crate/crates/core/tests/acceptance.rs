//! One PASS/FAIL line per acceptance criterion; exits non-zero if any fails.

mod common;

use std::time::{Duration, Instant};

use common::{check_all_ops, random, rng};
use pnp_depth::analysis::{
    influential_field, residual_decomposition, sweep, Benchmark, Sampling, Sweep, ITERATION_SETTINGS,
    SAMPLE_SETTINGS,
};
use pnp_depth::checkpoint;
use pnp_depth::metrics::{evaluate, Percent};
use pnp_depth::net::{Arch, InputMode, Layer, Model};
use pnp_depth::refine::{refine, refine_batch, PnpConfig, UpdateRule};
use pnp_depth::scene::{generate, generate_set, SceneParams};
use pnp_depth::sparsity::{sample_lidar, sample_uniform, LidarPreset, SparseDepth};
use pnp_depth::train::{mean_depth_baseline, train, TrainConfig};
use pnp_depth::{LossKind, Tensor};
use rand::Rng;

const N_TRAIN: usize = 200;
const N_TEST: usize = 100;
const TEST_SEED: u64 = 1_000_000;
/// 1% of a 64x48 image.
const N_SAMPLES: usize = 31;
/// Sign steps move each element by exactly alpha, so 50 steps at the
/// refinement default of 0.01 cap the reachable change of z.
const NEAR_DENSE_ALPHA: f64 = 0.02;

struct Outcome {
    id: &'static str,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn report(id: &'static str, title: &'static str, pass: bool, detail: String) -> Outcome {
    println!("{id} {:<4} {title}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { id, title, pass, detail }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

fn a1() -> Outcome {
    let t = Instant::now();
    let reports = check_all_ops(11);
    let elapsed = t.elapsed();
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.op.clone()).collect();
    let min = reports.iter().map(|r| r.coords).min().unwrap_or(0);
    report(
        "A1",
        "gradient correctness",
        failed.is_empty() && elapsed < Duration::from_secs(10),
        format!(
            "{} ops, min {min} coordinates, failed {failed:?}, {:.2} s",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn a2() -> Outcome {
    let conv = |w: Vec<f64>| Layer::Conv {
        weight: Tensor::new(vec![1, w.len(), 1, 1], w).unwrap(),
        bias: Tensor::zeros(&[1]),
        stride: 1,
        pad: 0,
        relu: false,
    };
    let m = Model::new(
        Arch::Custom,
        InputMode::Sd,
        vec![("front", conv(vec![1.0, 0.0])), ("rear", conv(vec![2.0]))],
    )
    .unwrap();
    let x = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
    let one = Tensor::full(&[1, 1, 1, 1], 1.0);
    let ds = SparseDepth::from_mask(&Tensor::full(&[1, 1, 1, 1], 5.0), one).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for (rule, z1, p1) in [(UpdateRule::Sign, 1.01, 2.02), (UpdateRule::RawGradient, 1.02, 2.04)] {
        let cfg = PnpConfig {
            iterations: 1,
            rule,
            ..PnpConfig::new("front")
        };
        let out = refine(&m, &x, &ds, &cfg).unwrap();
        ok &= close(out.latent.item(), z1) && close(out.depth.item(), p1);
        detail.push(format!("{rule}: z1={:.12} pred1={:.12}", out.latent.item(), out.depth.item()));
    }
    report("A2", "single-step closed form", ok, detail.join(", "))
}

fn a3() -> Outcome {
    let mut two = Model::new(
        Arch::Custom,
        InputMode::Sd,
        vec![("a", Layer::conv(2, 1, 3, true)), ("b", Layer::conv(1, 1, 3, false))],
    )
    .unwrap();
    two.parameters_mut()
        .into_iter()
        .for_each(|p| p.data_mut().iter_mut().for_each(|v| *v = 1.0));
    let x = Tensor::zeros(&[1, 2, 16, 16]);
    let f2 = influential_field(&two, &x, "input", (8, 8), 0, false).unwrap().bbox.unwrap();
    let f1 = influential_field(&two, &x, "a", (8, 8), 0, false).unwrap().bbox.unwrap();

    let plain = Model::build(Arch::PlainCnn, InputMode::Sd, 0).unwrap();
    let xp = random(&mut rng(3), &[1, 2, 32, 32], 0.0, 1.0);
    let fields: Vec<_> = plain
        .taps()
        .iter()
        .map(|t| influential_field(&plain, &xp, t, (16, 16), 0, false).unwrap())
        .collect();
    let nested = fields.windows(2).all(|p| {
        p[1].is_subset_of(&p[0]) && p[0].bbox.unwrap().contains(&p[1].bbox.unwrap())
    });
    let sizes: Vec<String> = fields
        .iter()
        .map(|f| format!("{}={}x{}", f.tap, f.bbox.unwrap().height(), f.bbox.unwrap().width()))
        .collect();
    report(
        "A3",
        "influential field",
        (f2.height(), f2.width()) == (5, 5) && (f1.height(), f1.width()) == (3, 3) && nested,
        format!(
            "two convs {}x{}, one conv {}x{}, nested over [{}]",
            f2.height(),
            f2.width(),
            f1.height(),
            f1.width(),
            sizes.join(" ")
        ),
    )
}

fn a4() -> Outcome {
    let mut r = rng(21);
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let m = Model::build(Arch::PlainCnn, InputMode::Rgb, case).unwrap();
        let depth = random(&mut r, &[1, 1, 8, 8], 0.5, 10.0);
        let mut mask = Tensor::from_fn(&[1, 1, 8, 8], |_| if r.random_bool(0.3) { 1.0 } else { 0.0 });
        mask.data_mut()[0] = 1.0;
        let ds = SparseDepth::from_mask(&depth, mask).unwrap();
        let x = random(&mut r, &[1, 3, 8, 8], 0.0, 1.0);
        let taps = m.taps();
        let tap = &taps[1 + (case as usize) % (taps.len() - 1)];
        let d = residual_decomposition(&m, &x, &ds, tap, LossKind::L1).unwrap();
        worst = worst.max(d.residual_norm);
    }
    report("A4", "masked gradient decomposition", worst < 1e-10, format!("max residual {worst:.3e} over 20 cases"))
}

struct Trained {
    model: Model,
    bench: Benchmark,
    epoch_losses: Vec<f64>,
    baseline: f64,
}

fn trained() -> Trained {
    let params = SceneParams::default();
    let scenes = generate_set(0, N_TRAIN, &params).unwrap();
    let init = Model::build(Arch::PlainCnn, InputMode::Sd, 0).unwrap();
    let r = train(&init, &scenes, &TrainConfig::default()).unwrap();
    Trained {
        model: r.model,
        bench: Benchmark::new(TEST_SEED, N_TEST, &params, 0).unwrap(),
        epoch_losses: r.epoch_losses,
        baseline: mean_depth_baseline(&scenes),
    }
}

fn a5(t: &Trained, started: Instant) -> Outcome {
    let cases = t.bench.cases(&t.model, Sampling::Uniform(N_SAMPLES)).unwrap();
    let report_ = refine_batch(&t.model, &cases, &PnpConfig::for_model(&t.model));
    let before = report_.mean_before().unwrap().rmse;
    let after = report_.mean_after().unwrap().rmse;
    let decreased = report_.loss_decreased();
    let elapsed = started.elapsed();
    report(
        "A5",
        "end-to-end improvement",
        after < before && decreased >= 95 && report_.failures == 0 && elapsed < Duration::from_secs(300),
        format!(
            "RMSE {before:.6} -> {after:.6} ({}), loss decreased in {decreased}/{N_TEST}, train+refine {:.1} s",
            Percent::between(before, after),
            elapsed.as_secs_f64()
        ),
    )
}

fn a6(t: &Trained) -> Outcome {
    let cfg = PnpConfig::for_model(&t.model);
    let res = sweep(&t.model, &t.bench, &cfg, N_SAMPLES, &Sweep::Iterations(ITERATION_SETTINGS.to_vec())).unwrap();
    let rmse = res.rmse_after();
    let at = |k: usize| rmse[ITERATION_SETTINGS.iter().position(|&s| s == k).unwrap()];
    let early = at(0) - at(5);
    let late = at(10) - at(20);
    report(
        "A6",
        "iteration saturation",
        late < early,
        format!("RMSE by K {rmse:.6?}; gain 0->5 {early:.6}, gain 10->20 {late:.6}"),
    )
}

fn a7(t: &Trained) -> Outcome {
    let cfg = PnpConfig::for_model(&t.model);
    let res = sweep(&t.model, &t.bench, &cfg, N_SAMPLES, &Sweep::Samples(SAMPLE_SETTINGS.to_vec())).unwrap();
    let rmse = res.rmse_after();
    report(
        "A7",
        "sample-count monotonicity",
        rmse.windows(2).all(|w| w[1] <= w[0]),
        format!("RMSE after at {SAMPLE_SETTINGS:?} samples: {rmse:.4?}"),
    )
}

fn a8() -> Outcome {
    let s = Percent::between(0.8933, 0.5021).to_string();
    report("A8", "improvement formatting", s == "+43.8%", s.clone())
}

fn a9() -> Outcome {
    let params = SceneParams::default();
    let cam = params.camera();
    let expected = [LidarPreset::Vlp32c, LidarPreset::Hdl64e, LidarPreset::Hdl32e, LidarPreset::Vlp16];
    let mut agree = 0;
    let mut lines16 = true;
    for seed in 0..10 {
        let s = generate(seed, &params).unwrap();
        let cov: Vec<f64> = expected
            .iter()
            .map(|p| {
                let sample = sample_lidar(&s.depth, &p.spec(), &cam, seed).unwrap();
                if *p == LidarPreset::Vlp16 {
                    lines16 &= sample.scanlines == 16;
                }
                sample.sparse.density()
            })
            .collect();
        if cov.windows(2).all(|w| w[0] > w[1]) {
            agree += 1;
        }
    }
    report(
        "A9",
        "LiDAR presets",
        lines16 && agree > 5,
        format!("VLP-16 has 16 scanlines: {lines16}; VLP-32C > HDL-64E > HDL-32E > VLP-16 in {agree}/10 seeds"),
    )
}

fn a10(t: &Trained) -> Outcome {
    let model_bytes = checkpoint::to_bytes(&t.model);
    let cases = t.bench.cases(&t.model, Sampling::Uniform(N_SAMPLES)).unwrap();
    let mut frozen = true;
    let mut identical = true;
    for c in cases.iter().take(10) {
        refine(&t.model, &c.input, &c.sparse, &PnpConfig::for_model(&t.model)).unwrap();
        frozen &= checkpoint::to_bytes(&t.model) == model_bytes;
        for tap in t.model.taps() {
            let cfg = PnpConfig {
                iterations: 0,
                ..PnpConfig::new(tap)
            };
            identical &= refine(&t.model, &c.input, &c.sparse, &cfg).unwrap().depth == t.model.run(&c.input).unwrap();
        }
    }

    let run = || {
        let params = SceneParams {
            height: 16,
            width: 16,
            ..Default::default()
        };
        let scenes = generate_set(7, 4, &params).unwrap();
        let init = Model::build(Arch::CoarseFine, InputMode::RgbSd, 7).unwrap();
        let m = train(&init, &scenes, &TrainConfig { epochs: 2, ..Default::default() }).unwrap().model;
        let sp = sample_uniform(&scenes[0].depth, 20, 7).unwrap();
        let x = m.input_mode.assemble(&scenes[0].rgb, &sp).unwrap();
        let out = refine(&m, &x, &sp, &PnpConfig::for_model(&m)).unwrap();
        let lidar = sample_lidar(&scenes[1].depth, &LidarPreset::Hdl64e.spec(), &params.camera(), 7).unwrap();
        let mut bytes = checkpoint::to_bytes(&m);
        for s in &scenes {
            bytes.extend(s.rgb.data().iter().chain(s.depth.data()).flat_map(|v| v.to_le_bytes()));
        }
        bytes.extend(out.depth.data().iter().chain(lidar.sparse.mask.data()).flat_map(|v| v.to_le_bytes()));
        bytes.extend(out.trace.to_csv().into_bytes());
        bytes
    };
    let stable = run() == run();
    report(
        "A10",
        "freeze and identity contracts",
        frozen && identical && stable,
        format!("weights unchanged: {frozen}; K=0 bit-identical at every tap: {identical}; seeded outputs stable: {stable}"),
    )
}

fn near_dense(t: &Trained) -> Outcome {
    let mut ratios = Vec::new();
    for seed in 0..10 {
        let s = generate(TEST_SEED + seed, &SceneParams::default()).unwrap();
        let ds = SparseDepth::from_mask(&s.depth, Tensor::full(s.depth.shape(), 1.0)).unwrap();
        let x = t.model.input_mode.assemble(&s.rgb, &ds).unwrap();
        let cfg = PnpConfig {
            iterations: 50,
            loss: LossKind::L2,
            alpha: NEAR_DENSE_ALPHA,
            ..PnpConfig::for_model(&t.model)
        };
        let losses = refine(&t.model, &x, &ds, &cfg).unwrap().trace.losses();
        ratios.push(losses.last().unwrap() / losses[0]);
    }
    report(
        "S1",
        "dense supervision drives the loss down",
        ratios.iter().all(|&r| r < 0.1),
        format!("final/initial L2 loss after 50 steps at alpha {NEAR_DENSE_ALPHA}: {ratios:.4?}"),
    )
}

fn beats_mean(t: &Trained) -> Outcome {
    let cases = t.bench.cases(&t.model, Sampling::Uniform(N_SAMPLES)).unwrap();
    let (mut model_rmse, mut mean_rmse) = (0.0, 0.0);
    for c in &cases {
        model_rmse += evaluate(&t.model.run(&c.input).unwrap(), &c.truth, None).unwrap().rmse;
        let constant = Tensor::full(c.truth.shape(), t.baseline);
        mean_rmse += evaluate(&constant, &c.truth, None).unwrap().rmse;
    }
    let n = cases.len() as f64;
    report(
        "S2",
        "trained model beats the mean-depth predictor",
        model_rmse < mean_rmse,
        format!("held-out RMSE {:.4} vs {:.4}", model_rmse / n, mean_rmse / n),
    )
}

fn training_converges(t: &Trained) -> Outcome {
    let first = t.epoch_losses[0];
    let last = *t.epoch_losses.last().unwrap();
    report(
        "S3",
        "training lowers the loss",
        last < first,
        format!("epoch loss {first:.4} -> {last:.4}"),
    )
}

fn main() {
    let mut outcomes = vec![a1(), a2(), a3(), a4()];
    let started = Instant::now();
    let t = trained();
    outcomes.push(a5(&t, started));
    outcomes.push(a6(&t));
    outcomes.push(a7(&t));
    outcomes.push(a8());
    outcomes.push(a9());
    outcomes.push(a10(&t));
    outcomes.push(near_dense(&t));
    outcomes.push(beats_mean(&t));
    outcomes.push(training_converges(&t));

    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    println!("\n{} of {} checks passed", outcomes.len() - failed.len(), outcomes.len());
    if !failed.is_empty() {
        for o in &failed {
            eprintln!("failed: {} {} ({})", o.id, o.title, o.detail);
        }
        std::process::exit(1);
    }
}
