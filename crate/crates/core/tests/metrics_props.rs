mod common;

use common::{random, rng};
use pnp_depth::metrics::evaluate;
use pnp_depth::Tensor;
use rand::Rng;

/// Straightforward per-pixel reimplementation.
fn oracle(pred: &[f64], gt: &[f64], valid: &[bool]) -> [f64; 6] {
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| valid[i]).collect();
    let n = idx.len() as f64;
    let mut out = [0.0; 6];
    for &i in &idx {
        let (p, d) = (pred[i], gt[i]);
        out[0] += (p - d) * (p - d);
        out[1] += (p - d).abs();
        let pc = if p < 1e-6 { 1e-6 } else { p };
        out[2] += (pc - d).abs() / d;
        let ratio = if pc / d > d / pc { pc / d } else { d / pc };
        for k in 0..3 {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                out[3 + k] += 1.0;
            }
        }
    }
    out[0] = (out[0] / n).sqrt();
    for v in out.iter_mut().skip(1) {
        *v /= n;
    }
    out
}

#[test]
fn agrees_with_brute_force() {
    let mut r = rng(5);
    for _ in 0..50 {
        let gt = random(&mut r, &[1, 1, 16, 16], 0.5, 10.0);
        let pred = random(&mut r, &[1, 1, 16, 16], -0.5, 12.0);
        let valid: Vec<bool> = (0..256).map(|_| r.random_bool(0.6)).collect();
        let mask = Tensor::new(vec![1, 1, 16, 16], valid.iter().map(|&v| v as u8 as f64).collect()).unwrap();
        let m = evaluate(&pred, &gt, Some(&mask)).unwrap();
        let o = oracle(pred.data(), gt.data(), &valid);
        let got = [m.rmse, m.mae, m.mre, m.delta1, m.delta2, m.delta3];
        for k in 0..6 {
            assert!((got[k] - o[k]).abs() < 1e-12, "metric {k}: {} vs {}", got[k], o[k]);
        }
        assert_eq!(m.n_pixels, valid.iter().filter(|&&v| v).count());
    }
}

#[test]
fn joint_scaling() {
    let mut r = rng(6);
    for c in [0.5, 2.0, 3.7] {
        let gt = random(&mut r, &[1, 1, 16, 16], 0.5, 10.0);
        let pred = random(&mut r, &[1, 1, 16, 16], 0.5, 10.0);
        let a = evaluate(&pred, &gt, None).unwrap();
        let b = evaluate(&pred.map(|v| v * c), &gt.map(|v| v * c), None).unwrap();
        assert!((b.rmse - c * a.rmse).abs() < 1e-12 * c * a.rmse.max(1.0));
        assert!((b.mae - c * a.mae).abs() < 1e-12 * c * a.mae.max(1.0));
        assert!((b.mre - a.mre).abs() < 1e-12);
        assert_eq!((b.delta1, b.delta2, b.delta3), (a.delta1, a.delta2, a.delta3));
    }
}

#[test]
fn record_invariants() {
    let mut r = rng(7);
    for _ in 0..50 {
        let gt = random(&mut r, &[1, 1, 8, 8], 0.5, 10.0);
        let pred = random(&mut r, &[1, 1, 8, 8], 0.0, 12.0);
        let m = evaluate(&pred, &gt, None).unwrap();
        assert!(m.rmse >= m.mae && m.mae >= 0.0);
        assert!(0.0 <= m.delta1 && m.delta1 <= m.delta2 && m.delta2 <= m.delta3 && m.delta3 <= 1.0);
    }
}
