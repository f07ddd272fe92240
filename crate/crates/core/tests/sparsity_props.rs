use pnp_depth::scene::{generate, SceneParams};
use pnp_depth::sparsity::{sample_lidar, sample_uniform, LidarPreset};
use pnp_depth::Tensor;

#[test]
fn uniform_inclusion_is_binomial() {
    let depth = Tensor::full(&[1, 1, 64, 48], 3.0);
    let (n, trials) = (31usize, 10_000u64);
    let p = n as f64 / depth.len() as f64;
    let watched = [0usize, 1, 777, 1536, 3071];
    let mut hits = [0usize; 5];
    for seed in 0..trials {
        let s = sample_uniform(&depth, n, seed).unwrap();
        assert_eq!(s.count(), n);
        for (h, &i) in hits.iter_mut().zip(&watched) {
            if s.mask.data()[i] != 0.0 {
                *h += 1;
            }
        }
    }
    let mean = trials as f64 * p;
    let sd = (trials as f64 * p * (1.0 - p)).sqrt();
    for (h, i) in hits.iter().zip(watched) {
        assert!((*h as f64 - mean).abs() < 5.0 * sd, "pixel {i}: {h} hits, expected {mean:.1} ± {sd:.1}");
    }
}

#[test]
fn finer_vertical_resolution_never_loses_coverage() {
    let p = SceneParams::default();
    let cam = p.camera();
    for seed in 0..10 {
        let s = generate(seed, &p).unwrap();
        for preset in LidarPreset::ALL {
            let coarse = preset.spec();
            let mut fine = coarse.clone();
            fine.vres_deg /= 2.0;
            let a = sample_lidar(&s.depth, &coarse, &cam, seed).unwrap().sparse;
            let b = sample_lidar(&s.depth, &fine, &cam, seed).unwrap().sparse;
            assert!(b.count() >= a.count(), "{} seed {seed}", preset.name());
            let superset = a.mask.data().iter().zip(b.mask.data()).all(|(&x, &y)| x == 0.0 || y != 0.0);
            assert!(superset, "{} seed {seed}", preset.name());
        }
    }
}

#[test]
fn every_preset_observes_something() {
    let p = SceneParams::default();
    for seed in 0..10 {
        let s = generate(seed, &p).unwrap();
        for preset in LidarPreset::ALL {
            let sample = sample_lidar(&s.depth, &preset.spec(), &p.camera(), seed).unwrap();
            assert!(sample.sparse.count() > 0, "{} seed {seed}", preset.name());
            let vals = sample.sparse.values.data();
            let ok = sample
                .sparse
                .mask
                .data()
                .iter()
                .enumerate()
                .all(|(i, &m)| if m != 0.0 { vals[i] == s.depth.data()[i] } else { vals[i] == 0.0 });
            assert!(ok, "observed values must equal ground truth");
        }
    }
}

#[test]
fn vlp16_has_sixteen_scanlines() {
    let p = SceneParams::default();
    let s = generate(0, &p).unwrap();
    let sample = sample_lidar(&s.depth, &LidarPreset::Vlp16.spec(), &p.camera(), 0).unwrap();
    assert_eq!(sample.scanlines, 16);
}
