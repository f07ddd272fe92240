mod common;

use common::{random, rng};
use pnp_depth::analysis::{influential_field, residual_decomposition, InfluentialField};
use pnp_depth::net::{Arch, InputMode, Layer, Model};
use pnp_depth::sparsity::SparseDepth;
use pnp_depth::{LossKind, Tensor};
use rand::Rng;

fn unit_weights(mut m: Model) -> Model {
    m.parameters_mut()
        .into_iter()
        .for_each(|p| p.data_mut().iter_mut().for_each(|v| *v = 1.0));
    m
}

/// conv, upsample, conv, conv on a single-channel input.
fn conv_up_conv(seed: u64) -> Model {
    let mut m = Model::new(
        Arch::Custom,
        InputMode::Sd,
        vec![
            ("c1", Layer::conv(2, 3, 3, true)),
            ("up", Layer::Upsample),
            ("c2", Layer::conv(3, 2, 3, true)),
            ("out", Layer::conv(2, 1, 3, false)),
        ],
    )
    .unwrap();
    m.init_he(seed);
    m
}

/// Set propagation: a 3x3 conv dilates by one pixel, an upsample maps each
/// pixel to its 2x2 block; both clipped to the image.
fn oracle(model: &Model, tap: &str, pixel: (usize, usize), h: usize, w: usize) -> Vec<bool> {
    let start = model.tap_index(tap).unwrap();
    let (mut sh, mut sw) = (h, w);
    for l in &model.layers[start..] {
        if l.layer.kind() == "upsample2x" {
            sh /= 2;
            sw /= 2;
        }
    }
    let mut set = vec![false; sh * sw];
    set[pixel.0 * sw + pixel.1] = true;
    for l in &model.layers[start..] {
        match l.layer.kind() {
            "conv" => {
                let mut next = vec![false; sh * sw];
                for r in 0..sh {
                    for c in 0..sw {
                        if set[r * sw + c] {
                            for rr in r.saturating_sub(1)..=(r + 1).min(sh - 1) {
                                for cc in c.saturating_sub(1)..=(c + 1).min(sw - 1) {
                                    next[rr * sw + cc] = true;
                                }
                            }
                        }
                    }
                }
                set = next;
            }
            "upsample2x" => {
                let mut next = vec![false; 4 * sh * sw];
                for r in 0..2 * sh {
                    for c in 0..2 * sw {
                        next[r * 2 * sw + c] = set[(r / 2) * sw + c / 2];
                    }
                }
                set = next;
                sh *= 2;
                sw *= 2;
            }
            other => panic!("oracle does not model {other}"),
        }
    }
    set
}

fn as_bools(f: &InfluentialField) -> Vec<bool> {
    f.affected.data().iter().map(|&v| v != 0.0).collect()
}

#[test]
fn unit_kernel_field_sizes() {
    let m = unit_weights(
        Model::new(
            Arch::Custom,
            InputMode::Sd,
            vec![("a", Layer::conv(2, 1, 3, true)), ("b", Layer::conv(1, 1, 3, false))],
        )
        .unwrap(),
    );
    let x = Tensor::zeros(&[1, 2, 20, 20]);
    let two = influential_field(&m, &x, "input", (10, 10), 0, false).unwrap();
    let one = influential_field(&m, &x, "a", (10, 10), 0, false).unwrap();
    let b2 = two.bbox.unwrap();
    let b1 = one.bbox.unwrap();
    assert_eq!((b2.height(), b2.width(), two.count()), (5, 5, 25));
    assert_eq!((b1.height(), b1.width(), one.count()), (3, 3, 9));
    assert!(one.is_subset_of(&two));
    assert!(b2.contains(&b1));
}

#[test]
fn plain_cnn_fields_nest_and_shrink() {
    for seed in 0..3 {
        let m = Model::build(Arch::PlainCnn, InputMode::Sd, seed).unwrap();
        let x = random(&mut rng(seed), &[1, 2, 32, 32], 0.0, 1.0);
        let fields: Vec<_> = m
            .taps()
            .iter()
            .map(|t| influential_field(&m, &x, t, (16, 16), 0, false).unwrap())
            .collect();
        for pair in fields.windows(2) {
            let (shallow, deep) = (&pair[0], &pair[1]);
            assert!(deep.is_subset_of(shallow), "{} vs {}", deep.tap, shallow.tap);
            assert!(shallow.bbox.unwrap().contains(&deep.bbox.unwrap()));
            assert!(deep.bbox.unwrap().area() <= shallow.bbox.unwrap().area());
        }
        let last = fields.last().unwrap().bbox.unwrap();
        assert_eq!((last.height(), last.width()), (3, 3));
        let first = fields[0].bbox.unwrap();
        assert_eq!((first.height(), first.width()), (11, 11));
    }
}

#[test]
fn upsampling_field_matches_set_propagation() {
    let (h, w) = (16, 12);
    for seed in 0..3 {
        let m = conv_up_conv(seed);
        let x = random(&mut rng(seed), &[1, 2, h / 2, w / 2], 0.0, 1.0);
        let mut r = rng(seed + 100);
        for tap in ["input", "c1"] {
            for _ in 0..6 {
                let p = (r.random_range(0..h / 2), r.random_range(0..w / 2));
                let f = influential_field(&m, &x, tap, p, 0, false).unwrap();
                assert_eq!(as_bools(&f), oracle(&m, tap, p, h, w), "tap {tap} pixel {p:?}");
            }
        }
        for tap in ["up", "c2"] {
            for _ in 0..6 {
                let p = (r.random_range(0..h), r.random_range(0..w));
                let f = influential_field(&m, &x, tap, p, 1, false).unwrap();
                assert_eq!(as_bools(&f), oracle(&m, tap, p, h, w), "tap {tap} pixel {p:?}");
            }
        }
        let shallow = influential_field(&m, &x, "input", (4, 3), 0, false).unwrap();
        let deep = influential_field(&m, &x, "c1", (4, 3), 0, false).unwrap();
        assert!(shallow.bbox.unwrap().contains(&deep.bbox.unwrap()));
    }
}

#[test]
fn data_dependent_field_within_geometric_field() {
    let m = Model::build(Arch::PlainCnn, InputMode::Sd, 4).unwrap();
    let x = random(&mut rng(4), &[1, 2, 24, 24], 0.0, 1.0);
    for tap in m.taps() {
        let geo = influential_field(&m, &x, &tap, (12, 12), 0, false).unwrap();
        let data = influential_field(&m, &x, &tap, (12, 12), 0, true).unwrap();
        assert!(data.is_subset_of(&geo), "tap {tap}");
    }
}

fn random_mask(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let mut m = Tensor::from_fn(shape, |_| if r.random_bool(0.3) { 1.0 } else { 0.0 });
    m.data_mut()[0] = 1.0;
    m
}

#[test]
fn masked_gradient_is_sum_of_pixel_gradients() {
    let mut r = rng(21);
    for case in 0..20 {
        let mode = if case % 2 == 0 { InputMode::Rgb } else { InputMode::RgbSd };
        let m = Model::build(Arch::PlainCnn, mode, case).unwrap();
        let depth = random(&mut r, &[1, 1, 8, 8], 0.5, 10.0);
        let ds = SparseDepth::from_mask(&depth, random_mask(&mut r, &[1, 1, 8, 8])).unwrap();
        let rgb = random(&mut r, &[1, 3, 8, 8], 0.0, 1.0);
        let x = mode.assemble(&rgb, &ds).unwrap();
        let taps = m.taps();
        let tap = &taps[(case as usize) % taps.len()];
        for loss in [LossKind::L1, LossKind::L2] {
            let d = residual_decomposition(&m, &x, &ds, tap, loss).unwrap();
            if mode == InputMode::Rgb {
                assert!(d.residual_norm < 1e-10, "case {case} tap {tap} {loss}: {}", d.residual_norm);
            } else {
                println!("rgb+sd case {case} tap {tap} {loss}: residual {:.3e}", d.residual_norm);
            }
        }
    }
}
