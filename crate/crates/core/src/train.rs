//! Mini-batch SGD on the dense depth loss.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::LossKind;
use crate::net::{InputMode, Model};
use crate::rng;
use crate::scene::Scene;
use crate::sparsity::{sample_uniform, SparseDepth};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossKind,
    pub seed: u64,
    /// Fraction of pixels observed in the sparse input, drawn log-uniformly
    /// from this range per scene and epoch. Ignored for rgb-only models.
    pub sample_fraction: (f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-2,
            loss: LossKind::L1,
            seed: 0,
            sample_fraction: (0.003, 0.2),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.sample_fraction;
        let lr_ok = self.learning_rate > 0.0 && self.learning_rate.is_finite();
        if self.batch_size == 0 || !lr_ok || !(lo > 0.0 && lo <= 1.0) || !(lo..=1.0).contains(&hi) {
            return Err(Error::Config(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Trained model, or the last finite state when training diverged.
    pub model: Model,
    /// Mean training loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    /// Epoch in which a non-finite loss or gradient appeared.
    pub diverged_at: Option<usize>,
}

impl TrainReport {
    pub fn converged(&self) -> bool {
        self.diverged_at.is_none()
    }
}

/// Network input for one scene under `mode`, with the observations it was built from.
pub fn scene_input(mode: InputMode, scene: &Scene, n_samples: usize, seed: u64) -> Result<(Tensor, SparseDepth)> {
    let sparse = sample_uniform(&scene.depth, n_samples, seed)?;
    Ok((mode.assemble(&scene.rgb, &sparse)?, sparse))
}

pub fn train(model: &Model, scenes: &[Scene], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    let mut model = model.clone();
    let mut rng = rng::derived(cfg.seed, 0x5452_4149);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let checkpoint = model.clone();
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &scenes[i];
                let pixels = s.depth.len();
                let (lo, hi) = cfg.sample_fraction;
                let frac = if hi > lo { (rng.random_range(lo.ln()..hi.ln())).exp() } else { lo };
                let n = ((frac * pixels as f64).round() as usize).min(pixels);
                let (x, _) = scene_input(model.input_mode, s, n, rng.random())?;
                inputs.push(x);
                targets.push(&s.depth);
            }
            let x = Tensor::stack_batch(&inputs.iter().collect::<Vec<_>>())?;
            let target = Tensor::stack_batch(&targets)?;
            match sgd_step(&mut model, &x, &target, cfg) {
                Ok(loss) => {
                    total += loss;
                    batches += 1;
                }
                Err(Error::Numeric { .. }) => {
                    return Ok(TrainReport {
                        model: checkpoint,
                        epoch_losses,
                        diverged_at: Some(epoch),
                    })
                }
                Err(e) => return Err(e),
            }
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(TrainReport {
        model,
        epoch_losses,
        diverged_at: None,
    })
}

fn sgd_step(model: &mut Model, x: &Tensor, target: &Tensor, cfg: &TrainConfig) -> Result<f64> {
    let mut g = Graph::new();
    let params = model.push_params(&mut g, true)?;
    let xn = g.leaf(x.clone(), false)?;
    let pred = model.apply_layers(&mut g, &params, xn, xn, 0, model.layers.len())?;
    let ones = Tensor::full(target.shape(), 1.0);
    let loss = g.masked_loss(pred, target, &ones, cfg.loss, true)?;
    g.backward(loss)?;
    let value = g.value(loss).item();

    let grads: Vec<Vec<f64>> = params
        .iter()
        .flatten()
        .flat_map(|p| [p.weight, p.bias])
        .map(|id| g.grad(id).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    let mut updated = model.clone();
    for (param, grad) in updated.parameters_mut().into_iter().zip(&grads) {
        for (w, gw) in param.data_mut().iter_mut().zip(grad) {
            *w -= cfg.learning_rate * gw;
        }
        if !param.all_finite() {
            return Err(Error::Numeric {
                node: "parameter update".into(),
            });
        }
    }
    *model = updated;
    Ok(value)
}

/// Mean depth over every pixel of `train_scenes`: the constant predictor a
/// trained model has to beat.
pub fn mean_depth_baseline(train_scenes: &[Scene]) -> f64 {
    let (sum, n) = train_scenes
        .iter()
        .fold((0.0, 0usize), |(s, n), sc| (s + sc.depth.sum(), n + sc.depth.len()));
    sum / n.max(1) as f64
}
