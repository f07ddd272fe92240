//! Influential fields, gradient decomposition, parameter sweeps and timing.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::LossKind;
use crate::metrics::MetricRecord;
use crate::net::Model;
use crate::refine::{refine, refine_batch, PnpConfig, RefineCase};
use crate::scene::{generate_set, Scene, SceneParams};
use crate::sparsity::{sample_lidar, sample_uniform, LidarPreset, SparseDepth};
use crate::tensor::Tensor;

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl BoundingBox {
    pub fn height(&self) -> usize {
        self.row1 - self.row0 + 1
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0 + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.row0 <= other.row0 && self.col0 <= other.col0 && self.row1 >= other.row1 && self.col1 >= other.col1
    }
}

/// Output pixels reached by perturbing one element of the tap feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluentialField {
    pub tap: String,
    pub pixel: (usize, usize),
    pub channel: usize,
    /// Output-resolution 0/1 map of affected pixels, `[H, W]`.
    pub affected: Tensor,
    /// `None` only when nothing is affected, which the data-dependent probe
    /// allows behind dead ReLUs.
    pub bbox: Option<BoundingBox>,
}

impl InfluentialField {
    pub fn count(&self) -> usize {
        self.affected.data().iter().filter(|&&v| v != 0.0).count()
    }

    /// True when every pixel affected here is affected in `other` too.
    pub fn is_subset_of(&self, other: &InfluentialField) -> bool {
        self.affected.shape() == other.affected.shape()
            && self
                .affected
                .data()
                .iter()
                .zip(other.affected.data())
                .all(|(&a, &b)| a == 0.0 || b != 0.0)
    }
}

/// Probes `rear(z + e) − rear(z)` for a unit impulse `e` at `pixel` and
/// `channel` of the tap feature map.
///
/// The geometric probe runs the [`Model::linearized`] network, so the result
/// is the support of every weight path and `x` only fixes the shapes. With
/// `data_dependent` the actual network is probed at `z = front(x)`.
pub fn influential_field(
    model: &Model,
    x: &Tensor,
    tap: &str,
    pixel: (usize, usize),
    channel: usize,
    data_dependent: bool,
) -> Result<InfluentialField> {
    let probe_model = if data_dependent { model.clone() } else { model.linearized() };
    let (front, rear) = probe_model.split(tap)?;
    let z = front.apply(x)?;
    let (_, c, h, w) = z.dims4()?;
    if pixel.0 >= h || pixel.1 >= w || channel >= c {
        return Err(Error::Config(format!(
            "probe ({}, {}) channel {channel} outside the {c}x{h}x{w} feature map at tap '{tap}'",
            pixel.0, pixel.1
        )));
    }
    let base = rear.apply(&z, x)?;
    let mut zp = z.clone();
    zp.data_mut()[(channel * h + pixel.0) * w + pixel.1] += 1.0;
    let moved = rear.apply(&zp, x)?;
    let (_, _, oh, ow) = base.dims4()?;
    let affected = Tensor::new(
        vec![oh, ow],
        base.data()
            .iter()
            .zip(moved.data())
            .map(|(a, b)| if (b - a).abs() > 0.0 { 1.0 } else { 0.0 })
            .collect(),
    )?;
    let mut bbox: Option<BoundingBox> = None;
    for r in 0..oh {
        for col in 0..ow {
            if affected.data()[r * ow + col] == 0.0 {
                continue;
            }
            bbox = Some(match bbox {
                None => BoundingBox {
                    row0: r,
                    col0: col,
                    row1: r,
                    col1: col,
                },
                Some(b) => BoundingBox {
                    row0: b.row0.min(r),
                    col0: b.col0.min(col),
                    row1: b.row1.max(r),
                    col1: b.col1.max(col),
                },
            });
        }
    }
    Ok(InfluentialField {
        tap: tap.to_string(),
        pixel,
        channel,
        affected,
        bbox,
    })
}

/// Batched masked-loss gradient against the sum of per-pixel gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    /// `∂(Σ M_ij L_ij)/∂z` from one backward pass.
    pub g_hat: Tensor,
    /// `Σ M_ij ∂L_ij/∂z`, one backward pass per observed pixel.
    pub g_masked_sum: Tensor,
    /// `‖g_hat − g_masked_sum‖_∞`.
    pub residual_norm: f64,
}

pub fn residual_decomposition(
    model: &Model,
    x: &Tensor,
    ds: &SparseDepth,
    tap: &str,
    loss: LossKind,
) -> Result<Decomposition> {
    if ds.count() == 0 {
        return Err(Error::Config("residual decomposition needs at least one observed pixel".into()));
    }
    let (front, rear) = model.split(tap)?;
    let z = front.apply(x)?;
    let mut g = Graph::new();
    let xn = g.leaf(x.clone(), false)?;
    let zn = g.leaf(z, true)?;
    let pred = rear.build(&mut g, zn, xn)?;

    let total = g.masked_loss(pred, &ds.values, &ds.mask, loss, false)?;
    let g_hat = g.backward_to(total, zn)?;

    let mut sum = vec![0.0; g_hat.len()];
    for (i, _) in ds.mask.data().iter().enumerate().filter(|(_, &m)| m != 0.0) {
        let mut one = Tensor::zeros(ds.mask.shape());
        one.data_mut()[i] = 1.0;
        let li = g.masked_loss(pred, &ds.values, &one, loss, false)?;
        let gi = g.backward_to(li, zn)?;
        sum.iter_mut().zip(gi.data()).for_each(|(s, v)| *s += v);
    }
    let g_masked_sum = Tensor::new(g_hat.shape().to_vec(), sum)?;
    let residual_norm = g_hat
        .data()
        .iter()
        .zip(g_masked_sum.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(Decomposition {
        g_hat,
        g_masked_sum,
        residual_norm,
    })
}

/// How observations are drawn from each benchmark scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Uniform(usize),
    Lidar(LidarPreset),
}

/// A fixed, seeded set of held-out scenes.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub scenes: Vec<Scene>,
    pub params: SceneParams,
    /// Seed of the observation draws, independent of the scene seeds.
    pub mask_seed: u64,
}

impl Benchmark {
    pub fn new(base_seed: u64, n: usize, params: &SceneParams, mask_seed: u64) -> Result<Self> {
        Ok(Self {
            scenes: generate_set(base_seed, n, params)?,
            params: *params,
            mask_seed,
        })
    }

    /// Observation seed of scene `i`.
    pub fn sample_seed(&self, i: usize) -> u64 {
        self.mask_seed.wrapping_add(i as u64)
    }

    pub fn cases(&self, model: &Model, sampling: Sampling) -> Result<Vec<RefineCase>> {
        let camera = self.params.camera();
        self.scenes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let sparse = match sampling {
                    Sampling::Uniform(n) => sample_uniform(&s.depth, n, self.sample_seed(i))?,
                    Sampling::Lidar(p) => sample_lidar(&s.depth, &p.spec(), &camera, self.sample_seed(i))?.sparse,
                };
                Ok(RefineCase {
                    input: model.input_mode.assemble(&s.rgb, &sparse)?,
                    sparse,
                    truth: s.depth.clone(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Iterations,
    Tap,
    Samples,
    Lidar,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Iterations => "iters",
            SweepKind::Tap => "tap",
            SweepKind::Samples => "samples",
            SweepKind::Lidar => "lidar",
        }
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iters" | "iterations" => Ok(SweepKind::Iterations),
            "tap" | "taps" => Ok(SweepKind::Tap),
            "samples" => Ok(SweepKind::Samples),
            "lidar" => Ok(SweepKind::Lidar),
            other => Err(Error::Config(format!(
                "unknown sweep kind '{other}' (expected iters, tap, samples or lidar)"
            ))),
        }
    }
}

/// Settings of one sweep, in increasing order.
#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    Iterations(Vec<usize>),
    Taps(Vec<String>),
    Samples(Vec<usize>),
    Lidar(Vec<LidarPreset>),
}

pub const ITERATION_SETTINGS: [usize; 6] = [0, 1, 2, 5, 10, 20];
pub const SAMPLE_SETTINGS: [usize; 4] = [10, 50, 100, 500];

impl Sweep {
    pub fn default_for(kind: SweepKind, model: &Model) -> Sweep {
        match kind {
            SweepKind::Iterations => Sweep::Iterations(ITERATION_SETTINGS.to_vec()),
            SweepKind::Tap => Sweep::Taps(model.taps()),
            SweepKind::Samples => Sweep::Samples(SAMPLE_SETTINGS.to_vec()),
            SweepKind::Lidar => Sweep::Lidar(LidarPreset::ALL.to_vec()),
        }
    }

    pub fn kind(&self) -> SweepKind {
        match self {
            Sweep::Iterations(_) => SweepKind::Iterations,
            Sweep::Taps(_) => SweepKind::Tap,
            Sweep::Samples(_) => SweepKind::Samples,
            Sweep::Lidar(_) => SweepKind::Lidar,
        }
    }

    fn len(&self) -> usize {
        match self {
            Sweep::Iterations(v) | Sweep::Samples(v) => v.len(),
            Sweep::Taps(v) => v.len(),
            Sweep::Lidar(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub setting: String,
    /// Iteration count, tap index normalized to [0, 1], sample count, or
    /// mean observed fraction for LiDAR presets.
    pub value: f64,
    /// Mean fraction of observed pixels.
    pub coverage: f64,
    pub before: Option<MetricRecord>,
    pub after: Option<MetricRecord>,
    pub median_after: Option<MetricRecord>,
    pub loss_decreased: usize,
    pub failures: usize,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub kind: SweepKind,
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CSV_HEADER: &str =
    "kind,setting,value,coverage,rmse_before,rmse_after,rmse_after_median,mae_before,mae_after,loss_decreased,failures";

impl SweepResult {
    /// One row per setting. Runtimes are left out so the output is stable
    /// across runs; see [`SweepResult::timing_csv`].
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        let f = |r: Option<MetricRecord>, get: fn(&MetricRecord) -> f64| {
            r.map_or_else(|| "nan".to_string(), |m| format!("{:.6}", get(&m)))
        };
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{},{},{},{},{},{}\n",
                self.kind,
                r.setting,
                r.value,
                r.coverage,
                f(r.before, |m| m.rmse),
                f(r.after, |m| m.rmse),
                f(r.median_after, |m| m.rmse),
                f(r.before, |m| m.mae),
                f(r.after, |m| m.mae),
                r.loss_decreased,
                r.failures,
            ));
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("kind,setting,runtime_s\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.6}\n", self.kind, r.setting, r.runtime_s));
        }
        out
    }

    /// Mean RMSE after refinement per setting, `NaN` where nothing completed.
    pub fn rmse_after(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.after.map_or(f64::NAN, |m| m.rmse)).collect()
    }

    /// Settings sorted by decreasing coverage.
    pub fn coverage_ordering(&self) -> Vec<&str> {
        let mut rows: Vec<&SweepRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.coverage.total_cmp(&a.coverage));
        rows.iter().map(|r| r.setting.as_str()).collect()
    }
}

fn check_increasing<T: PartialOrd + fmt::Debug>(v: &[T]) -> Result<()> {
    if v.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("sweep settings must be strictly increasing, got {v:?}")));
    }
    Ok(())
}

/// Runs [`refine_batch`] once per setting on the benchmark. Settings that
/// cannot be prepared are reported as rows with no metrics.
pub fn sweep(model: &Model, bench: &Benchmark, base: &PnpConfig, base_samples: usize, settings: &Sweep) -> Result<SweepResult> {
    base.validate()?;
    let taps = model.taps();
    match settings {
        Sweep::Iterations(v) | Sweep::Samples(v) => check_increasing(v)?,
        Sweep::Taps(v) => {
            let idx = v.iter().map(|t| model.tap_index(t)).collect::<Result<Vec<_>>>()?;
            check_increasing(&idx)?;
        }
        Sweep::Lidar(v) => {
            let idx: Vec<usize> = v
                .iter()
                .map(|p| LidarPreset::ALL.iter().position(|q| q == p).unwrap_or(usize::MAX))
                .collect();
            check_increasing(&idx)?;
        }
    }
    let uniform = if matches!(settings, Sweep::Samples(_) | Sweep::Lidar(_)) {
        None
    } else {
        Some(bench.cases(model, Sampling::Uniform(base_samples))?)
    };

    let mut rows = Vec::with_capacity(settings.len());
    for i in 0..settings.len() {
        let mut cfg = base.clone();
        let (setting, value, sampling) = match settings {
            Sweep::Iterations(v) => {
                cfg.iterations = v[i];
                (v[i].to_string(), v[i] as f64, None)
            }
            Sweep::Taps(v) => {
                cfg.tap = v[i].clone();
                let idx = model.tap_index(&v[i])?;
                (v[i].clone(), idx as f64 / (taps.len() - 1).max(1) as f64, None)
            }
            Sweep::Samples(v) => (v[i].to_string(), v[i] as f64, Some(Sampling::Uniform(v[i]))),
            Sweep::Lidar(v) => (v[i].name().to_string(), f64::NAN, Some(Sampling::Lidar(v[i]))),
        };
        let owned;
        let cases: &[RefineCase] = match sampling {
            None => uniform.as_deref().unwrap_or_default(),
            Some(s) => match bench.cases(model, s) {
                Ok(c) => {
                    owned = c;
                    &owned
                }
                Err(_) => {
                    rows.push(SweepRow {
                        setting,
                        value,
                        coverage: f64::NAN,
                        before: None,
                        after: None,
                        median_after: None,
                        loss_decreased: 0,
                        failures: bench.scenes.len(),
                        runtime_s: 0.0,
                    });
                    continue;
                }
            },
        };
        let coverage = if cases.is_empty() {
            0.0
        } else {
            cases.iter().map(|c| c.sparse.density()).sum::<f64>() / cases.len() as f64
        };
        let value = if value.is_nan() { coverage } else { value };
        let t = Instant::now();
        let report = refine_batch(model, cases, &cfg);
        let runtime_s = t.elapsed().as_secs_f64();
        rows.push(SweepRow {
            setting,
            value,
            coverage,
            before: report.mean_before(),
            after: report.mean_after(),
            median_after: report.median_after(),
            loss_decreased: report.loss_decreased(),
            failures: report.failures,
            runtime_s,
        });
    }
    Ok(SweepResult {
        kind: settings.kind(),
        rows,
    })
}

/// Mean wall time of plain inference and of refinement on one case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub runs: usize,
    pub iterations: usize,
    pub base_mean_s: f64,
    pub pnp_mean_s: f64,
}

impl Timing {
    pub fn ratio(&self) -> f64 {
        self.pnp_mean_s / self.base_mean_s
    }

    pub const CSV_HEADER: &'static str = "runs,iterations,base_mean_s,pnp_mean_s,ratio";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6e},{:.6e},{:.4}",
            self.runs,
            self.iterations,
            self.base_mean_s,
            self.pnp_mean_s,
            self.ratio()
        )
    }
}

/// Times `runs` plain forward passes and `runs` refinements, interleaved so
/// that drift in machine load affects both alike, after one untimed warm-up.
pub fn time_inference(model: &Model, case: &RefineCase, cfg: &PnpConfig, runs: usize) -> Result<Timing> {
    if runs == 0 {
        return Err(Error::Config("timing needs at least one run".into()));
    }
    model.run(&case.input)?;
    refine(model, &case.input, &case.sparse, cfg)?;
    let (mut base, mut pnp) = (0.0, 0.0);
    for _ in 0..runs {
        let t = Instant::now();
        std::hint::black_box(model.run(&case.input)?);
        base += t.elapsed().as_secs_f64();
        let t = Instant::now();
        std::hint::black_box(refine(model, &case.input, &case.sparse, cfg)?);
        pnp += t.elapsed().as_secs_f64();
    }
    Ok(Timing {
        runs,
        iterations: cfg.iterations,
        base_mean_s: base / runs as f64,
        pnp_mean_s: pnp / runs as f64,
    })
}
