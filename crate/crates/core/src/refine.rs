//! Inference-time refinement of an intermediate feature map.
//!
//! The model is split at a tap into `front` and `rear`. Starting from
//! `z₀ = front(x)`, each iteration backpropagates the sparse-point loss
//! `L(rear(z_k), D_s)` to the tap and steps
//! `z_{k+1} = z_k − α·U(∂L/∂z_k)`. Network weights are never touched.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{sign, LossKind};
use crate::metrics::{evaluate, improvement, Improvement, MetricRecord};
use crate::net::Model;
use crate::sparsity::SparseDepth;
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.01;
pub const DEFAULT_ITERATIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum UpdateRule {
    /// `U = sign`, with `sign(0) = 0`.
    #[default]
    Sign,
    RawGradient,
    /// Adam with bias correction; state starts fresh on every call.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl UpdateRule {
    pub fn adam() -> Self {
        UpdateRule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl fmt::Display for UpdateRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UpdateRule::Sign => f.write_str("sign"),
            UpdateRule::RawGradient => f.write_str("raw_gradient"),
            UpdateRule::Adam { beta1, beta2, eps } => write!(f, "adam({beta1},{beta2},{eps})"),
        }
    }
}

impl FromStr for UpdateRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "sign" => return Ok(UpdateRule::Sign),
            "raw_gradient" | "gradient" => return Ok(UpdateRule::RawGradient),
            "adam" => return Ok(UpdateRule::adam()),
            _ => {}
        }
        let bad = || Error::Config(format!("unknown update rule '{s}' (expected sign, raw_gradient, adam or adam(b1,b2,eps))"));
        let inner = s
            .strip_prefix("adam(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(bad)?;
        let v: Vec<f64> = inner
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        match v[..] {
            [beta1, beta2, eps] if (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 => {
                Ok(UpdateRule::Adam { beta1, beta2, eps })
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpConfig {
    pub tap: String,
    pub alpha: f64,
    pub iterations: usize,
    pub loss: LossKind,
    pub rule: UpdateRule,
    /// Keep the dense prediction of every iteration in the trace.
    pub keep_predictions: bool,
}

impl PnpConfig {
    pub fn new(tap: impl Into<String>) -> Self {
        Self {
            tap: tap.into(),
            alpha: DEFAULT_ALPHA,
            iterations: DEFAULT_ITERATIONS,
            loss: LossKind::L1,
            rule: UpdateRule::Sign,
            keep_predictions: false,
        }
    }

    /// Defaults with the architecture's preferred tap.
    pub fn for_model(model: &Model) -> Self {
        Self::new(default_tap(model))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Deepest tap, just before the output layer. Shallow taps let the update
/// spread far beyond the observed pixels and tend to overshoot between them.
pub fn default_tap(model: &Model) -> String {
    model.taps().pop().expect("a model has at least the input tap")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub iteration: usize,
    /// `L(rear(z_k), D_s)`.
    pub sparse_loss: f64,
    /// `α·‖U‖∞` of the step that produced `z_k`; zero for `k = 0`.
    pub update_inf_norm: f64,
    pub prediction: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RefineTrace {
    pub steps: Vec<TraceStep>,
}

impl RefineTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.sparse_loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,sparse_loss,update_inf_norm\n");
        for s in &self.steps {
            out.push_str(&format!("{},{:.12e},{:.12e}\n", s.iteration, s.sparse_loss, s.update_inf_norm));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineStatus {
    Ok,
    /// Empty mask; the base prediction is returned unchanged.
    NoObservation,
    /// A non-finite value appeared at this iteration; the last finite
    /// prediction is returned.
    NumericFailure { iteration: usize },
}

#[derive(Debug, Clone)]
pub struct RefineOutput {
    pub depth: Tensor,
    pub trace: RefineTrace,
    pub status: RefineStatus,
    /// Feature map `z` that produced `depth`.
    pub latent: Tensor,
}

pub fn refine(model: &Model, x: &Tensor, ds: &SparseDepth, cfg: &PnpConfig) -> Result<RefineOutput> {
    cfg.validate()?;
    let (front, rear) = model.split(&cfg.tap)?;
    let (_, _, h, w) = x.dims4()?;
    if ds.mask.shape() != [1, 1, h, w] || ds.values.shape() != ds.mask.shape() {
        return Err(Error::Shape {
            op: "refine observations",
            lhs: vec![1, 1, h, w],
            rhs: ds.mask.shape().to_vec(),
        });
    }
    let mut z = front.apply(x)?;

    if ds.count() == 0 {
        let depth = rear.apply(&z, x)?;
        let step = TraceStep {
            iteration: 0,
            sparse_loss: 0.0,
            update_inf_norm: 0.0,
            prediction: cfg.keep_predictions.then(|| depth.clone()),
        };
        return Ok(RefineOutput {
            depth,
            trace: RefineTrace { steps: vec![step] },
            status: RefineStatus::NoObservation,
            latent: z,
        });
    }

    let mut trace = RefineTrace::default();
    let mut last_pred: Option<(Tensor, Tensor)> = None;
    let mut adam_m = vec![0.0; z.len()];
    let mut adam_v = vec![0.0; z.len()];
    let mut step_norm = 0.0;

    for k in 0..=cfg.iterations {
        let fail = |last: Option<(Tensor, Tensor)>, trace: RefineTrace| -> Result<RefineOutput> {
            let (depth, latent) = match last {
                Some(d) => d,
                None => return Err(Error::Numeric { node: format!("refine iteration {k}") }),
            };
            Ok(RefineOutput {
                depth,
                trace,
                status: RefineStatus::NumericFailure { iteration: k },
                latent,
            })
        };
        let mut g = Graph::new();
        let xn = g.leaf(x.clone(), false)?;
        let zn = match g.leaf(z.clone(), true) {
            Ok(n) => n,
            Err(Error::Numeric { .. }) => return fail(last_pred, trace),
            Err(e) => return Err(e),
        };
        let built = rear
            .build(&mut g, zn, xn)
            .and_then(|pred| Ok((pred, g.masked_loss(pred, &ds.values, &ds.mask, cfg.loss, true)?)));
        let (pred, loss) = match built {
            Ok(v) => v,
            Err(Error::Numeric { .. }) => return fail(last_pred, trace),
            Err(e) => return Err(e),
        };
        let pred_value = g.value(pred).clone();
        trace.steps.push(TraceStep {
            iteration: k,
            sparse_loss: g.value(loss).item(),
            update_inf_norm: step_norm,
            prediction: cfg.keep_predictions.then(|| pred_value.clone()),
        });
        last_pred = Some((pred_value, z.clone()));
        if k == cfg.iterations {
            break;
        }

        let grad = match g.backward_to(loss, zn) {
            Ok(gr) => gr,
            Err(Error::Numeric { .. }) => return fail(last_pred, trace),
            Err(e) => return Err(e),
        };
        let direction: Vec<f64> = match cfg.rule {
            UpdateRule::Sign => grad.data().iter().map(|&v| sign(v)).collect(),
            UpdateRule::RawGradient => grad.data().to_vec(),
            UpdateRule::Adam { beta1, beta2, eps } => {
                let t = (k + 1) as i32;
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                grad.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| {
                        adam_m[i] = beta1 * adam_m[i] + (1.0 - beta1) * gv;
                        adam_v[i] = beta2 * adam_v[i] + (1.0 - beta2) * gv * gv;
                        (adam_m[i] / c1) / ((adam_v[i] / c2).sqrt() + eps)
                    })
                    .collect()
            }
        };
        step_norm = cfg.alpha * direction.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for (zi, d) in z.data_mut().iter_mut().zip(&direction) {
            *zi -= cfg.alpha * d;
        }
    }

    let (depth, latent) = last_pred.expect("at least one forward pass");
    Ok(RefineOutput {
        depth,
        trace,
        status: RefineStatus::Ok,
        latent,
    })
}

/// One evaluation case: network input, observations and dense ground truth.
#[derive(Debug, Clone)]
pub struct RefineCase {
    pub input: Tensor,
    pub sparse: SparseDepth,
    pub truth: Tensor,
}

#[derive(Debug, Clone)]
pub struct CaseOutcome {
    pub before: MetricRecord,
    pub after: MetricRecord,
    pub delta: Improvement,
    /// Sparse-point loss at the first and last iteration.
    pub loss_first: f64,
    pub loss_last: f64,
    pub status: RefineStatus,
    pub refined: Tensor,
    pub base: Tensor,
}

#[derive(Debug, Clone)]
pub struct BatchReport {
    /// One entry per case; `None` where refinement failed outright.
    pub outcomes: Vec<Option<CaseOutcome>>,
    pub failures: usize,
}

impl BatchReport {
    pub fn completed(&self) -> impl Iterator<Item = &CaseOutcome> {
        self.outcomes.iter().flatten()
    }

    pub fn mean_before(&self) -> Option<MetricRecord> {
        MetricRecord::mean(&self.completed().map(|o| o.before).collect::<Vec<_>>())
    }

    pub fn mean_after(&self) -> Option<MetricRecord> {
        MetricRecord::mean(&self.completed().map(|o| o.after).collect::<Vec<_>>())
    }

    pub fn median_after(&self) -> Option<MetricRecord> {
        MetricRecord::median(&self.completed().map(|o| o.after).collect::<Vec<_>>())
    }

    /// Cases whose sparse-point loss dropped from the first to the last iteration.
    pub fn loss_decreased(&self) -> usize {
        self.completed().filter(|o| o.loss_last < o.loss_first).count()
    }
}

/// Refines every case and scores base and refined predictions against the
/// dense ground truth. Per-case errors are counted, not propagated.
pub fn refine_batch(model: &Model, cases: &[RefineCase], cfg: &PnpConfig) -> BatchReport {
    let mut failures = 0;
    let outcomes = cases
        .iter()
        .map(|case| match refine_case(model, case, cfg) {
            Ok(o) => {
                if matches!(o.status, RefineStatus::NumericFailure { .. }) {
                    failures += 1;
                }
                Some(o)
            }
            Err(_) => {
                failures += 1;
                None
            }
        })
        .collect();
    BatchReport { outcomes, failures }
}

fn refine_case(model: &Model, case: &RefineCase, cfg: &PnpConfig) -> Result<CaseOutcome> {
    let base = model.run(&case.input)?;
    let out = refine(model, &case.input, &case.sparse, cfg)?;
    let before = evaluate(&base, &case.truth, None)?;
    let after = evaluate(&out.depth, &case.truth, None)?;
    let losses = out.trace.losses();
    Ok(CaseOutcome {
        before,
        after,
        delta: improvement(&before, &after),
        loss_first: losses[0],
        loss_last: *losses.last().expect("non-empty trace"),
        status: out.status,
        refined: out.depth,
        base,
    })
}
