//! Define-by-run reverse-mode autodiff over [`Tensor`]s.
//!
//! Every node stores its forward value at construction time. Gradients are
//! held in per-node buffers which are zeroed at the start of each backward
//! call and accumulated additively during it.

use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::loss::{masked_loss, LossKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum OpKind {
    Leaf,
    Conv2d { stride: usize, pad: usize },
    Relu,
    Add,
    Concat,
    Upsample2x,
    Downsample2x,
    /// Per-channel bias `[c]` added to a `[n, c, h, w]` input.
    Bias,
    Scale(f64),
    SumSquares,
    /// `Σ weights ⊙ x` with constant weights.
    WeightedSum(Vec<f64>),
    MaskedLoss {
        kind: LossKind,
        target: Vec<f64>,
        mask: Vec<f64>,
        normalize: bool,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Relu => "relu",
            OpKind::Add => "add",
            OpKind::Concat => "concat",
            OpKind::Upsample2x => "upsample2x",
            OpKind::Downsample2x => "downsample2x",
            OpKind::Bias => "bias",
            OpKind::Scale(_) => "scale",
            OpKind::SumSquares => "sum_squares",
            OpKind::WeightedSum(_) => "weighted_sum",
            OpKind::MaskedLoss { .. } => "masked_loss",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: OpKind,
    parents: Vec<NodeId>,
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    /// Some ancestor (or the node itself) requires a gradient.
    tracked: bool,
}

/// Computation graph. Nodes are appended in construction order, which is
/// also a valid topological order.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        self.push(OpKind::Leaf, vec![], value, requires_grad)
    }

    /// Cached forward output of `id`.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &OpKind {
        &self.nodes[id.0].op
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].parents
    }

    /// Gradient accumulated at `id` by the last backward call, if any reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let geom = conv_geom(&xs, &ws, stride, pad)?;
        let (ho, wo) = geom.out_hw();
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(weight).data());
        let value = Tensor::new(vec![geom.n, geom.c_out, ho, wo], out)?;
        self.push(OpKind::Conv2d { stride, pad }, vec![x, weight], value, false)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(OpKind::Relu, vec![x], value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(OpKind::Add, vec![a, b], value, false)
    }

    /// Channel-axis concatenation.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let value = Tensor::concat_channels(&values)?;
        self.push(OpKind::Concat, inputs.to_vec(), value, false)
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let out = kernels::upsample2x_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        self.push(OpKind::Upsample2x, vec![x], value, false)
    }

    pub fn downsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::Shape {
                op: "downsample2x",
                lhs: self.value(x).shape().to_vec(),
                rhs: vec![2, 2],
            });
        }
        let out = kernels::downsample2x_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        self.push(OpKind::Downsample2x, vec![x], value, false)
    }

    pub fn bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let b = self.value(bias);
        if b.len() != c {
            return Err(Error::Shape {
                op: "bias",
                lhs: self.value(x).shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let bd = b.data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for bi in 0..n {
            for (ci, &bv) in bd.iter().enumerate() {
                let base = (bi * c + ci) * h * w;
                out[base..base + h * w].iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push(OpKind::Bias, vec![x, bias], value, false)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let value = self.value(x).map(|v| v * factor);
        self.push(OpKind::Scale(factor), vec![x], value, false)
    }

    pub fn sum_squares(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(OpKind::SumSquares, vec![x], Tensor::scalar(s), false)
    }

    pub fn weighted_sum(&mut self, x: NodeId, weights: &[f64]) -> Result<NodeId> {
        let v = self.value(x);
        if v.len() != weights.len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                lhs: v.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s = v.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        self.push(OpKind::WeightedSum(weights.to_vec()), vec![x], Tensor::scalar(s), false)
    }

    /// Masked depth loss of `pred` against `target` under `mask`.
    ///
    /// With `normalize` the sum is divided by `max(1, Σ mask)`. An all-zero
    /// mask yields an exact zero.
    pub fn masked_loss(
        &mut self,
        pred: NodeId,
        target: &Tensor,
        mask: &Tensor,
        kind: LossKind,
        normalize: bool,
    ) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.shape() != mask.shape() {
            return Err(Error::Shape {
                op: "masked_loss",
                lhs: p.shape().to_vec(),
                rhs: if p.shape() != target.shape() {
                    target.shape().to_vec()
                } else {
                    mask.shape().to_vec()
                },
            });
        }
        let lv = masked_loss(kind, p.data(), target.data(), mask.data(), normalize);
        self.push(
            OpKind::MaskedLoss {
                kind,
                target: target.data().to_vec(),
                mask: mask.data().to_vec(),
                normalize,
            },
            vec![pred],
            Tensor::scalar(lv.value),
            false,
        )
    }

    fn push(&mut self, op: OpKind, parents: Vec<NodeId>, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        if !value.all_finite() {
            return Err(Error::Numeric {
                node: format!("{id} ({})", op.name()),
            });
        }
        let tracked = requires_grad || parents.iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node {
            op,
            parents,
            value,
            grad: None,
            requires_grad,
            tracked,
        });
        Ok(id)
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Full backward pass: accumulates `∂loss/∂leaf` into every leaf created
    /// with `requires_grad`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check_scalar(loss)?;
        let active: Vec<bool> = self.nodes.iter().map(|n| n.tracked).collect();
        self.propagate(loss, &active)
    }

    /// Truncated backward: returns `∂loss/∂stop_at` without propagating into
    /// ancestors of `stop_at`. Leaves (parameters included) that are not
    /// downstream of `stop_at` receive no gradient.
    pub fn backward_to(&mut self, loss: NodeId, stop_at: NodeId) -> Result<Tensor> {
        self.check_scalar(loss)?;
        if stop_at.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("unknown node {stop_at}")));
        }
        let mut active = vec![false; self.nodes.len()];
        active[stop_at.0] = true;
        for i in stop_at.0 + 1..=loss.0 {
            active[i] = self.nodes[i].parents.iter().any(|p| active[p.0]);
        }
        if !active[loss.0] {
            return Err(Error::Graph(format!(
                "{stop_at} is not an ancestor of loss node {loss}"
            )));
        }
        self.propagate(loss, &active)?;
        let grad = self.nodes[stop_at.0]
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; self.nodes[stop_at.0].value.len()]);
        Tensor::new(self.nodes[stop_at.0].value.shape().to_vec(), grad)
    }

    fn check_scalar(&self, loss: NodeId) -> Result<()> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Graph(format!("unknown node {loss}")))?;
        if !node.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, node {loss} has shape {:?}",
                node.value.shape()
            )));
        }
        Ok(())
    }

    fn propagate(&mut self, loss: NodeId, active: &[bool]) -> Result<()> {
        self.zero_grad();
        if !active[loss.0] {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !active[i] {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            let parents = self.nodes[i].parents.clone();
            let wanted: Vec<bool> = parents.iter().map(|p| active[p.0]).collect();
            if wanted.iter().any(|&w| w) {
                let contributions = self.vjp(i, &gout, &wanted)?;
                for (p, contrib) in parents.iter().zip(contributions) {
                    let Some(c) = contrib else { continue };
                    if c.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Numeric {
                            node: format!("{} ({}) gradient", p, self.nodes[p.0].op.name()),
                        });
                    }
                    match &mut self.nodes[p.0].grad {
                        Some(g) => g.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            self.nodes[i].grad = Some(gout);
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each wanted parent.
    fn vjp(&self, i: usize, gout: &[f64], wanted: &[bool]) -> Result<Vec<Option<Vec<f64>>>> {
        let node = &self.nodes[i];
        let pv = |k: usize| &self.nodes[node.parents[k].0].value;
        let out = match &node.op {
            OpKind::Leaf => vec![],
            OpKind::Conv2d { stride, pad } => {
                let geom = conv_geom(pv(0).shape(), pv(1).shape(), *stride, *pad)?;
                vec![
                    wanted[0].then(|| kernels::conv2d_backward_input(&geom, pv(1).data(), gout)),
                    wanted[1].then(|| kernels::conv2d_backward_weight(&geom, pv(0).data(), gout)),
                ]
            }
            OpKind::Relu => vec![Some(
                pv(0)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect(),
            )],
            OpKind::Add => vec![
                wanted[0].then(|| gout.to_vec()),
                wanted[1].then(|| gout.to_vec()),
            ],
            OpKind::Concat => {
                let (n, _, h, w) = node.value.dims4()?;
                let total_c = node.value.shape()[1];
                let plane = h * w;
                let mut offset = 0;
                let mut res = Vec::with_capacity(node.parents.len());
                for (k, &want) in wanted.iter().enumerate() {
                    let c = pv(k).shape()[1];
                    if want {
                        let mut g = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * total_c + offset) * plane;
                            g.extend_from_slice(&gout[start..start + c * plane]);
                        }
                        res.push(Some(g));
                    } else {
                        res.push(None);
                    }
                    offset += c;
                }
                res
            }
            OpKind::Upsample2x => {
                let (n, c, h, w) = pv(0).dims4()?;
                vec![Some(kernels::upsample2x_backward(gout, n * c, h, w))]
            }
            OpKind::Downsample2x => {
                let (n, c, h, w) = pv(0).dims4()?;
                vec![Some(kernels::downsample2x_backward(gout, n * c, h, w))]
            }
            OpKind::Bias => {
                let (n, c, h, w) = pv(0).dims4()?;
                let gb = wanted[1].then(|| {
                    let mut gb = vec![0.0; c];
                    for b in 0..n {
                        for (ci, acc) in gb.iter_mut().enumerate() {
                            let base = (b * c + ci) * h * w;
                            *acc += gout[base..base + h * w].iter().sum::<f64>();
                        }
                    }
                    gb
                });
                vec![wanted[0].then(|| gout.to_vec()), gb]
            }
            OpKind::Scale(f) => vec![Some(gout.iter().map(|g| g * f).collect())],
            OpKind::SumSquares => vec![Some(pv(0).data().iter().map(|x| 2.0 * x * gout[0]).collect())],
            OpKind::WeightedSum(w) => vec![Some(w.iter().map(|x| x * gout[0]).collect())],
            OpKind::MaskedLoss {
                kind,
                target,
                mask,
                normalize,
            } => {
                let lv = masked_loss(*kind, pv(0).data(), target, mask, *normalize);
                vec![Some(lv.grad.into_iter().map(|g| g * gout[0]).collect())]
            }
        };
        Ok(out)
    }
}

fn conv_geom(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    let shape_err = || Error::Shape {
        op: "conv2d",
        lhs: xs.to_vec(),
        rhs: ws.to_vec(),
    };
    let (&[n, c_in, h, w], &[c_out, wc, k, k2]) = (xs, ws) else {
        return Err(shape_err());
    };
    if wc != c_in || k != k2 || k == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(shape_err());
    }
    Ok(ConvGeom {
        n,
        c_in,
        h,
        w,
        c_out,
        k,
        stride,
        pad,
    })
}
