use crate::error::{Error, Result};

/// Dense row-major array of `f64`. Image tensors use `[batch, channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(batch, channels, height, width)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Config(format!(
                "expected a rank-4 image tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Little-endian bit pattern of every element, for bit-exact comparisons.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Picks batch element `n` out of a rank-4 tensor, keeping the batch axis.
    pub fn batch_item(&self, n: usize) -> Result<Tensor> {
        let (nb, c, h, w) = self.dims4()?;
        if n >= nb {
            return Err(Error::Config(format!("batch index {n} out of range {nb}")));
        }
        let plane = c * h * w;
        Tensor::new(vec![1, c, h, w], self.data[n * plane..(n + 1) * plane].to_vec())
    }

    /// Stacks rank-4 tensors with identical `[1, c, h, w]`-compatible trailing dims along the batch axis.
    pub fn stack_batch(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Config("cannot stack an empty list".into()))?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            let (tn, tc, th, tw) = t.dims4()?;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::Shape {
                    op: "stack_batch",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(vec![n, c, h, w], data)
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Config("cannot concatenate an empty list".into()))?;
        let (n, _, h, w) = first.dims4()?;
        let mut total_c = 0;
        for t in items {
            let (tn, tc, th, tw) = t.dims4()?;
            if (tn, th, tw) != (n, h, w) {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            total_c += tc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for t in items {
                let tc = t.shape[1];
                data.extend_from_slice(&t.data[b * tc * plane..(b + 1) * tc * plane]);
            }
        }
        Tensor::new(vec![n, total_c, h, w], data)
    }
}
