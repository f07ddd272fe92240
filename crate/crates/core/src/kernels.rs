//! Raw forward and vector-Jacobian kernels for the image operators.
//!
//! All tensors are `[batch, channels, height, width]`, row-major.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Output positions `o` touching input coordinate range for tap offset `kk`:
    /// valid `o` satisfy `0 <= o*stride + kk - pad < extent`.
    fn out_range(&self, kk: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        // o*s + off >= 0  ->  o >= ceil(-off / s)
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // o*s + off <= extent-1  ->  o <= floor((extent-1-off)/s)
        let hi_num = extent as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(out_extent as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }
}

/// Unrolls the receptive fields of one batch item into a `[c_in*k*k, ho*wo]` matrix.
fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let k = g.k;
    col.iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            let (oy0, oy1) = g.out_range(ky, g.h, ho);
            for kx in 0..k {
                let (ox0, ox1) = g.out_range(kx, g.w, wo);
                let row = &mut col[((ci * k + ky) * k + kx) * ho * wo..][..ho * wo];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    for ox in ox0..ox1 {
                        dst[ox] = src[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulating into `gx`.
fn col2im(g: &ConvGeom, col: &[f64], gx: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let k = g.k;
    for ci in 0..g.c_in {
        let plane = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            let (oy0, oy1) = g.out_range(ky, g.h, ho);
            for kx in 0..k {
                let (ox0, ox1) = g.out_range(kx, g.w, wo);
                let row = &col[((ci * k + ky) * k + kx) * ho * wo..][..ho * wo];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let src = &row[oy * wo..(oy + 1) * wo];
                    for ox in ox0..ox1 {
                        dst[ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c` for row-major `a: m×k`, `b: k×n`, `c: m×n`, with
/// optional transposition of `a` or `b` (their stored shapes are then `k×m`, `n×k`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major (or transposed) blocks whose lengths were just checked.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], wt: &[f64]) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let (kdim, p) = (g.c_in * g.k * g.k, ho * wo);
    let mut out = vec![0.0; g.n * g.c_out * p];
    let mut col = vec![0.0; kdim * p];
    for b in 0..g.n {
        im2col(g, &x[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w], &mut col);
        gemm(g.c_out, kdim, p, wt, false, &col, false, 0.0, &mut out[b * g.c_out * p..(b + 1) * g.c_out * p]);
    }
    out
}

/// Gradient with respect to the convolution input.
pub fn conv2d_backward_input(g: &ConvGeom, wt: &[f64], gout: &[f64]) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let (kdim, p) = (g.c_in * g.k * g.k, ho * wo);
    let plane = g.c_in * g.h * g.w;
    let mut gx = vec![0.0; g.n * plane];
    let mut gcol = vec![0.0; kdim * p];
    for b in 0..g.n {
        gemm(kdim, g.c_out, p, wt, true, &gout[b * g.c_out * p..(b + 1) * g.c_out * p], false, 0.0, &mut gcol);
        col2im(g, &gcol, &mut gx[b * plane..(b + 1) * plane]);
    }
    gx
}

/// Gradient with respect to the convolution weights.
pub fn conv2d_backward_weight(g: &ConvGeom, x: &[f64], gout: &[f64]) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let (kdim, p) = (g.c_in * g.k * g.k, ho * wo);
    let mut gw = vec![0.0; g.c_out * kdim];
    let mut col = vec![0.0; kdim * p];
    for b in 0..g.n {
        im2col(g, &x[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w], &mut col);
        gemm(g.c_out, p, kdim, &gout[b * g.c_out * p..(b + 1) * g.c_out * p], false, &col, true, 1.0, &mut gw);
    }
    gw
}

/// Nearest-neighbour 2x upsampling of `planes` planes of size `h`x`w`.
pub fn upsample2x_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * h2 * w2];
    for p in 0..planes {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[(p * h2 + y) * w2 + xx] = x[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Exact transpose of [`upsample2x_forward`]: sums each 2x2 block.
pub fn upsample2x_backward(gout: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..h2 {
            for xx in 0..w2 {
                gx[(p * h + y / 2) * w + xx / 2] += gout[(p * h2 + y) * w2 + xx];
            }
        }
    }
    gx
}

/// 2x2 average pooling; odd trailing rows/columns are dropped.
pub fn downsample2x_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        for y in 0..ho {
            for xx in 0..wo {
                let i = (p * h + 2 * y) * w + 2 * xx;
                out[(p * ho + y) * wo + xx] = 0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]);
            }
        }
    }
    out
}

pub fn downsample2x_backward(gout: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..ho {
            for xx in 0..wo {
                let gv = 0.25 * gout[(p * ho + y) * wo + xx];
                let i = (p * h + 2 * y) * w + 2 * xx;
                gx[i] += gv;
                gx[i + 1] += gv;
                gx[i + w] += gv;
                gx[i + w + 1] += gv;
            }
        }
    }
    gx
}
