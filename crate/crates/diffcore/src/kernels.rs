//! Forward and backward numeric kernels used by the tape.
//!
//! Convolution is lowered to im2col + GEMM; everything else is a direct loop.

use crate::error::{shape_err, Result};
use crate::grid::Grid;

/// `c = a·b + beta·c` where `a` is logically `m×k` and `b` is `k×n`.
/// `a_t`/`b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above against the logical dimensions
    // and the strides describe exactly those layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = match *x {
            [n, c, h, w] => (n, c, h, w),
            _ => return shape_err("conv2d", format!("input must be NCHW, got {x:?}")),
        };
        let (o, kc, kh, kw) = match *k {
            [o, kc, kh, kw] => (o, kc, kh, kw),
            _ => return shape_err("conv2d", format!("kernel must be OCKK, got {k:?}")),
        };
        if kc != c {
            return shape_err(
                "conv2d",
                format!("kernel {k:?} expects {kc} input channels, input {x:?} has {c}"),
            );
        }
        if stride == 0 {
            return shape_err("conv2d", "stride must be >= 1");
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            );
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Range of output columns `ox` whose input column `ox*stride + kj - pad` is in bounds.
    fn valid_range(&self, kj: usize, out: usize, inp: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kj as isize - self.pad as isize;
        // smallest ox with ox*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest ox with ox*s + off <= inp-1
        let hi_incl = (inp as isize - 1 - off).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, out as isize);
        let lo = lo.clamp(0, hi);
        (lo as usize, hi as usize)
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.col_cols();
    cols.iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = g.valid_range(ki, g.oh, g.h);
            for kj in 0..g.kw {
                let (xlo, xhi) = g.valid_range(kj, g.ow, g.w);
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if g.stride == 1 {
                        let ix0 = xlo + kj - g.pad;
                        dst_row[xlo..xhi].copy_from_slice(&src_row[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            dst_row[ox] = src_row[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.col_cols();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = g.valid_range(ki, g.oh, g.h);
            for kj in 0..g.kw {
                let (xlo, xhi) = g.valid_range(kj, g.ow, g.w);
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let src_row = &src[oy * g.ow..(oy + 1) * g.ow];
                    let dst_row = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in xlo..xhi {
                        dst_row[ox * g.stride + kj - g.pad] += src_row[ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(
    x: &Grid,
    kernel: &Grid,
    bias: Option<&Grid>,
    stride: usize,
    pad: usize,
) -> Result<(Grid, ConvGeom)> {
    let g = ConvGeom::new(x.shape(), kernel.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.len() != g.o {
            return shape_err(
                "conv2d",
                format!("bias has {} entries, kernel has {} outputs", b.len(), g.o),
            );
        }
    }
    let (rows, p) = (g.col_rows(), g.col_cols());
    let in_per = g.c * g.h * g.w;
    let out_per = g.o * p;
    let mut out = vec![0.0; g.n * out_per];
    let mut cols = vec![0.0; rows * p];
    for n in 0..g.n {
        im2col(&x.data()[n * in_per..(n + 1) * in_per], &g, &mut cols);
        let dst = &mut out[n * out_per..(n + 1) * out_per];
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[o]);
            }
        }
        gemm(g.o, rows, p, kernel.data(), false, &cols, false, 1.0, dst);
    }
    Ok((Grid::new(vec![g.n, g.o, g.oh, g.ow], out)?, g))
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dk: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    x: &Grid,
    kernel: &Grid,
    g: &ConvGeom,
    dout: &[f64],
    need_dx: bool,
    need_dk: bool,
    need_db: bool,
) -> ConvGrads {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let in_per = g.c * g.h * g.w;
    let out_per = g.o * p;
    let mut dx = need_dx.then(|| vec![0.0; g.n * in_per]);
    let mut dk = need_dk.then(|| vec![0.0; g.o * rows]);
    let db = need_db.then(|| {
        let mut db = vec![0.0; g.o];
        for n in 0..g.n {
            for (o, chunk) in dout[n * out_per..(n + 1) * out_per].chunks(p).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        db
    });
    let mut cols = vec![0.0; rows * p];
    for n in 0..g.n {
        let dout_n = &dout[n * out_per..(n + 1) * out_per];
        if let Some(dk) = dk.as_mut() {
            im2col(&x.data()[n * in_per..(n + 1) * in_per], g, &mut cols);
            // dK (o×rows) += dOut (o×p) · colsᵀ (p×rows)
            gemm(g.o, p, rows, dout_n, false, &cols, true, 1.0, dk);
        }
        if let Some(dx) = dx.as_mut() {
            // dCols (rows×p) = Kᵀ (rows×o) · dOut (o×p)
            gemm(rows, g.o, p, kernel.data(), true, dout_n, false, 0.0, &mut cols);
            col2im(&cols, g, &mut dx[n * in_per..(n + 1) * in_per]);
        }
    }
    ConvGrads { dx, dk, db }
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Saved state of a batch-norm forward pass needed by its backward pass.
#[derive(Debug, Clone)]
pub struct BnSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub batch_stats: bool,
}

/// Normalizes `x` per channel with either the batch statistics (`stats = None`)
/// or the given running statistics.
pub fn batchnorm_forward(
    x: &Grid,
    scale: &[f64],
    shift: &[f64],
    stats: Option<&RunningStats>,
    eps: f64,
) -> Result<(Grid, BnSaved, Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = x.dims4()?;
    if scale.len() != c || shift.len() != c {
        return shape_err(
            "batchnorm2d",
            format!(
                "scale/shift have {}/{} entries, input has {c} channels",
                scale.len(),
                shift.len()
            ),
        );
    }
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    match stats {
        None => {
            for ci in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    let off = (b * c + ci) * hw;
                    s += x.data()[off..off + hw].iter().sum::<f64>();
                }
                let m = s / count;
                let mut v = 0.0;
                for b in 0..n {
                    let off = (b * c + ci) * hw;
                    v += x.data()[off..off + hw]
                        .iter()
                        .map(|&t| (t - m) * (t - m))
                        .sum::<f64>();
                }
                mean[ci] = m;
                var[ci] = v / count;
            }
        }
        Some(rs) => {
            if rs.mean.len() != c || rs.var.len() != c {
                return shape_err("batchnorm2d", "running stats do not match channel count");
            }
            mean.copy_from_slice(&rs.mean);
            var.copy_from_slice(&rs.var);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ci in 0..c {
            let off = (b * c + ci) * hw;
            for i in off..off + hw {
                let xh = (x.data()[i] - mean[ci]) * inv_std[ci];
                xhat[i] = xh;
                out[i] = scale[ci] * xh + shift[ci];
            }
        }
    }
    Ok((
        Grid::new(x.shape().to_vec(), out)?,
        BnSaved {
            xhat,
            inv_std,
            batch_stats: stats.is_none(),
        },
        mean,
        var,
    ))
}

/// Returns `(dx, dscale, dshift)`.
pub fn batchnorm_backward(
    shape: (usize, usize, usize, usize),
    scale: &[f64],
    saved: &BnSaved,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = shape;
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut dscale = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    for b in 0..n {
        for ci in 0..c {
            let off = (b * c + ci) * hw;
            for (d, x) in dout[off..off + hw].iter().zip(&saved.xhat[off..off + hw]) {
                dscale[ci] += d * x;
                dshift[ci] += d;
            }
        }
    }
    let mut dx = vec![0.0; dout.len()];
    for b in 0..n {
        for ci in 0..c {
            let off = (b * c + ci) * hw;
            let k = scale[ci] * saved.inv_std[ci];
            if saved.batch_stats {
                // d/dx of (x - mean(x)) / std(x): subtract the projections onto 1 and xhat.
                let mean_dy = dshift[ci] / count;
                let mean_dy_xhat = dscale[ci] / count;
                for i in off..off + hw {
                    dx[i] = k * (dout[i] - mean_dy - saved.xhat[i] * mean_dy_xhat);
                }
            } else {
                for i in off..off + hw {
                    dx[i] = k * dout[i];
                }
            }
        }
    }
    (dx, dscale, dshift)
}

/// Weighted sum of atoms: `out[n, p] = Σ_j coeffs[n, j] · atoms[j, p]`, accumulated in `j` order.
pub fn combine_atoms(coeffs: &[f64], atoms: &[f64], k: usize, out: &mut [f64]) {
    let m = out.len();
    debug_assert_eq!(coeffs.len(), k);
    debug_assert_eq!(atoms.len(), k * m);
    out.iter_mut().for_each(|v| *v = 0.0);
    for (j, &a) in coeffs.iter().enumerate() {
        let atom = &atoms[j * m..(j + 1) * m];
        for (o, &d) in out.iter_mut().zip(atom) {
            *o += a * d;
        }
    }
}
