//! Tape-based reverse-mode differentiation over [`Grid`] values.
//!
//! Every operation evaluates eagerly and appends a node to the tape. `backward`
//! walks the nodes in exact reverse order, accumulating vector-Jacobian products.
//! Parameters are registered under a caller-chosen [`ParamId`]; the gradient map
//! returned by `backward` has an entry (possibly all zeros) for every parameter
//! registered on the tape.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, DiffError, Result};
use crate::grid::Grid;
use crate::kernels::{self, BnSaved, ConvGeom, RunningStats};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// How batch normalization obtains its statistics.
pub enum BnMode<'a> {
    /// Batch statistics; running statistics are updated with `momentum`.
    Train {
        running: &'a mut RunningStats,
        momentum: f64,
    },
    /// Batch statistics without touching any running statistics.
    BatchStats,
    /// Frozen running statistics.
    Eval(&'a RunningStats),
}

enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: usize,
        k: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: usize,
        scale: usize,
        shift: usize,
        saved: BnSaved,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Relu(usize),
    Sigmoid(usize),
    SoftmaxChannels(usize),
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    AvgPool {
        x: usize,
        k: usize,
    },
    Upsample {
        x: usize,
        f: usize,
    },
    Concat {
        xs: Vec<(usize, usize)>,
    },
    GlobalAvgPool(usize),
    CombineAtoms {
        coeffs: usize,
        atoms: Arc<Grid>,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    BceWithLogits {
        logits: usize,
        target: Grid,
    },
    SoftDice {
        probs: usize,
        target: Grid,
        smooth: f64,
    },
    CosineDistance {
        a: usize,
        b: usize,
        eps: f64,
    },
    MeanSquaredDiff(usize, usize),
}

struct Node {
    value: Grid,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of operations applied during one forward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Grid>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Grid> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Grid)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

fn check_finite(op: &'static str, g: &Grid) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(DiffError::NonFinite { op })
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(DiffError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, op_name: &'static str, value: Grid, op: Op, needs_grad: bool) -> Result<Var> {
        check_finite(op_name, &value)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn value(&self, v: Var) -> Result<&Grid> {
        let i = self.idx(v)?;
        Ok(&self.nodes[i].value)
    }

    /// Records a constant. No gradient flows into it.
    pub fn input(&mut self, value: Grid) -> Result<Var> {
        self.push("input", value, Op::Input, false)
    }

    /// Records a parameter. When `trainable` is false it behaves like a constant
    /// but still appears (with a zero gradient) in the gradient map.
    pub fn param(&mut self, id: ParamId, value: Grid, trainable: bool) -> Result<Var> {
        if self.params.contains_key(&id) {
            return Err(DiffError::DuplicateParam(id.0));
        }
        let v = self.push("param", value, Op::Param(id), trainable)?;
        self.params.insert(id, v.idx);
        Ok(v)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xi, ki) = (self.idx(x)?, self.idx(kernel)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let (out, geom) = kernels::conv2d_forward(
            &self.nodes[xi].value,
            &self.nodes[ki].value,
            bi.map(|b| &self.nodes[b].value),
            stride,
            padding,
        )?;
        let ng = self.ng(xi) || self.ng(ki) || bi.is_some_and(|b| self.ng(b));
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                x: xi,
                k: ki,
                b: bi,
                geom,
            },
            ng,
        )
    }

    pub fn batchnorm2d(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mode: BnMode<'_>,
        eps: f64,
    ) -> Result<Var> {
        if eps <= 0.0 {
            return Err(DiffError::InvalidArgument {
                op: "batchnorm2d",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let (xi, si, hi) = (self.idx(x)?, self.idx(scale)?, self.idx(shift)?);
        let (n, c, h, w) = self.nodes[xi].value.dims4()?;
        let uses_batch = !matches!(mode, BnMode::Eval(_));
        if uses_batch && n * h * w == 0 {
            return Err(DiffError::InvalidArgument {
                op: "batchnorm2d",
                detail: "batch statistics need at least one element per channel".into(),
            });
        }
        let stats = match &mode {
            BnMode::Eval(rs) => Some(*rs),
            _ => None,
        };
        let (out, saved, mean, var) = kernels::batchnorm_forward(
            &self.nodes[xi].value,
            self.nodes[si].value.data(),
            self.nodes[hi].value.data(),
            stats,
            eps,
        )?;
        if let BnMode::Train { running, momentum } = mode {
            if running.mean.len() != c {
                return shape_err("batchnorm2d", "running stats do not match channel count");
            }
            let count = n * h * w;
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            for ci in 0..c {
                running.mean[ci] = (1.0 - momentum) * running.mean[ci] + momentum * mean[ci];
                running.var[ci] = (1.0 - momentum) * running.var[ci] + momentum * var[ci] * unbias;
            }
        }
        let ng = self.ng(xi) || self.ng(si) || self.ng(hi);
        self.push(
            "batchnorm2d",
            out,
            Op::BatchNorm {
                x: xi,
                scale: si,
                shift: hi,
                saved,
            },
            ng,
        )
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)`; inactive means identity.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64, active: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(DiffError::InvalidArgument {
                op: "dropout",
                detail: format!("rate must lie in [0, 1), got {rate}"),
            });
        }
        let xi = self.idx(x)?;
        let len = self.nodes[xi].value.len();
        let mask = if active && rate > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keep = 1.0 / (1.0 - rate);
            (0..len)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect()
        } else {
            vec![1.0; len]
        };
        let out = Grid::new(
            self.nodes[xi].value.shape().to_vec(),
            self.nodes[xi]
                .value
                .data()
                .iter()
                .zip(&mask)
                .map(|(a, m)| a * m)
                .collect(),
        )?;
        let ng = self.ng(xi);
        self.push("dropout", out, Op::Dropout { x: xi, mask }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.map(|v| v.max(0.0));
        let ng = self.ng(xi);
        self.push("relu", out, Op::Relu(xi), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.map(sigmoid);
        let ng = self.ng(xi);
        self.push("sigmoid", out, Op::Sigmoid(xi), ng)
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (n, c, h, w) = self.nodes[xi].value.dims4()?;
        let hw = h * w;
        let src = self.nodes[xi].value.data();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for p in 0..hw {
                let at = |ci: usize| (b * c + ci) * hw + p;
                let mx = (0..c).map(|ci| src[at(ci)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c).map(|ci| (src[at(ci)] - mx).exp()).sum();
                for ci in 0..c {
                    out[at(ci)] = (src[at(ci)] - mx).exp() / z;
                }
            }
        }
        let out = Grid::new(vec![n, c, h, w], out)?;
        let ng = self.ng(xi);
        self.push("softmax_channels", out, Op::SoftmaxChannels(xi), ng)
    }

    /// `x: [N, F]`, `w: [O, F]`, `b: [O]` → `[N, O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (xs, ws, bs) = (
            self.nodes[xi].value.shape(),
            self.nodes[wi].value.shape(),
            self.nodes[bi].value.shape(),
        );
        let (n, f, o) = match (xs, ws, bs) {
            ([n, f], [o, f2], [o2]) if f == f2 && o == o2 => (*n, *f, *o),
            _ => {
                return shape_err(
                    "dense",
                    format!("incompatible x {xs:?}, w {ws:?}, b {bs:?}"),
                )
            }
        };
        let mut out = vec![0.0; n * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(self.nodes[bi].value.data());
        }
        kernels::gemm(
            n,
            f,
            o,
            self.nodes[xi].value.data(),
            false,
            self.nodes[wi].value.data(),
            true,
            1.0,
            &mut out,
        );
        let out = Grid::new(vec![n, o], out)?;
        let ng = self.ng(xi) || self.ng(wi) || self.ng(bi);
        self.push(
            "dense",
            out,
            Op::Dense {
                x: xi,
                w: wi,
                b: bi,
            },
            ng,
        )
    }

    /// Non-overlapping `k×k` average pooling; spatial extents must be divisible by `k`.
    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let (n, c, h, w) = self.nodes[xi].value.dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return shape_err("avgpool2d", format!("{h}x{w} not divisible by window {k}"));
        }
        let (oh, ow) = (h / k, w / k);
        let src = self.nodes[xi].value.data();
        let mut out = vec![0.0; n * c * oh * ow];
        let inv = 1.0 / (k * k) as f64;
        for pc in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[(pc * oh + y / k) * ow + xx / k] += src[(pc * h + y) * w + xx] * inv;
                }
            }
        }
        let out = Grid::new(vec![n, c, oh, ow], out)?;
        let ng = self.ng(xi);
        self.push("avgpool2d", out, Op::AvgPool { x: xi, k }, ng)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let (n, c, h, w) = self.nodes[xi].value.dims4()?;
        if factor == 0 {
            return shape_err("upsample_nearest", "factor must be >= 1");
        }
        let (oh, ow) = (h * factor, w * factor);
        let src = self.nodes[xi].value.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for pc in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(pc * oh + y) * ow + xx] = src[(pc * h + y / factor) * w + xx / factor];
                }
            }
        }
        let out = Grid::new(vec![n, c, oh, ow], out)?;
        let ng = self.ng(xi);
        self.push("upsample_nearest", out, Op::Upsample { x: xi, f: factor }, ng)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return shape_err("concat_channels", "nothing to concatenate");
        }
        let idxs = xs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let (n, _, h, w) = self.nodes[idxs[0]].value.dims4()?;
        let mut parts = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            let (ni, ci, hi, wi) = self.nodes[i].value.dims4()?;
            if (ni, hi, wi) != (n, h, w) {
                return shape_err(
                    "concat_channels",
                    format!(
                        "operand {:?} incompatible with batch {n} and spatial {h}x{w}",
                        self.nodes[i].value.shape()
                    ),
                );
            }
            parts.push((i, ci));
        }
        let total: usize = parts.iter().map(|p| p.1).sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for &(i, ci) in &parts {
                out.extend_from_slice(&self.nodes[i].value.data()[b * ci * hw..(b + 1) * ci * hw]);
            }
        }
        let out = Grid::new(vec![n, total, h, w], out)?;
        let ng = idxs.iter().any(|&i| self.ng(i));
        self.push("concat_channels", out, Op::Concat { xs: parts }, ng)
    }

    /// `[N, C, H, W]` → `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (n, c, h, w) = self.nodes[xi].value.dims4()?;
        let hw = h * w;
        let out: Vec<f64> = self.nodes[xi]
            .value
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Grid::new(vec![n, c], out)?;
        let ng = self.ng(xi);
        self.push("global_avg_pool", out, Op::GlobalAvgPool(xi), ng)
    }

    /// `coeffs: [N, K]`, `atoms: [K, H, W]` → `[N, 1, H, W]` with
    /// `out[n] = Σ_j coeffs[n, j] · atoms[j]`.
    pub fn combine_atoms(&mut self, coeffs: Var, atoms: Arc<Grid>) -> Result<Var> {
        let ci = self.idx(coeffs)?;
        let (n, k) = match *self.nodes[ci].value.shape() {
            [n, k] => (n, k),
            ref s => return shape_err("combine_atoms", format!("coeffs must be [N, K], got {s:?}")),
        };
        let (h, w) = match *atoms.shape() {
            [ka, h, w] if ka == k => (h, w),
            ref s => {
                return shape_err(
                    "combine_atoms",
                    format!("atoms {s:?} incompatible with {k} coefficients"),
                )
            }
        };
        let m = h * w;
        let mut out = vec![0.0; n * m];
        for b in 0..n {
            kernels::combine_atoms(
                &self.nodes[ci].value.data()[b * k..(b + 1) * k],
                atoms.data(),
                k,
                &mut out[b * m..(b + 1) * m],
            );
        }
        let out = Grid::new(vec![n, 1, h, w], out)?;
        let ng = self.ng(ci);
        self.push("combine_atoms", out, Op::CombineAtoms { coeffs: ci, atoms }, ng)
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return shape_err(
                op,
                format!(
                    "{:?} vs {:?}",
                    self.nodes[a].value.shape(),
                    self.nodes[b].value.shape()
                ),
            );
        }
        Ok(())
    }

    fn zip_op(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(name, ai, bi)?;
        let out = Grid::new(
            self.nodes[ai].value.shape().to_vec(),
            self.nodes[ai]
                .value
                .data()
                .iter()
                .zip(self.nodes[bi].value.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )?;
        let ng = self.ng(ai) || self.ng(bi);
        self.push(name, out, op(ai, bi), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.map(|v| v * c);
        let ng = self.ng(xi);
        self.push("scale", out, Op::Scale(xi, c), ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = Grid::scalar(self.nodes[xi].value.sum());
        let ng = self.ng(xi);
        self.push("sum", out, Op::Sum(xi), ng)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Grid) -> Result<Var> {
        let li = self.idx(logits)?;
        if self.nodes[li].value.shape() != target.shape() {
            return shape_err(
                "bce_with_logits",
                format!("{:?} vs {:?}", self.nodes[li].value.shape(), target.shape()),
            );
        }
        let n = target.len() as f64;
        let loss: f64 = self.nodes[li]
            .value
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let ng = self.ng(li);
        self.push(
            "bce_with_logits",
            Grid::scalar(loss),
            Op::BceWithLogits {
                logits: li,
                target: target.clone(),
            },
            ng,
        )
    }

    /// Batch mean of `1 - (2Σpy + s) / (Σp + Σy + s)` over `[N, ...]` probabilities.
    pub fn soft_dice_loss(&mut self, probs: Var, target: &Grid, smooth: f64) -> Result<Var> {
        let pi = self.idx(probs)?;
        let shape = self.nodes[pi].value.shape();
        if shape != target.shape() {
            return shape_err("soft_dice_loss", format!("{shape:?} vs {:?}", target.shape()));
        }
        let n = shape[0];
        let per = target.len() / n.max(1);
        let p = self.nodes[pi].value.data();
        let mut loss = 0.0;
        for b in 0..n {
            let (ps, ys) = (&p[b * per..(b + 1) * per], &target.data()[b * per..(b + 1) * per]);
            let inter: f64 = ps.iter().zip(ys).map(|(a, c)| a * c).sum();
            let denom = ps.iter().sum::<f64>() + ys.iter().sum::<f64>() + smooth;
            loss += 1.0 - (2.0 * inter + smooth) / denom;
        }
        let ng = self.ng(pi);
        self.push(
            "soft_dice_loss",
            Grid::scalar(loss / n as f64),
            Op::SoftDice {
                probs: pi,
                target: target.clone(),
                smooth,
            },
            ng,
        )
    }

    /// Batch mean of `1 - a·b / max(‖a‖‖b‖, eps)` over rows of `[N, K]` inputs.
    pub fn cosine_distance(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("cosine_distance", ai, bi)?;
        let (n, k) = match *self.nodes[ai].value.shape() {
            [n, k] => (n, k),
            ref s => return shape_err("cosine_distance", format!("expected [N, K], got {s:?}")),
        };
        let (av, bv) = (self.nodes[ai].value.data(), self.nodes[bi].value.data());
        let mut loss = 0.0;
        for r in 0..n {
            let (x, y) = (&av[r * k..(r + 1) * k], &bv[r * k..(r + 1) * k]);
            loss += 1.0 - cosine_terms(x, y, eps).0;
        }
        let ng = self.ng(ai) || self.ng(bi);
        self.push(
            "cosine_distance",
            Grid::scalar(loss / n as f64),
            Op::CosineDistance { a: ai, b: bi, eps },
            ng,
        )
    }

    /// Mean over elements of `(a - b)²`.
    pub fn mean_squared_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mean_squared_diff", ai, bi)?;
        let av = self.nodes[ai].value.data();
        let bv = self.nodes[bi].value.data();
        let loss = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / av.len() as f64;
        let ng = self.ng(ai) || self.ng(bi);
        self.push(
            "mean_squared_diff",
            Grid::scalar(loss),
            Op::MeanSquaredDiff(ai, bi),
            ng,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(DiffError::NonScalarLoss(self.nodes[li].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(vec![1.0]);
        let mut by_param: BTreeMap<ParamId, Grid> = BTreeMap::new();

        for i in (0..=li).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let val = |j: usize| &self.nodes[j].value;
            let ng = |j: usize| self.nodes[j].needs_grad;
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    by_param.insert(*id, Grid::new(node.value.shape().to_vec(), g)?);
                }
                Op::Conv2d { x, k, b, geom } => {
                    let cg = kernels::conv2d_backward(
                        val(*x),
                        val(*k),
                        geom,
                        &g,
                        ng(*x),
                        ng(*k),
                        b.is_some_and(ng),
                    );
                    if let Some(dx) = cg.dx {
                        add_into(&mut grads[*x], &dx);
                    }
                    if let Some(dk) = cg.dk {
                        add_into(&mut grads[*k], &dk);
                    }
                    if let (Some(b), Some(db)) = (b, cg.db) {
                        add_into(&mut grads[*b], &db);
                    }
                }
                Op::BatchNorm {
                    x,
                    scale,
                    shift,
                    saved,
                } => {
                    let (dx, ds, dh) = kernels::batchnorm_backward(
                        val(*x).dims4()?,
                        val(*scale).data(),
                        saved,
                        &g,
                    );
                    if ng(*x) {
                        add_into(&mut grads[*x], &dx);
                    }
                    if ng(*scale) {
                        add_into(&mut grads[*scale], &ds);
                    }
                    if ng(*shift) {
                        add_into(&mut grads[*shift], &dh);
                    }
                }
                Op::Dropout { x, mask } => {
                    let d: Vec<f64> = g.iter().zip(mask).map(|(a, m)| a * m).collect();
                    add_into(&mut grads[*x], &d);
                }
                Op::Relu(x) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(a, &v)| if v > 0.0 { *a } else { 0.0 })
                        .collect();
                    add_into(&mut grads[*x], &d);
                }
                Op::Sigmoid(x) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(a, &s)| a * s * (1.0 - s))
                        .collect();
                    add_into(&mut grads[*x], &d);
                }
                Op::SoftmaxChannels(x) => {
                    let (n, c, h, w) = node.value.dims4()?;
                    let hw = h * w;
                    let y = node.value.data();
                    let mut d = vec![0.0; y.len()];
                    for b in 0..n {
                        for p in 0..hw {
                            let at = |ci: usize| (b * c + ci) * hw + p;
                            let dot: f64 = (0..c).map(|ci| g[at(ci)] * y[at(ci)]).sum();
                            for ci in 0..c {
                                d[at(ci)] = y[at(ci)] * (g[at(ci)] - dot);
                            }
                        }
                    }
                    add_into(&mut grads[*x], &d);
                }
                Op::Dense { x, w, b } => {
                    let (n, f) = (val(*x).shape()[0], val(*x).shape()[1]);
                    let o = val(*w).shape()[0];
                    if ng(*x) {
                        let mut dx = vec![0.0; n * f];
                        kernels::gemm(n, o, f, &g, false, val(*w).data(), false, 0.0, &mut dx);
                        add_into(&mut grads[*x], &dx);
                    }
                    if ng(*w) {
                        let mut dw = vec![0.0; o * f];
                        kernels::gemm(o, n, f, &g, true, val(*x).data(), false, 0.0, &mut dw);
                        add_into(&mut grads[*w], &dw);
                    }
                    if ng(*b) {
                        let mut db = vec![0.0; o];
                        for row in g.chunks(o) {
                            db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                        add_into(&mut grads[*b], &db);
                    }
                }
                Op::AvgPool { x, k } => {
                    let (n, c, h, w) = val(*x).dims4()?;
                    let (oh, ow) = (h / k, w / k);
                    let inv = 1.0 / (k * k) as f64;
                    let mut d = vec![0.0; n * c * h * w];
                    for pc in 0..n * c {
                        for y in 0..h {
                            for xx in 0..w {
                                d[(pc * h + y) * w + xx] = g[(pc * oh + y / k) * ow + xx / k] * inv;
                            }
                        }
                    }
                    add_into(&mut grads[*x], &d);
                }
                Op::Upsample { x, f } => {
                    let (n, c, h, w) = val(*x).dims4()?;
                    let (oh, ow) = (h * f, w * f);
                    let mut d = vec![0.0; n * c * h * w];
                    for pc in 0..n * c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                d[(pc * h + y / f) * w + xx / f] += g[(pc * oh + y) * ow + xx];
                            }
                        }
                    }
                    add_into(&mut grads[*x], &d);
                }
                Op::Concat { xs } => {
                    let (n, total, h, w) = node.value.dims4()?;
                    let hw = h * w;
                    let mut offset = 0;
                    for &(j, cj) in xs {
                        if ng(j) {
                            let mut d = Vec::with_capacity(n * cj * hw);
                            for b in 0..n {
                                let start = (b * total + offset) * hw;
                                d.extend_from_slice(&g[start..start + cj * hw]);
                            }
                            add_into(&mut grads[j], &d);
                        }
                        offset += cj;
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let (_, _, h, w) = val(*x).dims4()?;
                    let hw = h * w;
                    let inv = 1.0 / hw as f64;
                    let d: Vec<f64> = g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, hw)).collect();
                    add_into(&mut grads[*x], &d);
                }
                Op::CombineAtoms { coeffs, atoms } => {
                    let (n, k) = (val(*coeffs).shape()[0], val(*coeffs).shape()[1]);
                    let m = atoms.len() / k;
                    let mut d = vec![0.0; n * k];
                    // dα (n×k) = dOut (n×m) · atomsᵀ (m×k)
                    kernels::gemm(n, m, k, &g, false, atoms.data(), true, 0.0, &mut d);
                    add_into(&mut grads[*coeffs], &d);
                }
                Op::Add(a, b) => {
                    if ng(*a) {
                        add_into(&mut grads[*a], &g);
                    }
                    if ng(*b) {
                        add_into(&mut grads[*b], &g);
                    }
                }
                Op::Sub(a, b) => {
                    if ng(*a) {
                        add_into(&mut grads[*a], &g);
                    }
                    if ng(*b) {
                        let d: Vec<f64> = g.iter().map(|v| -v).collect();
                        add_into(&mut grads[*b], &d);
                    }
                }
                Op::Mul(a, b) => {
                    if ng(*a) {
                        let d: Vec<f64> = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                        add_into(&mut grads[*a], &d);
                    }
                    if ng(*b) {
                        let d: Vec<f64> = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                        add_into(&mut grads[*b], &d);
                    }
                }
                Op::Scale(x, c) => {
                    let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                    add_into(&mut grads[*x], &d);
                }
                Op::Sum(x) => {
                    let d = vec![g[0]; val(*x).len()];
                    add_into(&mut grads[*x], &d);
                }
                Op::BceWithLogits { logits, target } => {
                    let inv = g[0] / target.len() as f64;
                    let d: Vec<f64> = val(*logits)
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&z, &y)| (sigmoid(z) - y) * inv)
                        .collect();
                    add_into(&mut grads[*logits], &d);
                }
                Op::SoftDice {
                    probs,
                    target,
                    smooth,
                } => {
                    let p = val(*probs).data();
                    let n = val(*probs).shape()[0];
                    let per = p.len() / n;
                    let mut d = vec![0.0; p.len()];
                    for b in 0..n {
                        let r = b * per..(b + 1) * per;
                        let (ps, ys) = (&p[r.clone()], &target.data()[r.clone()]);
                        let num = 2.0 * ps.iter().zip(ys).map(|(a, c)| a * c).sum::<f64>() + smooth;
                        let den = ps.iter().sum::<f64>() + ys.iter().sum::<f64>() + smooth;
                        for (dv, &y) in d[r].iter_mut().zip(ys) {
                            // ∂/∂p of -(num/den)
                            *dv = -(2.0 * y * den - num) / (den * den) * g[0] / n as f64;
                        }
                    }
                    add_into(&mut grads[*probs], &d);
                }
                Op::CosineDistance { a, b, eps } => {
                    let (n, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    let mut da = vec![0.0; n * k];
                    let mut db = vec![0.0; n * k];
                    let s = g[0] / n as f64;
                    for r in 0..n {
                        let rg = r * k..(r + 1) * k;
                        let (x, y) = (&av[rg.clone()], &bv[rg.clone()]);
                        let (_, dot, nx, ny, clamped) = cosine_terms_full(x, y, *eps);
                        if clamped {
                            for j in 0..k {
                                da[r * k + j] = -s * y[j] / eps;
                                db[r * k + j] = -s * x[j] / eps;
                            }
                        } else {
                            let den = nx * ny;
                            for j in 0..k {
                                da[r * k + j] = -s * (y[j] / den - dot * x[j] / (nx * nx * den));
                                db[r * k + j] = -s * (x[j] / den - dot * y[j] / (ny * ny * den));
                            }
                        }
                    }
                    if ng(*a) {
                        add_into(&mut grads[*a], &da);
                    }
                    if ng(*b) {
                        add_into(&mut grads[*b], &db);
                    }
                }
                Op::MeanSquaredDiff(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    let s = 2.0 * g[0] / av.len() as f64;
                    let d: Vec<f64> = av.iter().zip(bv).map(|(x, y)| s * (x - y)).collect();
                    if ng(*a) {
                        add_into(&mut grads[*a], &d);
                    }
                    if ng(*b) {
                        let nd: Vec<f64> = d.iter().map(|v| -v).collect();
                        add_into(&mut grads[*b], &nd);
                    }
                }
            }
        }

        for (&id, &node) in &self.params {
            if node <= li {
                by_param
                    .entry(id)
                    .or_insert_with(|| Grid::zeros(self.nodes[node].value.shape()));
            } else {
                by_param.insert(id, Grid::zeros(self.nodes[node].value.shape()));
            }
        }
        Ok(Gradients { by_param })
    }
}

/// `(cos, dot, ‖x‖, ‖y‖, denominator clamped to eps)`.
fn cosine_terms_full(x: &[f64], y: &[f64], eps: f64) -> (f64, f64, f64, f64, bool) {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    let prod = nx * ny;
    if prod < eps {
        (dot / eps, dot, nx, ny, true)
    } else {
        (dot / prod, dot, nx, ny, false)
    }
}

fn cosine_terms(x: &[f64], y: &[f64], eps: f64) -> (f64, bool) {
    let (c, _, _, _, clamped) = cosine_terms_full(x, y, eps);
    (c, clamped)
}

/// `1 - x·y / max(‖x‖‖y‖, eps)` for plain slices.
pub fn cosine_distance(x: &[f64], y: &[f64], eps: f64) -> f64 {
    1.0 - cosine_terms(x, y, eps).0
}
