//! Explicit shape dictionary over binary masks.
//!
//! Masks `y` (flattened, `m = H·W` pixels) are approximated by sparse
//! combinations of `K` atoms by minimizing
//!
//! ```text
//! Σ_i ‖y_i − D α_i‖² + λ‖α_i‖₁
//! ```
//!
//! with no ½ on the quadratic term, so every optimality threshold below is in
//! the factor-2 form `|2·d_jᵀ r| ≤ λ`. Codes are found with a LARS-lasso
//! homotopy polished by coordinate descent; the dictionary is learned online
//! with block-coordinate updates on accumulated sufficient statistics.

use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tasd_diffcore::{combine_atoms, Grid};
use thiserror::Error;

/// KKT residual the sparse coder drives the solution to.
pub const KKT_TOLERANCE: f64 = 1e-9;
/// Columns with `A_jj` at or below this are skipped by the dictionary update.
pub const MIN_DIAGONAL: f64 = 1e-12;

const MAGIC: &[u8; 4] = b"SHPD";
const VERSION: u8 = 0x01;
const HEADER_LEN: usize = 4 + 1 + 3 * 4 + 8;

#[derive(Debug, Error)]
pub enum DictError {
    #[error("pixel count must be at least 1")]
    ZeroPixels,
    #[error("mask is {got_h}x{got_w}, dictionary is {h}x{w}")]
    ResolutionMismatch {
        h: usize,
        w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("lambda must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
    #[error("mask {index} has values outside [0, 1]")]
    MaskOutOfRange { index: usize },
    #[error("need more masks than atoms (K ≪ N): N = {n}, K = {k}")]
    TooFewMasks { n: usize, k: usize },
    #[error("empty mask set")]
    EmptyMaskSet,
    #[error("atom count must be at least 1")]
    ZeroAtoms,
    #[error("expected {expected} coefficients, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("statistics are for K = {stats_k}, m = {stats_m}; dictionary has K = {k}, m = {m}")]
    StatsMismatch {
        k: usize,
        m: usize,
        stats_k: usize,
        stats_m: usize,
    },
    #[error("statistics contain no samples")]
    NoSamples,
    #[error("bad magic bytes: expected \"SHPD\"")]
    BadMagic,
    #[error("unsupported dictionary format version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated dictionary file: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("header declares K·H·W = {declared} values but payload holds {actual}")]
    SizeMismatch { declared: usize, actual: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, DictError>;

/// `1.2 / √m`.
pub fn default_lambda(m: usize) -> Result<f64> {
    if m == 0 {
        return Err(DictError::ZeroPixels);
    }
    Ok(1.2 / (m as f64).sqrt())
}

/// `K` atoms, each an `H×W` grid, stored atom-major and row-major within each atom.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeDictionary {
    k: usize,
    height: usize,
    width: usize,
    atoms: Arc<Grid>,
    lambda: f64,
    train_mask_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeCoefficients {
    pub values: Vec<f64>,
}

impl ShapeCoefficients {
    pub fn zeros(k: usize) -> Self {
        Self { values: vec![0.0; k] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn nonzeros(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    pub fn l1(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }
}

impl From<Vec<f64>> for ShapeCoefficients {
    fn from(values: Vec<f64>) -> Self {
        Self { values }
    }
}

impl ShapeDictionary {
    /// Builds a dictionary from `k·h·w` atom values. Atoms with norm above one are rescaled
    /// onto the unit sphere.
    pub fn from_atoms(k: usize, height: usize, width: usize, atoms: Vec<f64>, lambda: f64) -> Result<Self> {
        if k == 0 {
            return Err(DictError::ZeroAtoms);
        }
        if height * width == 0 {
            return Err(DictError::ZeroPixels);
        }
        if atoms.len() != k * height * width {
            return Err(DictError::SizeMismatch {
                declared: k * height * width,
                actual: atoms.len(),
            });
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(DictError::NonFinite("atoms"));
        }
        check_lambda(lambda)?;
        let mut atoms = atoms;
        let m = height * width;
        for atom in atoms.chunks_mut(m) {
            project_unit_ball(atom);
        }
        Ok(Self {
            k,
            height,
            width,
            atoms: Arc::new(Grid::new(vec![k, height, width], atoms).expect("size checked")),
            lambda,
            train_mask_count: None,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Pixel count `m = H·W`.
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Number of masks the dictionary was fit on, when known.
    pub fn train_mask_count(&self) -> Option<usize> {
        self.train_mask_count
    }

    pub fn atom(&self, j: usize) -> &[f64] {
        let m = self.pixels();
        &self.atoms.data()[j * m..(j + 1) * m]
    }

    pub fn atom_norm(&self, j: usize) -> f64 {
        self.atom(j).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// All atoms as a shared `[K, H, W]` grid.
    pub fn atoms(&self) -> &Arc<Grid> {
        &self.atoms
    }

    fn atoms_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.atoms).data_mut()
    }

    fn check_mask(&self, mask: &Grid) -> Result<()> {
        let (got_h, got_w) = match *mask.shape() {
            [h, w] => (h, w),
            [1, 1, h, w] => (h, w),
            _ => (0, mask.len()),
        };
        if (got_h, got_w) != (self.height, self.width) {
            return Err(DictError::ResolutionMismatch {
                h: self.height,
                w: self.width,
                got_h,
                got_w,
            });
        }
        if !mask.is_finite() {
            return Err(DictError::NonFinite("mask"));
        }
        Ok(())
    }

    /// `DᵀD` as a row-major `K×K` matrix.
    pub fn gram(&self) -> Vec<f64> {
        let k = self.k;
        let mut g = vec![0.0; k * k];
        for i in 0..k {
            for j in i..k {
                let v = dot(self.atom(i), self.atom(j));
                g[i * k + j] = v;
                g[j * k + i] = v;
            }
        }
        g
    }

    /// `Dᵀy`.
    pub fn correlations(&self, y: &[f64]) -> Vec<f64> {
        (0..self.k).map(|j| dot(self.atom(j), y)).collect()
    }

    /// Writes the binary dictionary format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.atoms.len() * 8);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        for v in [self.k, self.height, self.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.lambda.to_le_bytes());
        for v in self.atoms.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(DictError::Truncated {
                needed: HEADER_LEN,
                have: bytes.len(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(DictError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(DictError::Truncated {
                needed: HEADER_LEN,
                have: bytes.len(),
            });
        }
        if bytes[4] != VERSION {
            return Err(DictError::UnsupportedVersion(bytes[4]));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (k, h, w) = (u32_at(5), u32_at(9), u32_at(13));
        let lambda = f64::from_le_bytes(bytes[17..25].try_into().unwrap());
        let declared = k * h * w;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < declared * 8 {
            return Err(DictError::Truncated {
                needed: HEADER_LEN + declared * 8,
                have: bytes.len(),
            });
        }
        if payload.len() != declared * 8 {
            return Err(DictError::SizeMismatch {
                declared,
                actual: payload.len() / 8,
            });
        }
        let atoms: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if k == 0 {
            return Err(DictError::ZeroAtoms);
        }
        if h * w == 0 {
            return Err(DictError::ZeroPixels);
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(DictError::NonFinite("atoms"));
        }
        check_lambda(lambda)?;
        Ok(Self {
            k,
            height: h,
            width: w,
            atoms: Arc::new(Grid::new(vec![k, h, w], atoms).expect("size checked")),
            lambda,
            train_mask_count: None,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(DictError::InvalidLambda(lambda));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project_unit_ball(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 1.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// `‖y − Dα‖² + λ‖α‖₁`.
pub fn lasso_objective(dict: &ShapeDictionary, y: &[f64], alpha: &[f64], lambda: f64) -> f64 {
    let recon = reconstruct(dict, alpha);
    let r2: f64 = y.iter().zip(&recon).map(|(a, b)| (a - b) * (a - b)).sum();
    r2 + lambda * alpha.iter().map(|a| a.abs()).sum::<f64>()
}

fn reconstruct(dict: &ShapeDictionary, alpha: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; dict.pixels()];
    combine_atoms(alpha, dict.atoms.data(), dict.k, &mut out);
    out
}

/// Largest violation of the lasso subgradient conditions for `alpha`.
pub fn kkt_violation(dict: &ShapeDictionary, y: &[f64], alpha: &[f64], lambda: f64) -> f64 {
    kkt_violation_gram(&dict.gram(), &dict.correlations(y), alpha, lambda)
}

fn kkt_violation_gram(g: &[f64], c: &[f64], alpha: &[f64], lambda: f64) -> f64 {
    let k = c.len();
    let mut worst = 0.0f64;
    for j in 0..k {
        let grad = 2.0 * (c[j] - dot(&g[j * k..(j + 1) * k], alpha));
        let v = if alpha[j] != 0.0 {
            (grad - lambda * alpha[j].signum()).abs()
        } else {
            (grad.abs() - lambda).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// Minimizes `‖y − Dα‖² + λ‖α‖₁` for one flattened mask.
pub fn sparse_code(dict: &ShapeDictionary, mask: &Grid, lambda: f64) -> Result<ShapeCoefficients> {
    dict.check_mask(mask)?;
    check_lambda(lambda)?;
    let g = dict.gram();
    let c = dict.correlations(mask.data());
    Ok(ShapeCoefficients {
        values: lasso_gram(&g, &c, lambda),
    })
}

/// Lasso on precomputed `G = DᵀD` and `c = Dᵀy`.
fn lasso_gram(g: &[f64], c: &[f64], lambda: f64) -> Vec<f64> {
    let k = c.len();
    let t = lambda / 2.0;
    let start = lars_lasso(g, c, t).unwrap_or_else(|| vec![0.0; k]);
    coordinate_descent(g, c, t, start, lambda)
}

/// Homotopy path of `½‖y − Dα‖² + t‖α‖₁` from `t = max|c|` down to the target `t`.
/// Returns `None` when the active Gram block becomes numerically singular.
fn lars_lasso(g: &[f64], c: &[f64], t: f64) -> Option<Vec<f64>> {
    let k = c.len();
    let mut alpha = vec![0.0; k];
    let mut corr = c.to_vec();
    let (j0, cmax0) = corr
        .iter()
        .enumerate()
        .map(|(j, v)| (j, v.abs()))
        .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    if cmax0 <= t {
        return Some(alpha);
    }
    let mut active = vec![j0];
    let mut signs = vec![corr[j0].signum()];
    let tiny = 1e-12;

    for _ in 0..(8 * k + 8) {
        let na = active.len();
        let mut gaa = vec![0.0; na * na];
        for (a, &i) in active.iter().enumerate() {
            for (b, &j) in active.iter().enumerate() {
                gaa[a * na + b] = g[i * k + j];
            }
        }
        let w = cholesky_solve(&gaa, &signs, na)?;
        // change in correlations per unit step
        let dir: Vec<f64> = (0..k)
            .map(|j| active.iter().zip(&w).map(|(&i, wi)| g[j * k + i] * wi).sum())
            .collect();
        let cmax = active.iter().zip(&signs).map(|(&i, s)| corr[i] * s).sum::<f64>() / na as f64;

        enum Event {
            End,
            Join(usize),
            Drop(usize),
        }
        let mut gamma = cmax - t;
        let mut event = Event::End;
        for j in 0..k {
            if active.contains(&j) {
                continue;
            }
            for (num, den) in [(cmax - corr[j], 1.0 - dir[j]), (cmax + corr[j], 1.0 + dir[j])] {
                if den > tiny {
                    let step = num / den;
                    if step > tiny && step < gamma {
                        gamma = step;
                        event = Event::Join(j);
                    }
                }
            }
        }
        for (a, &i) in active.iter().enumerate() {
            if w[a] != 0.0 {
                let step = -alpha[i] / w[a];
                if step > tiny && step < gamma {
                    gamma = step;
                    event = Event::Drop(a);
                }
            }
        }
        let gamma = gamma.max(0.0);
        for (a, &i) in active.iter().enumerate() {
            alpha[i] += gamma * w[a];
        }
        for j in 0..k {
            corr[j] -= gamma * dir[j];
        }
        match event {
            Event::End => return Some(alpha),
            Event::Join(j) => {
                active.push(j);
                signs.push(corr[j].signum());
            }
            Event::Drop(a) => {
                alpha[active[a]] = 0.0;
                active.remove(a);
                signs.remove(a);
                if active.is_empty() {
                    return Some(alpha);
                }
            }
        }
    }
    None
}

fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    for i in 0..n {
        for j in 0..=i {
            let s = a[i * n + j] - (0..j).map(|p| l[i * n + p] * l[j * n + p]).sum::<f64>();
            if i == j {
                if s <= 1e-10 * scale.max(1e-300) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        z[i] = (b[i] - (0..i).map(|p| l[i * n + p] * z[p]).sum::<f64>()) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (z[i] - (i + 1..n).map(|p| l[p * n + i] * x[p]).sum::<f64>()) / l[i * n + i];
    }
    Some(x)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Cyclic coordinate descent until the KKT residual is at most [`KKT_TOLERANCE`].
fn coordinate_descent(g: &[f64], c: &[f64], t: f64, mut alpha: Vec<f64>, lambda: f64) -> Vec<f64> {
    let k = c.len();
    // running q = Gα
    let mut q: Vec<f64> = (0..k).map(|j| dot(&g[j * k..(j + 1) * k], &alpha)).collect();
    for sweep in 0..200_000 {
        if sweep % 4 == 0 {
            // refresh to limit drift before testing convergence
            for j in 0..k {
                q[j] = dot(&g[j * k..(j + 1) * k], &alpha);
            }
            if kkt_violation_gram(g, c, &alpha, lambda) <= KKT_TOLERANCE {
                break;
            }
        }
        for j in 0..k {
            let gjj = g[j * k + j];
            if gjj <= 1e-300 {
                alpha[j] = 0.0;
                continue;
            }
            let rho = c[j] - q[j] + gjj * alpha[j];
            let new = soft_threshold(rho, t) / gjj;
            let delta = new - alpha[j];
            if delta != 0.0 {
                for (i, qi) in q.iter_mut().enumerate() {
                    *qi += g[i * k + j] * delta;
                }
                alpha[j] = new;
            }
        }
    }
    alpha
}

/// Sufficient statistics `A = Σ ααᵀ` and `B = Σ y αᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineStats {
    k: usize,
    m: usize,
    /// `K×K`, row-major.
    a: Vec<f64>,
    /// `m×K`, row-major: `b[p·K + j]`.
    b: Vec<f64>,
    samples_seen: usize,
}

impl OnlineStats {
    pub fn new(k: usize, m: usize) -> Self {
        Self {
            k,
            m,
            a: vec![0.0; k * k],
            b: vec![0.0; m * k],
            samples_seen: 0,
        }
    }

    /// Builds statistics from explicit matrices (`a` is `K×K`, `b` is `m×K`).
    pub fn from_parts(k: usize, m: usize, a: Vec<f64>, b: Vec<f64>, samples_seen: usize) -> Self {
        assert_eq!(a.len(), k * k);
        assert_eq!(b.len(), m * k);
        Self {
            k,
            m,
            a,
            b,
            samples_seen,
        }
    }

    pub fn accumulate(&mut self, y: &[f64], alpha: &[f64]) {
        assert_eq!(y.len(), self.m);
        assert_eq!(alpha.len(), self.k);
        let k = self.k;
        let nz: Vec<(usize, f64)> = alpha
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, v)| *v != 0.0)
            .collect();
        for &(i, ai) in &nz {
            for &(j, aj) in &nz {
                self.a[i * k + j] += ai * aj;
            }
        }
        for (p, &yp) in y.iter().enumerate() {
            if yp != 0.0 {
                for &(j, aj) in &nz {
                    self.b[p * k + j] += yp * aj;
                }
            }
        }
        self.samples_seen += 1;
    }

    pub fn samples_seen(&self) -> usize {
        self.samples_seen
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }
}

/// `½·tr(DᵀD A) − tr(DᵀB)`.
pub fn surrogate_objective(dict: &ShapeDictionary, stats: &OnlineStats) -> f64 {
    let k = dict.k;
    let g = dict.gram();
    let quad: f64 = g.iter().zip(&stats.a).map(|(x, y)| x * y).sum();
    let mut lin = 0.0;
    for j in 0..k {
        let atom = dict.atom(j);
        for (p, &d) in atom.iter().enumerate() {
            lin += d * stats.b[p * k + j];
        }
    }
    0.5 * quad - lin
}

/// One block-coordinate pass over the atoms followed by unit-ball projection.
pub fn dictionary_update(dict: &ShapeDictionary, stats: &OnlineStats) -> Result<ShapeDictionary> {
    if stats.k != dict.k || stats.m != dict.pixels() {
        return Err(DictError::StatsMismatch {
            k: dict.k,
            m: dict.pixels(),
            stats_k: stats.k,
            stats_m: stats.m,
        });
    }
    if stats.samples_seen == 0 {
        return Err(DictError::NoSamples);
    }
    let mut out = dict.clone();
    update_in_place(&mut out, stats);
    Ok(out)
}

fn update_in_place(dict: &mut ShapeDictionary, stats: &OnlineStats) {
    let (k, m) = (dict.k, dict.pixels());
    let mut u = vec![0.0; m];
    for j in 0..k {
        let ajj = stats.a[j * k + j];
        if ajj <= MIN_DIAGONAL {
            continue;
        }
        let atoms = dict.atoms.data();
        // u = b_j − D a_j
        for (p, up) in u.iter_mut().enumerate() {
            *up = stats.b[p * k + j];
        }
        for i in 0..k {
            let aij = stats.a[i * k + j];
            if aij != 0.0 {
                for (up, &d) in u.iter_mut().zip(&atoms[i * m..(i + 1) * m]) {
                    *up -= aij * d;
                }
            }
        }
        let atom = &mut dict.atoms_mut()[j * m..(j + 1) * m];
        for (d, up) in atom.iter_mut().zip(&u) {
            *d += up / ajj;
        }
        project_unit_ball(atom);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DictLearnConfig {
    pub k: usize,
    /// `None` uses [`default_lambda`].
    pub lambda: Option<f64>,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DictLearnConfig {
    fn default() -> Self {
        Self {
            k: 48,
            lambda: None,
            epochs: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LearnedDictionary {
    pub dictionary: ShapeDictionary,
    /// Codes of every mask under the final dictionary, in input order.
    pub codes: Vec<ShapeCoefficients>,
    /// Mean objective over all masks at the end of each epoch.
    pub epoch_objectives: Vec<f64>,
}

/// Online dictionary learning over `masks` (each `H×W`, values in `[0, 1]`).
pub fn learn_dictionary(masks: &[Grid], config: &DictLearnConfig) -> Result<LearnedDictionary> {
    let n = masks.len();
    if n == 0 {
        return Err(DictError::EmptyMaskSet);
    }
    let k = config.k;
    if k == 0 {
        return Err(DictError::ZeroAtoms);
    }
    if n <= k {
        return Err(DictError::TooFewMasks { n, k });
    }
    let (h, w) = match *masks[0].shape() {
        [h, w] => (h, w),
        _ => {
            return Err(DictError::ResolutionMismatch {
                h: 0,
                w: 0,
                got_h: 0,
                got_w: masks[0].len(),
            })
        }
    };
    let m = h * w;
    let lambda = match config.lambda {
        Some(l) => l,
        None => default_lambda(m)?,
    };
    check_lambda(lambda)?;
    for (i, mask) in masks.iter().enumerate() {
        if mask.shape() != [h, w] {
            let (got_h, got_w) = match *mask.shape() {
                [a, b] => (a, b),
                _ => (0, mask.len()),
            };
            return Err(DictError::ResolutionMismatch { h, w, got_h, got_w });
        }
        if !mask.is_finite() {
            return Err(DictError::NonFinite("mask"));
        }
        if mask.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DictError::MaskOutOfRange { index: i });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut init = Vec::with_capacity(k * m);
    for &i in order.iter().filter(|&&i| masks[i].norm() > 0.0).take(k) {
        let norm = masks[i].norm();
        init.extend(masks[i].data().iter().map(|v| v / norm));
    }
    while init.len() < k * m {
        let mut atom: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dot(&atom, &atom).sqrt();
        atom.iter_mut().for_each(|v| *v /= norm);
        init.extend(atom);
    }
    let mut dict = ShapeDictionary::from_atoms(k, h, w, init, lambda)?;
    dict.train_mask_count = Some(n);

    let mut stats = OnlineStats::new(k, m);
    let mut gram = dict.gram();
    let mut epoch_objectives = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let y = masks[i].data();
            let alpha = lasso_gram(&gram, &dict.correlations(y), lambda);
            stats.accumulate(y, &alpha);
            update_in_place(&mut dict, &stats);
            gram = dict.gram();
        }
        let (obj, _) = code_all(&dict, &gram, masks, lambda);
        epoch_objectives.push(obj);
    }
    let (_, codes) = code_all(&dict, &gram, masks, lambda);
    Ok(LearnedDictionary {
        dictionary: dict,
        codes,
        epoch_objectives,
    })
}

fn code_all(dict: &ShapeDictionary, gram: &[f64], masks: &[Grid], lambda: f64) -> (f64, Vec<ShapeCoefficients>) {
    let mut total = 0.0;
    let codes: Vec<ShapeCoefficients> = masks
        .iter()
        .map(|mask| {
            let alpha = lasso_gram(gram, &dict.correlations(mask.data()), lambda);
            total += lasso_objective(dict, mask.data(), &alpha, lambda);
            ShapeCoefficients { values: alpha }
        })
        .collect();
    (total / masks.len() as f64, codes)
}

/// `M = Σ_j α_j d_j` as an `H×W` grid, with no clipping or thresholding.
pub fn reference_mask(dict: &ShapeDictionary, coeffs: &ShapeCoefficients) -> Result<Grid> {
    if coeffs.len() != dict.k {
        return Err(DictError::LengthMismatch {
            expected: dict.k,
            got: coeffs.len(),
        });
    }
    let mut out = vec![0.0; dict.pixels()];
    combine_atoms(&coeffs.values, dict.atoms.data(), dict.k, &mut out);
    Ok(Grid::new(vec![dict.height, dict.width], out).expect("shape matches"))
}
