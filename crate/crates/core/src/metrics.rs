//! Dice coefficient and symmetric Hausdorff distance on 2D binary masks.

use serde::{Deserialize, Serialize};
use tasd_diffcore::Grid;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("resolution mismatch: {a:?} vs {b:?}")]
    ResolutionMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("domain {0} has no samples")]
    EmptyDomain(String),
    #[error("nothing to aggregate")]
    NoDomains,
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Spatial extent of a mask given as `[H, W]` or `[1, 1, H, W]`.
fn extent(g: &Grid) -> Option<(usize, usize)> {
    match *g.shape() {
        [h, w] => Some((h, w)),
        [1, 1, h, w] => Some((h, w)),
        _ => None,
    }
}

fn check_pair(a: &Grid, b: &Grid) -> Result<(usize, usize)> {
    match (extent(a), extent(b)) {
        (Some(x), Some(y)) if x == y => Ok(x),
        _ => Err(MetricError::ResolutionMismatch {
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        }),
    }
}

/// Foreground indicator after thresholding at 0.5.
pub fn binarize(g: &Grid) -> Vec<bool> {
    g.data().iter().map(|&v| v > 0.5).collect()
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(pred: &Grid, gt: &Grid) -> Result<f64> {
    check_pair(pred, gt)?;
    let (a, b) = (binarize(pred), binarize(gt));
    let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Exact 1D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        if f[v[0]].is_infinite() {
            v[0] = q;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere.
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = if f[p].is_infinite() {
            f64::INFINITY
        } else {
            let d = q as f64 - p as f64;
            d * d + f[p]
        };
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel.
pub fn squared_distance_transform(fg: &[bool], h: usize, w: usize) -> Vec<f64> {
    let n = h.max(w);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut grid: Vec<f64> = fg.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Symmetric Hausdorff distance between foreground pixel centers, in pixels.
/// `None` when either mask has no foreground.
pub fn hausdorff(pred: &Grid, gt: &Grid) -> Result<Option<f64>> {
    let (h, w) = check_pair(pred, gt)?;
    let (a, b) = (binarize(pred), binarize(gt));
    if !a.contains(&true) || !b.contains(&true) {
        return Ok(None);
    }
    let to_b = squared_distance_transform(&b, h, w);
    let to_a = squared_distance_transform(&a, h, w);
    let directed = |from: &[bool], dist: &[f64]| {
        from.iter()
            .zip(dist)
            .filter(|(f, _)| **f)
            .map(|(_, d)| *d)
            .fold(0.0, f64::max)
    };
    Ok(Some(directed(&a, &to_b).max(directed(&b, &to_a)).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub dice: f64,
    /// `None` when either mask is empty.
    pub hd: Option<f64>,
}

impl SampleMetrics {
    pub fn compute(id: impl Into<String>, pred: &Grid, gt: &Grid) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            dice: dice(pred, gt)?,
            hd: hausdorff(pred, gt)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub domain: String,
    pub n: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub hd_mean: Option<f64>,
    pub hd_std: Option<f64>,
    pub hd_undefined_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_sample: Vec<(String, Vec<SampleMetrics>)>,
    pub domains: Vec<DomainSummary>,
    /// Mean of the per-domain means (and of the per-domain stds).
    pub average: DomainSummary,
}

/// Mean and population std.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

fn summarize(domain: &str, samples: &[SampleMetrics]) -> Result<DomainSummary> {
    let dice: Vec<f64> = samples.iter().map(|s| s.dice).collect();
    let (dice_mean, dice_std) = mean_std(&dice).ok_or_else(|| MetricError::EmptyDomain(domain.into()))?;
    let hd: Vec<f64> = samples.iter().filter_map(|s| s.hd).collect();
    let hd_stats = mean_std(&hd);
    Ok(DomainSummary {
        domain: domain.into(),
        n: samples.len(),
        dice_mean,
        dice_std,
        hd_mean: hd_stats.map(|s| s.0),
        hd_std: hd_stats.map(|s| s.1),
        hd_undefined_count: samples.len() - hd.len(),
    })
}

/// Per-domain mean±std plus the cross-domain average row.
pub fn aggregate(per_domain: Vec<(String, Vec<SampleMetrics>)>) -> Result<MetricReport> {
    if per_domain.is_empty() {
        return Err(MetricError::NoDomains);
    }
    let domains = per_domain
        .iter()
        .map(|(d, s)| summarize(d, s))
        .collect::<Result<Vec<_>>>()?;
    let avg = |f: &dyn Fn(&DomainSummary) -> Option<f64>| {
        let vals: Vec<f64> = domains.iter().filter_map(f).collect();
        mean_std(&vals).map(|s| s.0)
    };
    let average = DomainSummary {
        domain: "Avg".into(),
        n: domains.iter().map(|d| d.n).sum(),
        dice_mean: avg(&|d| Some(d.dice_mean)).unwrap_or(0.0),
        dice_std: avg(&|d| Some(d.dice_std)).unwrap_or(0.0),
        hd_mean: avg(&|d| d.hd_mean),
        hd_std: avg(&|d| d.hd_std),
        hd_undefined_count: domains.iter().map(|d| d.hd_undefined_count).sum(),
    };
    Ok(MetricReport {
        per_sample: per_domain,
        domains,
        average,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Grid {
        let mut g = Grid::zeros(&[h, w]);
        for &(y, x) in on {
            g.data_mut()[y * w + x] = 1.0;
        }
        g
    }

    #[test]
    fn dice_examples() {
        let a = mask(4, 4, &[(0, 0), (1, 1)]);
        let b = mask(4, 4, &[(1, 1), (2, 2)]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &mask(4, 4, &[(3, 3)])).unwrap(), 0.0);
        assert_eq!(dice(&mask(4, 4, &[]), &mask(4, 4, &[])).unwrap(), 1.0);
        assert!(dice(&a, &Grid::zeros(&[4, 5])).is_err());
    }

    #[test]
    fn hausdorff_three_four_five() {
        let a = mask(8, 8, &[(0, 0)]);
        let b = mask(8, 8, &[(3, 4)]);
        assert_eq!(hausdorff(&a, &b).unwrap(), Some(5.0));
        assert_eq!(hausdorff(&a, &a).unwrap(), Some(0.0));
        assert_eq!(hausdorff(&a, &mask(8, 8, &[])).unwrap(), None);
    }

    #[test]
    fn aggregate_examples() {
        let s = |d: f64, hd: Option<f64>| SampleMetrics {
            id: "x".into(),
            dice: d,
            hd,
        };
        let r = aggregate(vec![
            ("a".into(), vec![s(0.5, Some(2.0))]),
            ("b".into(), vec![s(0.7, Some(1.0)), s(0.7, None)]),
        ])
        .unwrap();
        assert_eq!(r.domains[0].dice_std, 0.0);
        assert_eq!(r.domains[1].dice_mean, 0.7);
        assert_eq!(r.domains[1].hd_undefined_count, 1);
        assert_eq!(r.domains[1].hd_mean, Some(1.0));
        assert!((r.average.dice_mean - 0.6).abs() < 1e-15);
        assert!(matches!(
            aggregate(vec![("e".into(), vec![])]),
            Err(MetricError::EmptyDomain(_))
        ));
    }
}
