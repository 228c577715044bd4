//! Synthetic single-source / multi-target segmentation benchmark.
//!
//! Shapes are smooth star-convex blobs drawn from one geometry distribution
//! shared by every domain; domains differ only in how the image is rendered
//! from the mask (intensity levels and an ordered appearance chain).

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tasd_diffcore::Grid;
use thiserror::Error;

pub use crate::mix_seed;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("geometry seed ranges of {a} and {b} overlap")]
    OverlappingSeeds { a: String, b: String },
    #[error("benchmark needs at least one unseen domain")]
    NoUnseenDomain,
    #[error("{0}")]
    InvalidConfig(String),
    #[error("sample file {path}: {reason}")]
    BadSampleFile { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeConfig {
    pub height: usize,
    pub width: usize,
    /// Max center offset from the image center, as a fraction of the side length.
    pub center_jitter: f64,
    /// Semi-axis range as fractions of the shorter side.
    pub min_semi_axis: f64,
    pub max_semi_axis: f64,
    /// Number of radial harmonics (orders 2, 3, ...) perturbing the ellipse.
    pub harmonics: usize,
    /// Max relative amplitude of each harmonic.
    pub radial_amplitude: f64,
    pub min_area_fraction: f64,
    pub max_area_fraction: f64,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            center_jitter: 0.08,
            min_semi_axis: 0.13,
            max_semi_axis: 0.30,
            harmonics: 3,
            radial_amplitude: 0.10,
            min_area_fraction: 0.03,
            max_area_fraction: 0.40,
        }
    }
}

/// Drawn geometry of one blob, in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeParams {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
    /// `(amplitude, phase)` for harmonic orders 2, 3, ...
    pub harmonics: Vec<(f64, f64)>,
}

impl ShapeParams {
    pub fn draw(rng: &mut impl Rng, cfg: &ShapeConfig) -> Self {
        let side = cfg.height.min(cfg.width) as f64;
        let jitter = |rng: &mut dyn rand::RngCore, extent: usize| {
            extent as f64 / 2.0 + rng.random_range(-1.0..=1.0) * cfg.center_jitter * extent as f64
        };
        let cx = jitter(rng, cfg.width);
        let cy = jitter(rng, cfg.height);
        let a = rng.random_range(cfg.min_semi_axis..=cfg.max_semi_axis) * side;
        let b = rng.random_range(cfg.min_semi_axis..=cfg.max_semi_axis) * side;
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let harmonics = (0..cfg.harmonics)
            .map(|_| {
                (
                    rng.random_range(-1.0..=1.0) * cfg.radial_amplitude,
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        Self {
            cx,
            cy,
            a,
            b,
            theta,
            harmonics,
        }
    }

    /// Boundary radius in direction `phi`.
    pub fn radius(&self, phi: f64) -> f64 {
        let t = phi - self.theta;
        let ellipse = self.a * self.b / ((self.b * t.cos()).powi(2) + (self.a * t.sin()).powi(2)).sqrt();
        let bump: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(i, &(amp, phase))| amp * ((i as f64 + 2.0) * phi + phase).cos())
            .sum();
        ellipse * (1.0 + bump)
    }

    pub fn rasterize(&self, height: usize, width: usize) -> Grid {
        Grid::from_fn(&[height, width], |i| {
            let (y, x) = ((i / width) as f64 + 0.5, (i % width) as f64 + 0.5);
            let (dx, dy) = (x - self.cx, y - self.cy);
            let r = (dx * dx + dy * dy).sqrt();
            if r <= self.radius(dy.atan2(dx)) {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Number of 4-connected foreground components.
pub fn count_components(mask: &Grid) -> usize {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut seen = vec![false; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask.data()[start] <= 0.5 {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if !seen[q] && mask.data()[q] > 0.5 {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
    }
    count
}

/// A randomized smooth star-convex blob: connected, with area inside the configured bounds.
pub fn generate_shape(seed: u64, cfg: &ShapeConfig) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = (cfg.height * cfg.width) as f64;
    for _ in 0..256 {
        let mask = ShapeParams::draw(&mut rng, cfg).rasterize(cfg.height, cfg.width);
        let area = mask.sum() / total;
        if area >= cfg.min_area_fraction && area <= cfg.max_area_fraction && count_components(&mask) == 1 {
            return mask;
        }
    }
    // Unreachable for sane configs; fall back to a centered disk at the middle of the area range.
    let r = ((cfg.min_area_fraction + cfg.max_area_fraction) / 2.0 * total / std::f64::consts::PI).sqrt();
    ShapeParams {
        cx: cfg.width as f64 / 2.0,
        cy: cfg.height as f64 / 2.0,
        a: r,
        b: r,
        theta: 0.0,
        harmonics: vec![],
    }
    .rasterize(cfg.height, cfg.width)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Appearance {
    IntensityAffine { scale: f64, offset: f64 },
    Gamma { gamma: f64 },
    GaussianNoise { std: f64 },
    GaussianBlur { sigma: f64 },
    /// Multiplicative field `1 + c0·u + c1·v + c2·u² + c3·v² + c4·u·v` with `u, v ∈ [-1, 1]`.
    BiasField { coeffs: [f64; 5] },
}

impl Appearance {
    fn validate(&self) -> std::result::Result<(), String> {
        let ok = match *self {
            Appearance::IntensityAffine { scale, offset } => scale > 0.0 && scale <= 4.0 && offset.abs() <= 1.0,
            Appearance::Gamma { gamma } => gamma > 0.05 && gamma <= 10.0,
            Appearance::GaussianNoise { std } => (0.0..=1.0).contains(&std),
            Appearance::GaussianBlur { sigma } => (0.0..=8.0).contains(&sigma),
            Appearance::BiasField { coeffs } => coeffs.iter().map(|c| c.abs()).sum::<f64>() < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("appearance transform out of bounds: {self:?}"))
        }
    }

    fn apply(&self, img: &mut [f64], h: usize, w: usize, rng: &mut ChaCha8Rng) {
        match *self {
            Appearance::IntensityAffine { scale, offset } => {
                img.iter_mut().for_each(|v| *v = *v * scale + offset);
            }
            Appearance::Gamma { gamma } => {
                img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0).powf(gamma));
            }
            Appearance::GaussianNoise { std } => {
                for v in img.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += std * z;
                }
            }
            Appearance::GaussianBlur { sigma } => gaussian_blur(img, h, w, sigma),
            Appearance::BiasField { coeffs } => {
                for (i, v) in img.iter_mut().enumerate() {
                    let u = 2.0 * ((i % w) as f64 + 0.5) / w as f64 - 1.0;
                    let t = 2.0 * ((i / w) as f64 + 0.5) / h as f64 - 1.0;
                    let field = 1.0 + coeffs[0] * u + coeffs[1] * t + coeffs[2] * u * u + coeffs[3] * t * t + coeffs[4] * u * t;
                    *v *= field;
                }
            }
        }
    }
}

/// Separable Gaussian blur with edge clamping.
fn gaussian_blur(img: &mut [f64], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let mut tmp = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let xx = (x as isize + i as isize - radius).clamp(0, w as isize - 1) as usize;
                    k * img[y * w + xx]
                })
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            img[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let yy = (y as isize + i as isize - radius).clamp(0, h as isize - 1) as usize;
                    k * tmp[yy * w + x]
                })
                .sum();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRange {
    pub start: u64,
    pub count: u64,
}

impl SeedRange {
    pub fn overlaps(&self, other: &SeedRange) -> bool {
        self.start < other.start + other.count && other.start < self.start + self.count
    }

    pub fn iter(&self) -> impl Iterator<Item = u64> {
        self.start..self.start + self.count
    }
}

/// Generative description of one imaging site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Indices into the geometry seed stream used by this domain's samples.
    pub geometry_seeds: SeedRange,
    pub foreground_level: f64,
    pub background_level: f64,
    /// Std of the fine per-pixel texture of the base rendering.
    pub texture_std: f64,
    pub appearance: Vec<Appearance>,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        for level in [self.foreground_level, self.background_level] {
            if !(0.0..=1.0).contains(&level) {
                return Err(SynthError::InvalidConfig(format!(
                    "{}: intensity level {level} outside [0, 1]",
                    self.name
                )));
            }
        }
        if !(0.0..=0.5).contains(&self.texture_std) {
            return Err(SynthError::InvalidConfig(format!("{}: texture std out of bounds", self.name)));
        }
        for a in &self.appearance {
            a.validate().map_err(|e| SynthError::InvalidConfig(format!("{}: {e}", self.name)))?;
        }
        Ok(())
    }

    /// Scales the strength of every appearance transform by `factor` (clamped to valid bounds).
    pub fn harsher(&self, factor: f64) -> DomainSpec {
        let mut out = self.clone();
        for a in &mut out.appearance {
            *a = match *a {
                Appearance::IntensityAffine { scale, offset } => Appearance::IntensityAffine {
                    scale: (1.0 + (scale - 1.0) * factor).clamp(0.05, 4.0),
                    offset: (offset * factor).clamp(-1.0, 1.0),
                },
                Appearance::Gamma { gamma } => Appearance::Gamma {
                    gamma: gamma.powf(factor).clamp(0.06, 10.0),
                },
                Appearance::GaussianNoise { std } => Appearance::GaussianNoise {
                    std: (std * factor).min(1.0),
                },
                Appearance::GaussianBlur { sigma } => Appearance::GaussianBlur {
                    sigma: (sigma * factor).min(8.0),
                },
                Appearance::BiasField { coeffs } => {
                    let total: f64 = coeffs.iter().map(|c| c.abs()).sum();
                    let s = factor.min(0.95 / total.max(1e-12));
                    Appearance::BiasField {
                        coeffs: coeffs.map(|c| c * s),
                    }
                }
            };
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub domain: String,
    /// `H×W`, in `[0, 1]` before normalization.
    pub image: Grid,
    /// `H×W`, values in `{0, 1}`.
    pub mask: Grid,
}

/// Foreground/background levels plus fine texture, before any appearance transform.
pub fn render_base(mask: &Grid, domain: &DomainSpec, seed: u64) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7E47));
    let (fg, bg) = (domain.foreground_level, domain.background_level);
    let mut img = mask.map(|m| bg + (fg - bg) * m);
    if domain.texture_std > 0.0 {
        for v in img.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += domain.texture_std * z;
        }
    }
    img
}

/// Renders a mask under a domain: base rendering, then the appearance chain in order,
/// clamped to `[0, 1]`. The mask is returned untouched.
pub fn render(mask: &Grid, domain: &DomainSpec, seed: u64, id: impl Into<String>) -> Sample {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut img = render_base(mask, domain, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xA99E));
    for a in &domain.appearance {
        a.apply(img.data_mut(), h, w, &mut rng);
    }
    img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Sample {
        id: id.into(),
        domain: domain.name.clone(),
        image: img,
        mask: mask.clone(),
    }
}

/// Zero-mean, unit-variance copy of an image (mean-centered only if constant).
pub fn normalize(image: &Grid) -> Grid {
    let n = image.len() as f64;
    let mean = image.sum() / n;
    let var = image.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 1e-12 {
        image.map(|v| (v - mean) / std)
    } else {
        image.map(|v| v - mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub shape: ShapeConfig,
    pub source: DomainSpec,
    pub unseen: Vec<DomainSpec>,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let test = |start| SeedRange { start, count: 100 };
        Self {
            shape: ShapeConfig::default(),
            source: DomainSpec {
                name: "site-a".into(),
                geometry_seeds: SeedRange { start: 0, count: 450 },
                foreground_level: 0.62,
                background_level: 0.38,
                texture_std: 0.04,
                appearance: vec![Appearance::GaussianBlur { sigma: 0.6 }, Appearance::GaussianNoise { std: 0.02 }],
            },
            unseen: vec![
                DomainSpec {
                    name: "site-b".into(),
                    geometry_seeds: test(10_000),
                    foreground_level: 0.55,
                    background_level: 0.42,
                    texture_std: 0.05,
                    appearance: vec![
                        Appearance::Gamma { gamma: 1.8 },
                        Appearance::IntensityAffine { scale: 0.7, offset: 0.2 },
                        Appearance::GaussianNoise { std: 0.03 },
                    ],
                },
                DomainSpec {
                    name: "site-c".into(),
                    geometry_seeds: test(20_000),
                    foreground_level: 0.65,
                    background_level: 0.35,
                    texture_std: 0.03,
                    appearance: vec![Appearance::GaussianBlur { sigma: 1.6 }, Appearance::GaussianNoise { std: 0.12 }],
                },
                DomainSpec {
                    name: "site-d".into(),
                    geometry_seeds: test(30_000),
                    foreground_level: 0.6,
                    background_level: 0.4,
                    texture_std: 0.08,
                    appearance: vec![
                        Appearance::BiasField { coeffs: [0.35, -0.25, 0.15, 0.0, 0.1] },
                        Appearance::Gamma { gamma: 0.55 },
                        Appearance::GaussianNoise { std: 0.04 },
                    ],
                },
            ],
            train_count: 400,
            val_count: 50,
            test_count: 100,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unseen.is_empty() {
            return Err(SynthError::NoUnseenDomain);
        }
        if self.shape.height == 0 || self.shape.width == 0 {
            return Err(SynthError::InvalidConfig("resolution must be positive".into()));
        }
        if (self.source.geometry_seeds.count as usize) < self.train_count + self.val_count {
            return Err(SynthError::InvalidConfig(format!(
                "source seed range holds {} seeds, need {}",
                self.source.geometry_seeds.count,
                self.train_count + self.val_count
            )));
        }
        for d in &self.unseen {
            if (d.geometry_seeds.count as usize) < self.test_count {
                return Err(SynthError::InvalidConfig(format!(
                    "{}: seed range holds {} seeds, need {}",
                    d.name, d.geometry_seeds.count, self.test_count
                )));
            }
        }
        let all: Vec<&DomainSpec> = std::iter::once(&self.source).chain(&self.unseen).collect();
        for (i, a) in all.iter().enumerate() {
            a.validate()?;
            for b in &all[i + 1..] {
                if a.name == b.name {
                    return Err(SynthError::InvalidConfig(format!("duplicate domain name {}", a.name)));
                }
                if a.geometry_seeds.overlaps(&b.geometry_seeds) {
                    return Err(SynthError::OverlappingSeeds {
                        a: a.name.clone(),
                        b: b.name.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub domain: String,
    pub split: Split,
    pub geometry_index: u64,
    pub geometry_seed: u64,
    pub appearance_seed: u64,
    pub image_path: Option<String>,
    pub mask_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    pub config: BenchmarkConfig,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub manifest: Manifest,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    /// One test set per unseen domain, in config order.
    pub unseen: Vec<(String, Vec<Sample>)>,
}

fn realize(entry: &ManifestEntry, domain: &DomainSpec, shape: &ShapeConfig) -> Sample {
    let mask = generate_shape(entry.geometry_seed, shape);
    render(&mask, domain, entry.appearance_seed, entry.id.clone())
}

/// Builds the source train/val split and one test set per unseen domain.
pub fn make_benchmark(config: &BenchmarkConfig, master_seed: u64) -> Result<Benchmark> {
    config.validate()?;
    let geo = |index: u64| mix_seed(master_seed, index);
    let app = |index: u64, domain: usize| mix_seed(mix_seed(master_seed, 0xD0_0000 + domain as u64), index);
    let mut entries = Vec::new();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, index) in config
        .source
        .geometry_seeds
        .iter()
        .take(config.train_count + config.val_count)
        .enumerate()
    {
        let split = if i < config.train_count { Split::Train } else { Split::Val };
        let entry = ManifestEntry {
            id: format!("{}-{:04}", config.source.name, i),
            domain: config.source.name.clone(),
            split,
            geometry_index: index,
            geometry_seed: geo(index),
            appearance_seed: app(index, 0),
            image_path: None,
            mask_path: None,
        };
        let s = realize(&entry, &config.source, &config.shape);
        match split {
            Split::Train => train.push(s),
            _ => val.push(s),
        }
        entries.push(entry);
    }
    let mut unseen = Vec::new();
    for (d, domain) in config.unseen.iter().enumerate() {
        let mut set = Vec::new();
        for (i, index) in domain.geometry_seeds.iter().take(config.test_count).enumerate() {
            let entry = ManifestEntry {
                id: format!("{}-{:04}", domain.name, i),
                domain: domain.name.clone(),
                split: Split::Test,
                geometry_index: index,
                geometry_seed: geo(index),
                appearance_seed: app(index, d + 1),
                image_path: None,
                mask_path: None,
            };
            set.push(realize(&entry, domain, &config.shape));
            entries.push(entry);
        }
        unseen.push((domain.name.clone(), set));
    }
    Ok(Benchmark {
        manifest: Manifest {
            master_seed,
            config: config.clone(),
            entries,
        },
        train,
        val,
        unseen,
    })
}

/// True when the source validation Dice exceeds the Dice of at least one unseen domain.
pub fn has_domain_gap(source_val_dice: f64, unseen_dice: &[f64]) -> bool {
    unseen_dice.iter().any(|&d| d < source_val_dice)
}

/// Rebuilds the benchmark with progressively harsher unseen domains until `gap_check`
/// (typically: train a quick baseline and compare Dice) reports a real domain gap.
pub fn ensure_domain_gap<E>(
    config: &BenchmarkConfig,
    master_seed: u64,
    max_rounds: usize,
    mut gap_check: impl FnMut(&Benchmark) -> std::result::Result<bool, E>,
) -> std::result::Result<Option<Benchmark>, E>
where
    E: From<SynthError>,
{
    let mut cfg = config.clone();
    for _ in 0..max_rounds.max(1) {
        let bench = make_benchmark(&cfg, master_seed)?;
        if gap_check(&bench)? {
            return Ok(Some(bench));
        }
        cfg.unseen = cfg.unseen.iter().map(|d| d.harsher(1.5)).collect();
    }
    Ok(None)
}

const SAMPLE_MAGIC: &[u8; 4] = b"SMPL";
pub const PAYLOAD_F64: u8 = 1;
pub const PAYLOAD_U8: u8 = 2;

/// Writes an `H×W` grid with the 16-byte sample header. `PAYLOAD_U8` stores values as bytes
/// (masks); `PAYLOAD_F64` stores little-endian doubles.
pub fn write_grid_file(path: &Path, grid: &Grid, payload: u8) -> Result<()> {
    let (h, w) = (grid.shape()[0], grid.shape()[1]);
    let mut out = Vec::with_capacity(16 + grid.len() * 8);
    out.extend_from_slice(SAMPLE_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.push(payload);
    out.extend_from_slice(&[0, 0, 0]);
    match payload {
        PAYLOAD_F64 => grid.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        PAYLOAD_U8 => out.extend(grid.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8)),
        other => {
            return Err(SynthError::BadSampleFile {
                path: path.display().to_string(),
                reason: format!("unknown payload type {other}"),
            })
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_grid_file(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path)?;
    let bad = |reason: String| SynthError::BadSampleFile {
        path: path.display().to_string(),
        reason,
    };
    if bytes.len() < 16 {
        return Err(bad(format!("header needs 16 bytes, file has {}", bytes.len())));
    }
    if &bytes[..4] != SAMPLE_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = &bytes[16..];
    let data: Vec<f64> = match bytes[12] {
        PAYLOAD_F64 if payload.len() == h * w * 8 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        PAYLOAD_U8 if payload.len() == h * w => payload.iter().map(|&b| b as f64).collect(),
        t @ (PAYLOAD_F64 | PAYLOAD_U8) => {
            return Err(bad(format!("payload type {t} has wrong length {}", payload.len())))
        }
        t => return Err(bad(format!("unknown payload type {t}"))),
    };
    Grid::new(vec![h, w], data).map_err(|e| bad(e.to_string()))
}

impl Benchmark {
    fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train
            .iter()
            .chain(&self.val)
            .chain(self.unseen.iter().flat_map(|(_, s)| s))
    }

    /// Writes every sample plus `manifest.json` under `dir`; paths in the manifest are relative.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir.join("samples"))?;
        let mut manifest = self.manifest.clone();
        for (entry, sample) in manifest.entries.iter_mut().zip(self.all_samples()) {
            debug_assert_eq!(entry.id, sample.id);
            let img = format!("samples/{}.img.smpl", sample.id);
            let mask = format!("samples/{}.mask.smpl", sample.id);
            write_grid_file(&dir.join(&img), &sample.image, PAYLOAD_F64)?;
            write_grid_file(&dir.join(&mask), &sample.mask, PAYLOAD_U8)?;
            entry.image_path = Some(img);
            entry.mask_path = Some(mask);
        }
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Benchmark> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut unseen: Vec<(String, Vec<Sample>)> =
            manifest.config.unseen.iter().map(|d| (d.name.clone(), Vec::new())).collect();
        for e in &manifest.entries {
            let path_of = |p: &Option<String>| -> Result<PathBuf> {
                p.as_ref().map(|p| dir.join(p)).ok_or_else(|| SynthError::BadSampleFile {
                    path: e.id.clone(),
                    reason: "manifest entry has no file path".into(),
                })
            };
            let sample = Sample {
                id: e.id.clone(),
                domain: e.domain.clone(),
                image: read_grid_file(&path_of(&e.image_path)?)?,
                mask: read_grid_file(&path_of(&e.mask_path)?)?,
            };
            match e.split {
                Split::Train => train.push(sample),
                Split::Val => val.push(sample),
                Split::Test => match unseen.iter_mut().find(|(n, _)| *n == e.domain) {
                    Some((_, set)) => set.push(sample),
                    None => {
                        return Err(SynthError::InvalidConfig(format!(
                            "test sample {} belongs to unknown domain {}",
                            e.id, e.domain
                        )))
                    }
                },
            }
        }
        Ok(Benchmark {
            manifest,
            train,
            val,
            unseen,
        })
    }
}
