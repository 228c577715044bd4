//! Residual encoder–decoder with a shape-coefficient regression branch.
//!
//! The regression head reads globally pooled bottleneck features and predicts
//! dictionary coefficients; their reference mask is concatenated to the decoder
//! features right before the last convolutional block.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tasd_diffcore::{BnMode, DiffError, Gradients, Grid, ParamId, RunningStats, Tape, Var, BN_EPS};
use thiserror::Error;

use crate::mix_seed;
use crate::shape_dictionary::{sparse_code, DictError, ShapeCoefficients, ShapeDictionary};

/// Guard inside the cosine regression loss.
pub const COSINE_EPS: f64 = 1e-8;
/// Smoothing constant of the soft-Dice term.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SegNetError {
    #[error("layer {layer}: {source}")]
    Layer { layer: String, source: DiffError },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Dict(#[from] DictError),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("input resolution {got:?} does not match network resolution {expected:?}")]
    ResolutionMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("the shape-prior network needs a dictionary")]
    MissingDictionary,
    #[error("dictionary has {got} atoms, network expects {expected}")]
    AtomCountMismatch { expected: usize, got: usize },
    #[error("ground-truth mask has values outside [0, 1]")]
    TargetOutOfRange,
    #[error("training example {0} has no coefficient target")]
    MissingTarget(usize),
    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SegNetError>;

fn at(layer: &str) -> impl FnOnce(DiffError) -> SegNetError + '_ {
    move |source| SegNetError::Layer {
        layer: layer.to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Channel width of the first level; doubles per level.
    pub base_width: usize,
    /// Number of 2× downsampling steps.
    pub depth: usize,
    pub reg_hidden: usize,
    /// Dictionary size; ignored when `use_shape_prior` is false.
    pub k: usize,
    /// Without it the network has no regression branch and no reference-mask channel.
    pub use_shape_prior: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            in_channels: 1,
            base_width: 8,
            depth: 3,
            reg_hidden: 64,
            k: 48,
            use_shape_prior: true,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SegNetError::InvalidArch(m));
        if self.depth == 0 || self.base_width == 0 || self.in_channels == 0 {
            return bad("depth, base width and input channels must be positive".into());
        }
        let f = 1usize << self.depth;
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return bad(format!(
                "resolution {}x{} must be a positive multiple of {f}",
                self.height, self.width
            ));
        }
        if self.use_shape_prior && (self.k == 0 || self.reg_hidden == 0) {
            return bad("shape prior needs k >= 1 and a non-empty regression layer".into());
        }
        Ok(())
    }

    fn level_width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamTag {
    Other,
    NormAffine,
}

impl ParamTag {
    fn byte(self) -> u8 {
        match self {
            ParamTag::Other => 0,
            ParamTag::NormAffine => 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    He(usize),
    Ones,
    Zeros,
}

#[derive(Debug, Clone)]
struct GroupSpec {
    name: String,
    tag: ParamTag,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvBn {
    kernel: usize,
    scale: usize,
    shift: usize,
    /// Index into the running statistics.
    stats: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ResBlock {
    a: ConvBn,
    b: ConvBn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct RegHead {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    encoder: Vec<ResBlock>,
    bottleneck: ResBlock,
    regression: Option<RegHead>,
    decoder: Vec<ConvBn>,
    last: ConvBn,
    head_w: usize,
    head_b: usize,
}

#[derive(Default)]
struct Planner {
    groups: Vec<GroupSpec>,
    norms: Vec<(String, usize)>,
}

impl Planner {
    fn group(&mut self, name: String, tag: ParamTag, shape: Vec<usize>, init: Init) -> usize {
        self.groups.push(GroupSpec { name, tag, shape, init });
        self.groups.len() - 1
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize) -> ConvBn {
        let kernel = self.group(format!("{name}.conv.weight"), ParamTag::Other, vec![cout, cin, 3, 3], Init::He(cin * 9));
        let scale = self.group(format!("{name}.bn.scale"), ParamTag::NormAffine, vec![cout], Init::Ones);
        let shift = self.group(format!("{name}.bn.shift"), ParamTag::NormAffine, vec![cout], Init::Zeros);
        self.norms.push((format!("{name}.bn"), cout));
        ConvBn {
            kernel,
            scale,
            shift,
            stats: self.norms.len() - 1,
        }
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize) -> ResBlock {
        ResBlock {
            a: self.conv_bn(&format!("{name}.a"), cin, cout),
            b: self.conv_bn(&format!("{name}.b"), cout, cout),
        }
    }
}

fn plan(cfg: &ArchConfig) -> (Vec<GroupSpec>, Vec<(String, usize)>, Layout) {
    let mut p = Planner::default();
    let mut cin = cfg.in_channels;
    let mut encoder = Vec::new();
    for l in 0..cfg.depth {
        encoder.push(p.res_block(&format!("enc{l}"), cin, cfg.level_width(l)));
        cin = cfg.level_width(l);
    }
    let wb = cfg.level_width(cfg.depth);
    let bottleneck = p.res_block("bottleneck", cin, wb);
    let regression = cfg.use_shape_prior.then(|| RegHead {
        w1: p.group("reg.fc1.weight".into(), ParamTag::Other, vec![cfg.reg_hidden, wb], Init::He(wb)),
        b1: p.group("reg.fc1.bias".into(), ParamTag::Other, vec![cfg.reg_hidden], Init::Zeros),
        w2: p.group("reg.fc2.weight".into(), ParamTag::Other, vec![cfg.k, cfg.reg_hidden], Init::He(cfg.reg_hidden)),
        b2: p.group("reg.fc2.bias".into(), ParamTag::Other, vec![cfg.k], Init::Zeros),
    });
    let mut decoder = vec![None; cfg.depth];
    let mut below = wb;
    for l in (0..cfg.depth).rev() {
        let w = cfg.level_width(l);
        decoder[l] = Some(p.conv_bn(&format!("dec{l}"), below + w, w));
        below = w;
    }
    let w0 = cfg.level_width(0);
    let last = p.conv_bn("last", w0 + usize::from(cfg.use_shape_prior), w0);
    let head_w = p.group("head.weight".into(), ParamTag::Other, vec![1, w0, 1, 1], Init::He(w0));
    let head_b = p.group("head.bias".into(), ParamTag::Other, vec![1], Init::Zeros);
    let layout = Layout {
        encoder,
        bottleneck,
        regression,
        decoder: decoder.into_iter().map(|d| d.expect("every level planned")).collect(),
        last,
        head_w,
        head_b,
    };
    (p.groups, p.norms, layout)
}

/// All learnable parameters plus batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct SegNetParams {
    arch: ArchConfig,
    specs: Vec<GroupSpec>,
    norm_names: Vec<String>,
    layout: Layout,
    values: Vec<Grid>,
    running: Vec<RunningStats>,
}

impl PartialEq for SegNetParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.values == other.values && self.running == other.running
    }
}

impl SegNetParams {
    /// Deterministic He-normal initialization; batch-norm scales start at 1 and shifts at 0.
    pub fn build(arch: &ArchConfig, dict: Option<&ShapeDictionary>, seed: u64) -> Result<Self> {
        arch.validate()?;
        if arch.use_shape_prior {
            check_dictionary(arch, dict)?;
        }
        let (specs, norms, layout) = plan(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = specs
            .iter()
            .map(|s| match s.init {
                Init::Ones => Grid::full(&s.shape, 1.0),
                Init::Zeros => Grid::zeros(&s.shape),
                Init::He(fan_in) => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    Grid::from_fn(&s.shape, |_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        std * z
                    })
                }
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            running: norms.iter().map(|(_, c)| RunningStats::new(*c)).collect(),
            norm_names: norms.into_iter().map(|(n, _)| n).collect(),
            specs,
            layout,
            values,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn group_count(&self) -> usize {
        self.values.len()
    }

    pub fn group_name(&self, i: usize) -> &str {
        &self.specs[i].name
    }

    pub fn group_tag(&self, i: usize) -> ParamTag {
        self.specs[i].tag
    }

    pub fn group(&self, i: usize) -> &Grid {
        &self.values[i]
    }

    pub fn group_mut(&mut self, i: usize) -> &mut Grid {
        &mut self.values[i]
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn parameter_count(&self) -> usize {
        self.values.iter().map(Grid::len).sum()
    }

    /// Group indices belonging to the regression branch.
    pub fn regression_groups(&self) -> Vec<usize> {
        self.layout
            .regression
            .map(|r| vec![r.w1, r.b1, r.w2, r.b2])
            .unwrap_or_default()
    }

    /// Registers every group on `tape`; groups whose tag fails `trainable` are constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamTag) -> bool) -> Result<BoundParams> {
        let vars = self
            .values
            .iter()
            .zip(&self.specs)
            .enumerate()
            .map(|(i, (v, s))| tape.param(ParamId(i), v.clone(), trainable(s.tag)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(BoundParams { vars })
    }

    /// SHA-256 over every `Other`-tagged group and the running statistics.
    pub fn frozen_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (s, v) in self.specs.iter().zip(&self.values) {
            if s.tag == ParamTag::Other {
                h.update(s.name.as_bytes());
                v.data().iter().for_each(|x| h.update(x.to_le_bytes()));
            }
        }
        for (n, r) in self.norm_names.iter().zip(&self.running) {
            h.update(n.as_bytes());
            r.mean.iter().chain(&r.var).for_each(|x| h.update(x.to_le_bytes()));
        }
        hex_string(&h.finalize())
    }

    /// SHA-256 over all groups and running statistics.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.frozen_checksum().as_bytes());
        for v in &self.values {
            v.data().iter().for_each(|x| h.update(x.to_le_bytes()));
        }
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn check_dictionary(arch: &ArchConfig, dict: Option<&ShapeDictionary>) -> Result<()> {
    let d = dict.ok_or(SegNetError::MissingDictionary)?;
    if (d.height(), d.width()) != (arch.height, arch.width) {
        return Err(SegNetError::ResolutionMismatch {
            expected: (arch.height, arch.width),
            got: (d.height(), d.width()),
        });
    }
    if d.k() != arch.k {
        return Err(SegNetError::AtomCountMismatch {
            expected: arch.k,
            got: d.k(),
        });
    }
    Ok(())
}

/// Parameter handles on one tape.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, group: usize) -> Var {
        self.vars[group]
    }
}

/// Where batch norm gets its statistics from.
pub enum NormStats<'a> {
    /// Batch statistics, folding them into the running estimates.
    Update {
        running: &'a mut [RunningStats],
        momentum: f64,
    },
    /// Frozen running statistics.
    Frozen(&'a [RunningStats]),
    /// Statistics of the current batch only.
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropoutSites {
    pub pre_bottleneck: bool,
    pub pre_last_conv: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Std of Gaussian noise added to the normalized input.
    pub noise_magnitude: f64,
    pub dropout_rate: f64,
    pub sites: DropoutSites,
    pub seed: u64,
}

impl PerturbationConfig {
    /// Noise 0.1 and dropout 0.5 at both sites.
    pub fn standard(seed: u64) -> Self {
        Self {
            noise_magnitude: 0.1,
            dropout_rate: 0.5,
            sites: DropoutSites {
                pre_bottleneck: true,
                pre_last_conv: true,
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_magnitude >= 0.0 && self.noise_magnitude.is_finite()) {
            return Err(SegNetError::InvalidPerturbation(format!(
                "noise magnitude {} must be non-negative",
                self.noise_magnitude
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(SegNetError::InvalidPerturbation(format!(
                "dropout rate {} must lie in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TapeOutput {
    /// `[N, 1, H, W]`
    pub logits: Var,
    /// `[N, K]`
    pub coeffs: Option<Var>,
    /// `[N, 1, H, W]`
    pub reference: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub seg_logits: Grid,
    pub coeffs: Option<Grid>,
    pub reference: Option<Grid>,
}

impl ForwardOutput {
    /// Coefficients of sample `n` of the batch.
    pub fn sample_coeffs(&self, n: usize) -> Option<ShapeCoefficients> {
        self.coeffs.as_ref().map(|c| {
            let k = c.shape()[1];
            c.data()[n * k..(n + 1) * k].to_vec().into()
        })
    }

    /// `H×W` probability map of sample `n`.
    pub fn probabilities(&self, n: usize) -> Grid {
        let (_, _, h, w) = self.seg_logits.dims4().expect("logits are 4-d");
        let m = h * w;
        Grid::new(
            vec![h, w],
            self.seg_logits.data()[n * m..(n + 1) * m].iter().map(|z| sigmoid(*z)).collect(),
        )
        .expect("size matches")
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Promotes `[H, W]` or `[N, H, W]` images to `[N, 1, H, W]`.
pub fn as_batch(x: &Grid) -> Result<Grid> {
    let shape = x.shape().to_vec();
    Ok(match shape.as_slice() {
        [h, w] => x.clone().reshape(&[1, 1, *h, *w])?,
        [n, h, w] => x.clone().reshape(&[*n, 1, *h, *w])?,
        _ => x.clone(),
    })
}

struct Pass<'t, 's, 'p> {
    tape: &'t mut Tape,
    bound: &'p BoundParams,
    stats: &'p mut NormStats<'s>,
}

impl Pass<'_, '_, '_> {
    fn conv_bn(&mut self, name: &str, cb: &ConvBn, x: Var, relu: bool) -> Result<Var> {
        let k = self.bound.var(cb.kernel);
        let h = self.tape.conv2d(x, k, None, 1, 1).map_err(at(name))?;
        let mode = match self.stats {
            NormStats::Update { running, momentum } => BnMode::Train {
                running: &mut running[cb.stats],
                momentum: *momentum,
            },
            NormStats::Frozen(running) => BnMode::Eval(&running[cb.stats]),
            NormStats::Batch => BnMode::BatchStats,
        };
        let (s, b) = (self.bound.var(cb.scale), self.bound.var(cb.shift));
        let h = self.tape.batchnorm2d(h, s, b, mode, BN_EPS).map_err(at(name))?;
        if relu {
            self.tape.relu(h).map_err(at(name))
        } else {
            Ok(h)
        }
    }

    fn res_block(&mut self, name: &str, rb: &ResBlock, x: Var) -> Result<Var> {
        let h = self.conv_bn(name, &rb.a, x, true)?;
        let out = self.conv_bn(name, &rb.b, h, false)?;
        let sum = self.tape.add(out, h).map_err(at(name))?;
        self.tape.relu(sum).map_err(at(name))
    }
}

impl SegNetParams {
    /// Records one forward pass of the batch `x` (`[N, C, H, W]`) on `tape`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        stats: &mut NormStats<'_>,
        dict: Option<&ShapeDictionary>,
        x: &Grid,
        perturb: Option<&PerturbationConfig>,
    ) -> Result<TapeOutput> {
        forward_impl(&self.arch, &self.layout, tape, bound, stats, dict, x, perturb)
    }

    /// Eval-mode forward with frozen running statistics.
    pub fn forward(
        &self,
        dict: Option<&ShapeDictionary>,
        x: &Grid,
        perturb: Option<&PerturbationConfig>,
    ) -> Result<ForwardOutput> {
        self.forward_with(dict, x, perturb, false)
    }

    /// Forward on a fresh tape; `batch_stats` normalizes with the statistics of `x` itself.
    pub fn forward_with(
        &self,
        dict: Option<&ShapeDictionary>,
        x: &Grid,
        perturb: Option<&PerturbationConfig>,
        batch_stats: bool,
    ) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false)?;
        let mut stats = if batch_stats {
            NormStats::Batch
        } else {
            NormStats::Frozen(&self.running)
        };
        let out = self.forward_tape(&mut tape, &bound, &mut stats, dict, x, perturb)?;
        let grab = |v: Var| tape.value(v).cloned();
        Ok(ForwardOutput {
            seg_logits: grab(out.logits)?,
            coeffs: out.coeffs.map(grab).transpose()?,
            reference: out.reference.map(grab).transpose()?,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn forward_impl(
    arch: &ArchConfig,
    layout: &Layout,
    tape: &mut Tape,
    bound: &BoundParams,
    stats: &mut NormStats<'_>,
    dict: Option<&ShapeDictionary>,
    x: &Grid,
    perturb: Option<&PerturbationConfig>,
) -> Result<TapeOutput> {
    let x = as_batch(x)?;
    let (n, c, h, w) = x.dims4()?;
    if (h, w) != (arch.height, arch.width) || c != arch.in_channels {
        return Err(SegNetError::ResolutionMismatch {
            expected: (arch.height, arch.width),
            got: (h, w),
        });
    }
    if arch.use_shape_prior {
        check_dictionary(arch, dict)?;
    }
    if let Some(p) = perturb {
        p.validate()?;
    }
    let mut input = x;
    if let Some(p) = perturb.filter(|p| p.noise_magnitude > 0.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(p.seed, 1));
        for v in input.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += p.noise_magnitude * z;
        }
    }
    let (rate, drop_seed, sites) = match perturb {
        Some(p) => (p.dropout_rate, p.seed, p.sites),
        None => (
            0.0,
            0,
            DropoutSites {
                pre_bottleneck: false,
                pre_last_conv: false,
            },
        ),
    };
    let mut pass = Pass { tape, bound, stats };
    let mut hv = pass.tape.input(input)?;
    let mut skips = Vec::with_capacity(arch.depth);
    for (l, block) in layout.encoder.iter().enumerate() {
        let name = format!("enc{l}");
        hv = pass.res_block(&name, block, hv)?;
        skips.push(hv);
        hv = pass.tape.avgpool2d(hv, 2).map_err(at(&name))?;
    }
    hv = pass
        .tape
        .dropout(hv, rate, mix_seed(drop_seed, 2), sites.pre_bottleneck)
        .map_err(at("pre_bottleneck_dropout"))?;
    hv = pass.res_block("bottleneck", &layout.bottleneck, hv)?;
    let mut coeffs = None;
    if let Some(r) = layout.regression {
        let g = pass.tape.global_avg_pool(hv).map_err(at("reg"))?;
        let f = pass.tape.dense(g, bound.var(r.w1), bound.var(r.b1)).map_err(at("reg.fc1"))?;
        let f = pass.tape.relu(f).map_err(at("reg.fc1"))?;
        coeffs = Some(pass.tape.dense(f, bound.var(r.w2), bound.var(r.b2)).map_err(at("reg.fc2"))?);
    }
    for l in (0..arch.depth).rev() {
        let name = format!("dec{l}");
        let up = pass.tape.upsample_nearest(hv, 2).map_err(at(&name))?;
        let cat = pass.tape.concat_channels(&[up, skips[l]]).map_err(at(&name))?;
        hv = pass.conv_bn(&name, &layout.decoder[l], cat, true)?;
    }
    let mut reference = None;
    if let (Some(cv), Some(d)) = (coeffs, dict) {
        let m = pass.tape.combine_atoms(cv, d.atoms().clone()).map_err(at("reference"))?;
        hv = pass.tape.concat_channels(&[hv, m]).map_err(at("reference"))?;
        reference = Some(m);
    }
    hv = pass.conv_bn("last", &layout.last, hv, true)?;
    hv = pass
        .tape
        .dropout(hv, rate, mix_seed(drop_seed, 3), sites.pre_last_conv)
        .map_err(at("pre_last_conv_dropout"))?;
    let logits = pass
        .tape
        .conv2d(hv, bound.var(layout.head_w), Some(bound.var(layout.head_b)), 1, 0)
        .map_err(at("head"))?;
    debug_assert_eq!(pass.tape.value(logits)?.shape(), &[n, 1, h, w]);
    Ok(TapeOutput {
        logits,
        coeffs,
        reference,
    })
}

fn check_target(y: &Grid) -> Result<()> {
    if y.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(SegNetError::TargetOutOfRange)
    }
}

/// Soft-Dice loss on sigmoid probabilities plus mean binary cross-entropy.
pub fn seg_loss_tape(tape: &mut Tape, logits: Var, y: &Grid) -> Result<Var> {
    check_target(y)?;
    let shape = tape.value(logits)?.shape().to_vec();
    let y = y.clone().reshape(&shape)?;
    let probs = tape.sigmoid(logits).map_err(at("seg_loss"))?;
    let dice = tape.soft_dice_loss(probs, &y, DICE_SMOOTH).map_err(at("seg_loss"))?;
    let bce = tape.bce_with_logits(logits, &y).map_err(at("seg_loss"))?;
    Ok(tape.add(dice, bce)?)
}

pub fn seg_loss(logits: &Grid, y: &Grid) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.input(logits.clone())?;
    let loss = seg_loss_tape(&mut tape, l, y)?;
    Ok(tape.value(loss)?.data()[0])
}

/// `1 − pred·target / max(‖pred‖‖target‖, 1e-8)`.
pub fn regress_loss(pred: &ShapeCoefficients, target: &ShapeCoefficients) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(DictError::LengthMismatch {
            expected: target.len(),
            got: pred.len(),
        }
        .into());
    }
    Ok(tasd_diffcore::cosine_distance(&pred.values, &target.values, COSINE_EPS))
}

/// Records `seg_loss + beta · regress_loss` for a forward pass already on `tape`.
pub fn objective_tape(
    tape: &mut Tape,
    out: &TapeOutput,
    y: &Grid,
    targets: Option<&Grid>,
    beta: f64,
) -> Result<Var> {
    let seg = seg_loss_tape(tape, out.logits, y)?;
    match (out.coeffs, targets) {
        (Some(c), Some(t)) => {
            let t = tape.input(t.clone())?;
            let reg = tape.cosine_distance(c, t, COSINE_EPS).map_err(at("regress_loss"))?;
            let reg = tape.scale(reg, beta)?;
            Ok(tape.add(seg, reg)?)
        }
        (Some(_), None) => Err(SegNetError::MissingTarget(0)),
        (None, _) => Ok(seg),
    }
}

fn stack_codes(codes: &[&ShapeCoefficients]) -> Result<Grid> {
    let k = codes.first().map_or(0, |c| c.len());
    let mut data = Vec::with_capacity(codes.len() * k);
    for c in codes {
        data.extend_from_slice(&c.values);
    }
    Ok(Grid::new(vec![codes.len(), k], data)?)
}

/// Training objective on an unperturbed forward pass with batch statistics (running
/// estimates are left untouched). Returns the loss and the gradient of every group.
pub fn train_objective_grad(
    params: &SegNetParams,
    dict: Option<&ShapeDictionary>,
    x: &Grid,
    y: &Grid,
    targets: &[ShapeCoefficients],
    beta: f64,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| true)?;
    let out = params.forward_tape(&mut tape, &bound, &mut NormStats::Batch, dict, x, None)?;
    let t = if params.arch.use_shape_prior {
        if targets.is_empty() {
            return Err(SegNetError::MissingTarget(0));
        }
        Some(stack_codes(&targets.iter().collect::<Vec<_>>())?)
    } else {
        None
    };
    let loss = objective_tape(&mut tape, &out, y, t.as_ref(), beta)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss)?.data()[0], grads))
}

pub fn train_objective(
    params: &SegNetParams,
    dict: Option<&ShapeDictionary>,
    x: &Grid,
    y: &Grid,
    targets: &[ShapeCoefficients],
    beta: f64,
) -> Result<f64> {
    train_objective_grad(params, dict, x, y, targets, beta).map(|r| r.0)
}

/// One of the eight symmetries of the square (`t & 3` quarter turns, then a
/// horizontal flip if `t & 4`). Non-square grids only use the flip.
pub fn dihedral(g: &Grid, t: u8) -> Grid {
    let (h, w) = (g.shape()[0], g.shape()[1]);
    let turns = if h == w { t & 3 } else { 0 };
    let flip = t & 4 != 0;
    Grid::from_fn(&[h, w], |i| {
        let (mut y, mut x) = (i / w, i % w);
        if flip {
            x = w - 1 - x;
        }
        for _ in 0..turns {
            // Output (y, x) of a quarter turn reads input (n-1-x, y).
            let (ny, nx) = (h - 1 - x, y);
            y = ny;
            x = nx;
        }
        g.data()[y * w + x]
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    /// `H×W`, already normalized.
    pub image: Grid,
    /// `H×W`, values in `[0, 1]`.
    pub mask: Grid,
    pub code: Option<ShapeCoefficients>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Weight of the regression loss.
    pub beta: f64,
    pub bn_momentum: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 5,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            beta: 5.0,
            bn_momentum: 0.1,
            augment: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &SegNetParams) -> Self {
        let zeros = || params.values.iter().map(|g| vec![0.0; g.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut SegNetParams, grads: &Gradients, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.adam_beta1.powi(self.t);
        let c2 = 1.0 - cfg.adam_beta2.powi(self.t);
        for (ParamId(i), g) in grads.iter() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in params.values[i].data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = cfg.adam_beta1 * m[j] + (1.0 - cfg.adam_beta1) * gj;
                v[j] = cfg.adam_beta2 * v[j] + (1.0 - cfg.adam_beta2) * gj * gj;
                *p -= cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Source-domain training with Adam on every parameter group. Dropout sites are
/// inactive; augmentation draws one of the eight square symmetries per example and
/// re-codes the transformed mask (cached) for the regression target.
pub fn train(
    params: &mut SegNetParams,
    dict: Option<&ShapeDictionary>,
    data: &[TrainingExample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    let prior = params.arch.use_shape_prior;
    if prior {
        check_dictionary(&params.arch, dict)?;
        if let Some(i) = data.iter().position(|e| e.code.is_none()) {
            return Err(SegNetError::MissingTarget(i));
        }
    }
    for e in data {
        check_target(&e.mask)?;
    }
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        steps: 0,
    };
    if data.is_empty() || cfg.epochs == 0 {
        return Ok(report);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(params);
    let mut codes: HashMap<(usize, u8), ShapeCoefficients> = HashMap::new();
    let (h, w) = (params.arch.height, params.arch.width);
    let bs = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(bs) {
            let mut xs = Vec::with_capacity(chunk.len() * h * w);
            let mut ys = Vec::with_capacity(chunk.len() * h * w);
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let t: u8 = if cfg.augment { rng.random_range(0..8) } else { 0 };
                let ex = &data[i];
                let (img, mask) = if t == 0 {
                    (ex.image.clone(), ex.mask.clone())
                } else {
                    (dihedral(&ex.image, t), dihedral(&ex.mask, t))
                };
                xs.extend_from_slice(img.data());
                ys.extend_from_slice(mask.data());
                if let (true, Some(d)) = (prior, dict) {
                    let code = match codes.get(&(i, t)) {
                        Some(c) => c.clone(),
                        None => {
                            let c = if t == 0 {
                                ex.code.clone().expect("checked above")
                            } else {
                                sparse_code(d, &mask, d.lambda())?
                            };
                            codes.insert((i, t), c.clone());
                            c
                        }
                    };
                    targets.push(code);
                }
            }
            let n = chunk.len();
            let x = Grid::new(vec![n, 1, h, w], xs)?;
            let y = Grid::new(vec![n, 1, h, w], ys)?;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, |_| true)?;
            let out = {
                let mut stats = NormStats::Update {
                    running: &mut params.running,
                    momentum: cfg.bn_momentum,
                };
                forward_impl(&params.arch, &params.layout, &mut tape, &bound, &mut stats, dict, &x, None)
            };
            let out = match out {
                Ok(o) => o,
                Err(SegNetError::Layer {
                    source: DiffError::NonFinite { .. },
                    ..
                }) => return Err(SegNetError::Diverged { epoch }),
                Err(e) => return Err(e),
            };
            let t = if prior {
                Some(stack_codes(&targets.iter().collect::<Vec<_>>())?)
            } else {
                None
            };
            let loss = objective_tape(&mut tape, &out, &y, t.as_ref(), cfg.beta)?;
            let value = tape.value(loss)?.data()[0];
            if !value.is_finite() {
                return Err(SegNetError::Diverged { epoch });
            }
            let grads = tape.backward(loss)?;
            adam.step(params, &grads, cfg);
            report.steps += 1;
            total += value * n as f64;
            count += n;
        }
        let mean = total / count as f64;
        on_epoch(epoch, mean);
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SGNT";
const CHECKPOINT_VERSION: u8 = 1;

impl SegNetParams {
    /// Little-endian checkpoint: magic, version, architecture block, then every parameter
    /// group followed by the running statistics (stored as `Other`-tagged groups).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        let a = &self.arch;
        for v in [a.height, a.width, a.in_channels, a.base_width, a.depth, a.reg_hidden, a.k] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(u8::from(a.use_shape_prior));
        let mut groups: Vec<(String, ParamTag, Vec<usize>, Vec<f64>)> = self
            .specs
            .iter()
            .zip(&self.values)
            .map(|(s, v)| (s.name.clone(), s.tag, v.shape().to_vec(), v.data().to_vec()))
            .collect();
        for (n, r) in self.norm_names.iter().zip(&self.running) {
            groups.push((format!("{n}.running_mean"), ParamTag::Other, vec![r.mean.len()], r.mean.clone()));
            groups.push((format!("{n}.running_var"), ParamTag::Other, vec![r.var.len()], r.var.clone()));
        }
        out.extend_from_slice(&(groups.len() as u32).to_le_bytes());
        for (name, tag, shape, data) in groups {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(tag.byte());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in &shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(SegNetError::Checkpoint("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(SegNetError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let arch = ArchConfig {
            height: dims[0],
            width: dims[1],
            in_channels: dims[2],
            base_width: dims[3],
            depth: dims[4],
            reg_hidden: dims[5],
            k: dims[6],
            use_shape_prior: r.take(1)?[0] != 0,
        };
        arch.validate()?;
        let (specs, norms, layout) = plan(&arch);
        let count = r.u32()? as usize;
        if count != specs.len() + 2 * norms.len() {
            return Err(SegNetError::Checkpoint(format!(
                "{count} groups, architecture needs {}",
                specs.len() + 2 * norms.len()
            )));
        }
        let mut read_group = |name: &str, tag: ParamTag, shape: &[usize]| -> Result<Vec<f64>> {
            let len = r.u32()? as usize;
            let got = r.take(len)?;
            if got != name.as_bytes() {
                return Err(SegNetError::Checkpoint(format!(
                    "expected group {name}, found {}",
                    String::from_utf8_lossy(got)
                )));
            }
            if r.take(1)?[0] != tag.byte() {
                return Err(SegNetError::Checkpoint(format!("wrong tag for {name}")));
            }
            let rank = r.u32()? as usize;
            let mut got_shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                got_shape.push(r.u32()? as usize);
            }
            if got_shape != shape {
                return Err(SegNetError::Checkpoint(format!("{name}: shape {got_shape:?}, expected {shape:?}")));
            }
            let n: usize = shape.iter().product();
            Ok(r.take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let mut values = Vec::with_capacity(specs.len());
        for s in &specs {
            values.push(Grid::new(s.shape.clone(), read_group(&s.name, s.tag, &s.shape)?)?);
        }
        let mut running = Vec::with_capacity(norms.len());
        for (n, c) in &norms {
            let mean = read_group(&format!("{n}.running_mean"), ParamTag::Other, &[*c])?;
            let var = read_group(&format!("{n}.running_var"), ParamTag::Other, &[*c])?;
            running.push(RunningStats { mean, var });
        }
        if r.pos != bytes.len() {
            return Err(SegNetError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            arch,
            specs,
            norm_names: norms.into_iter().map(|(n, _)| n).collect(),
            layout,
            values,
            running,
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

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(SegNetError::Checkpoint(format!(
                "truncated: needed {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
