//! Online test-time adaptation of batch-norm affine parameters.
//!
//! Each test sample is seen under two random perturbations (input noise plus
//! dropout); the disagreement between the two segmentation probability maps and
//! between the two coefficient vectors is minimized with one plain gradient step.
//! Adapted parameters carry over to the next sample.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tasd_diffcore::{DiffError, Gradients, Grid, ParamId, Tape};
use thiserror::Error;

use crate::metrics::{MetricError, SampleMetrics};
use crate::mix_seed;
use crate::segnet::{NormStats, ParamTag, PerturbationConfig, SegNetError, SegNetParams, COSINE_EPS};
use crate::shape_dictionary::ShapeDictionary;

#[derive(Debug, Error)]
pub enum TtaError {
    #[error(transparent)]
    Net(#[from] SegNetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("the two perturbations share seed {0}; the consistency loss would vanish identically")]
    IdenticalSeeds(u64),
    #[error("mode {0:?} needs the coefficient branch, which this network lacks")]
    NoShapeBranch(AblationMode),
    #[error("frozen parameters changed during adaptation")]
    FrozenParamsChanged,
    #[error("writing adaptation log: {0}")]
    Log(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TtaError>;

/// Which consistency terms drive adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Dual,
    SegOnly,
    CoefOnly,
    None,
}

impl AblationMode {
    fn uses_seg(self) -> bool {
        matches!(self, AblationMode::Dual | AblationMode::SegOnly)
    }

    fn uses_coef(self) -> bool {
        matches!(self, AblationMode::Dual | AblationMode::CoefOnly)
    }
}

impl std::str::FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dual" => Ok(Self::Dual),
            "seg_only" => Ok(Self::SegOnly),
            "coef_only" => Ok(Self::CoefOnly),
            "none" => Ok(Self::None),
            other => Err(format!("unknown adaptation mode {other:?} (dual, seg_only, coef_only, none)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtaConfig {
    pub mode: AblationMode,
    pub step_size: f64,
    pub noise_magnitude: f64,
    pub dropout_rate: f64,
    /// Perturbation seeds are derived from this per sample (or once, see `resample_seeds`).
    pub master_seed: u64,
    pub resample_seeds: bool,
    /// Normalize with the statistics of the test sample instead of the frozen running estimates.
    pub sample_statistics: bool,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            mode: AblationMode::Dual,
            step_size: 1e-3,
            noise_magnitude: 0.1,
            dropout_rate: 0.5,
            master_seed: 0,
            resample_seeds: true,
            sample_statistics: false,
        }
    }
}

impl TtaConfig {
    fn perturbation(&self, seed: u64) -> PerturbationConfig {
        PerturbationConfig {
            noise_magnitude: self.noise_magnitude,
            dropout_rate: self.dropout_rate,
            ..PerturbationConfig::standard(seed)
        }
    }

    /// Seed pair for the `index`-th sample of a stream.
    pub fn seeds(&self, index: usize) -> (u64, u64) {
        let base = if self.resample_seeds { index as u64 } else { 0 };
        let a = mix_seed(self.master_seed, 2 * base);
        let mut b = mix_seed(self.master_seed, 2 * base + 1);
        if a == b {
            b = b.wrapping_add(1);
        }
        (a, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyLoss {
    pub total: f64,
    pub seg_term: f64,
    pub coef_term: f64,
}

/// Consistency loss under two perturbations (both forwards on one tape) and its
/// gradient with respect to the batch-norm affine groups. Terms excluded by `mode`
/// are reported but do not enter `total`.
pub fn dual_consistency_loss(
    params: &SegNetParams,
    dict: Option<&ShapeDictionary>,
    x: &Grid,
    perturb_a: &PerturbationConfig,
    perturb_b: &PerturbationConfig,
    mode: AblationMode,
    sample_statistics: bool,
) -> Result<(ConsistencyLoss, Gradients)> {
    if perturb_a.seed == perturb_b.seed {
        return Err(TtaError::IdenticalSeeds(perturb_a.seed));
    }
    let has_branch = params.arch().use_shape_prior;
    if mode.uses_coef() && !has_branch {
        return Err(TtaError::NoShapeBranch(mode));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |t| t == ParamTag::NormAffine)?;
    let running = params.running_stats();
    let stats = || {
        if sample_statistics {
            NormStats::Batch
        } else {
            NormStats::Frozen(running)
        }
    };
    let a = params.forward_tape(&mut tape, &bound, &mut stats(), dict, x, Some(perturb_a))?;
    let b = params.forward_tape(&mut tape, &bound, &mut stats(), dict, x, Some(perturb_b))?;
    let pa = tape.sigmoid(a.logits)?;
    let pb = tape.sigmoid(b.logits)?;
    let seg = tape.mean_squared_diff(pa, pb)?;
    let coef = match (a.coeffs, b.coeffs) {
        (Some(ca), Some(cb)) => Some(tape.cosine_distance(cb, ca, COSINE_EPS)?),
        _ => None,
    };
    let total = match (mode.uses_seg(), mode.uses_coef(), coef) {
        (true, true, Some(c)) => tape.add(seg, c)?,
        (true, _, _) => seg,
        (false, true, Some(c)) => c,
        _ => tape.scale(seg, 0.0)?,
    };
    let grads = tape.backward(total)?;
    let value = |v| -> Result<f64> { Ok(tape.value(v)?.data()[0]) };
    Ok((
        ConsistencyLoss {
            total: value(total)?,
            seg_term: value(seg)?,
            coef_term: coef.map(value).transpose()?.unwrap_or(0.0),
        },
        grads,
    ))
}

/// Parameters being adapted plus bookkeeping across a stream.
#[derive(Debug, Clone)]
pub struct AdaptationState {
    params: SegNetParams,
    pub step_size: f64,
    pub samples_processed: usize,
    pub steps_taken: usize,
    pub skipped: usize,
    frozen_checksum: String,
}

impl AdaptationState {
    pub fn new(params: SegNetParams, step_size: f64) -> Self {
        let frozen_checksum = params.frozen_checksum();
        Self {
            params,
            step_size,
            samples_processed: 0,
            steps_taken: 0,
            skipped: 0,
            frozen_checksum,
        }
    }

    pub fn params(&self) -> &SegNetParams {
        &self.params
    }

    pub fn into_params(self) -> SegNetParams {
        self.params
    }

    /// Checksum of the non-adapted groups taken when the state was created.
    pub fn initial_frozen_checksum(&self) -> &str {
        &self.frozen_checksum
    }

    pub fn verify_frozen(&self) -> Result<()> {
        if self.params.frozen_checksum() == self.frozen_checksum {
            Ok(())
        } else {
            Err(TtaError::FrozenParamsChanged)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub loss: Option<ConsistencyLoss>,
    /// Set when a non-finite loss or gradient made the step a no-op.
    pub skipped: bool,
}

/// One gradient-descent step on the batch-norm affine groups (none in `AblationMode::None`).
pub fn adapt_step(
    state: &mut AdaptationState,
    dict: Option<&ShapeDictionary>,
    x: &Grid,
    seeds: (u64, u64),
    cfg: &TtaConfig,
) -> Result<StepOutcome> {
    state.samples_processed += 1;
    if cfg.mode == AblationMode::None {
        return Ok(StepOutcome {
            loss: None,
            skipped: false,
        });
    }
    let result = dual_consistency_loss(
        &state.params,
        dict,
        x,
        &cfg.perturbation(seeds.0),
        &cfg.perturbation(seeds.1),
        cfg.mode,
        cfg.sample_statistics,
    );
    let (loss, grads) = match result {
        Ok(r) => r,
        Err(TtaError::Net(SegNetError::Layer {
            source: DiffError::NonFinite { .. },
            ..
        }))
        | Err(TtaError::Diff(DiffError::NonFinite { .. })) => {
            state.skipped += 1;
            return Ok(StepOutcome {
                loss: None,
                skipped: true,
            });
        }
        Err(e) => return Err(e),
    };
    let finite = loss.total.is_finite() && grads.iter().all(|(_, g)| g.is_finite());
    if !finite {
        state.skipped += 1;
        return Ok(StepOutcome {
            loss: Some(loss),
            skipped: true,
        });
    }
    for (ParamId(i), g) in grads.iter() {
        if state.params.group_tag(i) != ParamTag::NormAffine {
            continue;
        }
        let group = state.params.group_mut(i);
        for (p, d) in group.data_mut().iter_mut().zip(g.data()) {
            *p -= state.step_size * d;
        }
    }
    state.steps_taken += 1;
    Ok(StepOutcome {
        loss: Some(loss),
        skipped: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSample {
    pub id: String,
    /// `H×W`, normalized.
    pub image: Grid,
    /// Ground truth, when available, for per-sample metrics.
    pub mask: Option<Grid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub id: String,
    pub loss: Option<f64>,
    pub seg_term: Option<f64>,
    pub coef_term: Option<f64>,
    pub skipped: bool,
    pub dice: Option<f64>,
    pub hd: Option<f64>,
    pub micros: u128,
}

#[derive(Debug, Clone)]
pub struct OnlineResult {
    /// Binary `H×W` predictions, in stream order.
    pub predictions: Vec<Grid>,
    pub metrics: Vec<SampleMetrics>,
    pub log: Vec<LogRecord>,
}

/// Adapt-then-predict over a stream, in order, carrying parameters across samples.
/// When `log` is given, one JSON line per sample is written to it.
pub fn online_inference(
    state: &mut AdaptationState,
    dict: Option<&ShapeDictionary>,
    stream: &[StreamSample],
    cfg: &TtaConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<OnlineResult> {
    let mut result = OnlineResult {
        predictions: Vec::with_capacity(stream.len()),
        metrics: Vec::new(),
        log: Vec::with_capacity(stream.len()),
    };
    for (i, sample) in stream.iter().enumerate() {
        let start = Instant::now();
        let outcome = adapt_step(state, dict, &sample.image, cfg.seeds(i), cfg)?;
        let out = state
            .params
            .forward_with(dict, &sample.image, None, cfg.sample_statistics)?;
        let pred = out.probabilities(0).map(|p| if p > 0.5 { 1.0 } else { 0.0 });
        let micros = start.elapsed().as_micros();
        let metric = sample
            .mask
            .as_ref()
            .map(|gt| SampleMetrics::compute(sample.id.clone(), &pred, gt))
            .transpose()?;
        let record = LogRecord {
            id: sample.id.clone(),
            loss: outcome.loss.map(|l| l.total),
            seg_term: outcome.loss.map(|l| l.seg_term),
            coef_term: outcome.loss.map(|l| l.coef_term),
            skipped: outcome.skipped,
            dice: metric.as_ref().map(|m| m.dice),
            hd: metric.as_ref().and_then(|m| m.hd),
            micros,
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        result.log.push(record);
        if let Some(m) = metric {
            result.metrics.push(m);
        }
        result.predictions.push(pred);
    }
    state.verify_frozen()?;
    Ok(result)
}
