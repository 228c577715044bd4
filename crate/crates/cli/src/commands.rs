//! The pipeline stages. Each reads its upstream artifacts from a [`Layout`], writes its own
//! directory, and records the resolved config plus content hashes alongside the outputs.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::PathBuf;
use tasd_core::metrics::{aggregate, dice, DomainSummary, MetricReport, SampleMetrics};
use tasd_core::mix_seed;
use tasd_core::segnet::{train, SegNetParams, TrainReport, TrainingExample};
use tasd_core::shape_dictionary::{learn_dictionary, reference_mask, ShapeCoefficients, ShapeDictionary};
use tasd_core::synthdata::{make_benchmark, normalize, Benchmark, Sample};
use tasd_core::tta::{online_inference, AblationMode, AdaptationState, StreamSample};

use crate::artifacts::*;
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub train: usize,
    pub val: usize,
    pub unseen: Vec<(String, usize)>,
}

pub fn synth_data(layout: &Layout, cfg: &ExperimentConfig) -> Result<SynthSummary> {
    let bench = make_benchmark(&cfg.benchmark, cfg.seeds().benchmark)?;
    let dir = layout.benchmark();
    // Only ever clear a directory that already holds a benchmark.
    if dir.join("manifest.json").exists() {
        fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    create_dir(&dir)?;
    bench.save(&dir)?;
    record_run(layout, &dir, "synth-data", cfg, &[], std::slice::from_ref(&dir))?;
    Ok(SynthSummary {
        train: bench.train.len(),
        val: bench.val.len(),
        unseen: bench.unseen.iter().map(|(n, s)| (n.clone(), s.len())).collect(),
    })
}

/// Loads the benchmark and checks it was generated from the same settings.
pub fn load_benchmark(layout: &Layout, cfg: &ExperimentConfig) -> Result<Benchmark> {
    require(&layout.manifest(), "benchmark manifest (run synth-data first)")?;
    let bench = Benchmark::load(&layout.benchmark())?;
    if bench.manifest.config != cfg.benchmark || bench.manifest.master_seed != cfg.seeds().benchmark {
        return Err(CliError::Config(format!(
            "benchmark at {} was generated with different settings; rerun synth-data",
            layout.benchmark().display()
        )));
    }
    Ok(bench)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub k: usize,
    pub lambda: f64,
    pub masks: usize,
    pub epoch_objectives: Vec<f64>,
    /// Dice of the 0.5-thresholded reference mask against each training mask.
    pub dice_mean: f64,
    pub dice_min: f64,
    pub mean_nonzeros: f64,
}

pub fn learn_dict(layout: &Layout, cfg: &ExperimentConfig) -> Result<ReconstructionReport> {
    let bench = load_benchmark(layout, cfg)?;
    let masks: Vec<_> = bench.train.iter().map(|s| s.mask.clone()).collect();
    let learned = learn_dictionary(&masks, &cfg.dict_learn())?;
    let dict = &learned.dictionary;
    let mut dices = Vec::with_capacity(masks.len());
    for (mask, code) in masks.iter().zip(&learned.codes) {
        let recon = reference_mask(dict, code)?.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        dices.push(dice(&recon, mask)?);
    }
    let report = ReconstructionReport {
        k: dict.k(),
        lambda: dict.lambda(),
        masks: masks.len(),
        epoch_objectives: learned.epoch_objectives.clone(),
        dice_mean: dices.iter().sum::<f64>() / dices.len() as f64,
        dice_min: dices.iter().copied().fold(f64::INFINITY, f64::min),
        mean_nonzeros: learned.codes.iter().map(|c| c.nonzeros() as f64).sum::<f64>() / masks.len() as f64,
    };
    let dir = layout.dictionary_dir();
    create_dir(&dir)?;
    dict.save(layout.dictionary()).map_err(CliError::from)?;
    save_codes(&layout.codes(), &learned.codes)?;
    let report_path = dir.join("reconstruction.json");
    write_json(&report_path, &report)?;
    record_run(
        layout,
        &dir,
        "learn-dict",
        cfg,
        &[layout.benchmark()],
        &[layout.dictionary(), layout.codes(), report_path],
    )?;
    Ok(report)
}

fn load_dictionary(layout: &Layout, cfg: &ExperimentConfig) -> Result<Option<ShapeDictionary>> {
    if !cfg.model.use_shape_prior {
        return Ok(None);
    }
    require(&layout.dictionary(), "shape dictionary (run learn-dict first)")?;
    Ok(Some(ShapeDictionary::load(layout.dictionary())?))
}

fn training_examples(samples: &[Sample], codes: Option<&[ShapeCoefficients]>) -> Vec<TrainingExample> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| TrainingExample {
            image: normalize(&s.image),
            mask: s.mask.clone(),
            code: codes.map(|c| c[i].clone()),
        })
        .collect()
}

pub fn train_model(layout: &Layout, cfg: &ExperimentConfig, on_epoch: impl FnMut(usize, f64)) -> Result<TrainReport> {
    let bench = load_benchmark(layout, cfg)?;
    let dict = load_dictionary(layout, cfg)?;
    let mut inputs = vec![layout.benchmark()];
    let codes = if dict.is_some() {
        require(&layout.codes(), "target codes (run learn-dict first)")?;
        let codes = load_codes(&layout.codes())?;
        if codes.len() != bench.train.len() {
            return Err(CliError::Config(format!(
                "{} holds {} codes for {} training samples; rerun learn-dict",
                layout.codes().display(),
                codes.len(),
                bench.train.len()
            )));
        }
        inputs.extend([layout.dictionary(), layout.codes()]);
        Some(codes)
    } else {
        None
    };
    let data = training_examples(&bench.train, codes.as_deref());
    let mut params = SegNetParams::build(&cfg.arch(), dict.as_ref(), cfg.seeds().init)?;
    let report = train(&mut params, dict.as_ref(), &data, &cfg.train_config(), on_epoch)?;
    let dir = layout.model_dir();
    create_dir(&dir)?;
    params.save(layout.checkpoint())?;
    let curve = dir.join("curve.csv");
    let mut text = String::from("epoch,loss\n");
    for (e, l) in report.epoch_losses.iter().enumerate() {
        text.push_str(&format!("{e},{l:.10}\n"));
    }
    write_file(&curve, text)?;
    record_run(layout, &dir, "train", cfg, &inputs, &[layout.checkpoint(), curve])?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    /// Unseen domains, adapted online per domain starting from the checkpoint.
    pub report: MetricReport,
    /// Source validation split without adaptation.
    pub source_val: DomainSummary,
    pub steps_taken: usize,
    pub skipped: usize,
    pub dir: PathBuf,
}

fn stream(samples: &[Sample]) -> Vec<StreamSample> {
    samples
        .iter()
        .map(|s| StreamSample {
            id: s.id.clone(),
            image: normalize(&s.image),
            mask: Some(s.mask.clone()),
        })
        .collect()
}

pub fn evaluate(layout: &Layout, cfg: &ExperimentConfig, mode: AblationMode) -> Result<EvalOutcome> {
    require(&layout.checkpoint(), "model checkpoint (run train first)")?;
    let bench = load_benchmark(layout, cfg)?;
    let params = SegNetParams::load(layout.checkpoint())?;
    let mut cfg = cfg.clone();
    cfg.model.use_shape_prior = params.arch().use_shape_prior;
    let dict = load_dictionary(layout, &cfg)?;
    let mut inputs = vec![layout.benchmark(), layout.checkpoint()];
    if dict.is_some() {
        inputs.push(layout.dictionary());
    }

    let mut val_state = AdaptationState::new(params.clone(), 0.0);
    let val_cfg = cfg.tta_config(AblationMode::None, 0);
    let val = online_inference(&mut val_state, dict.as_ref(), &stream(&bench.val), &val_cfg, None)?;
    let source_val = aggregate(vec![(bench.manifest.config.source.name.clone(), val.metrics)])?.average;

    let seeds = cfg.seeds();
    let mut log = Vec::new();
    let mut per_domain: Vec<(String, Vec<SampleMetrics>)> = Vec::new();
    let (mut steps_taken, mut skipped) = (0, 0);
    for (i, (name, samples)) in bench.unseen.iter().enumerate() {
        let mut state = AdaptationState::new(params.clone(), cfg.tta.step_size);
        let tta = cfg.tta_config(mode, mix_seed(seeds.tta, i as u64));
        let out = online_inference(&mut state, dict.as_ref(), &stream(samples), &tta, Some(&mut log))?;
        steps_taken += state.steps_taken;
        skipped += state.skipped;
        per_domain.push((name.clone(), out.metrics));
    }
    let report = aggregate(per_domain)?;

    let dir = layout.eval_dir(mode);
    create_dir(&dir)?;
    let report_path = dir.join("report.json");
    let csv_path = dir.join("summary.csv");
    let val_path = dir.join("source_val.json");
    write_json(&report_path, &report)?;
    write_file(&csv_path, summary_csv(&report))?;
    write_json(&val_path, &source_val)?;
    // Per-sample timings make the log nondeterministic, so it is not hashed.
    write_file(&dir.join("log.jsonl"), &log)?;
    record_run(layout, &dir, &format!("evaluate --tta={}", mode_name(mode)), &cfg, &inputs, &[report_path, csv_path, val_path])?;
    Ok(EvalOutcome {
        report,
        source_val,
        steps_taken,
        skipped,
        dir,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    pub recon_dice: f64,
    pub source_val_dice: f64,
    pub dice_no_tta: f64,
    pub dice_tta: f64,
}

pub const ABLATION_HEADER: &str = "k,recon_dice,source_val_dice,dice_no_tta,dice_tta";

/// Learn, train and evaluate once per K on the shared benchmark; one row per K.
pub fn ablate_k(
    layout: &Layout,
    cfg: &ExperimentConfig,
    ks: &[usize],
    mut on_epoch: impl FnMut(usize, usize, f64),
) -> Result<Vec<AblationRow>> {
    if ks.is_empty() {
        return Err(CliError::Config("ablate-k needs at least one K".into()));
    }
    require(&layout.manifest(), "benchmark manifest (run synth-data first)")?;
    let mut rows = Vec::with_capacity(ks.len());
    let mode = match cfg.tta.mode {
        AblationMode::None => AblationMode::Dual,
        m => m,
    };
    for &k in ks {
        let mut sub_cfg = cfg.clone();
        sub_cfg.dict.k = k;
        sub_cfg.model.use_shape_prior = true;
        sub_cfg.validate()?;
        let sub = layout.with_benchmark_of(layout.ablation_dir().join(format!("k{k}")));
        let recon = learn_dict(&sub, &sub_cfg)?;
        train_model(&sub, &sub_cfg, |e, l| on_epoch(k, e, l))?;
        let plain = evaluate(&sub, &sub_cfg, AblationMode::None)?;
        let adapted = evaluate(&sub, &sub_cfg, mode)?;
        rows.push(AblationRow {
            k,
            recon_dice: recon.dice_mean,
            source_val_dice: plain.source_val.dice_mean,
            dice_no_tta: plain.report.average.dice_mean,
            dice_tta: adapted.report.average.dice_mean,
        });
    }
    let dir = layout.ablation_dir();
    create_dir(&dir)?;
    let mut text = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        text.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.k, r.recon_dice, r.source_val_dice, r.dice_no_tta, r.dice_tta
        ));
    }
    let table = dir.join("table.csv");
    write_file(&table, text)?;
    record_run(layout, &dir, "ablate-k", cfg, &[layout.benchmark()], &[table])?;
    Ok(rows)
}
