use std::collections::HashSet;

use tasd_core::synthdata::*;
use tasd_diffcore::Grid;

#[test]
fn shapes_are_connected_and_area_bounded() {
    let cfg = ShapeConfig::default();
    let total = (cfg.height * cfg.width) as f64;
    for seed in 0..1000 {
        let m = generate_shape(seed, &cfg);
        let area = m.sum() / total;
        assert!((0.03..=0.40).contains(&area), "seed {seed}: area {area}");
        assert_eq!(count_components(&m), 1, "seed {seed}");
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn shapes_are_deterministic() {
    let cfg = ShapeConfig::default();
    assert_eq!(generate_shape(77, &cfg), generate_shape(77, &cfg));
    assert_ne!(generate_shape(77, &cfg), generate_shape(78, &cfg));
}

fn plain_domain(appearance: Vec<Appearance>) -> DomainSpec {
    DomainSpec {
        name: "plain".into(),
        geometry_seeds: SeedRange { start: 0, count: 1 },
        foreground_level: 0.6,
        background_level: 0.4,
        texture_std: 0.02,
        appearance,
    }
}

#[test]
fn identity_chain_equals_base_rendering() {
    let mask = generate_shape(1, &ShapeConfig::default());
    let d = plain_domain(vec![]);
    let s = render(&mask, &d, 9, "x");
    let base = render_base(&mask, &d, 9);
    assert_eq!(s.image, base.map(|v| v.clamp(0.0, 1.0)));
    assert_eq!(s.image, base);
}

#[test]
fn render_never_touches_the_mask() {
    let mask = generate_shape(2, &ShapeConfig::default());
    let cfg = BenchmarkConfig::default();
    let src = render(&mask, &cfg.source, 3, "a");
    for d in &cfg.unseen {
        let s = render(&mask, d, 3, "b");
        assert_eq!(s.mask, mask);
        assert_ne!(s.image, src.image);
    }
    assert_eq!(src.mask, mask);
}

#[test]
fn noise_level_is_as_configured() {
    let cfg = ShapeConfig::default();
    let clean = plain_domain(vec![]);
    let noisy = plain_domain(vec![Appearance::GaussianNoise { std: 0.2 }]);
    let mut diffs = Vec::new();
    for seed in 0..20 {
        // Mid-range levels keep clamping at 0 and 1 rare.
        let mask = generate_shape(seed, &cfg);
        let a = render(&mask, &clean, seed, "c").image;
        let b = render(&mask, &noisy, seed, "n").image;
        diffs.extend(b.data().iter().zip(a.data()).map(|(x, y)| x - y));
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((std - 0.2).abs() <= 0.02, "std {std}");
}

#[test]
fn normalization_gives_zero_mean_unit_variance() {
    let mask = generate_shape(4, &ShapeConfig::default());
    let img = normalize(&render(&mask, &BenchmarkConfig::default().source, 1, "a").image);
    let n = img.len() as f64;
    let mean = img.sum() / n;
    let var = img.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-12);
    assert_eq!(normalize(&Grid::full(&[3, 3], 0.5)), Grid::zeros(&[3, 3]));
}

fn small_config() -> BenchmarkConfig {
    let mut cfg = BenchmarkConfig::default();
    cfg.shape.height = 24;
    cfg.shape.width = 24;
    cfg.train_count = 12;
    cfg.val_count = 4;
    cfg.test_count = 5;
    cfg
}

#[test]
fn default_benchmark_counts_and_disjoint_seeds() {
    let b = make_benchmark(&BenchmarkConfig::default(), 7).unwrap();
    assert_eq!(b.train.len(), 400);
    assert_eq!(b.val.len(), 50);
    assert_eq!(b.unseen.len(), 3);
    assert!(b.unseen.iter().all(|(_, s)| s.len() == 100));
    let source: HashSet<u64> = b
        .manifest
        .entries
        .iter()
        .filter(|e| e.split != Split::Test)
        .map(|e| e.geometry_seed)
        .collect();
    let target: HashSet<u64> = b
        .manifest
        .entries
        .iter()
        .filter(|e| e.split == Split::Test)
        .map(|e| e.geometry_seed)
        .collect();
    assert!(source.is_disjoint(&target));
    assert_eq!(source.len(), 450);
}

#[test]
fn benchmark_is_deterministic_and_round_trips() {
    let cfg = small_config();
    let a = make_benchmark(&cfg, 3).unwrap();
    let b = make_benchmark(&cfg, 3).unwrap();
    assert_eq!(a.manifest, b.manifest);
    assert_eq!(a.train, b.train);
    let dir = tempfile::tempdir().unwrap();
    let manifest = a.save(dir.path()).unwrap();
    let loaded = Benchmark::load(dir.path()).unwrap();
    assert_eq!(loaded.manifest, manifest);
    assert_eq!(loaded.train, a.train);
    assert_eq!(loaded.val, a.val);
    assert_eq!(loaded.unseen, a.unseen);
    let c = make_benchmark(&cfg, 4).unwrap();
    assert_ne!(a.manifest, c.manifest);
}

#[test]
fn sample_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.smpl");
    write_grid_file(&p, &Grid::zeros(&[2, 3]), PAYLOAD_U8).unwrap();
    assert_eq!(std::fs::read(&p).unwrap().len(), 16 + 6);
    assert_eq!(read_grid_file(&p).unwrap(), Grid::zeros(&[2, 3]));
    std::fs::write(&p, b"NOPE0000000000000000").unwrap();
    assert!(matches!(read_grid_file(&p), Err(SynthError::BadSampleFile { .. })));
    let mut bytes = b"SMPL".to_vec();
    bytes.extend_from_slice(&2u32.to_le_bytes());
    bytes.extend_from_slice(&2u32.to_le_bytes());
    bytes.extend_from_slice(&[1, 0, 0, 0, 0, 0]);
    std::fs::write(&p, bytes).unwrap();
    assert!(matches!(read_grid_file(&p), Err(SynthError::BadSampleFile { .. })));
}

#[test]
fn domain_gap_regeneration() {
    let cfg = small_config();
    let mut rounds = 0;
    let found = ensure_domain_gap::<SynthError>(&cfg, 1, 3, |_| {
        rounds += 1;
        Ok(rounds == 2)
    })
    .unwrap();
    assert!(found.is_some());
    assert_eq!(rounds, 2);
    assert!(has_domain_gap(0.9, &[0.95, 0.8]));
    assert!(!has_domain_gap(0.9, &[0.95, 0.9]));
}
