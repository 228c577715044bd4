//! On-disk artifacts: layout, content hashes, provenance records, codes files, CSV tables.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use tasd_core::metrics::{DomainSummary, MetricReport};
use tasd_core::shape_dictionary::ShapeCoefficients;
use tasd_core::tta::AblationMode;

use crate::config::{ExperimentConfig, Seeds};
use crate::error::{CliError, Result};

pub const OUTPUT_ROOT_ENV: &str = "TASD_OUTPUT_ROOT";
pub const CONFIG_FILE: &str = "config.toml";
pub const PROVENANCE_FILE: &str = "provenance.json";

const CODES_MAGIC: &[u8; 4] = b"CODS";
const CODES_VERSION: u8 = 1;

/// Fixed locations of every artifact below an output root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
    /// Benchmark directory shared with another root (used by ablations).
    pub shared_benchmark: Option<PathBuf>,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            shared_benchmark: None,
        }
    }

    /// A layout rooted at `root` that reads this layout's benchmark.
    pub fn with_benchmark_of(&self, root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            shared_benchmark: Some(self.benchmark()),
        }
    }

    /// `--out` wins, then the environment variable, then `./runs`.
    pub fn from_env(explicit: Option<PathBuf>) -> Self {
        let root = explicit
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        Self::new(root)
    }

    pub fn benchmark(&self) -> PathBuf {
        self.shared_benchmark.clone().unwrap_or_else(|| self.root.join("benchmark"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.benchmark().join("manifest.json")
    }

    pub fn dictionary_dir(&self) -> PathBuf {
        self.root.join("dictionary")
    }

    pub fn dictionary(&self) -> PathBuf {
        self.dictionary_dir().join("dictionary.bin")
    }

    pub fn codes(&self) -> PathBuf {
        self.dictionary_dir().join("codes.bin")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.root.join("model")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.model_dir().join("checkpoint.bin")
    }

    pub fn eval_dir(&self, mode: AblationMode) -> PathBuf {
        self.root.join(format!("eval-{}", mode_name(mode)))
    }

    pub fn ablation_dir(&self) -> PathBuf {
        self.root.join("ablate-k")
    }
}

pub fn mode_name(mode: AblationMode) -> &'static str {
    match mode {
        AblationMode::Dual => "dual",
        AblationMode::SegOnly => "seg_only",
        AblationMode::CoefOnly => "coef_only",
        AblationMode::None => "none",
    }
}

pub fn require(path: &Path, what: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            what,
            path: path.to_path_buf(),
        })
    }
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Git-style object hash: SHA-256 over `"blob <len>\0"` followed by the content.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

/// Git-style tree hash: SHA-256 over sorted `"<relative path> <blob hash>\n"` lines.
/// Bookkeeping files of the directory itself are excluded so the hash covers data only.
pub fn tree_hash(dir: &Path) -> Result<String> {
    let mut entries = Vec::new();
    collect(dir, dir, &mut entries)?;
    entries.sort();
    let mut h = Sha256::new();
    for (rel, hash) in entries {
        h.update(format!("{rel} {hash}\n").as_bytes());
    }
    Ok(hex(&h.finalize()))
}

fn collect(base: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
    let rd = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    for entry in rd {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_dir() {
            collect(base, &path, out)?;
            continue;
        }
        let rel = path.strip_prefix(base).unwrap_or(&path).to_string_lossy().replace('\\', "/");
        if rel == CONFIG_FILE || rel == PROVENANCE_FILE {
            continue;
        }
        out.push((rel, blob_hash(&read_file(&path)?)));
    }
    Ok(())
}

pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        tree_hash(path)
    } else {
        Ok(blob_hash(&read_file(path)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedPath {
    /// Relative to the output root.
    pub path: String,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub inputs: Vec<HashedPath>,
    pub outputs: Vec<HashedPath>,
}

fn hashed(layout: &Layout, paths: &[PathBuf]) -> Result<Vec<HashedPath>> {
    paths
        .iter()
        .map(|p| {
            Ok(HashedPath {
                path: p.strip_prefix(&layout.root).unwrap_or(p).to_string_lossy().replace('\\', "/"),
                hash: hash_path(p)?,
            })
        })
        .collect()
}

/// Writes `config.toml` and `provenance.json` into `dir`.
pub fn record_run(
    layout: &Layout,
    dir: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<Provenance> {
    let text = cfg.to_toml()?;
    write_file(&dir.join(CONFIG_FILE), &text)?;
    let prov = Provenance {
        command: command.to_string(),
        config_hash: blob_hash(text.as_bytes()),
        seeds: cfg.seeds(),
        inputs: hashed(layout, inputs)?,
        outputs: hashed(layout, outputs)?,
    };
    write_json(&dir.join(PROVENANCE_FILE), &prov)?;
    Ok(prov)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numeric(e.to_string()))?;
    text.push('\n');
    write_file(path, text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
}

/// Little-endian: magic "CODS", version byte, N and K as u32, then N·K f64 row-major.
pub fn codes_to_bytes(codes: &[ShapeCoefficients]) -> Vec<u8> {
    let k = codes.first().map_or(0, |c| c.len());
    let mut out = Vec::with_capacity(13 + 8 * k * codes.len());
    out.extend_from_slice(CODES_MAGIC);
    out.push(CODES_VERSION);
    out.extend_from_slice(&(codes.len() as u32).to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    for c in codes {
        for v in &c.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn codes_from_bytes(bytes: &[u8]) -> std::result::Result<Vec<ShapeCoefficients>, String> {
    if bytes.len() < 13 || &bytes[..4] != CODES_MAGIC {
        return Err("bad magic bytes: expected \"CODS\"".into());
    }
    if bytes[4] != CODES_VERSION {
        return Err(format!("unsupported codes version {}", bytes[4]));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (n, k) = (word(5), word(9));
    let needed = 13 + 8 * n * k;
    if bytes.len() != needed {
        return Err(format!("codes file holds {} bytes, header implies {needed}", bytes.len()));
    }
    Ok(bytes[13..]
        .chunks_exact(8 * k.max(1))
        .take(n)
        .map(|row| ShapeCoefficients::from(row.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect::<Vec<_>>()))
        .collect())
}

pub fn save_codes(path: &Path, codes: &[ShapeCoefficients]) -> Result<()> {
    write_file(path, codes_to_bytes(codes))
}

pub fn load_codes(path: &Path) -> Result<Vec<ShapeCoefficients>> {
    codes_from_bytes(&read_file(path)?)
        .map_err(|e| CliError::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
}

pub const SUMMARY_HEADER: &str = "domain,n,dice_mean,dice_std,hd_mean,hd_std,hd_undefined_count";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn summary_row(s: &DomainSummary) -> String {
    format!(
        "{},{},{:.6},{:.6},{},{},{}",
        s.domain,
        s.n,
        s.dice_mean,
        s.dice_std,
        opt(s.hd_mean),
        opt(s.hd_std),
        s.hd_undefined_count
    )
}

/// One row per domain followed by the average row.
pub fn summary_csv(report: &MetricReport) -> String {
    let mut lines = vec![SUMMARY_HEADER.to_string()];
    lines.extend(report.domains.iter().map(summary_row));
    lines.push(summary_row(&report.average));
    lines.join("\n") + "\n"
}
