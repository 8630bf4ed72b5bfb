//! Run configuration files (TOML).
//!
//! ```toml
//! schema_version = 1
//! output_dir = "runs/moons"        # relative to this file
//! normalize = true                 # z-score both domains with source statistics
//!
//! [train]                          # any TrainConfig field; omitted ones keep defaults
//! lr = 1e-3
//! seed = 0
//!
//! [source.synthetic]               # or [source.file] with path / label_column / ...
//! generator = "two_moons"
//! n = 1000
//! noise = 0.1
//! seed = 0
//!
//! [target.synthetic]
//! generator = "two_moons"
//! n = 1000
//! noise = 0.1
//! rotation_degrees = 45.0
//! seed = 1
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use udakit::data::{generate, load_table, Domain, DomainDataset, SyntheticSpec, TableSchema};
use udakit::trainer::TrainConfig;

use crate::error::{io_error, CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "yes")]
    pub normalize: bool,
    #[serde(default)]
    pub train: TrainConfig,
    pub source: DatasetConfig,
    pub target: DatasetConfig,
}

fn yes() -> bool {
    true
}

/// Exactly one of the two tables must be present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<FileDataset>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDataset {
    pub path: PathBuf,
    /// Required for the source; optional (evaluation only) for the target.
    #[serde(default)]
    pub label_column: Option<String>,
    #[serde(default)]
    pub feature_columns: Vec<String>,
    #[serde(default = "comma")]
    pub delimiter: char,
    #[serde(default)]
    pub class_count: Option<usize>,
}

fn comma() -> char {
    ','
}

/// Where a dataset came from, for the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { spec: SyntheticSpec },
    File { path: PathBuf, sha256: String },
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| CliError::input(e.to_string().trim_end().to_owned()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::input(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.train
            .validate()
            .map_err(|e| CliError::input(format!("[train] {e}")))?;
        for (name, d) in [("source", &cfg.source), ("target", &cfg.target)] {
            if d.synthetic.is_some() == d.file.is_some() {
                return Err(CliError::input(format!(
                    "[{name}] needs exactly one of [{name}.synthetic] or [{name}.file]"
                )));
            }
        }
        Ok(cfg)
    }

    /// Reads and parses `path`; returns the config and the raw bytes.
    pub fn load(path: &Path) -> CliResult<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| CliError::input(format!("{}: not UTF-8 text", path.display())))?;
        let cfg = Self::parse(&text).map_err(|e| e.context(path.display()))?;
        Ok((cfg, bytes))
    }
}

impl DatasetConfig {
    /// Materializes the dataset; relative file paths resolve against `base`.
    pub fn resolve(&self, domain: Domain, base: &Path) -> CliResult<(DomainDataset, Provenance)> {
        if let Some(spec) = &self.synthetic {
            let ds = generate(spec)?.with_domain(domain)?;
            return Ok((ds, Provenance::Synthetic { spec: spec.clone() }));
        }
        let file = self.file.as_ref().expect("validated: one source kind");
        let path = base.join(&file.path);
        let schema = TableSchema {
            feature_columns: file.feature_columns.clone(),
            label_column: file.label_column.clone(),
            delimiter: file.delimiter,
            class_count: file.class_count,
            domain,
        };
        let ds =
            load_table(&path, &schema).map_err(|e| CliError::from(e).context(path.display()))?;
        let bytes = std::fs::read(&path).map_err(|e| io_error(&path, e))?;
        Ok((
            ds,
            Provenance::File {
                sha256: sha256_hex(&bytes),
                path,
            },
        ))
    }
}
