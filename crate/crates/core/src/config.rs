//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Every [`TrainConfig`] field has
//! a key of the same name; model and data keys sit alongside. Relative paths
//! resolve against the file's directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{
    load_csv, load_idx, standardize_pair, synthetic_blobs, synthetic_xor, Dataset, Split,
};
use crate::error::{Error, Result};
use crate::net::{Network, Nonlinearity, WeightPrep};
use crate::quantize::QuantScheme;
use crate::train::{GradBackend, RegMode, TauSetting, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Blobs { train: usize, test: usize },
    Xor { train: usize, test: usize },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv { train: PathBuf, test: PathBuf },
}

impl DataSource {
    /// Loads both splits. IDX pixels are standardized with training-split
    /// statistics; a nonzero `limit` keeps only the first samples of each.
    pub fn load(&self, seed: u64, limit: usize) -> Result<(Dataset, Dataset)> {
        let (mut train, mut test) = match self {
            DataSource::Blobs { train, test } => (
                synthetic_blobs(*train, seed, Split::Train)?,
                synthetic_blobs(*test, seed.wrapping_add(1), Split::Test)?,
            ),
            DataSource::Xor { train, test } => (
                synthetic_xor(*train, seed, Split::Train)?,
                synthetic_xor(*test, seed.wrapping_add(1), Split::Test)?,
            ),
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let mut train = load_idx(train_images, train_labels, Split::Train)?;
                let mut test = load_idx(test_images, test_labels, Split::Test)?;
                standardize_pair(&mut train, &mut test);
                (train, test)
            }
            DataSource::Csv { train, test } => {
                (load_csv(train, Split::Train)?, load_csv(test, Split::Test)?)
            }
        };
        if limit > 0 {
            train.truncate(limit);
            test.truncate(limit);
        }
        Ok((train, test))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub hidden: Vec<usize>,
    pub nonlinearity: Nonlinearity,
    pub data: DataSource,
    /// Keep only this many samples per split; zero keeps everything.
    pub limit: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            hidden: vec![16],
            nonlinearity: Nonlinearity::HardTanh,
            data: DataSource::Blobs {
                train: 400,
                test: 200,
            },
            limit: 0,
            output_dir: PathBuf::from("run"),
        }
    }
}

impl ExperimentConfig {
    /// Parses a config file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: idx + 1,
                detail: format!("expected 'key = value', got '{line}'"),
            })?;
            entries.push((idx + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = Self::default();
        cfg.apply(entries.iter().map(|(l, k, v)| (*l, k.as_str(), v.as_str())), base)?;
        Ok(cfg)
    }

    /// Applies `(line, key, value)` overrides. Line 0 marks command-line values.
    pub fn apply<'a>(
        &mut self,
        entries: impl IntoIterator<Item = (usize, &'a str, &'a str)>,
        base: &Path,
    ) -> Result<()> {
        let mut data_keys: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (line, key, value) in entries {
            let err = |detail: String| Error::Config { line, detail };
            let num = |v: &str| -> Result<f64> {
                match v {
                    "inf" | "infinity" => Ok(f64::INFINITY),
                    _ => v
                        .parse::<f64>()
                        .map_err(|_| err(format!("{key}: '{v}' is not a number"))),
                }
            };
            let int = |v: &str| -> Result<u64> {
                v.parse::<u64>()
                    .map_err(|_| err(format!("{key}: '{v}' is not a non-negative integer")))
            };
            let flag = |v: &str| -> Result<bool> {
                match v {
                    "true" | "yes" | "1" => Ok(true),
                    "false" | "no" | "0" => Ok(false),
                    _ => Err(err(format!("{key}: '{v}' is not a boolean"))),
                }
            };
            let t = &mut self.train;
            match key {
                "backend" => t.backend = value.parse().map_err(|e: Error| err(e.to_string()))?,
                "tau" => {
                    t.tau = if value == "auto" {
                        TauSetting::Auto
                    } else {
                        TauSetting::Fixed(num(value)?)
                    }
                }
                "alpha" => t.alpha = num(value)?,
                "beta" => t.beta = num(value)?,
                "lr" | "eta" => t.lr = num(value)?,
                "momentum" => t.momentum = num(value)?,
                "nesterov" => t.nesterov = flag(value)?,
                "lr_decay" => t.lr_decay = num(value)?,
                "lr_decay_every" => t.lr_decay_every = int(value)? as usize,
                "epochs" => t.epochs = int(value)? as usize,
                "batch_size" => t.batch_size = int(value)? as usize,
                "bits" => t.bits = int(value)? as u32,
                "full_precision" => t.full_precision = flag(value)?,
                "translations" => {
                    t.translations = value.parse().map_err(|e: Error| err(e.to_string()))?
                }
                "reg_mode" => {
                    t.reg_mode = match value {
                        "monitor" => RegMode::Monitor,
                        "grad" => RegMode::Grad,
                        _ => return Err(err(format!("reg_mode: '{value}' (monitor, grad)"))),
                    }
                }
                "seed" => t.seed = int(value)?,
                "timing" => t.timing = flag(value)?,
                "hidden" => {
                    self.hidden = if value.is_empty() || value == "none" {
                        Vec::new()
                    } else {
                        value
                            .split(',')
                            .map(|p| int(p.trim()).map(|v| v as usize))
                            .collect::<Result<_>>()?
                    };
                    if self.hidden.contains(&0) {
                        return Err(err("hidden: layer widths must be positive".into()));
                    }
                }
                "nonlinearity" => {
                    self.nonlinearity = value.parse().map_err(|e: Error| err(e.to_string()))?
                }
                "limit" => self.limit = int(value)? as usize,
                "output_dir" => self.output_dir = base.join(value),
                "dataset" | "train_size" | "test_size" | "train_images" | "train_labels"
                | "test_images" | "test_labels" | "train_csv" | "test_csv" => {
                    data_keys.insert(key.to_string(), (line, value.to_string()));
                }
                other => return Err(err(format!("unknown key '{other}'"))),
            }
        }
        if !data_keys.is_empty() {
            self.data = resolve_data(&self.data, &data_keys, base)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()
    }

    /// A fresh network for `input → hidden… → classes`, seeded by `train.seed`.
    pub fn build_network(&self, inputs: usize, classes: usize) -> Result<Network> {
        let mut sizes = vec![inputs];
        sizes.extend(&self.hidden);
        sizes.push(classes);
        let quant = if self.train.full_precision {
            None
        } else {
            Some(QuantScheme::new(self.train.bits)?)
        };
        let prep = if self.train.backend == GradBackend::Dorefa {
            WeightPrep::TanhNormalized
        } else {
            WeightPrep::Direct
        };
        Ok(Network::init(&sizes, self.nonlinearity, quant, self.train.seed)?.with_weight_prep(prep))
    }

    /// Stable text form, used for hashing.
    pub fn canonical(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let tau = match t.tau {
            TauSetting::Auto => "auto".to_string(),
            TauSetting::Fixed(v) => format!("{v:?}"),
        };
        let reg = match t.reg_mode {
            RegMode::Monitor => "monitor",
            RegMode::Grad => "grad",
        };
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(s, "backend = {}", t.backend.name());
        let _ = writeln!(s, "tau = {tau}");
        for (k, v) in [
            ("alpha", t.alpha),
            ("beta", t.beta),
            ("lr", t.lr),
            ("momentum", t.momentum),
            ("lr_decay", t.lr_decay),
        ] {
            let _ = writeln!(s, "{k} = {v:?}");
        }
        let _ = writeln!(s, "nesterov = {}", t.nesterov);
        let _ = writeln!(s, "lr_decay_every = {}", t.lr_decay_every);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "bits = {}", t.bits);
        let _ = writeln!(s, "full_precision = {}", t.full_precision);
        let _ = writeln!(s, "translations = {}", t.translations);
        let _ = writeln!(s, "reg_mode = {reg}");
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "hidden = {}", hidden.join(","));
        let _ = writeln!(s, "nonlinearity = {}", self.nonlinearity.name());
        let _ = writeln!(s, "limit = {}", self.limit);
        let _ = writeln!(s, "data = {:?}", self.data);
        s
    }
}

fn resolve_data(
    current: &DataSource,
    keys: &BTreeMap<String, (usize, String)>,
    base: &Path,
) -> Result<DataSource> {
    let get = |k: &str| keys.get(k).map(|(_, v)| v.as_str());
    let line_of = |k: &str| keys.get(k).map_or(0, |(l, _)| *l);
    let size = |k: &str, default: usize| -> Result<usize> {
        match get(k) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config {
                line: line_of(k),
                detail: format!("{k}: '{v}' is not a non-negative integer"),
            }),
        }
    };
    let path = |k: &str, kind: &str| -> Result<PathBuf> {
        get(k).map(|v| base.join(v)).ok_or_else(|| Error::Config {
            line: line_of("dataset"),
            detail: format!("dataset = {kind} needs '{k}'"),
        })
    };
    let kind = match get("dataset") {
        Some(k) => k.to_string(),
        None => match current {
            DataSource::Blobs { .. } => "blobs".into(),
            DataSource::Xor { .. } => "xor".into(),
            DataSource::Idx { .. } => "idx".into(),
            DataSource::Csv { .. } => "csv".into(),
        },
    };
    match kind.as_str() {
        "blobs" => Ok(DataSource::Blobs {
            train: size("train_size", 400)?,
            test: size("test_size", 200)?,
        }),
        "xor" => Ok(DataSource::Xor {
            train: size("train_size", 400)?,
            test: size("test_size", 200)?,
        }),
        "idx" => Ok(DataSource::Idx {
            train_images: path("train_images", "idx")?,
            train_labels: path("train_labels", "idx")?,
            test_images: path("test_images", "idx")?,
            test_labels: path("test_labels", "idx")?,
        }),
        "csv" => Ok(DataSource::Csv {
            train: path("train_csv", "csv")?,
            test: path("test_csv", "csv")?,
        }),
        other => Err(Error::Config {
            line: line_of("dataset"),
            detail: format!("unknown dataset '{other}' (blobs, xor, idx, csv)"),
        }),
    }
}
