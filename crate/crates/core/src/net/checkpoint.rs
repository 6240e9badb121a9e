//! Binary weight checkpoints plus a plain-text manifest.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "RFDN" | version u16 | layer count u32
//! per layer: rows u32 | cols u32 | tau f64 | scale f64
//! per layer: rows·cols f64, row-major
//! ```
//!
//! The manifest sits next to the checkpoint as `<file>.manifest` and holds
//! `key = value` lines for the shapes, quantizer, nonlinearity, weight
//! preparation and a hash of the training configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use super::{DenseLayer, Network, Nonlinearity, WeightPrep};
use crate::error::{Error, Result};
use crate::quantize::QuantScheme;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFDN";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Hex SHA-256 of a configuration's canonical text.
pub fn config_hash(canonical: &str) -> String {
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".manifest");
    PathBuf::from(name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub shapes: Vec<(usize, usize)>,
    pub quant: Option<QuantScheme>,
    pub nonlinearity: Nonlinearity,
    pub weight_prep: WeightPrep,
    pub config_hash: String,
}

impl Manifest {
    pub fn for_network(net: &Network, config_hash: &str) -> Self {
        Self {
            shapes: net.layers().iter().map(|l| l.weights.dim()).collect(),
            quant: net.quant(),
            nonlinearity: net.nonlinearity(),
            weight_prep: net.weight_prep(),
            config_hash: config_hash.to_string(),
        }
    }

    pub fn render(&self) -> String {
        let shapes: Vec<String> = self.shapes.iter().map(|(r, c)| format!("{r}x{c}")).collect();
        let quant = self
            .quant
            .map_or_else(|| "none".to_string(), |q| q.bits().to_string());
        format!(
            "format = RFDN v{CHECKPOINT_VERSION}\nlayers = {}\nquant_bits = {quant}\nnonlinearity = {}\nweight_prep = {}\nconfig_hash = {}\n",
            shapes.join(","),
            self.nonlinearity.name(),
            self.weight_prep.name(),
            self.config_hash
        )
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut m = Manifest {
            shapes: Vec::new(),
            quant: None,
            nonlinearity: Nonlinearity::default(),
            weight_prep: WeightPrep::default(),
            config_hash: String::new(),
        };
        for (idx, line) in text.lines().enumerate() {
            let bad = |detail: String| Error::FormatAtLine {
                path: path.to_path_buf(),
                line: idx as u64 + 1,
                detail,
            };
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad("expected 'key = value'".into()))?;
            match key {
                "format" => {}
                "layers" => {
                    m.shapes = value
                        .split(',')
                        .map(|s| {
                            let (r, c) = s.split_once('x')?;
                            Some((r.trim().parse().ok()?, c.trim().parse().ok()?))
                        })
                        .collect::<Option<_>>()
                        .ok_or_else(|| bad(format!("bad layer shapes '{value}'")))?
                }
                "quant_bits" => {
                    m.quant = match value {
                        "none" => None,
                        v => Some(
                            v.parse::<u32>()
                                .map_err(|e| bad(e.to_string()))
                                .and_then(|b| QuantScheme::new(b).map_err(|e| bad(e.to_string())))?,
                        ),
                    }
                }
                "nonlinearity" => m.nonlinearity = value.parse().map_err(|e: Error| bad(e.to_string()))?,
                "weight_prep" => m.weight_prep = value.parse().map_err(|e: Error| bad(e.to_string()))?,
                "config_hash" => m.config_hash = value.to_string(),
                other => return Err(bad(format!("unknown key '{other}'"))),
            }
        }
        Ok(m)
    }
}

pub fn read_manifest(checkpoint: &Path) -> Result<Manifest> {
    let path = manifest_path(checkpoint);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Manifest::parse(&text, &path)
}

/// Writes the checkpoint and its manifest.
pub fn save_checkpoint(net: &Network, path: &Path, config_hash: &str) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(net.num_layers() as u32).to_le_bytes());
    for layer in net.layers() {
        let (r, c) = layer.weights.dim();
        buf.extend_from_slice(&(r as u32).to_le_bytes());
        buf.extend_from_slice(&(c as u32).to_le_bytes());
        buf.extend_from_slice(&layer.tau.to_le_bytes());
        buf.extend_from_slice(&layer.scale.to_le_bytes());
    }
    for layer in net.layers() {
        for w in layer.weights.iter() {
            buf.extend_from_slice(&w.to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    fs::write(&mpath, Manifest::for_network(net, config_hash).render())
        .map_err(|e| Error::io(&mpath, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::FormatAtByte {
            path: self.path.to_path_buf(),
            offset: self.offset as u64,
            detail: detail.into(),
        }
    }

    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let end = self.offset + N;
        let slice = self
            .bytes
            .get(self.offset..end)
            .ok_or_else(|| self.fail(format!("truncated while reading {what}")))?;
        self.offset = end;
        Ok(slice.try_into().expect("length checked"))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        self.take::<2>(what).map(u16::from_le_bytes)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        self.take::<4>(what).map(u32::from_le_bytes)
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        self.take::<8>(what).map(f64::from_le_bytes)
    }
}

/// Reads a checkpoint. Nonlinearity, quantizer and weight preparation come
/// from the manifest when present; without one the defaults apply.
pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
        path,
    };
    if &r.take::<4>("magic")? != CHECKPOINT_MAGIC {
        r.offset = 0;
        return Err(r.fail("bad magic, expected RFDN"));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        r.offset -= 2;
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let count = r.u32("layer count")? as usize;
    let mut headers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let rows = r.u32(&format!("layer {i} rows"))? as usize;
        let cols = r.u32(&format!("layer {i} cols"))? as usize;
        let tau = r.f64(&format!("layer {i} tau"))?;
        let scale = r.f64(&format!("layer {i} scale"))?;
        headers.push((rows, cols, tau, scale));
    }
    let mut layers = Vec::with_capacity(count);
    for (i, &(rows, cols, tau, scale)) in headers.iter().enumerate() {
        let start = r.offset;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f64(&format!("layer {i} weights"))?);
        }
        let weights = Array2::from_shape_vec((rows, cols), data).expect("sized above");
        let layer = DenseLayer::new(weights, tau, scale).map_err(|e| {
            r.offset = start;
            r.fail(format!("layer {i}: {e}"))
        })?;
        layers.push(layer);
    }
    if r.offset != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.offset)));
    }
    let manifest = match read_manifest(path) {
        Ok(m) => Some(m),
        Err(e) if e.is_io() => {
            log::warn!("{}: no manifest, assuming defaults", path.display());
            None
        }
        Err(e) => return Err(e),
    };
    let (nonlinearity, quant, prep) = manifest
        .map(|m| (m.nonlinearity, m.quant, m.weight_prep))
        .unwrap_or_default();
    Ok(Network::new(layers, nonlinearity, quant)?.with_weight_prep(prep))
}
