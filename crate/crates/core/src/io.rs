//! File formats: UDT1 tensors, PGM/PPM images, CSV tables, run manifests and
//! trained model files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mlp::{Mlp, MlpConfig, MlpParams};
use crate::sampler::Trajectory;

pub const TENSOR_MAGIC: &[u8; 4] = b"UDT1";
pub const DTYPE_F64: u8 = 0x01;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_tensor(shape: &[usize], values: &[f64]) -> Result<Vec<u8>> {
    if shape.is_empty() || shape.len() > u8::MAX as usize {
        return Err(Error::config(format!("unsupported tensor rank {}", shape.len())));
    }
    if shape.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
        return Err(Error::config(format!("invalid tensor shape {shape:?}")));
    }
    let count: usize = shape.iter().product();
    if count != values.len() {
        return Err(Error::Shape {
            expected: count,
            actual: values.len(),
        });
    }
    let mut out = Vec::with_capacity(8 + 4 * shape.len() + 8 * count);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&[DTYPE_F64, shape.len() as u8, 0, 0]);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parse a UDT1 buffer; `path` is only used for error messages.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    if bytes.len() < 8 || &bytes[..4] != TENSOR_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    if bytes[4] != DTYPE_F64 {
        return Err(format_err(path, format!("unsupported dtype 0x{:02x}", bytes[4])));
    }
    let ndim = bytes[5] as usize;
    if ndim == 0 || bytes[6] != 0 || bytes[7] != 0 {
        return Err(format_err(path, "malformed header"));
    }
    let header = 8 + 4 * ndim;
    if bytes.len() < header {
        return Err(format_err(path, "truncated header"));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(path, "shape overflows"))?;
    if bytes.len() - header != count * 8 {
        return Err(format_err(
            path,
            format!("payload has {} bytes, expected {}", bytes.len() - header, count * 8),
        ));
    }
    let values = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, values))
}

pub fn write_tensor(path: &Path, shape: &[usize], values: &[f64]) -> Result<()> {
    write_bytes(path, &encode_tensor(shape, values)?)
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    decode_tensor(&read_bytes(path)?, path)
}

/// Write a list of equal-length rows as a `[rows, cols]` tensor.
pub fn write_matrix(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let cols = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    write_tensor(path, &[rows.len(), cols], &flat)
}

pub fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let (shape, values) = read_tensor(path)?;
    if shape.len() != 2 {
        return Err(format_err(path, format!("expected a 2-D tensor, got shape {shape:?}")));
    }
    Ok(values.chunks_exact(shape[1]).map(<[f64]>::to_vec).collect())
}

/// Binary PGM, min-max normalized to 0..=255; constant maps become all zero.
pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    if width * height != values.len() || values.is_empty() {
        return Err(Error::Shape {
            expected: width * height,
            actual: values.len(),
        });
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::numeric("image map contains non-finite values"));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn write_image_map(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    write_bytes(path, &encode_pgm(width, height, values)?)
}

/// Binary PPM from interleaved RGB values, clamped to `[0, 1]`.
pub fn encode_ppm(width: usize, height: usize, rgb: &[f64]) -> Result<Vec<u8>> {
    if 3 * width * height != rgb.len() || rgb.is_empty() {
        return Err(Error::Shape {
            expected: 3 * width * height,
            actual: rgb.len(),
        });
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_rgb_image(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    write_bytes(path, &encode_ppm(width, height, rgb)?)
}

/// Minimal CSV table; cells are written verbatim, floats use the shortest
/// round-tripping representation.
#[derive(Debug, Clone, Default)]
pub struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::Shape {
                expected: self.header.len(),
                actual: row.len(),
            });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.render().as_bytes())
    }
}

/// Shorthand for building CSV rows from mixed values.
#[macro_export]
macro_rules! csv_row {
    ($($v:expr),* $(,)?) => { vec![$(($v).to_string()),*] };
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// JSON with object keys sorted recursively and no whitespace.
pub fn canonical_json(value: &serde_json::Value) -> String {
    fn sort(v: &serde_json::Value) -> serde_json::Value {
        match v {
            serde_json::Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                let mut out = serde_json::Map::new();
                for k in keys {
                    out.insert(k.clone(), sort(&map[k]));
                }
                serde_json::Value::Object(out)
            }
            serde_json::Value::Array(a) => serde_json::Value::Array(a.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    sort(value).to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub root_seed: u64,
    pub config_digest: String,
    pub config: serde_json::Value,
    /// Seconds since the Unix epoch.
    pub started: u64,
    pub finished: u64,
    pub files: Vec<ManifestFile>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn unix_time() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

impl RunManifest {
    /// Hash every listed output (paths relative to `out_dir`).
    pub fn new(
        command: &str,
        root_seed: u64,
        config: serde_json::Value,
        started: u64,
        out_dir: &Path,
        files: &[PathBuf],
    ) -> Result<Self> {
        let mut listed = files.to_vec();
        listed.sort();
        listed.dedup();
        let files = listed
            .iter()
            .map(|rel| {
                Ok(ManifestFile {
                    path: rel.to_string_lossy().replace('\\', "/"),
                    sha256: sha256_hex(&read_bytes(&out_dir.join(rel))?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            command: command.to_string(),
            root_seed,
            config_digest: sha256_hex(canonical_json(&config).as_bytes()),
            config,
            started,
            finished: unix_time(),
            files,
        })
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_bytes(&out_dir.join(MANIFEST_NAME), json.as_bytes())
    }

    /// Recompute the config digest and file hashes against `out_dir`.
    pub fn verify(&self, out_dir: &Path) -> Result<bool> {
        if sha256_hex(canonical_json(&self.config).as_bytes()) != self.config_digest {
            return Ok(false);
        }
        for f in &self.files {
            if sha256_hex(&read_bytes(&out_dir.join(&f.path))?) != f.sha256 {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Dump each recorded state as `step_XXXX.udt` plus an `index.csv`
/// (step, timestep, file). Returns the written paths relative to `dir`.
pub fn write_trajectory(dir: &Path, traj: &Trajectory) -> Result<Vec<PathBuf>> {
    let mut index = CsvTable::new(["step", "timestep", "file"]);
    let mut written = Vec::new();
    for (step, (t, state)) in traj.states.iter().enumerate() {
        let name = format!("step_{step:04}.udt");
        write_tensor(&dir.join(&name), &[state.len()], state)?;
        index.push(csv_row![step, t, name])?;
        written.push(PathBuf::from(name));
    }
    let name = "final.udt";
    write_tensor(&dir.join(name), &[traj.final_sample.len()], &traj.final_sample)?;
    index.push(csv_row![traj.states.len(), 0, name])?;
    written.push(PathBuf::from(name));
    index.write(&dir.join("index.csv"))?;
    written.push(PathBuf::from("index.csv"));
    Ok(written)
}

pub const MODEL_HEADER: &str = "model.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    /// `[outputs, inputs]`.
    pub shape: [usize; 2],
    pub weights: String,
    pub bias: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub config: MlpConfig,
    pub layers: Vec<LayerEntry>,
}

/// Save a network as `model.json` (architecture and layer shapes) plus one
/// weight tensor and one bias tensor per layer.
pub fn save_mlp(dir: &Path, mlp: &Mlp) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut layers = Vec::new();
    for (k, layer) in mlp.params.layers.iter().enumerate() {
        let entry = LayerEntry {
            shape: [layer.outputs, layer.inputs],
            weights: format!("layer{k}_weights.udt"),
            bias: format!("layer{k}_bias.udt"),
        };
        write_tensor(&dir.join(&entry.weights), &entry.shape, &layer.weights)?;
        write_tensor(&dir.join(&entry.bias), &[layer.outputs], &layer.bias)?;
        written.push(PathBuf::from(&entry.weights));
        written.push(PathBuf::from(&entry.bias));
        layers.push(entry);
    }
    let header = ModelHeader {
        config: mlp.config.clone(),
        layers,
    };
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    write_bytes(&dir.join(MODEL_HEADER), json.as_bytes())?;
    written.push(PathBuf::from(MODEL_HEADER));
    Ok(written)
}

pub fn load_mlp(dir: &Path) -> Result<Mlp> {
    let path = dir.join(MODEL_HEADER);
    let header: ModelHeader = serde_json::from_slice(&read_bytes(&path)?)
        .map_err(|e| format_err(&path, e.to_string()))?;
    header.config.validate()?;
    let mut params = MlpParams::zeros(&header.config);
    if header.layers.len() != params.layers.len() {
        return Err(format_err(&path, "layer count does not match the architecture"));
    }
    for (layer, entry) in params.layers.iter_mut().zip(&header.layers) {
        let wpath = dir.join(&entry.weights);
        let (shape, w) = read_tensor(&wpath)?;
        if shape != [layer.outputs, layer.inputs] || entry.shape != [layer.outputs, layer.inputs] {
            return Err(format_err(&wpath, format!("unexpected weight shape {shape:?}")));
        }
        let bpath = dir.join(&entry.bias);
        let (shape, b) = read_tensor(&bpath)?;
        if shape != [layer.outputs] {
            return Err(format_err(&bpath, format!("unexpected bias shape {shape:?}")));
        }
        layer.weights = w;
        layer.bias = b;
    }
    Mlp::new(header.config, params)
}
