//! File formats: WVOL volumes, WMOD models, pair manifests and JSON logs.
//!
//! WVOL: `"WVOL"`, version byte 1, rows/cols/depth as `u32` LE, then
//! `f32` LE voxels slice by slice, row-major within a slice.
//!
//! WMOD: `"WMOD"`, version byte 1, header length `u32` LE, UTF-8 JSON header,
//! then `f32` LE blobs for the source filters, target filters and mapping.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::csc::FilterBank;
use crate::error::{Error, Result};
use crate::grid::{Slice, Volume};
use crate::joint::{IntensityMap, MappingMatrix, ObjectiveBreakdown, TrainConfig, TrainedModel};

pub const WVOL_MAGIC: &[u8; 4] = b"WVOL";
pub const WMOD_MAGIC: &[u8; 4] = b"WMOD";
pub const FORMAT_VERSION: u8 = 1;

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let b = bytes
        .get(at..at + 4)
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_f32s(bytes: &[u8], count: usize) -> Result<Vec<f64>> {
    if bytes.len() < 4 * count {
        return Err(Error::Format(format!(
            "expected {} payload bytes, found {}",
            4 * count,
            bytes.len()
        )));
    }
    let out: Vec<f64> = bytes[..4 * count]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("file payload"));
    }
    Ok(out)
}

fn push_f32s(buf: &mut Vec<u8>, values: impl Iterator<Item = f64>) {
    for v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in u32")))
}

fn check_magic(bytes: &[u8], magic: &[u8; 4]) -> Result<()> {
    if bytes.len() < 5 || &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "missing {} magic",
            String::from_utf8_lossy(magic)
        )));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    Ok(())
}

pub fn encode_wvol(v: &Volume) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(17 + 4 * v.voxel_count());
    buf.extend_from_slice(WVOL_MAGIC);
    buf.push(FORMAT_VERSION);
    for (n, what) in [(v.rows(), "rows"), (v.cols(), "cols"), (v.depth(), "depth")] {
        buf.extend_from_slice(&to_u32(n, what)?.to_le_bytes());
    }
    push_f32s(&mut buf, v.voxels());
    Ok(buf)
}

pub fn decode_wvol(bytes: &[u8]) -> Result<Volume> {
    check_magic(bytes, WVOL_MAGIC)?;
    let rows = read_u32(bytes, 5)? as usize;
    let cols = read_u32(bytes, 9)? as usize;
    let depth = read_u32(bytes, 13)? as usize;
    if rows == 0 || cols == 0 || depth == 0 {
        return Err(Error::Format(format!("empty volume {rows}x{cols}x{depth}")));
    }
    let count = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(depth))
        .ok_or_else(|| Error::Format("volume size overflows".into()))?;
    let payload = &bytes[17..];
    if payload.len() != 4 * count {
        return Err(Error::Format(format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            4 * count
        )));
    }
    let data = read_f32s(payload, count)?;
    let n = rows * cols;
    let slices = data
        .chunks(n)
        .map(|c| Slice::new(rows, cols, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Volume::new(slices)
}

pub fn save_wvol(path: &Path, v: &Volume) -> Result<()> {
    fs::write(path, encode_wvol(v)?)?;
    Ok(())
}

pub fn load_wvol(path: &Path) -> Result<Volume> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_wvol(&bytes)
}

/// JSON header of a WMOD file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WmodHeader {
    pub k: usize,
    pub d: usize,
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub seed: u64,
    pub pad: usize,
    pub notes: String,
}

/// Extra model data carried in the header's `notes` field.
#[derive(Debug, Serialize, Deserialize)]
struct ModelNotes {
    provenance: String,
    config: TrainConfig,
    #[serde(default)]
    intensity: IntensityMap,
}

pub fn encode_wmod(m: &TrainedModel) -> Result<Vec<u8>> {
    let c = &m.config;
    let notes = serde_json::to_string(&ModelNotes {
        provenance: m.provenance.clone(),
        config: c.clone(),
        intensity: m.intensity,
    })?;
    let header = WmodHeader {
        k: m.k(),
        d: m.d(),
        lambda: c.lambda,
        beta: c.beta,
        gamma: c.gamma,
        sigma: c.sigma,
        seed: c.seed,
        pad: c.pad,
        notes,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(WMOD_MAGIC);
    buf.push(FORMAT_VERSION);
    buf.extend_from_slice(&to_u32(json.len(), "header length")?.to_le_bytes());
    buf.extend_from_slice(&json);
    push_f32s(&mut buf, m.fbx.coeffs().iter().copied());
    push_f32s(&mut buf, m.fby.coeffs().iter().copied());
    push_f32s(&mut buf, m.w.entries().iter().copied());
    Ok(buf)
}

pub fn decode_wmod(bytes: &[u8]) -> Result<TrainedModel> {
    check_magic(bytes, WMOD_MAGIC)?;
    let hlen = read_u32(bytes, 5)? as usize;
    let body = bytes
        .get(9..9 + hlen)
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: WmodHeader = serde_json::from_slice(body)?;
    let (k, d) = (header.k, header.d);
    let fsize = k * d * d;
    let payload = &bytes[9 + hlen..];
    let expect = 4 * (2 * fsize + k * k);
    if payload.len() != expect {
        return Err(Error::Format(format!(
            "payload is {} bytes, expected {expect}",
            payload.len()
        )));
    }
    let fx = read_f32s(payload, fsize)?;
    let fy = read_f32s(&payload[4 * fsize..], fsize)?;
    let w = read_f32s(&payload[8 * fsize..], k * k)?;
    let (config, provenance, intensity) = match serde_json::from_str::<ModelNotes>(&header.notes) {
        Ok(n) => (n.config, n.provenance, n.intensity),
        Err(_) => (
            TrainConfig {
                k,
                d,
                lambda: header.lambda,
                beta: header.beta,
                gamma: header.gamma,
                sigma: header.sigma,
                seed: header.seed,
                pad: header.pad,
                ..TrainConfig::default()
            },
            String::new(),
            IntensityMap::default(),
        ),
    };
    if config.k != k || config.d != d {
        return Err(Error::Format("header and notes disagree on k or d".into()));
    }
    TrainedModel::new(
        FilterBank::new(k, d, fx)?,
        FilterBank::new(k, d, fy)?,
        MappingMatrix::new(k, w)?,
        config,
        provenance,
    )
    .map(|m| m.with_intensity(intensity))
}

pub fn save_wmod(path: &Path, m: &TrainedModel) -> Result<()> {
    fs::write(path, encode_wmod(m)?)?;
    Ok(())
}

pub fn load_wmod(path: &Path) -> Result<TrainedModel> {
    decode_wmod(&fs::read(path)?)
}

/// One manifest entry; paths are relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub source: PathBuf,
    pub target: PathBuf,
    pub registered: bool,
    pub kernel: Option<f64>,
}

pub fn save_manifest(path: &Path, entries: &[PairEntry]) -> Result<()> {
    write_json(path, &entries)
}

pub fn load_manifest(path: &Path) -> Result<Vec<PairEntry>> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Resolves a manifest path against the manifest's directory.
pub fn resolve(manifest: &Path, entry_path: &Path) -> PathBuf {
    if entry_path.is_absolute() {
        entry_path.to_path_buf()
    } else {
        manifest
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(entry_path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLog {
    pub iterations: Vec<ObjectiveBreakdown>,
}

/// Writes pretty-printed JSON followed by a newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}
