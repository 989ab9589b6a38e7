//! File formats: model checkpoints, channel datasets, fingerprint
//! databases, metrics logs, and CSV export.
//!
//! All binary decoding goes through a bounds-checked slice reader with
//! explicit size caps, so the decoders are safe on arbitrary bytes (they
//! are the fuzz targets). Writers and readers round-trip bit-exactly:
//! every payload float is stored as little-endian f64.

use ndarray::Array2;
use num_complex::Complex64;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::autodiff::Adam;
use crate::model::{Layer, ModelDims, ModelParams, RisControl};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RISLCKP1";
pub const DATASET_MAGIC: &[u8; 8] = b"RISLDAT1";
pub const FORMAT_VERSION: u32 = 1;

const META_CAP: usize = 1 << 20;
const NAME_CAP: usize = 256;
const TENSOR_COUNT_CAP: usize = 4096;
const TENSOR_ELEMS_CAP: usize = 1 << 24;
const TOTAL_ELEMS_CAP: usize = 1 << 26;
const RECORD_CAP: usize = 1 << 24;
const PATHS_CAP: usize = 1 << 16;
const CONFIG_COUNT_CAP: usize = 4096;
const BLOCK_COUNT_CAP: usize = 1 << 24;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("bad magic (not a {expected} file)")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated input while reading {context}")]
    Truncated { context: &'static str },
    #[error("{what} = {value} exceeds cap {cap}")]
    CapExceeded {
        what: &'static str,
        value: usize,
        cap: usize,
    },
    #[error("metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("inconsistent contents: {0}")]
    Inconsistent(String),
    #[error("trailing bytes after payload")]
    TrailingBytes,
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("{0}")]
    Invalid(String),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

/// Bounds-checked reader over a byte slice.
struct SliceReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> SliceReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        SliceReader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], DecodeError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(DecodeError::Truncated { context })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, context: &'static str) -> Result<u8, DecodeError> {
        Ok(self.take(1, context)?[0])
    }

    fn u32(&mut self, context: &'static str) -> Result<u32, DecodeError> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self, context: &'static str) -> Result<f64, DecodeError> {
        let b = self.take(8, context)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize, context: &'static str) -> Result<Vec<f64>, DecodeError> {
        let bytes = self.take(n.checked_mul(8).ok_or(DecodeError::Truncated { context })?, context)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> Result<(), DecodeError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(DecodeError::TrailingBytes)
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    Learned,
    Frozen,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub dims: ModelDims,
    pub pilot_scale: f64,
    pub control: ControlKind,
    /// Training iterations completed when this snapshot was taken.
    pub iteration: u64,
    pub scene_hash: String,
    pub config_digest: String,
    /// Optimizer step count; present only when optimizer state is stored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_step: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Array2<f64>>,
    pub second: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn capture(opt: &Adam) -> AdamState {
        AdamState {
            step: opt.step_count(),
            first: opt.first_moments().to_vec(),
            second: opt.second_moments().to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
    pub control: RisControl,
    pub adam: Option<AdamState>,
}

fn encode_tensor(out: &mut Vec<u8>, name: &str, t: &Array2<f64>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.nrows() as u32);
    put_u32(out, t.ncols() as u32);
    for &v in t.iter() {
        put_f64(out, v);
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let meta = serde_json::to_vec(&ckpt.meta).expect("meta serializes");
    let mut tensors: Vec<(String, Array2<f64>)> = ckpt
        .params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    if let RisControl::Frozen(raw) = &ckpt.control {
        tensors.push(("control.frozen_raw".into(), raw.clone()));
    }
    if let Some(adam) = &ckpt.adam {
        for (i, m) in adam.first.iter().enumerate() {
            tensors.push((format!("adam.first.{i}"), m.clone()));
        }
        for (i, m) in adam.second.iter().enumerate() {
            tensors.push((format!("adam.second.{i}"), m.clone()));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, meta.len() as u32);
    out.extend_from_slice(&meta);
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in &tensors {
        encode_tensor(&mut out, name, t);
    }
    out
}

fn decode_named_tensors(
    r: &mut SliceReader,
) -> Result<Vec<(String, Array2<f64>)>, DecodeError> {
    let count = r.u32("tensor count")? as usize;
    if count > TENSOR_COUNT_CAP {
        return Err(DecodeError::CapExceeded {
            what: "tensor count",
            value: count,
            cap: TENSOR_COUNT_CAP,
        });
    }
    let mut total = 0usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        if name_len > NAME_CAP {
            return Err(DecodeError::CapExceeded {
                what: "tensor name length",
                value: name_len,
                cap: NAME_CAP,
            });
        }
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| DecodeError::Inconsistent("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.u32("tensor rows")? as usize;
        let cols = r.u32("tensor cols")? as usize;
        let elems = rows
            .checked_mul(cols)
            .ok_or(DecodeError::Truncated { context: "tensor shape" })?;
        if elems > TENSOR_ELEMS_CAP {
            return Err(DecodeError::CapExceeded {
                what: "tensor elements",
                value: elems,
                cap: TENSOR_ELEMS_CAP,
            });
        }
        total += elems;
        if total > TOTAL_ELEMS_CAP {
            return Err(DecodeError::CapExceeded {
                what: "total tensor elements",
                value: total,
                cap: TOTAL_ELEMS_CAP,
            });
        }
        let data = r.f64_vec(elems, "tensor data")?;
        let t = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| DecodeError::Inconsistent(format!("tensor shape: {e}")))?;
        tensors.push((name, t));
    }
    Ok(tensors)
}

fn take_tensor(
    tensors: &mut Vec<(String, Array2<f64>)>,
    name: &str,
    shape: (usize, usize),
) -> Result<Array2<f64>, DecodeError> {
    let idx = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| DecodeError::Inconsistent(format!("missing tensor {name}")))?;
    let (_, t) = tensors.remove(idx);
    if t.dim() != shape {
        return Err(DecodeError::Inconsistent(format!(
            "tensor {name} has shape {:?}, expected {:?}",
            t.dim(),
            shape
        )));
    }
    Ok(t)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, DecodeError> {
    let mut r = SliceReader::new(bytes);
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(DecodeError::BadMagic {
            expected: "checkpoint",
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    let meta_len = r.u32("meta length")? as usize;
    if meta_len > META_CAP {
        return Err(DecodeError::CapExceeded {
            what: "meta length",
            value: meta_len,
            cap: META_CAP,
        });
    }
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "meta")?)?;
    let dims = &meta.dims;
    if dims.elements == 0
        || dims.stages == 0
        || dims.pilots_per_stage == 0
        || dims.hidden == 0
        || dims.elements > TENSOR_ELEMS_CAP
        || dims.stages > TENSOR_ELEMS_CAP
        || dims.pilots_per_stage > TENSOR_ELEMS_CAP
        || dims.hidden > TENSOR_ELEMS_CAP
        || dims.ris_widths.iter().any(|&w| w == 0 || w > TENSOR_ELEMS_CAP)
        || dims.loc_widths.iter().any(|&w| w == 0 || w > TENSOR_ELEMS_CAP)
    {
        return Err(DecodeError::Inconsistent("degenerate model dims".into()));
    }
    if !(meta.pilot_scale.is_finite() && meta.pilot_scale > 0.0) {
        return Err(DecodeError::Inconsistent("pilot scale must be positive".into()));
    }
    let theta_width = dims
        .pilots_per_stage
        .checked_mul(2)
        .and_then(|x| x.checked_mul(dims.elements))
        .filter(|&w| w <= TENSOR_ELEMS_CAP)
        .ok_or_else(|| DecodeError::Inconsistent("theta width overflow".into()))?;
    let lstm_in = dims
        .lstm_input()
        .checked_mul(4 * dims.hidden)
        .filter(|&w| w <= TENSOR_ELEMS_CAP)
        .ok_or_else(|| DecodeError::Inconsistent("gate matrix overflow".into()))?;
    let _ = (theta_width, lstm_in);

    let mut tensors = decode_named_tensors(&mut r)?;
    r.done()?;

    let learned = meta.control == ControlKind::Learned;
    let lstm_w = take_tensor(&mut tensors, "lstm_w", (dims.lstm_input(), 4 * dims.hidden))?;
    let lstm_b = take_tensor(&mut tensors, "lstm_b", (1, 4 * dims.hidden))?;
    let grab_head = |prefix: &str,
                         layer_dims: &[(usize, usize)],
                         tensors: &mut Vec<(String, Array2<f64>)>|
     -> Result<Vec<Layer>, DecodeError> {
        layer_dims
            .iter()
            .enumerate()
            .map(|(i, &(inp, out))| {
                Ok(Layer {
                    w: take_tensor(tensors, &format!("{prefix}.{i}.w"), (inp, out))?,
                    b: take_tensor(tensors, &format!("{prefix}.{i}.b"), (1, out))?,
                })
            })
            .collect()
    };
    let ris_head = if learned {
        grab_head("ris_head", &dims.ris_layer_dims(), &mut tensors)?
    } else {
        Vec::new()
    };
    let loc_head = grab_head("loc_head", &dims.loc_layer_dims(), &mut tensors)?;
    let initial_raw = if learned {
        Some(take_tensor(&mut tensors, "initial_raw", (1, dims.theta_width()))?)
    } else {
        None
    };
    let control = if learned {
        RisControl::Learned
    } else {
        RisControl::Frozen(take_tensor(
            &mut tensors,
            "control.frozen_raw",
            (dims.stages, dims.theta_width()),
        )?)
    };

    let params = ModelParams {
        dims: dims.clone(),
        lstm_w,
        lstm_b,
        ris_head,
        loc_head,
        initial_raw,
        pilot_scale: meta.pilot_scale,
    };

    let adam = if let Some(step) = meta.adam_step {
        let shapes = params.shapes();
        let mut first = Vec::with_capacity(shapes.len());
        let mut second = Vec::with_capacity(shapes.len());
        for (i, &shape) in shapes.iter().enumerate() {
            first.push(take_tensor(&mut tensors, &format!("adam.first.{i}"), shape)?);
            second.push(take_tensor(&mut tensors, &format!("adam.second.{i}"), shape)?);
        }
        Some(AdamState { step, first, second })
    } else {
        None
    };

    if !tensors.is_empty() {
        return Err(DecodeError::Inconsistent(format!(
            "unexpected tensor {}",
            tensors[0].0
        )));
    }
    Ok(Checkpoint {
        meta,
        params,
        control,
        adam,
    })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), IoError> {
    let bytes = encode_checkpoint(ckpt);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(file_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(file_err(path))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    let bytes = std::fs::read(path).map_err(file_err(path))?;
    Ok(decode_checkpoint(&bytes)?)
}

// ---------------------------------------------------------------------------
// Datasets (UE positions + traced path parameters)

use crate::propagation::PathChannel;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    /// "train" | "val" | "test" (free-form label, not interpreted).
    pub kind: String,
    pub scene_hash: String,
    pub seed: u64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub ue: [f64; 3],
    pub ap_paths: Vec<PathChannel>,
    pub ris_paths: Vec<PathChannel>,
}

fn encode_paths(out: &mut Vec<u8>, paths: &[PathChannel]) {
    put_u32(out, paths.len() as u32);
    for p in paths {
        put_f64(out, p.amplitude);
        put_f64(out, p.phase);
        match p.arrival {
            None => out.push(0),
            Some((a, b)) => {
                out.push(1);
                put_f64(out, a);
                put_f64(out, b);
            }
        }
    }
}

fn decode_paths(r: &mut SliceReader) -> Result<Vec<PathChannel>, DecodeError> {
    let n = r.u32("path count")? as usize;
    if n > PATHS_CAP {
        return Err(DecodeError::CapExceeded {
            what: "path count",
            value: n,
            cap: PATHS_CAP,
        });
    }
    let mut paths = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let amplitude = r.f64("path amplitude")?;
        let phase = r.f64("path phase")?;
        let arrival = match r.u8("arrival flag")? {
            0 => None,
            1 => Some((r.f64("arrival azimuth")?, r.f64("arrival elevation")?)),
            other => {
                return Err(DecodeError::Inconsistent(format!(
                    "bad arrival flag {other}"
                )))
            }
        };
        paths.push(PathChannel {
            amplitude,
            phase,
            arrival,
        });
    }
    Ok(paths)
}

pub fn encode_record(rec: &DatasetRecord) -> Vec<u8> {
    let mut out = Vec::new();
    for &c in &rec.ue {
        put_f64(&mut out, c);
    }
    encode_paths(&mut out, &rec.ap_paths);
    encode_paths(&mut out, &rec.ris_paths);
    out
}

pub fn decode_record(bytes: &[u8]) -> Result<DatasetRecord, DecodeError> {
    let mut r = SliceReader::new(bytes);
    let ue = [r.f64("ue x")?, r.f64("ue y")?, r.f64("ue z")?];
    let ap_paths = decode_paths(&mut r)?;
    let ris_paths = decode_paths(&mut r)?;
    r.done()?;
    Ok(DatasetRecord {
        ue,
        ap_paths,
        ris_paths,
    })
}

fn encode_dataset_header(header: &DatasetHeader) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    out
}

fn decode_dataset_header(r: &mut SliceReader) -> Result<DatasetHeader, DecodeError> {
    if r.take(8, "magic")? != DATASET_MAGIC {
        return Err(DecodeError::BadMagic { expected: "dataset" });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    let len = r.u32("header length")? as usize;
    if len > META_CAP {
        return Err(DecodeError::CapExceeded {
            what: "header length",
            value: len,
            cap: META_CAP,
        });
    }
    Ok(serde_json::from_slice(r.take(len, "header")?)?)
}

/// Splits a container into its header and raw length-prefixed records.
fn split_container(bytes: &[u8]) -> Result<(DatasetHeader, Vec<&[u8]>), DecodeError> {
    let mut r = SliceReader::new(bytes);
    let header = decode_dataset_header(&mut r)?;
    let mut records = Vec::new();
    for _ in 0..header.count {
        let len = r.u32("record length")? as usize;
        if len > RECORD_CAP {
            return Err(DecodeError::CapExceeded {
                what: "record length",
                value: len,
                cap: RECORD_CAP,
            });
        }
        records.push(r.take(len, "record")?);
    }
    r.done()?;
    Ok((header, records))
}

/// Whole-buffer decode of a channel dataset; also the fuzz entry point.
pub fn decode_dataset(bytes: &[u8]) -> Result<(DatasetHeader, Vec<DatasetRecord>), DecodeError> {
    let (header, raw) = split_container(bytes)?;
    if header.kind == FINGERPRINT_KIND {
        return Err(DecodeError::Inconsistent(
            "container holds a fingerprint database, not channel records".into(),
        ));
    }
    let records = raw
        .into_iter()
        .map(decode_record)
        .collect::<Result<Vec<_>, _>>()?;
    Ok((header, records))
}

pub struct DatasetWriter {
    w: BufWriter<File>,
    path: PathBuf,
    expected: u64,
    written: u64,
}

impl DatasetWriter {
    pub fn create(path: &Path, header: &DatasetHeader) -> Result<DatasetWriter, IoError> {
        let f = File::create(path).map_err(file_err(path))?;
        let mut w = BufWriter::new(f);
        w.write_all(&encode_dataset_header(header))
            .map_err(file_err(path))?;
        Ok(DatasetWriter {
            w,
            path: path.to_path_buf(),
            expected: header.count,
            written: 0,
        })
    }

    pub fn push(&mut self, rec: &DatasetRecord) -> Result<(), IoError> {
        let bytes = encode_record(rec);
        self.w
            .write_all(&(bytes.len() as u32).to_le_bytes())
            .and_then(|_| self.w.write_all(&bytes))
            .map_err(file_err(&self.path))?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), IoError> {
        if self.written != self.expected {
            return Err(IoError::Invalid(format!(
                "dataset {}: header promises {} records, wrote {}",
                self.path.display(),
                self.expected,
                self.written
            )));
        }
        self.w.flush().map_err(file_err(&self.path))
    }
}

pub struct DatasetReader {
    r: BufReader<File>,
    path: PathBuf,
    pub header: DatasetHeader,
    remaining: u64,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<DatasetReader, IoError> {
        let f = File::open(path).map_err(file_err(path))?;
        let mut r = BufReader::new(f);
        let mut prefix = vec![0u8; 16];
        r.read_exact(&mut prefix).map_err(file_err(path))?;
        let mut sr = SliceReader::new(&prefix);
        let _ = sr.take(8, "magic")?;
        let _ = sr.u32("version")?;
        let header_len = {
            let mut sr = SliceReader::new(&prefix);
            if sr.take(8, "magic")? != DATASET_MAGIC {
                return Err(DecodeError::BadMagic { expected: "dataset" }.into());
            }
            let version = sr.u32("version")?;
            if version != FORMAT_VERSION {
                return Err(DecodeError::UnsupportedVersion(version).into());
            }
            sr.u32("header length")? as usize
        };
        if header_len > META_CAP {
            return Err(DecodeError::CapExceeded {
                what: "header length",
                value: header_len,
                cap: META_CAP,
            }
            .into());
        }
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes).map_err(file_err(path))?;
        let header: DatasetHeader =
            serde_json::from_slice(&header_bytes).map_err(DecodeError::Meta)?;
        if header.kind == FINGERPRINT_KIND {
            return Err(DecodeError::Inconsistent(
                "container holds a fingerprint database, not channel records".into(),
            )
            .into());
        }
        let remaining = header.count;
        Ok(DatasetReader {
            r,
            path: path.to_path_buf(),
            header,
            remaining,
        })
    }

    fn read_one(&mut self) -> Result<DatasetRecord, IoError> {
        let mut len_bytes = [0u8; 4];
        self.r
            .read_exact(&mut len_bytes)
            .map_err(file_err(&self.path))?;
        let len = u32::from_le_bytes(len_bytes) as usize;
        if len > RECORD_CAP {
            return Err(DecodeError::CapExceeded {
                what: "record length",
                value: len,
                cap: RECORD_CAP,
            }
            .into());
        }
        let mut bytes = vec![0u8; len];
        self.r.read_exact(&mut bytes).map_err(file_err(&self.path))?;
        Ok(decode_record(&bytes)?)
    }
}

impl Iterator for DatasetReader {
    type Item = Result<DatasetRecord, IoError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        Some(self.read_one())
    }
}

// ---------------------------------------------------------------------------
// Fingerprint database (stored in the dataset container: record 0 is the
// probe configuration set, the rest are per-block feature rows)

pub const FINGERPRINT_KIND: &str = "fingerprint";

#[derive(Debug, Clone)]
pub struct FingerprintDb {
    pub scene_hash: String,
    pub seed: u64,
    pub grid_step: f64,
    /// The probe configurations, element coefficients per configuration.
    pub configs: Vec<Vec<Complex64>>,
    /// Block centers (x, y), row-major in the region grid order.
    pub block_centers: Vec<[f64; 2]>,
    /// (blocks, configs) received-power features in dBm.
    pub features: Array2<f64>,
}

fn encode_config_set_record(db: &FingerprintDb) -> Vec<u8> {
    let n_el = db.configs.first().map_or(0, |c| c.len());
    let mut out = Vec::new();
    put_f64(&mut out, db.grid_step);
    put_u32(&mut out, db.configs.len() as u32);
    put_u32(&mut out, n_el as u32);
    for c in &db.configs {
        debug_assert_eq!(c.len(), n_el);
        for z in c {
            put_f64(&mut out, z.re);
            put_f64(&mut out, z.im);
        }
    }
    out
}

fn decode_config_set_record(
    bytes: &[u8],
) -> Result<(f64, Vec<Vec<Complex64>>), DecodeError> {
    let mut r = SliceReader::new(bytes);
    let grid_step = r.f64("grid step")?;
    let n_cfg = r.u32("config count")? as usize;
    let n_el = r.u32("element count")? as usize;
    if n_cfg > CONFIG_COUNT_CAP {
        return Err(DecodeError::CapExceeded {
            what: "config count",
            value: n_cfg,
            cap: CONFIG_COUNT_CAP,
        });
    }
    if n_el > TENSOR_ELEMS_CAP {
        return Err(DecodeError::CapExceeded {
            what: "element count",
            value: n_el,
            cap: TENSOR_ELEMS_CAP,
        });
    }
    let mut configs = Vec::with_capacity(n_cfg);
    for _ in 0..n_cfg {
        let flat = r.f64_vec(2 * n_el, "config coefficients")?;
        configs.push(
            flat.chunks_exact(2)
                .map(|p| Complex64::new(p[0], p[1]))
                .collect(),
        );
    }
    r.done()?;
    Ok((grid_step, configs))
}

fn encode_block_record(center: [f64; 2], features: &[f64]) -> Vec<u8> {
    let mut out = Vec::new();
    put_f64(&mut out, center[0]);
    put_f64(&mut out, center[1]);
    for &f in features {
        put_f64(&mut out, f);
    }
    out
}

fn decode_block_record(
    bytes: &[u8],
    n_cfg: usize,
) -> Result<([f64; 2], Vec<f64>), DecodeError> {
    let mut r = SliceReader::new(bytes);
    let center = [r.f64("block x")?, r.f64("block y")?];
    let features = r.f64_vec(n_cfg, "block features")?;
    r.done()?;
    Ok((center, features))
}

pub fn encode_fingerprint_db(db: &FingerprintDb) -> Vec<u8> {
    let header = DatasetHeader {
        format_version: FORMAT_VERSION,
        kind: FINGERPRINT_KIND.into(),
        scene_hash: db.scene_hash.clone(),
        seed: db.seed,
        count: 1 + db.block_centers.len() as u64,
    };
    let mut out = encode_dataset_header(&header);
    let push = |rec: Vec<u8>, out: &mut Vec<u8>| {
        put_u32(out, rec.len() as u32);
        out.extend_from_slice(&rec);
    };
    push(encode_config_set_record(db), &mut out);
    for (center, feats) in db.block_centers.iter().zip(db.features.rows()) {
        push(
            encode_block_record(*center, feats.as_slice().unwrap()),
            &mut out,
        );
    }
    out
}

pub fn decode_fingerprint_db(bytes: &[u8]) -> Result<FingerprintDb, DecodeError> {
    let (header, raw) = split_container(bytes)?;
    if header.kind != FINGERPRINT_KIND {
        return Err(DecodeError::Inconsistent(format!(
            "container kind {:?} is not a fingerprint database",
            header.kind
        )));
    }
    let Some((first, blocks)) = raw.split_first() else {
        return Err(DecodeError::Inconsistent(
            "fingerprint database has no config-set record".into(),
        ));
    };
    if blocks.len() > BLOCK_COUNT_CAP {
        return Err(DecodeError::CapExceeded {
            what: "block count",
            value: blocks.len(),
            cap: BLOCK_COUNT_CAP,
        });
    }
    let (grid_step, configs) = decode_config_set_record(first)?;
    let n_cfg = configs.len();
    blocks
        .len()
        .checked_mul(n_cfg)
        .filter(|&t| t <= TOTAL_ELEMS_CAP)
        .ok_or(DecodeError::CapExceeded {
            what: "feature matrix elements",
            value: usize::MAX,
            cap: TOTAL_ELEMS_CAP,
        })?;
    let mut block_centers = Vec::with_capacity(blocks.len());
    let mut features = Vec::with_capacity(blocks.len().saturating_mul(n_cfg).min(1 << 20));
    for b in blocks {
        let (center, feats) = decode_block_record(b, n_cfg)?;
        block_centers.push(center);
        features.extend(feats);
    }
    let features = Array2::from_shape_vec((block_centers.len(), n_cfg), features)
        .map_err(|e| DecodeError::Inconsistent(format!("feature shape: {e}")))?;
    Ok(FingerprintDb {
        scene_hash: header.scene_hash,
        seed: header.seed,
        grid_step,
        configs,
        block_centers,
        features,
    })
}

pub fn write_fingerprint_db(path: &Path, db: &FingerprintDb) -> Result<(), IoError> {
    std::fs::write(path, encode_fingerprint_db(db)).map_err(file_err(path))
}

pub fn read_fingerprint_db(path: &Path) -> Result<FingerprintDb, IoError> {
    let bytes = std::fs::read(path).map_err(file_err(path))?;
    Ok(decode_fingerprint_db(&bytes)?)
}

// ---------------------------------------------------------------------------
// Metrics log (NDJSON) and CSV export

pub fn append_ndjson<T: serde::Serialize>(path: &Path, record: &T) -> Result<(), IoError> {
    let mut line = serde_json::to_string(record).map_err(|e| IoError::Invalid(e.to_string()))?;
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(file_err(path))?;
    f.write_all(line.as_bytes()).map_err(file_err(path))
}

/// Writes a CSV with `# `-prefixed interpretation comments, a column-name
/// row, and numeric rows.
pub fn write_csv(
    path: &Path,
    comments: &[&str],
    columns: &[&str],
    rows: &[Vec<f64>],
) -> Result<(), IoError> {
    let mut out = String::new();
    for c in comments {
        out.push_str("# ");
        out.push_str(c);
        out.push('\n');
    }
    out.push_str(&columns.join(","));
    out.push('\n');
    for row in rows {
        if row.len() != columns.len() {
            return Err(IoError::Invalid(format!(
                "csv row has {} fields, expected {}",
                row.len(),
                columns.len()
            )));
        }
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.12e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(file_err(path))
}
