//! Binary file formats and the key=value config reader.
//!
//! * `LLCK` — model checkpoints: magic, version (u16), then per-tensor
//!   records: name length (u16) + UTF-8 name, dtype tag (u8: 0 = f32,
//!   1 = i8), rank (u8), dims (u32 each), and for i8 tensors a f64 scale and
//!   i32 zero-point, followed by the raw little-endian data. Metadata
//!   (architecture, activation grids) travels as reserved-name records, so
//!   save -> load -> save is byte-identical.
//! * `LLPQ` — codebooks: magic, version (u16), L (u32), K (u32), s (u32),
//!   then `s * K * L` f32 centroid values.
//! * `LLRB` — replay buffers: magic, then per-sample records: label (u32),
//!   n (u32), d (u32), `ceil(n / 8)` bitmap bytes, `ceil(d / L)` index
//!   bytes.
//! * `LLDS` — datasets: magic, version (u16), class count (u32), sample
//!   shape (u8 rank + u32 dims), then per class: id (u32), train count
//!   (u32), test count (u32), raw f32 sample data.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::compress::{PQCodebook, PQEncoded};
use crate::data::{ClassData, Dataset, DatasetSpec};
use crate::meta::MetaTrainConfig;
use crate::model::{ArchitectureConfig, ModelState, QParams, QuantizedTensor};
use crate::replay::{ReplayBuffer, SampleBody, StoredSample};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"LLCK";
const CODEBOOK_MAGIC: &[u8; 4] = b"LLPQ";
const BUFFER_MAGIC: &[u8; 4] = b"LLRB";
const DATASET_MAGIC: &[u8; 4] = b"LLDS";
const FORMAT_VERSION: u16 = 1;

/// Reserved record name carrying the architecture. Values are small
/// integers stored as f32: input shape (3), nm/pred channels, conv layers,
/// classes, width multiplier, kernel, stride, quantized flag.
const META_RECORD: &str = "__meta__";

// ---------------------------------------------------------------------------
// low-level record plumbing

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!(
                "truncated file: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, count: usize) -> Result<Vec<f32>> {
        let raw = self.take(count * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u16()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {v}")));
        }
        Ok(())
    }
}

enum TensorRecord {
    F32 { name: String, shape: Vec<usize>, data: Vec<f32> },
    I8 { name: String, shape: Vec<usize>, scale: f64, zero_point: i32, data: Vec<i8> },
}

impl TensorRecord {
    fn write_to(&self, out: &mut Vec<u8>) {
        let (name, shape) = match self {
            TensorRecord::F32 { name, shape, .. } => (name, shape),
            TensorRecord::I8 { name, shape, .. } => (name, shape),
        };
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match self {
            TensorRecord::F32 { data, .. } => {
                out.push(0u8);
                out.push(shape.len() as u8);
                for &d in shape.iter() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            TensorRecord::I8 { scale, zero_point, data, .. } => {
                out.push(1u8);
                out.push(shape.len() as u8);
                for &d in shape.iter() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                out.extend_from_slice(&scale.to_le_bytes());
                out.extend_from_slice(&zero_point.to_le_bytes());
                out.extend(data.iter().map(|&v| v as u8));
            }
        }
    }

    fn read_from(r: &mut Reader) -> Result<Self> {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        match dtype {
            0 => Ok(TensorRecord::F32 { name, shape, data: r.f32_vec(numel)? }),
            1 => {
                let scale = r.f64()?;
                let zero_point = r.i32()?;
                let data = r.take(numel)?.iter().map(|&b| b as i8).collect();
                Ok(TensorRecord::I8 { name, shape, scale, zero_point, data })
            }
            other => Err(Error::Format(format!("unknown dtype tag {other}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// checkpoints

fn meta_record(model: &ModelState) -> TensorRecord {
    let a = model.arch();
    let data = vec![
        a.input_shape[0] as f32,
        a.input_shape[1] as f32,
        a.input_shape[2] as f32,
        a.nm_channels as f32,
        a.pred_channels as f32,
        a.num_conv_layers as f32,
        a.num_classes_max as f32,
        a.width_multiplier,
        a.kernel_size as f32,
        a.stride as f32,
        if model.is_quantized() { 1.0 } else { 0.0 },
    ];
    TensorRecord::F32 { name: META_RECORD.into(), shape: vec![data.len()], data }
}

fn arch_from_meta(data: &[f32]) -> Result<(ArchitectureConfig, bool)> {
    if data.len() != 11 {
        return Err(Error::Format(format!("meta record has {} fields, expected 11", data.len())));
    }
    let arch = ArchitectureConfig {
        input_shape: [data[0] as usize, data[1] as usize, data[2] as usize],
        nm_channels: data[3] as usize,
        pred_channels: data[4] as usize,
        num_conv_layers: data[5] as usize,
        num_classes_max: data[6] as usize,
        width_multiplier: data[7],
        kernel_size: data[8] as usize,
        stride: data[9] as usize,
    };
    Ok((arch, data[10] != 0.0))
}

fn qparams_record(name: String, p: QParams) -> TensorRecord {
    // zero-length i8 tensor: the record exists to carry scale/zero-point
    TensorRecord::I8 { name, shape: vec![0], scale: p.scale, zero_point: p.zero_point, data: vec![] }
}

/// Serialize a model (and its int8 copy, if quantized) to `LLCK` bytes.
pub fn checkpoint_to_bytes(model: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    meta_record(model).write_to(&mut out);
    for (name, tensor) in model.named_tensors() {
        let t = tensor.borrow();
        TensorRecord::F32 { name, shape: t.shape().to_vec(), data: t.data().to_vec() }
            .write_to(&mut out);
    }
    if let Some(q) = model.quantized_extractor() {
        qparams_record("qact.input".into(), q.input).write_to(&mut out);
        let write_q = |name: String, t: &QuantizedTensor, out: &mut Vec<u8>| {
            TensorRecord::I8 {
                name,
                shape: t.shape().to_vec(),
                scale: t.scale(),
                zero_point: t.zero_point(),
                data: t.data().to_vec(),
            }
            .write_to(out);
        };
        for (i, layer) in q.nm_convs.iter().enumerate() {
            write_q(format!("q.nm.conv{i}.weight"), &layer.weight, &mut out);
            qparams_record(format!("qact.nm.conv{i}"), layer.out).write_to(&mut out);
        }
        write_q("q.nm.gate.weight".into(), &q.nm_gate.weight, &mut out);
        qparams_record("qact.nm.gate".into(), q.nm_gate.out).write_to(&mut out);
        for (i, layer) in q.pred_convs.iter().enumerate() {
            write_q(format!("q.pred.conv{i}.weight"), &layer.weight, &mut out);
            qparams_record(format!("qact.pred.conv{i}"), layer.out).write_to(&mut out);
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, model: &ModelState) -> Result<()> {
    let bytes = checkpoint_to_bytes(model);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Rebuild a model from `LLCK` bytes, reattaching the int8 copy when the
/// checkpoint carries one.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;

    let mut records: Vec<TensorRecord> = Vec::new();
    while r.remaining() > 0 {
        records.push(TensorRecord::read_from(&mut r)?);
    }
    let meta = records
        .iter()
        .find_map(|rec| match rec {
            TensorRecord::F32 { name, data, .. } if name == META_RECORD => Some(data.clone()),
            _ => None,
        })
        .ok_or_else(|| Error::Format("checkpoint missing meta record".into()))?;
    let (arch, quantized) = arch_from_meta(&meta)?;

    // Seed is irrelevant: every weight is overwritten below.
    let mut init_rng = stream(0, "checkpoint-load");
    let model = ModelState::init(arch, &mut init_rng)?;

    let find_f32 = |name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
        records
            .iter()
            .find_map(|rec| match rec {
                TensorRecord::F32 { name: n, shape, data } if n == name => {
                    Some((shape.clone(), data.clone()))
                }
                _ => None,
            })
            .ok_or_else(|| Error::Format(format!("checkpoint missing tensor '{name}'")))
    };

    for (name, tensor) in model.named_tensors() {
        let (shape, data) = find_f32(&name)?;
        let mut t = tensor.borrow_mut();
        if shape != t.shape() {
            return Err(Error::Format(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                shape,
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(&data);
    }

    if !quantized {
        return Ok(model);
    }

    let find_i8 = |name: &str| -> Result<(Vec<usize>, f64, i32, Vec<i8>)> {
        records
            .iter()
            .find_map(|rec| match rec {
                TensorRecord::I8 { name: n, shape, scale, zero_point, data } if n == name => {
                    Some((shape.clone(), *scale, *zero_point, data.clone()))
                }
                _ => None,
            })
            .ok_or_else(|| Error::Format(format!("checkpoint missing tensor '{name}'")))
    };
    let find_qparams = |name: &str| -> Result<QParams> {
        let (_, scale, zero_point, _) = find_i8(name)?;
        Ok(QParams { scale, zero_point })
    };

    let mut model = model;
    model.freeze_extractor();
    let layers = model.arch().num_conv_layers;
    let mut nm_convs = Vec::with_capacity(layers);
    for i in 0..layers {
        let (shape, scale, zp, data) = find_i8(&format!("q.nm.conv{i}.weight"))?;
        nm_convs.push(crate::model::QConvLayer {
            weight: QuantizedTensor::from_parts(shape, data, scale, zp)?,
            bias: model.nm_conv_layers()[i].bias.borrow().data().to_vec(),
            out: find_qparams(&format!("qact.nm.conv{i}"))?,
        });
    }
    let (gshape, gscale, gzp, gdata) = find_i8("q.nm.gate.weight")?;
    let nm_gate = crate::model::QFcLayer {
        weight: QuantizedTensor::from_parts(gshape, gdata, gscale, gzp)?,
        bias: model.nm_gate_layer().bias.borrow().data().to_vec(),
        out: find_qparams("qact.nm.gate")?,
    };
    let mut pred_convs = Vec::with_capacity(layers);
    for i in 0..layers {
        let (shape, scale, zp, data) = find_i8(&format!("q.pred.conv{i}.weight"))?;
        pred_convs.push(crate::model::QConvLayer {
            weight: QuantizedTensor::from_parts(shape, data, scale, zp)?,
            bias: model.pred_conv_layers()[i].bias.borrow().data().to_vec(),
            out: find_qparams(&format!("qact.pred.conv{i}"))?,
        });
    }
    model.attach_quantized(crate::model::QuantizedExtractor {
        input: find_qparams("qact.input")?,
        nm_convs,
        nm_gate,
        pred_convs,
    });
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}

// ---------------------------------------------------------------------------
// codebooks

pub fn codebook_to_bytes(cb: &PQCodebook) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CODEBOOK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cb.subvec_len() as u32).to_le_bytes());
    out.extend_from_slice(&(cb.num_centroids() as u32).to_le_bytes());
    out.extend_from_slice(&(cb.columns() as u32).to_le_bytes());
    for v in cb.centroid_data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn codebook_from_bytes(bytes: &[u8]) -> Result<PQCodebook> {
    let mut r = Reader::new(bytes);
    r.magic(CODEBOOK_MAGIC)?;
    r.version()?;
    let subvec_len = r.u32()? as usize;
    let num_centroids = r.u32()? as usize;
    let columns = r.u32()? as usize;
    let centroids = r.f32_vec(columns * num_centroids * subvec_len)?;
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes in codebook", r.remaining())));
    }
    PQCodebook::from_parts(subvec_len, num_centroids, columns, centroids)
}

pub fn save_codebook(path: &Path, cb: &PQCodebook) -> Result<()> {
    fs::File::create(path)?.write_all(&codebook_to_bytes(cb))?;
    Ok(())
}

pub fn load_codebook(path: &Path) -> Result<PQCodebook> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    codebook_from_bytes(&bytes)
}

// ---------------------------------------------------------------------------
// replay buffers

/// Serialize a buffer of fully-compressed samples. Only the `BitPq` body is
/// a defined wire format; raw/bitmap control buffers are in-memory only.
pub fn buffer_to_bytes(buffer: &ReplayBuffer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(BUFFER_MAGIC);
    for sample in buffer.samples() {
        match sample.body() {
            SampleBody::BitPq(s) => out.extend_from_slice(&s.to_bytes()),
            SampleBody::Raw(_) | SampleBody::Bitmap(_) => {
                return Err(Error::Config(
                    "buffer serialization requires the bitpq codec".into(),
                ))
            }
        }
    }
    Ok(out)
}

/// Read a buffer back. `subvec_len` must match the codebook the samples
/// were encoded with (the record stores the non-zero count, not L).
pub fn buffer_from_bytes(bytes: &[u8], subvec_len: usize, capacity_per_class: usize) -> Result<ReplayBuffer> {
    let mut r = Reader::new(bytes);
    r.magic(BUFFER_MAGIC)?;
    let mut buffer = ReplayBuffer::new(capacity_per_class);
    while r.remaining() > 0 {
        let label = r.u32()?;
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        let bitmap = r.take(n.div_ceil(8))?.to_vec();
        let index_count = d.div_ceil(subvec_len);
        let indices = r.take(index_count)?.to_vec();
        let sample = crate::compress::CompressedSample::from_parts(
            label,
            n,
            bitmap,
            PQEncoded::new(indices, d),
        )?;
        buffer.store(StoredSample::from_compressed(sample))?;
    }
    Ok(buffer)
}

pub fn save_buffer(path: &Path, buffer: &ReplayBuffer) -> Result<()> {
    fs::File::create(path)?.write_all(&buffer_to_bytes(buffer)?)?;
    Ok(())
}

pub fn load_buffer(path: &Path, subvec_len: usize, capacity_per_class: usize) -> Result<ReplayBuffer> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    buffer_from_bytes(&bytes, subvec_len, capacity_per_class)
}

// ---------------------------------------------------------------------------
// datasets

pub fn dataset_to_bytes(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(data.classes.len() as u32).to_le_bytes());
    out.extend_from_slice(&(data.meta_train_classes as u32).to_le_bytes());
    out.push(3u8);
    for &d in &data.input_shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for class in &data.classes {
        out.extend_from_slice(&class.class_id.to_le_bytes());
        out.extend_from_slice(&(class.train.len() as u32).to_le_bytes());
        out.extend_from_slice(&(class.test.len() as u32).to_le_bytes());
        for sample in class.train.iter().chain(&class.test) {
            for v in sample.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    r.version()?;
    let num_classes = r.u32()? as usize;
    let meta_train_classes = r.u32()? as usize;
    let rank = r.u8()? as usize;
    if rank != 3 {
        return Err(Error::Format(format!("dataset sample rank {rank}, expected 3")));
    }
    let input_shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let sample_len: usize = input_shape.iter().product();
    let shape = vec![input_shape[0], input_shape[1], input_shape[2]];

    let mut classes = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let class_id = r.u32()?;
        let n_train = r.u32()? as usize;
        let n_test = r.u32()? as usize;
        let read_samples = |count: usize, r: &mut Reader| -> Result<Vec<Tensor>> {
            (0..count)
                .map(|_| Tensor::new(shape.clone(), r.f32_vec(sample_len)?))
                .collect()
        };
        let train = read_samples(n_train, &mut r)?;
        let test = read_samples(n_test, &mut r)?;
        classes.push(ClassData { class_id, train, test });
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes in dataset", r.remaining())));
    }
    Ok(Dataset { input_shape, classes, meta_train_classes })
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    fs::File::create(path)?.write_all(&dataset_to_bytes(data))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    dataset_from_bytes(&bytes)
}

/// Directory source: `class_<id>.f32` files holding a u32 train count, a
/// u32 test count, a u8 rank + u32 dims header, then raw f32 samples.
pub fn load_class_directory(dir: &Path, spec: &DatasetSpec) -> Result<Dataset> {
    let mut classes = Vec::new();
    for id in 0..spec.num_classes {
        let path = dir.join(format!("class_{id}.f32"));
        let mut bytes = Vec::new();
        fs::File::open(&path)
            .map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        let mut r = Reader::new(&bytes);
        let n_train = r.u32()? as usize;
        let n_test = r.u32()? as usize;
        let rank = r.u8()? as usize;
        if rank != 3 {
            return Err(Error::Format(format!("class file rank {rank}, expected 3")));
        }
        let shape = vec![r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        if shape != spec.input_shape.to_vec() {
            return Err(Error::Format(format!(
                "class {id} shape {:?} does not match spec {:?}",
                shape, spec.input_shape
            )));
        }
        let sample_len: usize = shape.iter().product();
        let read = |count: usize, r: &mut Reader| -> Result<Vec<Tensor>> {
            (0..count)
                .map(|_| Tensor::new(shape.clone(), r.f32_vec(sample_len)?))
                .collect()
        };
        let train = read(n_train, &mut r)?;
        let test = read(n_test, &mut r)?;
        classes.push(ClassData { class_id: id as u32, train, test });
    }
    Ok(Dataset {
        input_shape: spec.input_shape,
        classes,
        meta_train_classes: spec.meta_train_classes,
    })
}

// ---------------------------------------------------------------------------
// key=value configs

/// Apply `key=value` lines (# comments allowed) onto a config.
pub fn apply_config_file(path: &Path, cfg: &mut MetaTrainConfig) -> Result<()> {
    let text = fs::read_to_string(path)?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |e: std::num::ParseFloatError| {
            Error::Format(format!("line {}: bad value for {key}: {e}", lineno + 1))
        };
        let bad_int = |e: std::num::ParseIntError| {
            Error::Format(format!("line {}: bad value for {key}: {e}", lineno + 1))
        };
        match key {
            "inner_lr" => cfg.inner_lr = value.parse().map_err(bad)?,
            "outer_lr" => cfg.outer_lr = value.parse().map_err(bad)?,
            "inner_steps" => cfg.inner_steps = value.parse().map_err(bad_int)?,
            "outer_steps" => cfg.outer_steps = value.parse().map_err(bad_int)?,
            "inner_batch" => cfg.inner_batch = value.parse().map_err(bad_int)?,
            "outer_batch" => cfg.outer_batch = value.parse().map_err(bad_int)?,
            "rand_sample_count" => cfg.rand_sample_count = value.parse().map_err(bad_int)?,
            "replay_batch" => cfg.replay_batch = value.parse().map_err(bad_int)?,
            "corpus_cap" => cfg.corpus_cap = value.parse().map_err(bad_int)?,
            "seed" => cfg.seed = value.parse().map_err(bad_int)?,
            other => {
                return Err(Error::Format(format!("line {}: unknown key '{other}'", lineno + 1)))
            }
        }
    }
    Ok(())
}
