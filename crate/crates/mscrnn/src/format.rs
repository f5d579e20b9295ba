//! Shared file-format helpers: atomic writes and the versioned model file.
//!
//! Model file layout (all little-endian):
//!   "MSCM" | version u16 | meta_len u32 | meta JSON | n_float u32 |
//!   f64 payload (flattened float model) | has_quant u8 |
//!   [quantized section: per-tensor shape, scale_exp, i16 payload] |
//!   CRC32 of everything before it.

use crate::cascade::MSCModel;
use crate::emi::EMIModel;
use crate::fastgrnn::{FastGRNNParams, Readout};
use crate::quant::{Q15Tensor, QWeight, QuantizedCell, QuantizedModel, QuantizedReadout};
use crate::radar::{Cursor, DataError};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const MODEL_MAGIC: &[u8; 4] = b"MSCM";
pub const MODEL_VERSION: u16 = 1;

/// Architecture descriptor stored alongside the weights; enough to rebuild
/// the parameter structures before unflattening the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub input_dim: usize,
    pub lower_hidden: usize,
    pub lower_rank: Option<usize>,
    pub upper_hidden: usize,
    pub upper_rank: Option<usize>,
    pub num_source_classes: usize,
    pub class_names: Vec<String>,
    pub k: usize,
    pub p_hat: f64,
    pub omega: usize,
    pub stride: usize,
    pub window_len: usize,
}

impl ModelMeta {
    pub fn from_model(m: &MSCModel, omega: usize, stride: usize, window_len: usize) -> ModelMeta {
        ModelMeta {
            input_dim: m.lower.cell.input_dim,
            lower_hidden: m.lower.cell.hidden_dim,
            lower_rank: m.lower.cell.w.low_rank(),
            upper_hidden: m.upper_cell.hidden_dim,
            upper_rank: m.upper_cell.w.low_rank(),
            num_source_classes: m.num_source_classes(),
            class_names: default_class_names(m.num_source_classes()),
            k: m.lower.k,
            p_hat: m.lower.p_hat,
            omega,
            stride,
            window_len,
        }
    }

    /// Zero-weight model with this architecture, ready for unflattening.
    pub fn empty_model(&self) -> MSCModel {
        MSCModel {
            lower: EMIModel {
                cell: FastGRNNParams::zeros(self.input_dim, self.lower_hidden, self.lower_rank),
                readout: Readout::zeros(2, self.lower_hidden),
                k: self.k,
                p_hat: self.p_hat,
            },
            upper_cell: FastGRNNParams::zeros(self.lower_hidden, self.upper_hidden, self.upper_rank),
            upper_readout: Readout::zeros(self.num_source_classes, self.upper_hidden),
        }
    }
}

pub fn default_class_names(num_source_classes: usize) -> Vec<String> {
    let mut names = vec!["Clutter".to_string()];
    for i in 0..num_source_classes {
        names.push(match i {
            0 => "Human".to_string(),
            1 => "NonHuman".to_string(),
            _ => format!("Source{}", i),
        });
    }
    names
}

fn put_tensor(buf: &mut Vec<u8>, t: &Q15Tensor) {
    buf.push(t.shape.len() as u8);
    for d in &t.shape {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&t.scale_exp.to_le_bytes());
    for v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_qweight(buf: &mut Vec<u8>, w: &QWeight) {
    match w {
        QWeight::Dense(t) => {
            buf.push(0);
            put_tensor(buf, t);
        }
        QWeight::LowRank { left, right } => {
            buf.push(1);
            put_tensor(buf, left);
            put_tensor(buf, right);
        }
    }
}

fn put_qcell(buf: &mut Vec<u8>, c: &QuantizedCell) {
    buf.extend_from_slice(&(c.input_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(c.hidden_dim as u32).to_le_bytes());
    put_qweight(buf, &c.w);
    put_qweight(buf, &c.u);
    put_tensor(buf, &c.b_z);
    put_tensor(buf, &c.b_h);
    buf.extend_from_slice(&c.zeta_q15.to_le_bytes());
    buf.extend_from_slice(&c.nu_q15.to_le_bytes());
}

fn take_tensor(c: &mut Cursor, what: &str) -> Result<Q15Tensor, DataError> {
    let ndim = c.u8(what)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(c.u32(what)? as usize);
    }
    let scale_exp = c.u32(what)?;
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(c.i16(what)?);
    }
    Ok(Q15Tensor {
        shape,
        scale_exp,
        data,
    })
}

fn take_qweight(c: &mut Cursor, what: &str) -> Result<QWeight, DataError> {
    match c.u8(what)? {
        0 => Ok(QWeight::Dense(take_tensor(c, what)?)),
        1 => Ok(QWeight::LowRank {
            left: take_tensor(c, what)?,
            right: take_tensor(c, what)?,
        }),
        t => Err(DataError::Parse(format!(
            "unknown weight tag {} in {}",
            t, what
        ))),
    }
}

fn take_qcell(c: &mut Cursor, what: &str) -> Result<QuantizedCell, DataError> {
    Ok(QuantizedCell {
        input_dim: c.u32(what)? as usize,
        hidden_dim: c.u32(what)? as usize,
        w: take_qweight(c, what)?,
        u: take_qweight(c, what)?,
        b_z: take_tensor(c, what)?,
        b_h: take_tensor(c, what)?,
        zeta_q15: c.i16(what)?,
        nu_q15: c.i16(what)?,
    })
}

pub fn save_model(
    path: &Path,
    model: &MSCModel,
    meta: &ModelMeta,
    quant: Option<&QuantizedModel>,
) -> Result<(), DataError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let meta_bytes =
        serde_json::to_vec(meta).map_err(|e| DataError::Parse(e.to_string()))?;
    buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    let flat = model.flatten();
    buf.extend_from_slice(&(flat.len() as u32).to_le_bytes());
    for v in &flat {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    match quant {
        None => buf.push(0),
        Some(q) => {
            buf.push(1);
            put_qcell(&mut buf, &q.lower_cell);
            put_tensor(&mut buf, &q.lower_readout.w);
            put_tensor(&mut buf, &q.lower_readout.b);
            put_qcell(&mut buf, &q.upper_cell);
            put_tensor(&mut buf, &q.upper_readout.w);
            put_tensor(&mut buf, &q.upper_readout.b);
            buf.extend_from_slice(&(q.k as u32).to_le_bytes());
            buf.extend_from_slice(&q.p_hat.to_le_bytes());
            put_tensor(&mut buf, &q.p_hat_logit);
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    write_atomic(path, &buf)?;
    Ok(())
}

pub fn load_model(
    path: &Path,
) -> Result<(MSCModel, ModelMeta, Option<QuantizedModel>), DataError> {
    let buf = std::fs::read(path)?;
    if buf.len() < 4 || &buf[..4] != MODEL_MAGIC {
        return Err(DataError::BadMagic);
    }
    if buf.len() < 8 {
        return Err(DataError::Truncated("header".into()));
    }
    let body = &buf[..buf.len() - 4];
    let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(DataError::ChecksumMismatch { stored, computed });
    }
    let mut c = Cursor { buf: body, pos: 4 };
    let version = c.u16("version")?;
    if version != MODEL_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let meta_len = c.u32("meta length")? as usize;
    let meta: ModelMeta = serde_json::from_slice(c.take(meta_len, "meta")?)
        .map_err(|e| DataError::Parse(e.to_string()))?;
    let n_float = c.u32("float count")? as usize;
    let mut flat = Vec::with_capacity(n_float);
    for _ in 0..n_float {
        flat.push(c.f64("float payload")?);
    }
    let mut model = meta.empty_model();
    if model.flatten().len() != n_float {
        return Err(DataError::Parse(format!(
            "float payload has {} values, architecture needs {}",
            n_float,
            model.flatten().len()
        )));
    }
    model.unflatten_from(&flat);
    let quant = match c.u8("quant flag")? {
        0 => None,
        1 => Some(QuantizedModel {
            lower_cell: take_qcell(&mut c, "lower cell")?,
            lower_readout: QuantizedReadout {
                w: take_tensor(&mut c, "lower readout")?,
                b: take_tensor(&mut c, "lower readout")?,
            },
            upper_cell: take_qcell(&mut c, "upper cell")?,
            upper_readout: QuantizedReadout {
                w: take_tensor(&mut c, "upper readout")?,
                b: take_tensor(&mut c, "upper readout")?,
            },
            k: c.u32("k")? as usize,
            p_hat: c.f64("p_hat")?,
            p_hat_logit: take_tensor(&mut c, "p_hat logit")?,
        }),
        t => return Err(DataError::Parse(format!("unknown quant flag {}", t))),
    };
    if c.pos != body.len() {
        return Err(DataError::Parse(format!(
            "{} trailing bytes after model payload",
            body.len() - c.pos
        )));
    }
    Ok((model, meta, quant))
}

/// Writes `bytes` to `path` via a temp file in the same directory + rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile_in(dir)?;
    tmp.1.write_all(bytes)?;
    tmp.1.sync_all()?;
    drop(tmp.1);
    std::fs::rename(&tmp.0, path)
}

fn tempfile_in(dir: &Path) -> std::io::Result<(std::path::PathBuf, std::fs::File)> {
    // Simple unique name; collisions only matter within one process tree.
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let name = format!(".tmp-{}-{}", std::process::id(), n);
    let p = dir.join(name);
    let f = std::fs::File::create(&p)?;
    Ok((p, f))
}
