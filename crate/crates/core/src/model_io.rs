//! Binary model container and the frame-stream file formats.
//!
//! Model layout:
//!   magic "MGIPMDL1" | u32 version | u64 payload_len | payload | sha256(payload)
//! payload:
//!   u32 topo_len | topology TOML | u32 meta_len | metadata JSON |
//!   u32 tensor_count | tensors
//! tensor:
//!   u32 name_len | name utf8 | u32 rows | u32 cols | rows*cols f32 LE
//!
//! Parameter tensors and batch-norm running statistics are stored by name;
//! loading checks every shape against the topology before accepting.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{NetworkParams, NetworkTopology};
use crate::tensor::TensorBuffer;

pub const MODEL_MAGIC: &[u8; 8] = b"MGIPMDL1";
pub const MODEL_VERSION: u32 = 1;
pub const FRAMES_MAGIC: &[u8; 8] = b"MGIPFRM1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub epochs: usize,
    #[serde(default)]
    pub final_train_loss: f64,
    #[serde(default)]
    pub final_eval_accuracy: f64,
    #[serde(default)]
    pub task_name: Option<String>,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    push_u32(buf, b.len() as u32);
    buf.extend_from_slice(b);
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Validation("model file truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn block(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

fn encode_tensor(buf: &mut Vec<u8>, name: &str, t: &TensorBuffer<f32>) {
    push_bytes(buf, name.as_bytes());
    push_u32(buf, t.rows() as u32);
    push_u32(buf, t.cols() as u32);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_model(
    path: &Path,
    topology: &NetworkTopology,
    params: &NetworkParams<f32>,
    meta: &ModelMeta,
) -> Result<()> {
    let mut payload = Vec::new();
    let topo_toml = toml::to_string(topology).map_err(|e| Error::Validation(format!("topology serialize: {e}")))?;
    push_bytes(&mut payload, topo_toml.as_bytes());
    let meta_json = serde_json::to_string(meta).map_err(|e| Error::Validation(format!("meta serialize: {e}")))?;
    push_bytes(&mut payload, meta_json.as_bytes());
    let named = params.named_tensors();
    let state = params.named_state_tensors();
    push_u32(&mut payload, (named.len() + state.len()) as u32);
    for (name, t) in named.iter().chain(state.iter()) {
        encode_tensor(&mut payload, name, t);
    }
    let digest = Sha256::digest(&payload);
    let mut file = std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    file.write_all(MODEL_MAGIC)?;
    file.write_all(&MODEL_VERSION.to_le_bytes())?;
    file.write_all(&(payload.len() as u64).to_le_bytes())?;
    file.write_all(&payload)?;
    file.write_all(&digest)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(NetworkTopology, NetworkParams<f32>, ModelMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut r = Reader { data: &bytes, pos: 0 };
    if r.take(8)? != MODEL_MAGIC {
        return Err(Error::Validation("not a model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Validation(format!("unsupported model version {version}")));
    }
    let payload_len = r.u64()? as usize;
    let payload = r.take(payload_len)?;
    let stored_digest = r.take(32)?;
    let digest = Sha256::digest(payload);
    if digest.as_slice() != stored_digest {
        return Err(Error::Validation("model payload checksum mismatch".into()));
    }
    let mut p = Reader { data: payload, pos: 0 };
    let topo_toml = std::str::from_utf8(p.block()?)
        .map_err(|_| Error::Validation("topology block is not utf-8".into()))?;
    let topology: NetworkTopology =
        toml::from_str(topo_toml).map_err(|e| Error::Validation(format!("topology parse: {e}")))?;
    topology.validate()?;
    let meta_json = std::str::from_utf8(p.block()?)
        .map_err(|_| Error::Validation("metadata block is not utf-8".into()))?;
    let meta: ModelMeta =
        serde_json::from_str(meta_json).map_err(|e| Error::Validation(format!("metadata parse: {e}")))?;
    let count = p.u32()? as usize;
    let mut tensors: BTreeMap<String, TensorBuffer<f32>> = BTreeMap::new();
    for _ in 0..count {
        let name = std::str::from_utf8(p.block()?)
            .map_err(|_| Error::Validation("tensor name is not utf-8".into()))?
            .to_string();
        let rows = p.u32()? as usize;
        let cols = p.u32()? as usize;
        let raw = p.take(rows * cols * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), TensorBuffer::from_vec(rows, cols, data)?).is_some() {
            return Err(Error::Validation(format!("duplicate tensor {name}")));
        }
    }
    fn fill_one(
        name: &str,
        t: &mut TensorBuffer<f32>,
        tensors: &BTreeMap<String, TensorBuffer<f32>>,
    ) -> Result<()> {
        let stored = tensors
            .get(name)
            .ok_or_else(|| Error::Validation(format!("model is missing tensor {name}")))?;
        if stored.rows() != t.rows() || stored.cols() != t.cols() {
            return Err(Error::Validation(format!(
                "tensor {name} is {}x{}, topology expects {}x{}",
                stored.rows(),
                stored.cols(),
                t.rows(),
                t.cols()
            )));
        }
        t.data_mut().copy_from_slice(stored.data());
        Ok(())
    }
    let mut params = NetworkParams::<f32>::init(&topology, 0)?;
    let mut expected = 0usize;
    for (name, t) in params.named_tensors_mut() {
        expected += 1;
        fill_one(&name, t, &tensors)?;
    }
    for (name, t) in params.named_state_tensors_mut() {
        expected += 1;
        fill_one(&name, t, &tensors)?;
    }
    if expected != tensors.len() {
        return Err(Error::Validation(format!(
            "model carries {} tensors, topology expects {expected}",
            tensors.len()
        )));
    }
    Ok((topology, params, meta))
}

/// sha256 of the whole file, hex-encoded; the determinism checks compare it.
pub fn file_checksum(path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

// ---------------------------------------------------------------------------
// frame-stream files
// ---------------------------------------------------------------------------

/// Self-describing binary frames: magic, u32 dim, u32 count, f32 LE payload.
pub fn write_frames_binary(path: &Path, dim: usize, frames: &[Vec<f32>]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    file.write_all(FRAMES_MAGIC)?;
    file.write_all(&(dim as u32).to_le_bytes())?;
    file.write_all(&(frames.len() as u32).to_le_bytes())?;
    for f in frames {
        if f.len() != dim {
            return Err(Error::dimension("write_frames", format!("frame of {} values, dim {}", f.len(), dim)));
        }
        for v in f {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Plain-text alternative: one frame per line, whitespace-separated reals.
pub fn write_frames_text(path: &Path, frames: &[Vec<f32>]) -> Result<()> {
    let mut out = String::new();
    for f in frames {
        let row: Vec<String> = f.iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FramesFormat {
    Binary,
    Text,
}

/// Reads either format, sniffing the binary magic.
pub fn read_frames(path: &Path) -> Result<(Vec<Vec<f32>>, FramesFormat)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    if bytes.len() >= 8 && &bytes[..8] == FRAMES_MAGIC {
        let mut r = Reader { data: &bytes, pos: 8 };
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        if dim == 0 {
            return Err(Error::Validation("frames file has dim 0".into()));
        }
        let mut frames = Vec::with_capacity(count);
        for _ in 0..count {
            let raw = r.take(dim * 4)?;
            frames.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
        }
        return Ok((frames, FramesFormat::Binary));
    }
    let text = String::from_utf8(bytes).map_err(|_| Error::Validation("frames file is neither binary nor utf-8 text".into()))?;
    let mut frames = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f32>, _> = line.split_whitespace().map(|t| t.parse::<f32>()).collect();
        let row = row.map_err(|e| Error::Validation(format!("frames line {}: {e}", ln + 1)))?;
        frames.push(row);
    }
    if let Some(first) = frames.first() {
        let d = first.len();
        if frames.iter().any(|f| f.len() != d) {
            return Err(Error::Validation("frames file has ragged rows".into()));
        }
    }
    Ok((frames, FramesFormat::Text))
}
