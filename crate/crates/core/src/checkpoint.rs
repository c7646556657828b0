//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, `u32` LE version, `u64` LE header length, JSON
//! header (kind, config, tensor table), then every tensor as contiguous
//! little-endian `f32` values in table order.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderModel, Mlp};
use crate::error::{Error, Result};
use crate::tcn::{TcnConfig, TcnModel};
use crate::tensor::{Parameterized, Tensor};

pub const MAGIC: &[u8; 8] = b"AMPZCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in values (not bytes) from the start of the blob section.
    pub offset: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config: serde_json::Value,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

pub trait Checkpointable: Parameterized + Sized {
    const KIND: &'static str;
    type Config: Serialize + DeserializeOwned;

    fn config(&self) -> Self::Config;
    /// A model of the right shape; every tensor is overwritten on load.
    fn from_config(config: &Self::Config) -> Result<Self>;

    fn buffers(&self) -> Vec<(String, &Tensor)> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        Vec::new()
    }
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn to_bytes<M: Checkpointable>(model: &M) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0;
    for (name, t) in model.params().into_iter().chain(model.buffers()) {
        for &v in &t.data {
            let f = v as f32;
            if f as f64 != v {
                return Err(ck(format!("{name} holds {v}, which is not exactly representable as f32")));
            }
            blob.extend_from_slice(&f.to_le_bytes());
        }
        tensors.push(TensorEntry { name, shape: t.shape.clone(), offset, count: t.len() });
        offset += t.len();
    }
    let header = Header {
        kind: M::KIND.to_string(),
        config: serde_json::to_value(model.config()).map_err(|e| ck(e.to_string()))?,
        dtype: "f32le".into(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| ck(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Parses the header and returns it with the blob section.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ck("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(ck(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let rest = &bytes[20..];
    if hlen > rest.len() {
        return Err(ck("truncated header"));
    }
    let header: Header = serde_json::from_slice(&rest[..hlen]).map_err(|e| ck(format!("bad header: {e}")))?;
    if header.dtype != "f32le" {
        return Err(ck(format!("unsupported dtype {}", header.dtype)));
    }
    Ok((header, &rest[hlen..]))
}

pub fn from_bytes<M: Checkpointable>(bytes: &[u8]) -> Result<M> {
    let (header, blob) = read_header(bytes)?;
    if header.kind != M::KIND {
        return Err(ck(format!("checkpoint holds a {} model, expected {}", header.kind, M::KIND)));
    }
    let config: M::Config = serde_json::from_value(header.config).map_err(|e| ck(format!("bad config: {e}")))?;
    let mut model = M::from_config(&config)?;
    let total: usize = header.tensors.iter().map(|t| t.count).sum();
    if blob.len() != total * 4 {
        return Err(ck(format!("blob has {} bytes, header describes {}", blob.len(), total * 4)));
    }
    let fill = |name: &str, t: &mut Tensor| -> Result<()> {
        let e = header.tensors.iter().find(|e| e.name == name).ok_or_else(|| ck(format!("missing tensor {name}")))?;
        if e.shape != t.shape || e.count != t.len() || e.offset + e.count > total {
            return Err(ck(format!("tensor {name}: stored shape {:?}, expected {:?}", e.shape, t.shape)));
        }
        let bytes = &blob[e.offset * 4..(e.offset + e.count) * 4];
        for (v, b) in t.data.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64;
        }
        Ok(())
    };
    let mut expected = 0;
    for (name, t) in model.params_mut() {
        fill(&name, t)?;
        expected += 1;
    }
    for (name, t) in model.buffers_mut() {
        fill(&name, t)?;
        expected += 1;
    }
    if expected != header.tensors.len() {
        return Err(ck(format!("checkpoint has {} tensors, model has {expected}", header.tensors.len())));
    }
    Ok(model)
}

pub fn save<M: Checkpointable>(model: &M, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load<M: Checkpointable>(path: &Path) -> Result<M> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

impl Checkpointable for TcnModel {
    const KIND: &'static str = "tcn_film";
    type Config = TcnConfig;

    fn config(&self) -> TcnConfig {
        self.config
    }

    fn from_config(config: &TcnConfig) -> Result<Self> {
        TcnModel::zeros(*config)
    }
}

impl Checkpointable for EncoderModel {
    const KIND: &'static str = "effects_encoder";
    type Config = EncoderConfig;

    fn config(&self) -> EncoderConfig {
        self.config.clone()
    }

    fn from_config(config: &EncoderConfig) -> Result<Self> {
        EncoderModel::zeros(config.clone())
    }

    fn buffers(&self) -> Vec<(String, &Tensor)> {
        EncoderModel::buffers(self)
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        EncoderModel::buffers_mut(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Checkpointable for Mlp {
    const KIND: &'static str = "mlp";
    type Config = MlpShape;

    fn config(&self) -> MlpShape {
        MlpShape { input: self.input_dim(), hidden: self.w1.shape[0], classes: self.classes() }
    }

    fn from_config(c: &MlpShape) -> Result<Self> {
        if c.input == 0 || c.hidden == 0 || c.classes == 0 {
            return Err(ck("mlp dimensions must be positive"));
        }
        Ok(Mlp::init(c.input, c.hidden, c.classes, 0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tcn_round_trip_is_exact() {
        let cfg = TcnConfig { n_blocks: 1, layers_per_block: 2, channels: 3, kernel_size: 3, dilation_growth: 2, embed_dim: 4, n_devices: 3 };
        let m = TcnModel::init(cfg, 9).unwrap();
        let bytes = to_bytes(&m).unwrap();
        let back: TcnModel = from_bytes(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn encoder_round_trip_keeps_running_stats() {
        let cfg = EncoderConfig { channels: vec![2, 4], kernel_size: 5, embed_dim: 3 };
        let mut m = EncoderModel::init(cfg, 1).unwrap();
        let clips: Vec<Vec<f64>> = (0..2).map(|k| (0..32).map(|i| ((i * (k + 2)) as f64 * 0.3).sin()).collect()).collect();
        m.forward_train(&clips).unwrap();
        let back: EncoderModel = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert_eq!(back.buffers(), m.buffers());
        assert_eq!(back.embed(&clips).unwrap(), m.embed(&clips).unwrap());
    }

    #[test]
    fn rejects_wrong_kind_and_corruption() {
        let m = Mlp::init(4, 5, 2, 0);
        let bytes = to_bytes(&m).unwrap();
        assert!(matches!(from_bytes::<TcnModel>(&bytes), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes::<Mlp>(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes::<Mlp>(&bad), Err(Error::Checkpoint(_))));
        let back: Mlp = from_bytes(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
    }

    #[test]
    fn non_f32_values_rejected() {
        let mut m = Mlp::init(2, 2, 2, 0);
        m.b1.data[0] = 0.1;
        assert!(matches!(to_bytes(&m), Err(Error::Checkpoint(_))));
    }
}
