//! Binary checkpoint container.
//!
//! ```text
//! offset 0   8 bytes   magic "SBNNCKPT"
//! offset 8   u32 LE    format version
//! offset 12  u32 LE    header length H
//! offset 16  H bytes   UTF-8 JSON header (kind, layer sizes, activations,
//!                      array table, kind-specific fields)
//! then       f64 LE    arrays in header order, each row-major
//! ```
//!
//! Floating-point values that must survive bit-exactly (normalisation
//! constants, log-std, optimiser moments) live in the array section, never in
//! the JSON header.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Layer, MlpModel};
use super::NnError;

pub const MAGIC: &[u8; 8] = b"SBNNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkHeader {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl NetworkHeader {
    pub fn of(model: &MlpModel) -> Self {
        Self {
            layer_sizes: model.layer_sizes(),
            hidden_activation: model.hidden_activation(),
            output_activation: model.output_activation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub networks: Vec<NetworkHeader>,
    pub arrays: Vec<ArrayEntry>,
    #[serde(default)]
    pub fields: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub arrays: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self {
            header: CheckpointHeader {
                kind: kind.to_string(),
                networks: Vec::new(),
                arrays: Vec::new(),
                fields: serde_json::Map::new(),
            },
            arrays: Vec::new(),
        }
    }

    pub fn push_array(&mut self, name: &str, values: Vec<f64>) {
        self.header.arrays.push(ArrayEntry {
            name: name.to_string(),
            len: values.len(),
        });
        self.arrays.push(values);
    }

    pub fn set_field(&mut self, key: &str, value: impl Serialize) {
        self.header
            .fields
            .insert(key.to_string(), serde_json::to_value(value).expect("serialisable field"));
    }

    pub fn field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T, NnError> {
        let value = self
            .header
            .fields
            .get(key)
            .ok_or_else(|| NnError::Checkpoint(format!("missing header field `{key}`")))?;
        serde_json::from_value(value.clone()).map_err(|e| NnError::Checkpoint(format!("field `{key}`: {e}")))
    }

    pub fn array(&self, name: &str) -> Result<&[f64], NnError> {
        self.header
            .arrays
            .iter()
            .position(|a| a.name == name)
            .map(|i| self.arrays[i].as_slice())
            .ok_or_else(|| NnError::Checkpoint(format!("missing array `{name}`")))
    }

    /// Stores every layer as `<prefix>.<i>.weight` (row-major, fan_in x
    /// fan_out) and `<prefix>.<i>.bias`.
    pub fn push_network(&mut self, prefix: &str, model: &MlpModel) {
        self.header.networks.push(NetworkHeader::of(model));
        for (i, l) in model.layers().iter().enumerate() {
            self.push_array(&format!("{prefix}.{i}.weight"), l.weight.iter().copied().collect());
            self.push_array(&format!("{prefix}.{i}.bias"), l.bias.to_vec());
        }
    }

    pub fn network(&self, index: usize, prefix: &str) -> Result<MlpModel, NnError> {
        let net = self
            .header
            .networks
            .get(index)
            .ok_or_else(|| NnError::Checkpoint(format!("missing network {index}")))?;
        let mut layers = Vec::new();
        for (i, w) in net.layer_sizes.windows(2).enumerate() {
            let weight = self.array(&format!("{prefix}.{i}.weight"))?;
            let bias = self.array(&format!("{prefix}.{i}.bias"))?;
            let weight = ndarray::Array2::from_shape_vec((w[0], w[1]), weight.to_vec())
                .map_err(|e| NnError::Checkpoint(format!("layer {i} weight: {e}")))?;
            if bias.len() != w[1] {
                return Err(NnError::Checkpoint(format!("layer {i} bias length {}", bias.len())));
            }
            layers.push(Layer {
                weight,
                bias: ndarray::Array1::from(bias.to_vec()),
            });
        }
        MlpModel::from_layers(layers, net.hidden_activation, net.output_activation)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let body: usize = self.arrays.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * body);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for array in &self.arrays {
            for v in array {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let bad = |m: &str| NnError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let header_end = 16 + header_len;
        if bytes.len() < header_end {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[16..header_end]).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let total: usize = header.arrays.iter().map(|a| a.len).sum();
        if bytes.len() != header_end + 8 * total {
            return Err(bad("array section length does not match header"));
        }
        let mut offset = header_end;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in &header.arrays {
            let values = bytes[offset..offset + 8 * entry.len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset += 8 * entry.len;
            arrays.push(values);
        }
        Ok(Self { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| NnError::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| NnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let bytes = fs::read(path).map_err(|e| NnError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            NnError::Checkpoint(m) => NnError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// `<checkpoint>.meta.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn write_sidecar(path: &Path, meta: &serde_json::Value) -> Result<(), NnError> {
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(meta).expect("json value serialises");
    fs::write(&side, text + "\n").map_err(|e| NnError::io(&side, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bytes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = MlpModel::init(&[6, 10, 15], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let mut ck = Checkpoint::new("test");
        ck.push_network("net", &model);
        ck.push_array("extra", vec![0.1, f64::MIN_POSITIVE, -3.0e300]);
        ck.set_field("mode", "6d");
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.network(0, "net").unwrap(), model);
        assert_eq!(back.field::<String>("mode").unwrap(), "6d");
    }

    #[test]
    fn corrupt_input_rejected() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut bytes = Checkpoint::new("x").to_bytes();
        bytes[8] = 9;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let mut ck = Checkpoint::new("x");
        ck.push_array("a", vec![1.0, 2.0]);
        let mut bytes = ck.to_bytes();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
