//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MGCK"            4 bytes magic
//! version           u32 (currently 1)
//! header_len        u32
//! header            header_len bytes of JSON: input shape, classes, layers,
//!                   free-form metadata
//! payload           for each parameter layer in order: weights then biases,
//!                   as raw f32
//! checksum          u64 FNV-1a over the payload bytes
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Classifier, Conv2d, Dense, Layer, Network, Padding, Shape3};

const MAGIC: &[u8; 4] = b"MGCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerSpec {
    Conv {
        name: String,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        padding: Padding,
    },
    Dense {
        name: String,
        inputs: usize,
        outputs: usize,
    },
    Relu,
    MaxPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    input: [usize; 3],
    classes: usize,
    layers: Vec<LayerSpec>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Serializes a model (and optional string metadata) to bytes.
pub fn encode(model: &Classifier, metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let s = model.input_shape();
    let layers = model
        .layers()
        .iter()
        .map(|l| match l {
            Layer::Conv(c) => LayerSpec::Conv {
                name: c.name.clone(),
                kernel: c.kernel,
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                padding: c.padding,
            },
            Layer::Dense(d) => LayerSpec::Dense {
                name: d.name.clone(),
                inputs: d.inputs,
                outputs: d.outputs,
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool => LayerSpec::MaxPool,
        })
        .collect();
    let header = Header {
        input: [s.height, s.width, s.channels],
        classes: model.classes(),
        layers,
        metadata: metadata.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut payload = Vec::with_capacity(model.param_count() * 4);
    for (w, b) in model.params() {
        for v in w.iter().chain(b) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&fnv1a(&payload).to_le_bytes());
    out
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<(Classifier, BTreeMap<String, String>)> {
    let corrupt = |why: &str| Error::Checkpoint(why.to_string());
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;

    let mut layers = Vec::with_capacity(header.layers.len());
    let mut needed = 0usize;
    for spec in &header.layers {
        layers.push(match spec {
            LayerSpec::Conv {
                name,
                kernel,
                in_channels,
                out_channels,
                padding,
            } => {
                let n = kernel * kernel * in_channels * out_channels;
                needed += n + out_channels;
                Layer::Conv(Conv2d {
                    name: name.clone(),
                    kernel: *kernel,
                    in_channels: *in_channels,
                    out_channels: *out_channels,
                    padding: *padding,
                    weight: vec![0.0; n],
                    bias: vec![0.0; *out_channels],
                })
            }
            LayerSpec::Dense {
                name,
                inputs,
                outputs,
            } => {
                needed += inputs * outputs + outputs;
                Layer::Dense(Dense {
                    name: name.clone(),
                    inputs: *inputs,
                    outputs: *outputs,
                    weight: vec![0.0; inputs * outputs],
                    bias: vec![0.0; *outputs],
                })
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool => Layer::MaxPool,
        });
    }
    let payload_end = header_end + needed * 4;
    if bytes.len() != payload_end + 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} bytes, found {} (truncated or padded file)",
            payload_end + 8,
            bytes.len()
        )));
    }
    let payload = &bytes[header_end..payload_end];
    let stored = u64::from_le_bytes(bytes[payload_end..].try_into().unwrap());
    if stored != fnv1a(payload) {
        return Err(corrupt("payload checksum mismatch"));
    }
    let [h, w, c] = header.input;
    let mut model = Network::new(Shape3::new(h, w, c), header.classes, layers)
        .map_err(|e| Error::Checkpoint(format!("inconsistent architecture: {e}")))?;
    let mut floats = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    for (w, b) in model.params_mut() {
        for v in w.iter_mut().chain(b.iter_mut()) {
            *v = floats.next().expect("payload length checked");
        }
    }
    Ok((model, header.metadata))
}

pub fn save_checkpoint(model: &Classifier, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint_with_metadata(model, path, &BTreeMap::new())
}

pub fn save_checkpoint_with_metadata(
    model: &Classifier,
    path: impl AsRef<Path>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model, metadata)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Classifier> {
    Ok(load_checkpoint_with_metadata(path)?.0)
}

pub fn load_checkpoint_with_metadata(
    path: impl AsRef<Path>,
) -> Result<(Classifier, BTreeMap<String, String>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_lenet5, build_small_cifar_cnn};

    #[test]
    fn round_trip_is_bit_exact() {
        for model in [
            build_lenet5(10, 7).unwrap(),
            build_small_cifar_cnn(10, 7).unwrap(),
        ] {
            let mut meta = BTreeMap::new();
            meta.insert("config_hash".to_string(), "abc123".to_string());
            let (back, m) = decode(&encode(&model, &meta)).unwrap();
            assert_eq!(m, meta);
            for ((w0, b0), (w1, b1)) in model.params().iter().zip(back.params()) {
                assert!(w0.iter().zip(w1).all(|(a, b)| a.to_bits() == b.to_bits()));
                assert!(b0.iter().zip(b1).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
            assert_eq!(back, model);
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let model = build_lenet5(10, 1).unwrap();
        let bytes = encode(&model, &BTreeMap::new());
        for cut in [3, 11, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::Checkpoint(_))),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn version_mismatch_and_bit_flips_are_rejected() {
        let model = build_lenet5(10, 1).unwrap();
        let mut bytes = encode(&model, &BTreeMap::new());
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 2;
        let err = decode(&wrong_version).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        let n = bytes.len();
        bytes[n - 100] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = build_lenet5(10, 3).unwrap();
        save_checkpoint(&model, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), model);
        assert!(load_checkpoint(dir.path().join("missing")).is_err());
    }
}
