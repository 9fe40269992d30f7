//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `BANETCKP`, a `u32` format version, a `u64`
//! header length, a JSON header, then raw little-endian scalars. The header
//! echoes the network config, the step counter, the scalar width, the Adam
//! hyper-parameters and a manifest of named tensors with byte offsets into
//! the data section. Every manifest entry is validated before any tensor is read.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{BanetParams, NetworkConfig};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::params::Module;
use crate::tensor::ConvParams;
use crate::train::{AdamState, TrainOptions};
use crate::Scalar;

pub const MAGIC: &[u8; 8] = b"BANETCKP";
pub const VERSION: u32 = 1;

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub config: NetworkConfig,
    pub step: u64,
    pub params: BanetParams<T>,
    pub adam: AdamState<T>,
    pub options: Option<TrainOptions>,
}

impl<T: Scalar> Checkpoint<T> {
    /// A fresh, untrained checkpoint around `params`.
    pub fn untrained(config: NetworkConfig, params: BanetParams<T>) -> Self {
        let adam = AdamState::new(params.num_params());
        Self {
            config,
            step: 0,
            params,
            adam,
            options: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: NetworkConfig,
    step: u64,
    scalar_bits: u32,
    adam: AdamHeader,
    options: Option<TrainOptions>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    dims: Vec<usize>,
    /// Byte offset into the data section.
    offset: u64,
}

fn tensor_list<T: Scalar>(ck: &Checkpoint<T>) -> Vec<(String, Vec<usize>, &[T])> {
    let mut out = Vec::new();
    for (name, c) in ck.params.named_convs() {
        out.push((format!("{name}.weight"), c.weight.shape().dims().to_vec(), c.weight.data()));
        if let Some(b) = &c.bias {
            out.push((format!("{name}.bias"), vec![b.len()], b.as_slice()));
        }
    }
    out.push(("adam.m".into(), vec![ck.adam.m.len()], ck.adam.m.as_slice()));
    out.push(("adam.v".into(), vec![ck.adam.v.len()], ck.adam.v.as_slice()));
    out
}

pub fn encode<T: Scalar>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let width = (T::BITS / 8) as u64;
    let list = tensor_list(ck);
    let mut offset = 0u64;
    let tensors = list
        .iter()
        .map(|(name, dims, data)| {
            let e = Entry {
                name: name.clone(),
                dims: dims.clone(),
                offset,
            };
            offset += data.len() as u64 * width;
            e
        })
        .collect();
    let header = Header {
        config: ck.config.clone(),
        step: ck.step,
        scalar_bits: T::BITS,
        adam: AdamHeader {
            t: ck.adam.t,
            beta1: ck.adam.beta1,
            beta2: ck.adam.beta2,
            eps: ck.adam.eps,
        },
        options: ck.options,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in &list {
        for &v in data.iter() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

/// Decodes a checkpoint; with `expected` set, the stored config must match it.
pub fn decode<T: Scalar>(bytes: &[u8], expected: Option<&NetworkConfig>) -> Result<Checkpoint<T>> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported format version {version}, expected {VERSION}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let body = &bytes[20..];
    if hlen > body.len() as u64 {
        return Err(bad(format!("truncated: header claims {hlen} bytes, {} present", body.len())));
    }
    let (json, data) = body.split_at(hlen as usize);
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    if header.scalar_bits != T::BITS {
        return Err(bad(format!("stored {}-bit scalars, requested {}-bit", header.scalar_bits, T::BITS)));
    }
    if let Some(want) = expected {
        let diff = want.diff(&header.config);
        if !diff.is_empty() {
            return Err(Error::ConfigMismatch(diff));
        }
    }
    header.config.validate()?;

    let mut params = BanetParams::<T>::build(&header.config, &mut |s| ConvParams::zeros(s))?;
    let n = params.num_params();
    let mut want: Vec<(String, Vec<usize>)> = params
        .named_convs()
        .into_iter()
        .flat_map(|(name, c)| {
            let mut v = vec![(format!("{name}.weight"), c.weight.shape().dims().to_vec())];
            if let Some(b) = &c.bias {
                v.push((format!("{name}.bias"), vec![b.len()]));
            }
            v
        })
        .collect();
    want.push(("adam.m".into(), vec![n]));
    want.push(("adam.v".into(), vec![n]));

    // validate the whole manifest before touching the data section
    if header.tensors.len() != want.len() {
        return Err(bad(format!("manifest lists {} tensors, network has {}", header.tensors.len(), want.len())));
    }
    let width = (T::BITS / 8) as u64;
    let mut ranges = Vec::with_capacity(want.len());
    let mut cursor = 0u64;
    for (e, (name, dims)) in header.tensors.iter().zip(&want) {
        if &e.name != name || &e.dims != dims {
            return Err(bad(format!("manifest entry {} {:?} does not match expected {name} {dims:?}", e.name, e.dims)));
        }
        let len = dims.iter().product::<usize>() as u64 * width;
        if e.offset != cursor || e.offset.checked_add(len).is_none_or(|end| end > data.len() as u64) {
            return Err(bad(format!(
                "tensor {name}: offset {} invalid (expected {cursor}, data section {} bytes)",
                e.offset,
                data.len()
            )));
        }
        ranges.push(e.offset as usize..(e.offset + len) as usize);
        cursor += len;
    }
    if cursor != data.len() as u64 {
        return Err(bad(format!("{} trailing bytes after tensor data", data.len() as u64 - cursor)));
    }

    let read = |r: &std::ops::Range<usize>| -> Vec<T> { data[r.clone()].chunks_exact(width as usize).map(T::read_le).collect() };
    let mut it = ranges.iter();
    for (_, c) in params.named_convs_mut() {
        let w = read(it.next().expect("validated"));
        c.weight.data_mut().copy_from_slice(&w);
        if let Some(b) = &mut c.bias {
            *b = read(it.next().expect("validated"));
        }
    }
    let adam = AdamState {
        m: read(it.next().expect("validated")),
        v: read(it.next().expect("validated")),
        t: header.adam.t,
        beta1: header.adam.beta1,
        beta2: header.adam.beta2,
        eps: header.adam.eps,
    };
    Ok(Checkpoint {
        config: header.config,
        step: header.step,
        params,
        adam,
        options: header.options,
    })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    write_atomic(path, &encode(ck)?)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&std::fs::read(path)?, None)
}

/// Loads and insists on a particular network config; mismatches report every differing field.
pub fn load_checkpoint_expecting<T: Scalar>(path: &Path, cfg: &NetworkConfig) -> Result<Checkpoint<T>> {
    decode(&std::fs::read(path)?, Some(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::build_network;

    fn sample() -> Checkpoint<f32> {
        let cfg = NetworkConfig {
            base_channels: 4,
            num_bams: 2,
            ..NetworkConfig::tiny()
        };
        let mut ck = Checkpoint::untrained(cfg.clone(), build_network(&cfg).unwrap());
        ck.step = 7;
        ck.adam.t = 7;
        ck.adam.m.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 1e-3);
        ck.options = Some(TrainOptions::default());
        ck
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let a = encode(&ck).unwrap();
        let back = decode::<f32>(&a, None).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode(&back).unwrap(), a);
    }

    #[test]
    fn config_mismatch_lists_fields() {
        let ck = sample();
        let other = NetworkConfig { num_bams: 3, seed: 4, ..ck.config.clone() };
        match decode::<f32>(&encode(&ck).unwrap(), Some(&other)) {
            Err(Error::ConfigMismatch(d)) => assert_eq!(d.len(), 2, "{d:?}"),
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn damage_is_detected() {
        let bytes = encode(&sample()).unwrap();
        assert!(decode::<f32>(&bytes[..bytes.len() - 4], None).is_err());
        assert!(decode::<f64>(&bytes, None).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode::<f32>(&wrong, None).is_err());
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(decode::<f32>(&v2, None).unwrap_err().to_string().contains("version"));
    }
}
