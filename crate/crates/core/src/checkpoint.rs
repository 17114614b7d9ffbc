//! Binary checkpoint container.
//!
//! Layout: magic `GCPC`, format version (u32 LE), header length (u64 LE),
//! a JSON header `{component, config, extra, tensors: [{name, shape,
//! byte_offset}], payload_checksum}`, then every tensor as little-endian f64
//! in table order. Byte offsets are relative to the start of the payload; the
//! checksum is FNV-1a over the payload bytes, as 16 hex digits.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adam::{AdamConfig, AdamState};
use crate::data::{DatasetMeta, NormStats};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::policy::{Agent, PolicyConfig, PolicyLayout, PolicyNet};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::trajnet::{ModelDims, TrajNet, TrajNetConfig};

pub const MAGIC: &[u8; 4] = b"GCPC";
pub const FORMAT_VERSION: u32 = 1;
pub const TRAJNET_COMPONENT: &str = "TRAJNET";
pub const POLICY_COMPONENT: &str = "POLICY";

const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    component: String,
    config: Value,
    extra: Value,
    tensors: Vec<TensorEntry>,
    payload_checksum: String,
}

/// Decoded checkpoint contents, tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub component: String,
    pub config: Value,
    pub extra: Value,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

fn format_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

fn fnv1a(bytes: impl Iterator<Item = u8>, mut h: u64) -> u64 {
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(ckpt.tensors.len());
    let mut payload = Vec::new();
    for (name, t) in &ckpt.tensors {
        entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), byte_offset: payload.len() as u64 });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        component: ckpt.component.clone(),
        config: ckpt.config.clone(),
        extra: ckpt.extra.clone(),
        tensors: entries,
        payload_checksum: format!("{:016x}", fnv1a(payload.iter().copied(), FNV_OFFSET)),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREAMBLE {
        return Err(format_error(path, format!("file is {} bytes, shorter than the preamble", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_error(path, format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(format_error(path, format!("unsupported format version {version}, expected {FORMAT_VERSION}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = (PREAMBLE as u64)
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| format_error(path, format!("header length {header_len} exceeds file size {}", bytes.len())))?
        as usize;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| format_error(path, format!("header is not valid JSON: {e}")))?;
    let payload = &bytes[header_end..];
    let mut seen = HashSet::new();
    let mut expected = 0u64;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        if !seen.insert(entry.name.as_str()) {
            return Err(format_error(path, format!("tensor {} listed twice", entry.name)));
        }
        if entry.byte_offset != expected {
            return Err(format_error(
                path,
                format!("tensor {} at byte offset {}, expected {expected}", entry.name, entry.byte_offset),
            ));
        }
        let n = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format_error(path, format!("tensor {} shape overflows", entry.name)))?;
        let end = expected + 8 * n as u64;
        if end > payload.len() as u64 {
            return Err(format_error(
                path,
                format!("truncated: tensor {} needs bytes up to {end}, payload has {}", entry.name, payload.len()),
            ));
        }
        let data = payload[expected as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        expected = end;
    }
    if expected != payload.len() as u64 {
        return Err(format_error(path, format!("{} trailing payload bytes", payload.len() as u64 - expected)));
    }
    let checksum = format!("{:016x}", fnv1a(payload.iter().copied(), FNV_OFFSET));
    if checksum != header.payload_checksum {
        return Err(format_error(
            path,
            format!("payload checksum {checksum} does not match recorded {}", header.payload_checksum),
        ));
    }
    Ok(Checkpoint { component: header.component, config: header.config, extra: header.extra, tensors })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes)
}

/// FNV-1a over the little-endian bytes of the named parameters.
pub fn param_checksum(params: &ParamSet<f64>, include: impl Fn(&str) -> bool) -> u64 {
    params
        .iter()
        .filter(|(n, _)| include(n))
        .fold(FNV_OFFSET, |h, (name, t)| fnv1a(name.bytes().chain(t.data().iter().flat_map(|v| v.to_le_bytes())), h))
}

pub fn encoder_checksum(model: &TrajNet<f64>) -> u64 {
    param_checksum(&model.params, TrajNet::<f64>::is_encoder_param)
}

fn push_params(out: &mut Vec<(String, Tensor<f64>)>, prefix: &str, params: &ParamSet<f64>) {
    out.extend(params.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())));
}

fn push_adam(out: &mut Vec<(String, Tensor<f64>)>, params: &ParamSet<f64>, adam: &AdamState<f64>) {
    for ((name, m), v) in params.names().iter().zip(&adam.m).zip(&adam.v) {
        out.push((format!("adam.m.{name}"), m.clone()));
        out.push((format!("adam.v.{name}"), v.clone()));
    }
}

fn from_value<T: for<'de> Deserialize<'de>>(path: &Path, what: &str, v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| format_error(path, format!("{what}: {e}")))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("plain data serializes")
}

/// Load every parameter of `params` from tensors named `prefix + name`,
/// consuming them from `pool`. Missing names and shape mismatches are
/// format errors.
fn fill_params(
    path: &Path,
    params: &mut ParamSet<f64>,
    prefix: &str,
    pool: &mut Vec<(String, Tensor<f64>)>,
) -> Result<()> {
    let names: Vec<String> = params.names().to_vec();
    for name in names {
        let key = format!("{prefix}{name}");
        let idx = pool
            .iter()
            .position(|(n, _)| *n == key)
            .ok_or_else(|| format_error(path, format!("missing tensor {key}")))?;
        let (_, t) = pool.swap_remove(idx);
        params.set(&name, t).map_err(|e| format_error(path, format!("tensor {key}: {e}")))?;
    }
    Ok(())
}

fn take_adam(
    path: &Path,
    params: &ParamSet<f64>,
    extra: &Value,
    pool: &mut Vec<(String, Tensor<f64>)>,
) -> Result<Option<AdamState<f64>>> {
    let Some(info) = extra.get("adam").filter(|v| !v.is_null()) else {
        return Ok(None);
    };
    let config: AdamConfig = from_value(path, "adam config", &info["config"])?;
    let step: u64 = from_value(path, "adam step", &info["step"])?;
    let mut m = ParamSet::new();
    let mut v = ParamSet::new();
    for (name, t) in params.iter() {
        m.insert(name, Tensor::zeros(t.shape().to_vec()));
        v.insert(name, Tensor::zeros(t.shape().to_vec()));
    }
    fill_params(path, &mut m, "adam.m.", pool)?;
    fill_params(path, &mut v, "adam.v.", pool)?;
    Ok(Some(AdamState { config, step, m: m.tensors().to_vec(), v: v.tensors().to_vec() }))
}

fn adam_info(adam: Option<&AdamState<f64>>) -> Value {
    adam.map_or(Value::Null, |a| serde_json::json!({ "config": to_value(&a.config), "step": a.step }))
}

fn expect_component(path: &Path, ckpt: &Checkpoint, want: &str) -> Result<()> {
    if ckpt.component != want {
        return Err(format_error(path, format!("component {:?}, expected {want:?}", ckpt.component)));
    }
    Ok(())
}

fn no_leftovers(path: &Path, pool: &[(String, Tensor<f64>)]) -> Result<()> {
    match pool.first() {
        Some((name, _)) => Err(format_error(path, format!("unexpected tensor {name}"))),
        None => Ok(()),
    }
}

/// Everything needed to rebuild a trained TrajNet and feed it raw data.
#[derive(Debug, Clone)]
pub struct TrajNetCheckpoint {
    pub model: TrajNet<f64>,
    pub adam: Option<AdamState<f64>>,
    pub stats: NormStats,
    pub dataset: DatasetMeta,
    pub epoch: usize,
}

pub fn trajnet_checkpoint(ckpt: &TrajNetCheckpoint) -> Checkpoint {
    let mut tensors = Vec::new();
    push_params(&mut tensors, "", &ckpt.model.params);
    if let Some(adam) = &ckpt.adam {
        push_adam(&mut tensors, &ckpt.model.params, adam);
    }
    Checkpoint {
        component: TRAJNET_COMPONENT.into(),
        config: to_value(&ckpt.model.config),
        extra: serde_json::json!({
            "dims": to_value(&ckpt.model.dims),
            "stats": to_value(&ckpt.stats),
            "dataset": to_value(&ckpt.dataset),
            "epoch": ckpt.epoch,
            "encoder_checksum": format!("{:016x}", encoder_checksum(&ckpt.model)),
            "adam": adam_info(ckpt.adam.as_ref()),
        }),
        tensors,
    }
}

fn build_trajnet(path: &Path, config: &Value, dims: &Value, pool: &mut Vec<(String, Tensor<f64>)>, prefix: &str) -> Result<TrajNet<f64>> {
    let config: TrajNetConfig = from_value(path, "trajnet config", config)?;
    let dims: ModelDims = from_value(path, "model dims", dims)?;
    let mut model = TrajNet::new(config, dims, &mut RngStream::new(0))
        .map_err(|e| format_error(path, format!("cannot rebuild TrajNet: {e}")))?;
    fill_params(path, &mut model.params, prefix, pool)?;
    Ok(model)
}

pub fn save_trajnet(path: &Path, ckpt: &TrajNetCheckpoint) -> Result<()> {
    write_checkpoint(path, &trajnet_checkpoint(ckpt))
}

pub fn load_trajnet(path: &Path) -> Result<TrajNetCheckpoint> {
    let ckpt = read_checkpoint(path)?;
    expect_component(path, &ckpt, TRAJNET_COMPONENT)?;
    let mut pool = ckpt.tensors;
    let model = build_trajnet(path, &ckpt.config, &ckpt.extra["dims"], &mut pool, "")?;
    let adam = take_adam(path, &model.params, &ckpt.extra, &mut pool)?;
    no_leftovers(path, &pool)?;
    Ok(TrajNetCheckpoint {
        model,
        adam,
        stats: from_value(path, "stats", &ckpt.extra["stats"])?,
        dataset: from_value(path, "dataset", &ckpt.extra["dataset"])?,
        epoch: from_value(path, "epoch", &ckpt.extra["epoch"])?,
    })
}

/// A trained policy together with the frozen TrajNet it was trained on.
#[derive(Debug, Clone)]
pub struct PolicyCheckpoint {
    pub agent: Agent,
    pub adam: Option<AdamState<f64>>,
    pub dataset: DatasetMeta,
    pub epoch: usize,
}

pub fn policy_checkpoint(ckpt: &PolicyCheckpoint) -> Checkpoint {
    let agent = &ckpt.agent;
    let mut tensors = Vec::new();
    push_params(&mut tensors, "policy.", &agent.policy.params);
    if let Some(adam) = &ckpt.adam {
        push_adam(&mut tensors, &agent.policy.params, adam);
    }
    let trajnet = agent.trajnet.as_ref().map_or(Value::Null, |t| {
        push_params(&mut tensors, "trajnet.", &t.params);
        serde_json::json!({
            "config": to_value(&t.config),
            "dims": to_value(&t.dims),
            "encoder_checksum": format!("{:016x}", encoder_checksum(t)),
        })
    });
    Checkpoint {
        component: POLICY_COMPONENT.into(),
        config: to_value(&agent.policy.config),
        extra: serde_json::json!({
            "layout": to_value(&agent.policy.layout),
            "cond_norm": to_value(&agent.policy.cond_norm),
            "stats": to_value(&agent.stats),
            "dataset": to_value(&ckpt.dataset),
            "epoch": ckpt.epoch,
            "trajnet": trajnet,
            "adam": adam_info(ckpt.adam.as_ref()),
        }),
        tensors,
    }
}

pub fn save_policy(path: &Path, ckpt: &PolicyCheckpoint) -> Result<()> {
    write_checkpoint(path, &policy_checkpoint(ckpt))
}

pub fn load_policy(path: &Path) -> Result<PolicyCheckpoint> {
    let ckpt = read_checkpoint(path)?;
    expect_component(path, &ckpt, POLICY_COMPONENT)?;
    let config: PolicyConfig = from_value(path, "policy config", &ckpt.config)?;
    let layout: PolicyLayout = from_value(path, "policy layout", &ckpt.extra["layout"])?;
    let mut policy = PolicyNet::new(config, layout, &mut RngStream::new(0))
        .map_err(|e| format_error(path, format!("cannot rebuild policy: {e}")))?;
    policy.cond_norm = from_value(path, "conditioning statistics", &ckpt.extra["cond_norm"])?;
    let mut pool = ckpt.tensors;
    fill_params(path, &mut policy.params, "policy.", &mut pool)?;
    let adam = take_adam(path, &policy.params, &ckpt.extra, &mut pool)?;
    let info = &ckpt.extra["trajnet"];
    let trajnet = if info.is_null() {
        None
    } else {
        let t = build_trajnet(path, &info["config"], &info["dims"], &mut pool, "trajnet.")?;
        let want: String = from_value(path, "encoder checksum", &info["encoder_checksum"])?;
        let got = format!("{:016x}", encoder_checksum(&t));
        if got != want {
            return Err(format_error(path, format!("encoder checksum {got} does not match recorded {want}")));
        }
        Some(t)
    };
    no_leftovers(path, &pool)?;
    if policy.config.conditioning.needs_trajnet() != trajnet.is_some() {
        return Err(format_error(path, "conditioning mode and embedded TrajNet disagree"));
    }
    let agent = Agent { trajnet, policy, stats: from_value(path, "stats", &ckpt.extra["stats"])? };
    Ok(PolicyCheckpoint {
        agent,
        adam,
        dataset: from_value(path, "dataset", &ckpt.extra["dataset"])?,
        epoch: from_value(path, "epoch", &ckpt.extra["epoch"])?,
    })
}
