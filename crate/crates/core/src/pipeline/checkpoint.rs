//! Self-describing checkpoint files.
//!
//! A text header (one `key value` per line) names every stored array with
//! its shape and offset, followed by a `sha256` line over header and payload,
//! then the payload itself as little-endian `f32`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Checkpoint, PipelineError, Result, TrainConfig};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::numcore::{AdamConfig, AdamState, Tensor};

pub const CHECKPOINT_MAGIC: &str = "gazecon-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

fn corrupt(msg: impl Into<String>) -> PipelineError {
    PipelineError::CorruptCheckpoint(msg.into())
}

fn arrays(state: &Checkpoint) -> Vec<(String, &Tensor<f32>)> {
    let named = state.params.layers.named();
    let mut out: Vec<(String, &Tensor<f32>)> = named.iter().map(|(n, t)| (format!("param.{n}"), *t)).collect();
    for (i, r) in state.params.running.iter().enumerate() {
        out.push((format!("running.{i}.mean"), &r.mean));
        out.push((format!("running.{i}.var"), &r.var));
    }
    for ((n, _), (m, v)) in named.iter().zip(state.adam.first_moment.iter().zip(&state.adam.second_moment)) {
        out.push((format!("adam.m.{n}"), m));
        out.push((format!("adam.v.{n}"), v));
    }
    out
}

/// Serializes `state`; identical states give identical bytes.
pub fn encode_checkpoint(state: &Checkpoint) -> Vec<u8> {
    let mut header = format!("{CHECKPOINT_MAGIC}\nversion {CHECKPOINT_VERSION}\n");
    let mut line = |k: &str, v: &dyn std::fmt::Display| header.push_str(&format!("{k} {v}\n"));
    line("epoch", &state.epoch);
    line("batch_in_epoch", &state.batch_in_epoch);
    line("iteration", &state.iteration);
    line("adam.step", &state.adam.step_count);
    line("adam.beta1", &state.adam.config.beta1);
    line("adam.beta2", &state.adam.config.beta2);
    line("adam.epsilon", &state.adam.config.epsilon);
    for (k, v) in state.params.config.to_kv() {
        line(&format!("encoder.{k}"), &v);
    }
    let json = serde_json::to_string(&state.config).expect("config serializes");
    line("config", &json);

    let mut payload = Vec::new();
    let mut offset = 0usize;
    for (name, t) in arrays(state) {
        let dims = t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        header.push_str(&format!("array {name} [{dims}] {offset} {}\n", t.len()));
        payload.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        offset += t.len();
    }
    header.push_str(&format!("payload {}\n", payload.len()));

    let mut hasher = Sha256::new();
    hasher.update(header.as_bytes());
    hasher.update(&payload);
    let digest = hex::encode(hasher.finalize());
    let mut out = header.into_bytes();
    out.extend_from_slice(format!("sha256 {digest}\n").as_bytes());
    out.extend_from_slice(&payload);
    out
}

struct ArrayEntry {
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let marker = b"\nsha256 ";
    let split = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| corrupt("missing digest line"))?
        + 1;
    let digest_end = split
        + bytes[split..]
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| corrupt("unterminated digest line"))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| corrupt("header is not text"))?;
    let stored = std::str::from_utf8(&bytes[split + "sha256 ".len()..digest_end])
        .map_err(|_| corrupt("digest is not text"))?;
    let payload = &bytes[digest_end + 1..];

    let mut lines = header.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(corrupt("not a checkpoint file"));
    }
    let mut fields: HashMap<&str, &str> = HashMap::new();
    let mut entries: HashMap<&str, ArrayEntry> = HashMap::new();
    for l in lines {
        let (key, rest) = l.split_once(' ').ok_or_else(|| corrupt(format!("malformed line `{l}`")))?;
        if key == "array" {
            let parts: Vec<&str> = rest.split(' ').collect();
            let [name, dims, offset, len] = parts[..] else {
                return Err(corrupt(format!("malformed array line `{l}`")));
            };
            let dims = dims
                .strip_prefix('[')
                .and_then(|d| d.strip_suffix(']'))
                .ok_or_else(|| corrupt("malformed array shape"))?;
            let shape = dims
                .split(',')
                .filter(|d| !d.is_empty())
                .map(|d| d.parse().map_err(|_| corrupt("malformed array shape")))
                .collect::<Result<Vec<usize>>>()?;
            let num = |s: &str| s.parse::<usize>().map_err(|_| corrupt("malformed array extent"));
            entries.insert(
                name,
                ArrayEntry {
                    shape,
                    offset: num(offset)?,
                    len: num(len)?,
                },
            );
        } else {
            fields.insert(key, rest);
        }
    }

    let version = fields.get("version").copied().unwrap_or("");
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(PipelineError::CheckpointVersion {
            found: version.to_string(),
            expected: CHECKPOINT_VERSION,
        });
    }
    let field = |k: &str| fields.get(k).copied().ok_or_else(|| corrupt(format!("missing field `{k}`")));
    let declared: usize = field("payload")?.parse().map_err(|_| corrupt("bad payload size"))?;
    if payload.len() != declared {
        return Err(corrupt(format!(
            "payload holds {} bytes, header declares {declared} (truncated?)",
            payload.len()
        )));
    }
    let mut hasher = Sha256::new();
    hasher.update(header.as_bytes());
    hasher.update(payload);
    if hex::encode(hasher.finalize()) != stored {
        return Err(corrupt("digest mismatch"));
    }

    fn parse<T: std::str::FromStr>(v: &str, k: &str) -> Result<T> {
        v.parse().map_err(|_| corrupt(format!("bad value for `{k}`")))
    }
    let encoder = EncoderConfig::from_kv(|k| fields.get(format!("encoder.{k}").as_str()).copied())?;
    let config: TrainConfig = serde_json::from_str(field("config")?).map_err(|e| corrupt(e.to_string()))?;
    if config.encoder != encoder {
        return Err(corrupt("encoder section disagrees with training config"));
    }

    let mut params = EncoderParams::<f32>::init(&encoder, 0)?;
    let adam_config = AdamConfig {
        beta1: parse(field("adam.beta1")?, "adam.beta1")?,
        beta2: parse(field("adam.beta2")?, "adam.beta2")?,
        epsilon: parse(field("adam.epsilon")?, "adam.epsilon")?,
    };
    let mut adam = AdamState::new(params.layers.named().into_iter().map(|(_, t)| t), adam_config);
    adam.step_count = parse(field("adam.step")?, "adam.step")?;

    let fill = |name: &str, target: &mut Tensor<f32>| -> Result<()> {
        let e = entries.get(name).ok_or_else(|| corrupt(format!("missing array `{name}`")))?;
        if e.shape != target.shape() || e.len != target.len() {
            return Err(corrupt(format!("array `{name}` has shape {:?}, expected {:?}", e.shape, target.shape())));
        }
        let start = e.offset * 4;
        let bytes = payload
            .get(start..start + e.len * 4)
            .ok_or_else(|| corrupt(format!("array `{name}` lies outside the payload")))?;
        for (dst, src) in target.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().expect("4 bytes"));
        }
        Ok(())
    };
    let names: Vec<String> = params.layers.named().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(params.layers.leaves_mut()) {
        fill(&format!("param.{name}"), t)?;
    }
    for (i, r) in params.running.iter_mut().enumerate() {
        fill(&format!("running.{i}.mean"), &mut r.mean)?;
        fill(&format!("running.{i}.var"), &mut r.var)?;
    }
    for (name, (m, v)) in names.iter().zip(adam.first_moment.iter_mut().zip(adam.second_moment.iter_mut())) {
        fill(&format!("adam.m.{name}"), m)?;
        fill(&format!("adam.v.{name}"), v)?;
    }
    if entries.len() != names.len() * 3 + params.running.len() * 2 {
        return Err(corrupt("unexpected extra arrays"));
    }

    Ok(Checkpoint {
        config,
        params,
        adam,
        epoch: parse(field("epoch")?, "epoch")?,
        batch_in_epoch: parse(field("batch_in_epoch")?, "batch_in_epoch")?,
        iteration: parse(field("iteration")?, "iteration")?,
    })
}

pub fn save_checkpoint(state: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(state)).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
