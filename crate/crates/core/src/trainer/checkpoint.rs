//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, the
//! UTF-8 manifest, the little-endian `f32` payload, and a trailing SHA-256 of
//! everything before it. The manifest holds `iteration`, `adam_step`, one
//! `config <key> = <value>` line per training config field and one
//! `array <name> f32 <d0>x<d1>.. <byte offset>` line per stored array.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::adam::Adam;
use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"DBLRCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut manifest = format!("iteration {}\nadam_step {}\n", state.iter, state.adam.step);
    for (k, v) in state.config.to_pairs() {
        manifest.push_str(&format!("config {k} = {v}\n"));
    }
    let mut payload = Vec::new();
    let groups: [(&str, &[Tensor<f32>]); 3] = [
        ("param", state.model.params.tensors()),
        ("adam_m", &state.adam.m),
        ("adam_v", &state.adam.v),
    ];
    let names: Vec<&str> = state.model.params.iter().map(|(n, _)| n).collect();
    for (prefix, tensors) in groups {
        for (name, t) in names.iter().zip(tensors) {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let shape = if shape.is_empty() { "scalar".to_string() } else { shape.join("x") };
            manifest.push_str(&format!(
                "array {prefix}:{name} f32 {shape} {}\n",
                payload.len()
            ));
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut out = Vec::with_capacity(20 + manifest.len() + payload.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic bytes)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}, expected {VERSION}")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch (file is corrupt or truncated)"));
    }
    let mlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let manifest = body
        .get(20..20 + mlen)
        .ok_or_else(|| bad("manifest runs past the end of the file"))?;
    let manifest = std::str::from_utf8(manifest).map_err(|_| bad("manifest is not UTF-8"))?;
    let payload = &body[20 + mlen..];

    let mut iter = None;
    let mut adam_step = None;
    let mut config = TrainConfig::default();
    let mut arrays: [Vec<(String, Tensor<f32>)>; 3] = Default::default();
    for line in manifest.lines() {
        let (tag, rest) = line.split_once(' ').ok_or_else(|| bad("malformed manifest line"))?;
        match tag {
            "iteration" => iter = rest.parse::<u64>().ok(),
            "adam_step" => adam_step = rest.parse::<u64>().ok(),
            "config" => {
                let (k, v) = rest.split_once(" = ").ok_or_else(|| bad("malformed config line"))?;
                config.set(k, v)?;
            }
            "array" => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 4 || f[1] != "f32" {
                    return Err(Error::Checkpoint(format!("malformed array entry {rest:?}")));
                }
                let (group, name) = f[0].split_once(':').ok_or_else(|| bad("array name lacks a group"))?;
                let slot = match group {
                    "param" => 0,
                    "adam_m" => 1,
                    "adam_v" => 2,
                    _ => return Err(Error::Checkpoint(format!("unknown array group {group:?}"))),
                };
                let shape: Vec<usize> = if f[2] == "scalar" {
                    Vec::new()
                } else {
                    f[2].split('x')
                        .map(|d| d.parse().map_err(|_| bad("bad array shape")))
                        .collect::<Result<_>>()?
                };
                let offset: usize = f[3].parse().map_err(|_| bad("bad array offset"))?;
                let n: usize = shape.iter().product();
                let raw = payload
                    .get(offset..offset + 4 * n)
                    .ok_or_else(|| bad("array runs past the payload"))?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                arrays[slot].push((name.to_string(), Tensor::from_vec(&shape, data)));
            }
            _ => return Err(Error::Checkpoint(format!("unknown manifest entry {tag:?}"))),
        }
    }
    let iter = iter.ok_or_else(|| bad("missing iteration"))?;
    let adam_step = adam_step.ok_or_else(|| bad("missing adam_step"))?;
    let [params, m, v] = arrays;
    let mut set = ParamSet::new();
    for (name, t) in params {
        set.add(name, t);
    }
    let model = Model::with_params(config.model.clone(), set)?;
    let check = |group: &[(String, Tensor<f32>)]| {
        group.len() == model.params.len()
            && group
                .iter()
                .zip(model.params.iter())
                .all(|((n, t), (pn, pt))| n == pn && t.shape() == pt.shape())
    };
    if !check(&m) || !check(&v) {
        return Err(bad("optimizer moments do not match the parameter layout"));
    }
    let adam = Adam {
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.adam_eps,
        step: adam_step,
        m: m.into_iter().map(|x| x.1).collect(),
        v: v.into_iter().map(|x| x.1).collect(),
    };
    Ok(TrainState {
        iter,
        model,
        adam,
        config,
    })
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(state)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
