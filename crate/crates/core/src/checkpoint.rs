//! Checkpoint container: a UTF-8 `key = value` manifest terminated by one
//! empty line, followed by named arrays. Each array record is
//! `u32 name_len · name bytes · 1-byte dtype tag (0=f32, 1=f64, 2=i64) ·
//! u32 rank · u64 dims · row-major little-endian payload`. Parameters are
//! written as f64, so a save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ModelConfig, Variant};
use crate::nets::ParameterSet;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {reason}")]
    Corrupt { reason: String },
    #[error("manifest key {key:?} is missing or malformed")]
    BadManifest { key: String },
}

/// Manifest plus named parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Ordered `key = value` pairs.
    pub manifest: Vec<(String, String)>,
    pub params: ParameterSet,
}

impl Checkpoint {
    pub fn manifest_get(&self, key: &str) -> Option<&str> {
        self.manifest.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// SHA-256 over the parameter arrays (names, shapes, payload bits).
    pub fn checksum(&self) -> [u8; 32] {
        self.params.checksum()
    }

    pub fn checksum_hex(&self) -> String {
        hex(&self.checksum())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of an RNG stream position, recorded in the manifest for
/// reproducibility audits.
pub fn rng_digest(seed: u64, epoch: usize) -> String {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    hex(&h.finalize()[..8])
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    for (k, v) in &ckpt.manifest {
        assert!(!k.contains('\n') && !v.contains('\n'), "manifest entries are single-line");
        buf.extend_from_slice(format!("{k} = {v}\n").as_bytes());
    }
    buf.push(b'\n');
    for (name, arr) in ckpt.params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(1u8); // f64
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&(arr.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(arr.ncols() as u64).to_le_bytes());
        for v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;

    // Manifest: UTF-8 lines until the first empty line.
    let mut pos = 0usize;
    let mut manifest = Vec::new();
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Corrupt { reason: "unterminated manifest".into() })?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| CheckpointError::Corrupt { reason: "manifest is not UTF-8".into() })?;
        pos += nl + 1;
        if line.is_empty() {
            break;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| CheckpointError::Corrupt { reason: format!("bad manifest line {line:?}") })?;
        manifest.push((k.to_string(), v.to_string()));
    }

    let mut params = ParameterSet::new();
    while pos < bytes.len() {
        let name_len = read_u32(&bytes, &mut pos)? as usize;
        let name = std::str::from_utf8(
            bytes
                .get(pos..pos + name_len)
                .ok_or_else(|| CheckpointError::Corrupt { reason: "truncated name".into() })?,
        )
        .map_err(|_| CheckpointError::Corrupt { reason: "array name is not UTF-8".into() })?
        .to_string();
        pos += name_len;
        let dtype = *bytes
            .get(pos)
            .ok_or_else(|| CheckpointError::Corrupt { reason: "truncated dtype".into() })?;
        pos += 1;
        let rank = read_u32(&bytes, &mut pos)? as usize;
        if rank != 2 {
            return Err(CheckpointError::Corrupt {
                reason: format!("array {name}: expected rank 2, found {rank}"),
            });
        }
        let rows = read_u64(&bytes, &mut pos)? as usize;
        let cols = read_u64(&bytes, &mut pos)? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| CheckpointError::Corrupt { reason: "shape overflow".into() })?;
        let data: Vec<f64> = match dtype {
            0 => read_payload::<4>(&bytes, &mut pos, n)?
                .into_iter()
                .map(|b| f32::from_le_bytes(b) as f64)
                .collect(),
            1 => read_payload::<8>(&bytes, &mut pos, n)?
                .into_iter()
                .map(f64::from_le_bytes)
                .collect(),
            2 => read_payload::<8>(&bytes, &mut pos, n)?
                .into_iter()
                .map(|b| i64::from_le_bytes(b) as f64)
                .collect(),
            other => {
                return Err(CheckpointError::Corrupt {
                    reason: format!("array {name}: unknown dtype tag {other}"),
                })
            }
        };
        let arr = Array2::from_shape_vec((rows, cols), data)
            .map_err(|_| CheckpointError::Corrupt { reason: "payload size mismatch".into() })?;
        params.insert(name, arr);
    }
    Ok(Checkpoint { manifest, params })
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32, CheckpointError> {
    let raw = bytes
        .get(*pos..*pos + 4)
        .ok_or_else(|| CheckpointError::Corrupt { reason: "truncated u32".into() })?;
    *pos += 4;
    Ok(u32::from_le_bytes(raw.try_into().unwrap()))
}

fn read_u64(bytes: &[u8], pos: &mut usize) -> Result<u64, CheckpointError> {
    let raw = bytes
        .get(*pos..*pos + 8)
        .ok_or_else(|| CheckpointError::Corrupt { reason: "truncated u64".into() })?;
    *pos += 8;
    Ok(u64::from_le_bytes(raw.try_into().unwrap()))
}

fn read_payload<const W: usize>(
    bytes: &[u8],
    pos: &mut usize,
    n: usize,
) -> Result<Vec<[u8; W]>, CheckpointError> {
    let end = *pos + n * W;
    let raw = bytes
        .get(*pos..end)
        .ok_or_else(|| CheckpointError::Corrupt { reason: "truncated payload".into() })?;
    *pos = end;
    Ok(raw.chunks_exact(W).map(|c| c.try_into().unwrap()).collect())
}

// ---- model config <-> manifest ----

fn join<T: ToString>(vs: &[T]) -> String {
    vs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> Option<Vec<usize>> {
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

/// Serialize a model config into manifest entries under `model.*`.
pub fn manifest_from_model(cfg: &ModelConfig) -> Vec<(String, String)> {
    let mut m: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: String| m.push((format!("model.{k}"), v));
    put("input_len", cfg.input_len.to_string());
    put("horizon", cfg.horizon.to_string());
    put("n_covariates", cfg.n_covariates.to_string());
    put("conv_kernels", join(&cfg.conv_kernels));
    put("conv_channels", join(&cfg.conv_channels));
    put("enc_attn_dims", join(&cfg.enc_attn_dims));
    put("enc_attn_heads", join(&cfg.enc_attn_heads));
    put("dec_conv_kernels", join(&cfg.dec_conv_kernels));
    put("dec_conv_channels", join(&cfg.dec_conv_channels));
    put("dec_attn_dims", join(&cfg.dec_attn_dims));
    put("dec_attn_heads", join(&cfg.dec_attn_heads));
    put("ffn_ratio", cfg.ffn_ratio.to_string());
    put("codebook_size", cfg.codebook_size.to_string());
    put("d_context", cfg.d_context.to_string());
    put("ctx_conv_kernels", join(&cfg.ctx_conv_kernels));
    put("ctx_conv_channels", join(&cfg.ctx_conv_channels));
    put("ctx_attn_dims", join(&cfg.ctx_attn_dims));
    put("ctx_attn_heads", join(&cfg.ctx_attn_heads));
    put("lstm_hidden", cfg.lstm_hidden.to_string());
    put("disc_hidden", cfg.disc_hidden.to_string());
    put("hyper_hidden", cfg.hyper_hidden.to_string());
    put("hyper_gain", cfg.hyper_gain.to_string());
    put("alpha", cfg.alpha.to_string());
    put("gamma", cfg.gamma.to_string());
    put("temperature", cfg.temperature.to_string());
    put("positives", cfg.positives_per_sample.to_string());
    put("negatives", cfg.negatives_per_positive.to_string());
    put("variant", cfg.variant.as_str().to_string());
    m
}

/// Rebuild a model config from manifest entries.
pub fn model_from_manifest(manifest: &[(String, String)]) -> Result<ModelConfig, CheckpointError> {
    let map: BTreeMap<&str, &str> =
        manifest.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    let get = |k: &str| -> Result<&str, CheckpointError> {
        map.get(format!("model.{k}").as_str())
            .copied()
            .ok_or_else(|| CheckpointError::BadManifest { key: format!("model.{k}") })
    };
    let bad = |k: &str| CheckpointError::BadManifest { key: format!("model.{k}") };
    let num = |k: &str| -> Result<usize, CheckpointError> {
        get(k)?.parse().map_err(|_| bad(k))
    };
    let real = |k: &str| -> Result<f64, CheckpointError> {
        get(k)?.parse().map_err(|_| bad(k))
    };
    let list = |k: &str| -> Result<Vec<usize>, CheckpointError> {
        parse_list(get(k)?).ok_or_else(|| bad(k))
    };
    Ok(ModelConfig {
        input_len: num("input_len")?,
        horizon: num("horizon")?,
        n_covariates: num("n_covariates")?,
        conv_kernels: list("conv_kernels")?,
        conv_channels: list("conv_channels")?,
        enc_attn_dims: list("enc_attn_dims")?,
        enc_attn_heads: list("enc_attn_heads")?,
        dec_conv_kernels: list("dec_conv_kernels")?,
        dec_conv_channels: list("dec_conv_channels")?,
        dec_attn_dims: list("dec_attn_dims")?,
        dec_attn_heads: list("dec_attn_heads")?,
        ffn_ratio: num("ffn_ratio")?,
        codebook_size: num("codebook_size")?,
        d_context: num("d_context")?,
        ctx_conv_kernels: list("ctx_conv_kernels")?,
        ctx_conv_channels: list("ctx_conv_channels")?,
        ctx_attn_dims: list("ctx_attn_dims")?,
        ctx_attn_heads: list("ctx_attn_heads")?,
        lstm_hidden: num("lstm_hidden")?,
        disc_hidden: num("disc_hidden")?,
        hyper_hidden: num("hyper_hidden")?,
        hyper_gain: real("hyper_gain")?,
        alpha: real("alpha")?,
        gamma: real("gamma")?,
        temperature: real("temperature")?,
        positives_per_sample: num("positives")?,
        negatives_per_positive: num("negatives")?,
        variant: Variant::parse(get("variant")?)
            .map_err(|_| bad("variant"))?,
    })
}
