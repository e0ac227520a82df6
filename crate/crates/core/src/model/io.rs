//! MIW1 weight file format.
//!
//! Layout: 4-byte magic `MIW1`, version u32, config block (all
//! [`ModelConfig`](super::ModelConfig) fields as little-endian u32/f32),
//! tensor directory (name length + UTF-8 name + rank + dims + byte offset
//! into the payload section), then row-major little-endian f32 payloads.
//! Serialization always writes tensors in one canonical order, so
//! round-trips are bit-exact and the model fingerprint is the SHA-256 of
//! the serialized bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{MiError, Result};
use crate::model::{LayerWeights, Model, ModelConfig, ModelWeights};

const MAGIC: &[u8; 4] = b"MIW1";
const VERSION: u32 = 1;

struct TensorRef<'a> {
    name: String,
    dims: Vec<usize>,
    data: &'a [f32],
}

fn tensor_list(model: &Model) -> Vec<TensorRef<'_>> {
    let cfg = model.config();
    let w = model.weights();
    let (d, d_h, n_q, n_kv) = (cfg.d_model, cfg.head_dim, cfg.n_q_heads, cfg.n_kv_heads);
    let mut out = Vec::new();
    out.push(TensorRef {
        name: "embed.weight".into(),
        dims: vec![cfg.vocab_size, d],
        data: &w.embed,
    });
    fn push<'a>(
        out: &mut Vec<TensorRef<'a>>,
        layer: usize,
        field: &str,
        dims: Vec<usize>,
        data: &'a [f32],
    ) {
        out.push(TensorRef {
            name: format!("layers.{layer}.{field}.weight"),
            dims,
            data,
        });
    }
    for (l, lw) in w.layers.iter().enumerate() {
        push(&mut out, l, "attn_norm", vec![d], &lw.attn_norm);
        push(&mut out, l, "wq", vec![n_q * d_h, d], &lw.wq);
        push(&mut out, l, "wk", vec![n_kv * d_h, d], &lw.wk);
        push(&mut out, l, "wv", vec![n_kv * d_h, d], &lw.wv);
        push(&mut out, l, "wo", vec![d, n_q * d_h], &lw.wo);
        if let (Some(q), Some(k)) = (&lw.q_norm, &lw.k_norm) {
            push(&mut out, l, "q_norm", vec![d_h], q);
            push(&mut out, l, "k_norm", vec![d_h], k);
        }
        push(&mut out, l, "mlp_norm", vec![d], &lw.mlp_norm);
        push(&mut out, l, "w_gate", vec![w.d_ff, d], &lw.w_gate);
        push(&mut out, l, "w_up", vec![w.d_ff, d], &lw.w_up);
        push(&mut out, l, "w_down", vec![d, w.d_ff], &lw.w_down);
    }
    out.push(TensorRef {
        name: "final_norm.weight".into(),
        dims: vec![d],
        data: &w.final_norm,
    });
    out.push(TensorRef {
        name: "unembed.weight".into(),
        dims: vec![cfg.vocab_size, d],
        data: &w.unembed,
    });
    out
}

pub(crate) fn serialize(model: &Model) -> Vec<u8> {
    let cfg = model.config();
    let tensors = tensor_list(model);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.n_layers,
        cfg.d_model,
        cfg.n_q_heads,
        cfg.n_kv_heads,
        cfg.head_dim,
        cfg.vocab_size,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(cfg.rope_theta as f32).to_le_bytes());
    buf.extend_from_slice(&(cfg.norm_eps as f32).to_le_bytes());
    buf.extend_from_slice(&(cfg.qk_norm_enabled as u32).to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for t in &tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for dim in &t.dims {
            buf.extend_from_slice(&(*dim as u32).to_le_bytes());
        }
        buf.extend_from_slice(&offset.to_le_bytes());
        offset += (t.data.len() * 4) as u64;
    }
    for t in &tensors {
        for v in t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// SHA-256 over the canonical serialized form, hex-encoded.
pub(crate) fn fingerprint(model: &Model) -> String {
    let bytes = serialize(model);
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serialize(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let bytes = fs::read(&path)?;
    parse(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(MiError::Format(format!("truncated file while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct DirEntry {
    dims: Vec<usize>,
    offset: u64,
}

pub(crate) fn parse(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(MiError::Format("bad magic, expected MIW1".to_owned()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(MiError::Format(format!("unsupported MIW1 version {version}")));
    }
    let config = ModelConfig {
        n_layers: r.u32("n_layers")? as usize,
        d_model: r.u32("d_model")? as usize,
        n_q_heads: r.u32("n_q_heads")? as usize,
        n_kv_heads: r.u32("n_kv_heads")? as usize,
        head_dim: r.u32("head_dim")? as usize,
        vocab_size: r.u32("vocab_size")? as usize,
        rope_theta: r.f32("rope_theta")? as f64,
        norm_eps: r.f32("norm_eps")? as f64,
        qk_norm_enabled: r.u32("qk_norm_enabled")? != 0,
    };
    config.validate()?;

    let count = r.u32("tensor count")? as usize;
    let mut dir: BTreeMap<String, DirEntry> = BTreeMap::new();
    for i in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        if name_len > 4096 {
            return Err(MiError::Format(format!("tensor {i}: unreasonable name length")));
        }
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| MiError::Format(format!("tensor {i}: name is not UTF-8")))?;
        let rank = r.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(MiError::Format(format!("tensor {name}: unreasonable rank")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("tensor dim")? as usize);
        }
        let offset = r.u64("tensor offset")?;
        if dir.insert(name.clone(), DirEntry { dims, offset }).is_some() {
            return Err(MiError::Format(format!("duplicate tensor {name}")));
        }
    }
    let payload = &bytes[r.pos..];

    let read_tensor = |name: &str, want_dims: &[usize]| -> Result<Vec<f32>> {
        let entry = dir
            .get(name)
            .ok_or_else(|| MiError::Format(format!("missing tensor {name}")))?;
        if entry.dims != want_dims {
            return Err(MiError::Format(format!(
                "tensor {name}: shape {:?}, expected {:?}",
                entry.dims, want_dims
            )));
        }
        let n: usize = want_dims.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 4;
        if end > payload.len() {
            return Err(MiError::Format(format!("truncated tensor {name}")));
        }
        Ok(payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };

    let (d, d_h, n_q, n_kv) = (
        config.d_model,
        config.head_dim,
        config.n_q_heads,
        config.n_kv_heads,
    );
    // d_ff is not a config field; recover it from the first gate tensor.
    let gate0 = dir
        .get("layers.0.w_gate.weight")
        .ok_or_else(|| MiError::Format("missing tensor layers.0.w_gate.weight".to_owned()))?;
    if gate0.dims.len() != 2 || gate0.dims[1] != d || gate0.dims[0] == 0 {
        return Err(MiError::Format(
            "tensor layers.0.w_gate.weight: invalid shape".to_owned(),
        ));
    }
    let d_ff = gate0.dims[0];

    let embed = read_tensor("embed.weight", &[config.vocab_size, d])?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let t = |field: &str| format!("layers.{l}.{field}.weight");
        layers.push(LayerWeights {
            attn_norm: read_tensor(&t("attn_norm"), &[d])?,
            wq: read_tensor(&t("wq"), &[n_q * d_h, d])?,
            wk: read_tensor(&t("wk"), &[n_kv * d_h, d])?,
            wv: read_tensor(&t("wv"), &[n_kv * d_h, d])?,
            wo: read_tensor(&t("wo"), &[d, n_q * d_h])?,
            q_norm: config
                .qk_norm_enabled
                .then(|| read_tensor(&t("q_norm"), &[d_h]))
                .transpose()?,
            k_norm: config
                .qk_norm_enabled
                .then(|| read_tensor(&t("k_norm"), &[d_h]))
                .transpose()?,
            mlp_norm: read_tensor(&t("mlp_norm"), &[d])?,
            w_gate: read_tensor(&t("w_gate"), &[d_ff, d])?,
            w_up: read_tensor(&t("w_up"), &[d_ff, d])?,
            w_down: read_tensor(&t("w_down"), &[d, d_ff])?,
        });
    }
    let final_norm = read_tensor("final_norm.weight", &[d])?;
    let unembed = read_tensor("unembed.weight", &[config.vocab_size, d])?;

    // Every directory entry must be an expected tensor.
    let expected = 3 + config.n_layers * if config.qk_norm_enabled { 11 } else { 9 };
    if dir.len() != expected {
        let known: Vec<String> = {
            let m = Model::new(
                config,
                ModelWeights {
                    embed: embed.clone(),
                    layers: layers.clone(),
                    final_norm: final_norm.clone(),
                    unembed: unembed.clone(),
                    d_ff,
                },
            )?;
            tensor_list(&m).iter().map(|t| t.name.clone()).collect()
        };
        for name in dir.keys() {
            if !known.contains(name) {
                return Err(MiError::Format(format!("unexpected tensor {name}")));
            }
        }
        return Err(MiError::Format(format!(
            "tensor count {} does not match header expectation {expected}",
            dir.len()
        )));
    }

    Model::new(
        config,
        ModelWeights {
            embed,
            layers,
            final_norm,
            unembed,
            d_ff,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::synth_model;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_q_heads: 4,
            n_kv_heads: 2,
            head_dim: 4,
            vocab_size: 64,
            rope_theta: 10000.0,
            norm_eps: 1e-6,
            qk_norm_enabled: true,
        }
    }

    #[test]
    fn roundtrip_bit_identical() {
        let model = synth_model(&cfg(), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.miw");
        save(&model, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(model.weights(), loaded.weights());
        assert_eq!(model.config(), loaded.config());
        assert_eq!(model.fingerprint(), loaded.fingerprint());
        // saving the loaded model reproduces the same bytes
        let a = fs::read(&path).unwrap();
        let b = serialize(&loaded);
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_magic_rejected() {
        let model = synth_model(&cfg(), 1).unwrap();
        let mut bytes = serialize(&model);
        bytes[0] = b'X';
        let err = parse(&bytes).unwrap_err();
        assert!(matches!(err, MiError::Format(_)));
    }

    #[test]
    fn truncated_payload_names_tensor() {
        let model = synth_model(&cfg(), 1).unwrap();
        let mut bytes = serialize(&model);
        bytes.truncate(bytes.len() - 8);
        let err = parse(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated tensor"), "got: {msg}");
        assert!(msg.contains("unembed.weight"), "got: {msg}");
    }

    #[test]
    fn tensor_count_mismatch_names_tensor() {
        let model = synth_model(&cfg(), 1).unwrap();
        let bytes = serialize(&model);
        // Header = magic(4) + version(4) + config(9 * 4) = 44 bytes, then
        // the tensor count. Drop the first directory entry
        // ("embed.weight") and decrement the count.
        let mut out = bytes[..44].to_vec();
        let count = u32::from_le_bytes(bytes[44..48].try_into().unwrap());
        out.extend_from_slice(&(count - 1).to_le_bytes());
        let name_len = u32::from_le_bytes(bytes[48..52].try_into().unwrap()) as usize;
        let entry_len = 4 + name_len + 4 + 4 * 2 + 8; // name, rank(2 dims), offset
        out.extend_from_slice(&bytes[48 + entry_len..]);
        let err = parse(&out).unwrap_err();
        assert!(err.to_string().contains("embed.weight"), "got: {err}");
    }
}
