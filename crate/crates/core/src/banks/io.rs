//! MIB1 bank file format.
//!
//! Layout: magic `MIB1`, version, bank id, role, model fingerprint, head
//! dim, slot count, prior, phase table, site list, then per-site key and
//! value payloads (little-endian f32). Round-trips are bit-exact; loading
//! verifies the model fingerprint unless explicitly overridden.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::banks::{KVBank, SiteSlots};
use crate::error::{MiError, Result};
use crate::model::Model;
use crate::routing::BankRole;

const MAGIC: &[u8; 4] = b"MIB1";
const VERSION: u32 = 1;

fn role_code(role: BankRole) -> u32 {
    match role {
        BankRole::Target => 0,
        BankRole::Reference => 1,
        BankRole::Auxiliary => 2,
        BankRole::PromptSentinel => unreachable!("prompt-sentinel banks are never persisted"),
    }
}

fn role_from_code(code: u32) -> Result<BankRole> {
    match code {
        0 => Ok(BankRole::Target),
        1 => Ok(BankRole::Reference),
        2 => Ok(BankRole::Auxiliary),
        _ => Err(MiError::Format(format!("unknown bank role code {code}"))),
    }
}

pub(crate) fn serialize(bank: &KVBank) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let id = bank.bank_id().as_bytes();
    buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
    buf.extend_from_slice(id);
    buf.extend_from_slice(&role_code(bank.role()).to_le_bytes());
    let fp = bank.fingerprint().as_bytes();
    buf.extend_from_slice(&(fp.len() as u32).to_le_bytes());
    buf.extend_from_slice(fp);
    buf.extend_from_slice(&(bank.head_dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(bank.slot_count() as u32).to_le_bytes());
    buf.extend_from_slice(&(bank.prior() as f32).to_le_bytes());
    for p in bank.phases() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let sites: Vec<(usize, usize)> = bank.site_keys().collect();
    buf.extend_from_slice(&(sites.len() as u32).to_le_bytes());
    for &(l, u) in &sites {
        buf.extend_from_slice(&(l as u32).to_le_bytes());
        buf.extend_from_slice(&(u as u32).to_le_bytes());
    }
    for &(l, u) in &sites {
        let view = bank.site_view(l, u).expect("site listed");
        for k in view.keys {
            buf.extend_from_slice(&k.to_le_bytes());
        }
        for v in view.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save(bank: &KVBank, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serialize(bank))?;
    Ok(())
}

/// Load a bank and verify it was built against `model`. Pass
/// `allow_fingerprint_mismatch` to force-load a bank from another model.
pub fn load(path: impl AsRef<Path>, model: &Model, allow_fingerprint_mismatch: bool) -> Result<KVBank> {
    let bytes = fs::read(&path)?;
    parse(&bytes, model, allow_fingerprint_mismatch)
}

pub(crate) fn parse(
    bytes: &[u8],
    model: &Model,
    allow_fingerprint_mismatch: bool,
) -> Result<KVBank> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(MiError::Format(format!("truncated bank file while reading {what}")));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let u32_at = |pos: &mut usize, what: &str| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4, what)?.try_into().unwrap()))
    };

    if take(&mut pos, 4, "magic")? != MAGIC {
        return Err(MiError::Format("bad magic, expected MIB1".to_owned()));
    }
    let version = u32_at(&mut pos, "version")?;
    if version != VERSION {
        return Err(MiError::Format(format!("unsupported MIB1 version {version}")));
    }
    let id_len = u32_at(&mut pos, "bank id length")? as usize;
    if id_len > 4096 {
        return Err(MiError::Format("unreasonable bank id length".to_owned()));
    }
    let bank_id = String::from_utf8(take(&mut pos, id_len, "bank id")?.to_vec())
        .map_err(|_| MiError::Format("bank id is not UTF-8".to_owned()))?;
    let role = role_from_code(u32_at(&mut pos, "role")?)?;
    let fp_len = u32_at(&mut pos, "fingerprint length")? as usize;
    if fp_len > 4096 {
        return Err(MiError::Format("unreasonable fingerprint length".to_owned()));
    }
    let fingerprint = String::from_utf8(take(&mut pos, fp_len, "fingerprint")?.to_vec())
        .map_err(|_| MiError::Format("fingerprint is not UTF-8".to_owned()))?;
    let head_dim = u32_at(&mut pos, "head_dim")? as usize;
    let slot_count = u32_at(&mut pos, "slot count")? as usize;
    let prior =
        f32::from_le_bytes(take(&mut pos, 4, "prior")?.try_into().unwrap()) as f64;
    // Counts are untrusted until the payload is walked; do not reserve.
    let mut phases = Vec::new();
    for _ in 0..slot_count {
        phases.push(i64::from_le_bytes(take(&mut pos, 8, "phase")?.try_into().unwrap()));
    }
    let site_count = u32_at(&mut pos, "site count")? as usize;
    let mut site_list = Vec::new();
    for _ in 0..site_count {
        let l = u32_at(&mut pos, "site layer")? as usize;
        let u = u32_at(&mut pos, "site unit")? as usize;
        site_list.push((l, u));
    }
    let mut sites = BTreeMap::new();
    let payload_elems = slot_count
        .checked_mul(head_dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| MiError::Format("bank payload size overflows".to_owned()))?;
    for &(l, u) in &site_list {
        let read_mat = |pos: &mut usize, what: &str| -> Result<Vec<f32>> {
            let raw = take(pos, payload_elems, what)?;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let keys = read_mat(&mut pos, "site keys")?;
        let values = read_mat(&mut pos, "site values")?;
        sites.insert((l, u), SiteSlots { keys, values });
    }
    if pos != bytes.len() {
        return Err(MiError::Format(format!(
            "bank file has {} trailing bytes",
            bytes.len() - pos
        )));
    }

    let cfg = model.config();
    if head_dim != cfg.head_dim {
        return Err(MiError::Compatibility(format!(
            "bank head_dim {head_dim} != model head_dim {}",
            cfg.head_dim
        )));
    }
    for &(l, u) in &site_list {
        if l >= cfg.n_layers || u >= cfg.n_kv_heads {
            return Err(MiError::Compatibility(format!(
                "bank site ({l},{u}) out of range for this model"
            )));
        }
    }
    if fingerprint != model.fingerprint() && !allow_fingerprint_mismatch {
        return Err(MiError::Compatibility(format!(
            "bank {bank_id} was built against a different model (fingerprint mismatch)"
        )));
    }

    KVBank::from_slots(bank_id, role, fingerprint, head_dim, prior, phases, sites)
}
