//! Conversion of reminder text into frozen KV banks: tokenize, wrap in
//! templates, trace hidden states through the frozen model, keep
//! descriptor-aligned positions, and project into canonical pre-rotation
//! key/value slots per selected (layer, kv-unit) site.

pub mod io;

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{MiError, Result};
use crate::model::Model;
use crate::routing::{BankRole, SiteBank};
use crate::tokenizer::{ByteTokenizer, Tokenizer};

/// Wrapper template ids. The texts are fixed project assets, version 1;
/// wording is an experimental variable pinned here so banks are
/// reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateId {
    Direct,
    InternalPrinciples,
    HiddenSteeringNote,
}

/// Template texts with a `{DESC}` placeholder for the descriptor.
const TEMPLATE_DIRECT: &str = "{DESC}";
const TEMPLATE_INTERNAL_PRINCIPLES: &str =
    "Internal principles to follow at all times:\n{DESC}\nApply these principles in every reply.";
const TEMPLATE_HIDDEN_STEERING_NOTE: &str = "(steering note: {DESC})";

impl TemplateId {
    pub fn text(self) -> &'static str {
        match self {
            TemplateId::Direct => TEMPLATE_DIRECT,
            TemplateId::InternalPrinciples => TEMPLATE_INTERNAL_PRINCIPLES,
            TemplateId::HiddenSteeringNote => TEMPLATE_HIDDEN_STEERING_NOTE,
        }
    }
}

/// Which traced positions become slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeepPolicy {
    /// Keep positions whose byte span intersects the descriptor span.
    DescriptorSpanOnly,
    /// Keep every position of the wrapped text.
    FullWrapped,
}

/// Build-time description of a bank.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankSpec {
    pub bank_id: String,
    pub role: BankRole,
    pub source_text: String,
    pub templates: Vec<TemplateId>,
    pub keep_policy: KeepPolicy,
    /// Static bank-level prior; query-adaptive terms come from gating.
    #[serde(default)]
    pub prior: f64,
    /// Per-slot relative phases; defaults to all zero (position-agnostic).
    #[serde(default)]
    pub phases: Option<Vec<i64>>,
}

impl BankSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bank_id.is_empty() {
            return Err(MiError::invalid("bank spec: empty bank_id"));
        }
        if self.templates.is_empty() {
            return Err(MiError::invalid("bank spec: at least one template required"));
        }
        if self.role == BankRole::PromptSentinel {
            return Err(MiError::invalid(
                "bank spec: prompt-sentinel role is reserved and never built from text",
            ));
        }
        if !self.prior.is_finite() {
            return Err(MiError::invalid("bank spec: prior must be finite"));
        }
        Ok(())
    }
}

/// Wrap the descriptor in one of the spec's templates; returns the wrapped
/// text plus the half-open byte span of the embedded descriptor.
pub fn wrap_descriptor(spec: &BankSpec, template: TemplateId) -> Result<(String, Range<usize>)> {
    if !spec.templates.contains(&template) {
        return Err(MiError::invalid(format!(
            "template {template:?} not listed in bank spec {}",
            spec.bank_id
        )));
    }
    let text = template.text();
    let marker = "{DESC}";
    let at = text.find(marker).expect("template carries a {DESC} marker");
    let mut wrapped = String::with_capacity(text.len() + spec.source_text.len());
    wrapped.push_str(&text[..at]);
    let start = wrapped.len();
    wrapped.push_str(&spec.source_text);
    let end = wrapped.len();
    wrapped.push_str(&text[at + marker.len()..]);
    Ok((wrapped, start..end))
}

/// Key/value slot matrices for one (layer, unit) site, flat `slots x d_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteSlots {
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

/// Frozen latent memory bank: canonical pre-rotation key slots and value
/// slots per selected site. Immutable after build.
#[derive(Debug, Clone, PartialEq)]
pub struct KVBank {
    bank_id: String,
    role: BankRole,
    fingerprint: String,
    head_dim: usize,
    slot_count: usize,
    prior: f64,
    phases: Vec<i64>,
    sites: BTreeMap<(usize, usize), SiteSlots>,
}

impl KVBank {
    /// Assemble a bank from explicit slot matrices. Used by synthetic
    /// tests and the marker-experiment harness; text-derived banks come
    /// from [`build_bank`].
    #[allow(clippy::too_many_arguments)]
    pub fn from_slots(
        bank_id: impl Into<String>,
        role: BankRole,
        fingerprint: impl Into<String>,
        head_dim: usize,
        prior: f64,
        phases: Vec<i64>,
        sites: BTreeMap<(usize, usize), SiteSlots>,
    ) -> Result<Self> {
        let bank_id = bank_id.into();
        if role == BankRole::PromptSentinel {
            return Err(MiError::invalid("bank: prompt-sentinel role is reserved"));
        }
        if sites.is_empty() {
            return Err(MiError::EmptyBank(format!("bank {bank_id}: no sites")));
        }
        let slot_count = phases.len();
        if slot_count == 0 {
            return Err(MiError::EmptyBank(format!("bank {bank_id}: zero slots")));
        }
        for ((l, u), s) in &sites {
            if s.keys.len() != slot_count * head_dim || s.values.len() != slot_count * head_dim {
                return Err(MiError::invalid(format!(
                    "bank {bank_id}: site ({l},{u}) payload does not match {slot_count} x {head_dim}"
                )));
            }
        }
        Ok(KVBank {
            bank_id,
            role,
            fingerprint: fingerprint.into(),
            head_dim,
            slot_count,
            prior,
            phases,
            sites,
        })
    }

    pub fn bank_id(&self) -> &str {
        &self.bank_id
    }

    pub fn role(&self) -> BankRole {
        self.role
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// M_b: identical across all sites within one bank.
    pub fn slot_count(&self) -> usize {
        self.slot_count
    }

    pub fn prior(&self) -> f64 {
        self.prior
    }

    pub fn phases(&self) -> &[i64] {
        &self.phases
    }

    pub fn site_keys(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sites.keys().copied()
    }

    pub fn has_site(&self, layer: usize, unit: usize) -> bool {
        self.sites.contains_key(&(layer, unit))
    }

    /// Routing view of this bank's slots at one site.
    pub fn site_view(&self, layer: usize, unit: usize) -> Option<SiteBank<'_>> {
        self.sites.get(&(layer, unit)).map(|s| SiteBank {
            bank_id: &self.bank_id,
            role: self.role,
            slots: self.slot_count,
            keys: &s.keys,
            values: &s.values,
            prior: self.prior,
            phases: &self.phases,
        })
    }
}

/// Build a bank from text: for each template, wrap, tokenize, prefill with
/// tracing, select positions per keep policy, and project every kept
/// hidden state at every site. Slots from all templates are concatenated
/// in template order.
pub fn build_bank(model: &Model, spec: &BankSpec, sites: &[(usize, usize)]) -> Result<KVBank> {
    build_bank_at(model, spec, sites, 0)
}

/// `build_bank` with the wrapped text prefilled at absolute rotary offset
/// `base`. Canonical keys are pre-rotation, so with zero phases the offset
/// does not change memory scores; tests exercise exactly that.
pub fn build_bank_at(
    model: &Model,
    spec: &BankSpec,
    sites: &[(usize, usize)],
    base: usize,
) -> Result<KVBank> {
    spec.validate()?;
    let cfg = model.config();
    if sites.is_empty() {
        return Err(MiError::invalid("build_bank: empty site list"));
    }
    for &(l, u) in sites {
        if l >= cfg.n_layers || u >= cfg.n_kv_heads {
            return Err(MiError::invalid(format!(
                "build_bank: site ({l},{u}) out of range"
            )));
        }
    }
    if cfg.vocab_size < ByteTokenizer.vocab_floor() as usize {
        return Err(MiError::invalid(format!(
            "build_bank: model vocab {} cannot embed byte tokens",
            cfg.vocab_size
        )));
    }

    let mut site_map: BTreeMap<(usize, usize), SiteSlots> = sites
        .iter()
        .map(|&s| {
            (
                s,
                SiteSlots {
                    keys: Vec::new(),
                    values: Vec::new(),
                },
            )
        })
        .collect();
    let mut slot_count = 0usize;

    for &template in &spec.templates {
        let (wrapped, span) = wrap_descriptor(spec, template)?;
        let tokens = ByteTokenizer.encode(&wrapped);
        if tokens.is_empty() {
            continue;
        }
        let ids: Vec<u32> = tokens.iter().map(|t| t.id).collect();
        let (_, trace) = model.prefill_at(&ids, base, true)?;
        let trace = trace.expect("trace requested");
        for (p, tok) in tokens.iter().enumerate() {
            let keep = match spec.keep_policy {
                KeepPolicy::FullWrapped => true,
                KeepPolicy::DescriptorSpanOnly => tok.start < span.end && tok.end > span.start,
            };
            if !keep {
                continue;
            }
            for (&(l, u), slots) in site_map.iter_mut() {
                let (k, v) = model.kv_project(l, u, trace.hidden(l, p))?;
                slots.keys.extend(k.iter().map(|x| *x as f32));
                slots.values.extend(v.iter().map(|x| *x as f32));
            }
            slot_count += 1;
        }
    }

    if slot_count == 0 {
        return Err(MiError::EmptyBank(format!(
            "bank {}: descriptor span maps to zero tokens",
            spec.bank_id
        )));
    }
    let phases = match &spec.phases {
        Some(p) => {
            if p.len() != slot_count {
                return Err(MiError::invalid(format!(
                    "bank {}: phase table length {} != slot count {slot_count}",
                    spec.bank_id,
                    p.len()
                )));
            }
            p.clone()
        }
        None => vec![0; slot_count],
    };

    KVBank::from_slots(
        spec.bank_id.clone(),
        spec.role,
        model.fingerprint(),
        cfg.head_dim,
        spec.prior,
        phases,
        site_map,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{synth_model, ModelConfig};

    fn model() -> Model {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_q_heads: 4,
            n_kv_heads: 2,
            head_dim: 4,
            vocab_size: 260,
            rope_theta: 10000.0,
            norm_eps: 1e-6,
            qk_norm_enabled: false,
        };
        synth_model(&cfg, 99).unwrap()
    }

    fn spec(text: &str, templates: Vec<TemplateId>, keep: KeepPolicy) -> BankSpec {
        BankSpec {
            bank_id: "test-bank".into(),
            role: BankRole::Target,
            source_text: text.into(),
            templates,
            keep_policy: keep,
            prior: 0.0,
            phases: None,
        }
    }

    #[test]
    fn wrap_contains_descriptor_verbatim() {
        let s = spec(
            "stay concise",
            vec![TemplateId::Direct, TemplateId::HiddenSteeringNote],
            KeepPolicy::DescriptorSpanOnly,
        );
        for &t in &s.templates {
            let (wrapped, span) = wrap_descriptor(&s, t).unwrap();
            assert_eq!(&wrapped[span.clone()], "stay concise");
        }
        let (a, _) = wrap_descriptor(&s, TemplateId::Direct).unwrap();
        let (b, _) = wrap_descriptor(&s, TemplateId::HiddenSteeringNote).unwrap();
        assert_ne!(a, b);
        assert!(wrap_descriptor(&s, TemplateId::InternalPrinciples).is_err());
    }

    #[test]
    fn slot_counts_add_up() {
        let m = model();
        let sites = [(0usize, 0usize), (1, 1)];
        let one = build_bank(
            &m,
            &spec("abcde", vec![TemplateId::Direct], KeepPolicy::DescriptorSpanOnly),
            &sites,
        )
        .unwrap();
        assert_eq!(one.slot_count(), 5);

        let two = build_bank(
            &m,
            &spec(
                "abcde",
                vec![TemplateId::Direct, TemplateId::HiddenSteeringNote],
                KeepPolicy::DescriptorSpanOnly,
            ),
            &sites,
        )
        .unwrap();
        assert_eq!(two.slot_count(), 10);
    }

    #[test]
    fn full_wrapped_keeps_everything() {
        let m = model();
        let s = spec("xy", vec![TemplateId::HiddenSteeringNote], KeepPolicy::FullWrapped);
        let bank = build_bank(&m, &s, &[(0, 0)]).unwrap();
        let (wrapped, _) = wrap_descriptor(&s, TemplateId::HiddenSteeringNote).unwrap();
        assert_eq!(bank.slot_count(), wrapped.len());
    }

    #[test]
    fn empty_descriptor_is_rejected() {
        let m = model();
        let s = spec("", vec![TemplateId::Direct], KeepPolicy::DescriptorSpanOnly);
        let err = build_bank(&m, &s, &[(0, 0)]).unwrap_err();
        assert!(matches!(err, MiError::EmptyBank(_)));
    }

    #[test]
    fn slots_match_independent_trace_projection() {
        let m = model();
        let s = spec("abc", vec![TemplateId::Direct], KeepPolicy::DescriptorSpanOnly);
        let bank = build_bank(&m, &s, &[(1, 0)]).unwrap();
        // Independent pass: full trace of the same text, manual projection.
        let ids: Vec<u32> = "abc".bytes().map(|b| b as u32).collect();
        let (_, trace) = m.prefill(&ids, true).unwrap();
        let trace = trace.unwrap();
        let view = bank.site_view(1, 0).unwrap();
        for p in 0..3 {
            let (k, v) = m.kv_project(1, 0, trace.hidden(1, p)).unwrap();
            for i in 0..4 {
                assert!((view.keys[p * 4 + i] as f64 - k[i]).abs() < 1e-6);
                assert!((view.values[p * 4 + i] as f64 - v[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn deterministic_build() {
        let m = model();
        let s = spec("determinism", vec![TemplateId::InternalPrinciples], KeepPolicy::DescriptorSpanOnly);
        let a = build_bank(&m, &s, &[(0, 1), (1, 0)]).unwrap();
        let b = build_bank(&m, &s, &[(0, 1), (1, 0)]).unwrap();
        assert_eq!(a, b);
    }
}
