//! Calibration-time diagnostics tracing and the two-stage unit/layer
//! selection, producing a frozen, serializable selector artifact.
//!
//! Stage 1 scores every candidate (layer, unit) site from calibration
//! traces; stage 2 keeps the top-k units per layer, aggregates kept unit
//! scores into layer scores, and keeps the top-m layers. Tracing runs in
//! observation mode (steering gains zeroed), so model outputs are exactly
//! the plain model's.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::banks::KVBank;
use crate::error::{MiError, Result};
use crate::model::{Model, ModelConfig, ProbeSample};
use crate::numerics::argmax;
use crate::routing::{attend_mixture, memory_scores, BankRole, QueryAtSite, RoutingGains};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainRule {
    Constant(f64),
    /// Layer score divided by the max selected layer score; falls back to
    /// 1.0 when the max is not positive.
    NormalizedScore,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub candidate_layers: Vec<usize>,
    /// Candidate kv-units per layer (dense models: heads).
    pub candidate_units: BTreeMap<usize, Vec<usize>>,
    /// Units kept per layer.
    pub k: usize,
    /// Layers kept.
    pub m: usize,
    /// Weight of mean target-bank mass in the unit score.
    pub xi: f64,
    /// Weight of mean prompt-bank mass (subtracted).
    pub chi: f64,
    pub aggregation: Aggregation,
    pub gain_rule: GainRule,
    /// Greedy continuation length per calibration prompt.
    pub calib_steps: usize,
    /// Target-bank mass above this counts as engagement (diagnostics only).
    pub engagement_threshold: f64,
}

impl SelectorConfig {
    /// All layers and units as candidates, defaults elsewhere:
    /// xi = chi = 0.5, mean aggregation, constant gain 1.0, 16 steps.
    pub fn defaults_for(cfg: &ModelConfig, k: usize, m: usize) -> Self {
        let candidate_layers: Vec<usize> = (0..cfg.n_layers).collect();
        let candidate_units = candidate_layers
            .iter()
            .map(|&l| (l, (0..cfg.n_kv_heads).collect()))
            .collect();
        SelectorConfig {
            candidate_layers,
            candidate_units,
            k,
            m,
            xi: 0.5,
            chi: 0.5,
            aggregation: Aggregation::Mean,
            gain_rule: GainRule::Constant(1.0),
            calib_steps: 16,
            engagement_threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 {
            return Err(MiError::invalid("selector: budgets k and m must be >= 1"));
        }
        if self.candidate_layers.is_empty() {
            return Err(MiError::invalid("selector: no candidate layers"));
        }
        for l in &self.candidate_layers {
            match self.candidate_units.get(l) {
                Some(units) if !units.is_empty() => {}
                _ => {
                    return Err(MiError::invalid(format!(
                        "selector: layer {l} has no candidate units"
                    )));
                }
            }
        }
        if !self.xi.is_finite() || !self.chi.is_finite() {
            return Err(MiError::invalid("selector: xi/chi must be finite"));
        }
        if self.calib_steps == 0 {
            return Err(MiError::invalid("selector: calib_steps must be >= 1"));
        }
        Ok(())
    }

    /// Hash of the serialized config, recorded in the artifact.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("selector config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }
}

/// Accumulated per-site calibration statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SiteStats {
    margin_sum: f64,
    target_mass_sum: f64,
    reference_mass_sum: f64,
    prompt_mass_sum: f64,
    engagement: u64,
    samples: u64,
}

impl SiteStats {
    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn mean_margin(&self) -> f64 {
        self.margin_sum / self.samples.max(1) as f64
    }

    pub fn mean_target_mass(&self) -> f64 {
        self.target_mass_sum / self.samples.max(1) as f64
    }

    pub fn mean_reference_mass(&self) -> f64 {
        self.reference_mass_sum / self.samples.max(1) as f64
    }

    pub fn mean_prompt_mass(&self) -> f64 {
        self.prompt_mass_sum / self.samples.max(1) as f64
    }

    pub fn engagement(&self) -> u64 {
        self.engagement
    }
}

/// Per-(layer, unit) calibration trace over all prompts and steps.
/// For grouped-query models the per-unit statistics average over the
/// query heads sharing the unit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationTrace {
    stats: BTreeMap<(usize, usize), SiteStats>,
}

impl CalibrationTrace {
    pub fn stats(&self) -> &BTreeMap<(usize, usize), SiteStats> {
        &self.stats
    }

    pub fn site(&self, layer: usize, unit: usize) -> Option<&SiteStats> {
        self.stats.get(&(layer, unit))
    }
}

/// Run the calibration prompts with diagnostic tracing over all candidate
/// sites: per-query alignment margins against the target (and optional
/// reference) bank, and bank masses from the mixture diagnostics with
/// steering gains zeroed. Model outputs are untouched.
pub fn trace_calibration(
    model: &Model,
    prompts: &[Vec<u32>],
    target: &KVBank,
    reference: Option<&KVBank>,
    config: &SelectorConfig,
) -> Result<CalibrationTrace> {
    config.validate()?;
    if prompts.is_empty() || prompts.iter().any(Vec::is_empty) {
        return Err(MiError::invalid("calibration: prompts must be nonempty"));
    }
    let cfg = model.config();
    for bank in std::iter::once(target).chain(reference) {
        if bank.fingerprint() != model.fingerprint() {
            return Err(MiError::Compatibility(format!(
                "bank {} was built against a different model",
                bank.bank_id()
            )));
        }
    }
    let mut stats: BTreeMap<(usize, usize), SiteStats> = BTreeMap::new();
    for &l in &config.candidate_layers {
        if l >= cfg.n_layers {
            return Err(MiError::invalid(format!("calibration: layer {l} out of range")));
        }
        for &u in &config.candidate_units[&l] {
            if u >= cfg.n_kv_heads {
                return Err(MiError::invalid(format!(
                    "calibration: unit {u} at layer {l} out of range"
                )));
            }
            for bank in std::iter::once(target).chain(reference) {
                if !bank.has_site(l, u) {
                    return Err(MiError::invalid(format!(
                        "calibration: bank {} has no slots at candidate site ({l},{u})",
                        bank.bank_id()
                    )));
                }
            }
            stats.insert((l, u), SiteStats::default());
        }
    }

    let observation = RoutingGains::observation();
    let rope = model.rope();

    for prompt in prompts {
        let mut state = if prompt.len() > 1 {
            model.prefill(&prompt[..prompt.len() - 1], false)?.0
        } else {
            model.new_state()
        };
        let mut next = *prompt.last().expect("nonempty");
        for _ in 0..config.calib_steps {
            let mut probe = |s: &ProbeSample| -> Result<()> {
                let Some(entry) = stats.get_mut(&(s.layer, s.unit)) else {
                    return Ok(());
                };
                let q_bar = rope.unapply(s.query, s.position)?;
                let t_view = target.site_view(s.layer, s.unit).expect("checked above");
                let t_scores = memory_scores(&q_bar, &t_view, rope)?;
                let t_max = t_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let r_max = match reference {
                    Some(r) => {
                        let r_view = r.site_view(s.layer, s.unit).expect("checked above");
                        let r_scores = memory_scores(&q_bar, &r_view, rope)?;
                        r_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    }
                    None => 0.0,
                };
                let margin = t_max - r_max;
                if !margin.is_finite() {
                    return Err(MiError::invalid("calibration: non-finite margin"));
                }

                let mut views = vec![t_view];
                if let Some(r) = reference {
                    views.push(r.site_view(s.layer, s.unit).expect("checked above"));
                }
                let qs = QueryAtSite {
                    query: s.query,
                    position: s.position,
                    rope,
                };
                let (_, diag) = attend_mixture(
                    &qs,
                    s.prompt_keys,
                    s.prompt_values,
                    &views,
                    &observation,
                    s.layer,
                )?;
                entry.margin_sum += margin;
                let target_mass = diag.mass(BankRole::Target);
                entry.target_mass_sum += target_mass;
                entry.reference_mass_sum += diag.mass(BankRole::Reference);
                entry.prompt_mass_sum += diag.mass(BankRole::PromptSentinel);
                if target_mass > config.engagement_threshold {
                    entry.engagement += 1;
                }
                entry.samples += 1;
                Ok(())
            };
            let logits = model.decode_step_probed(&mut state, next, &mut probe)?;
            next = argmax(&logits) as u32;
        }
    }
    Ok(CalibrationTrace { stats })
}

/// Stage-1 unit scores: `U = margin + xi * target_mass - chi * prompt_mass`.
pub fn score_units(
    trace: &CalibrationTrace,
    config: &SelectorConfig,
) -> BTreeMap<(usize, usize), f64> {
    trace
        .stats
        .iter()
        .map(|(&site, s)| {
            (
                site,
                s.mean_margin() + config.xi * s.mean_target_mass()
                    - config.chi * s.mean_prompt_mass(),
            )
        })
        .collect()
}

/// Calibration snapshot for one selected site, persisted in the artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteDiagSnapshot {
    pub layer: usize,
    pub unit: usize,
    pub unit_score: f64,
    pub mean_margin: f64,
    pub mean_target_mass: f64,
    pub mean_reference_mass: f64,
    pub mean_prompt_mass: f64,
    pub engagement: u64,
    pub samples: u64,
}

/// Frozen selection output: selected layers, units per layer, layer gains,
/// diagnostics snapshot, config hash, and the model fingerprint. Immutable
/// and versioned after export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorArtifact {
    pub version: u32,
    pub layers: Vec<usize>,
    pub units: BTreeMap<usize, Vec<usize>>,
    pub rho: BTreeMap<usize, f64>,
    pub diagnostics: Vec<SiteDiagSnapshot>,
    pub config_hash: String,
    pub fingerprint: String,
}

pub const ARTIFACT_VERSION: u32 = 1;

impl SelectorArtifact {
    /// Hand-assembled artifact over explicit sites with unit layer gains;
    /// used by synthetic experiments and tests.
    pub fn manual(sites: &[(usize, usize)], fingerprint: impl Into<String>) -> Result<Self> {
        if sites.is_empty() {
            return Err(MiError::invalid("artifact: empty site list"));
        }
        let mut units: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &(l, u) in sites {
            let e = units.entry(l).or_default();
            if !e.contains(&u) {
                e.push(u);
            }
        }
        for list in units.values_mut() {
            list.sort_unstable();
        }
        let layers: Vec<usize> = units.keys().copied().collect();
        let rho = layers.iter().map(|&l| (l, 1.0)).collect();
        Ok(SelectorArtifact {
            version: ARTIFACT_VERSION,
            layers,
            units,
            rho,
            diagnostics: Vec::new(),
            config_hash: "manual".to_owned(),
            fingerprint: fingerprint.into(),
        })
    }

    pub fn sites(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.units
            .iter()
            .flat_map(|(&l, units)| units.iter().map(move |&u| (l, u)))
    }

    fn validate(&self) -> Result<()> {
        if self.version != ARTIFACT_VERSION {
            return Err(MiError::Compatibility(format!(
                "artifact version {} unsupported",
                self.version
            )));
        }
        if self.layers.is_empty() {
            return Err(MiError::Format("artifact: empty layer list".to_owned()));
        }
        for l in &self.layers {
            if !self.units.contains_key(l) || self.units[l].is_empty() {
                return Err(MiError::Format(format!("artifact: layer {l} has no units")));
            }
            if !self.rho.contains_key(l) {
                return Err(MiError::Format(format!("artifact: layer {l} has no gain")));
            }
        }
        if self.units.len() != self.layers.len() {
            return Err(MiError::Format("artifact: units/layers inconsistent".to_owned()));
        }
        Ok(())
    }

    pub fn validate_against(&self, model: &Model) -> Result<()> {
        self.validate()?;
        let cfg = model.config();
        for (l, u) in self.sites() {
            if l >= cfg.n_layers || u >= cfg.n_kv_heads {
                return Err(MiError::Format(format!(
                    "artifact site ({l},{u}) out of range for this model"
                )));
            }
        }
        if self.fingerprint != model.fingerprint() {
            return Err(MiError::Compatibility(
                "artifact was built against a different model".to_owned(),
            ));
        }
        Ok(())
    }
}

/// Stage-2 selection: per layer keep the top-k units by score (ties to the
/// lower index), aggregate kept scores into a layer score, keep the top-m
/// layers, and assign layer gains per the gain rule.
pub fn select(
    unit_scores: &BTreeMap<(usize, usize), f64>,
    trace: &CalibrationTrace,
    config: &SelectorConfig,
    fingerprint: impl Into<String>,
) -> Result<SelectorArtifact> {
    config.validate()?;
    if unit_scores.is_empty() {
        return Err(MiError::invalid("select: no unit scores"));
    }
    if unit_scores.values().any(|s| !s.is_finite()) {
        return Err(MiError::invalid("select: non-finite unit score"));
    }
    let mut per_layer: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for (&(l, u), &s) in unit_scores {
        per_layer.entry(l).or_default().push((u, s));
    }
    let mut layer_scores: Vec<(usize, f64, Vec<(usize, f64)>)> = Vec::new();
    for (layer, mut units) in per_layer {
        units.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("finite scores")
                .then(a.0.cmp(&b.0))
        });
        units.truncate(config.k);
        let sum: f64 = units.iter().map(|(_, s)| s).sum();
        let score = match config.aggregation {
            Aggregation::Sum => sum,
            Aggregation::Mean => sum / units.len() as f64,
        };
        layer_scores.push((layer, score, units));
    }
    layer_scores.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then(a.0.cmp(&b.0))
    });
    layer_scores.truncate(config.m);

    let max_score = layer_scores
        .iter()
        .map(|(_, s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut layers: Vec<usize> = layer_scores.iter().map(|(l, _, _)| *l).collect();
    layers.sort_unstable();
    let mut units = BTreeMap::new();
    let mut rho = BTreeMap::new();
    let mut diagnostics = Vec::new();
    for (layer, score, kept) in &layer_scores {
        let mut u: Vec<usize> = kept.iter().map(|(u, _)| *u).collect();
        u.sort_unstable();
        units.insert(*layer, u);
        let gain = match config.gain_rule {
            GainRule::Constant(v) => v,
            GainRule::NormalizedScore => {
                if max_score > 0.0 {
                    score / max_score
                } else {
                    1.0
                }
            }
        };
        rho.insert(*layer, gain);
        for (unit, unit_score) in kept {
            let s = trace
                .site(*layer, *unit)
                .cloned()
                .unwrap_or_default();
            diagnostics.push(SiteDiagSnapshot {
                layer: *layer,
                unit: *unit,
                unit_score: *unit_score,
                mean_margin: s.mean_margin(),
                mean_target_mass: s.mean_target_mass(),
                mean_reference_mass: s.mean_reference_mass(),
                mean_prompt_mass: s.mean_prompt_mass(),
                engagement: s.engagement(),
                samples: s.samples(),
            });
        }
    }
    diagnostics.sort_by_key(|d| (d.layer, d.unit));
    Ok(SelectorArtifact {
        version: ARTIFACT_VERSION,
        layers,
        units,
        rho,
        diagnostics,
        config_hash: config.config_hash(),
        fingerprint: fingerprint.into(),
    })
}

/// Expand selected kv-units to the query heads sharing each group:
/// group g covers heads [g*G, (g+1)*G) with G = n_q_heads / n_kv_heads.
/// Dense models pass heads through unchanged.
pub fn expand_groups(
    artifact: &SelectorArtifact,
    config: &ModelConfig,
) -> Result<BTreeMap<usize, Vec<usize>>> {
    config.validate()?;
    let group = config.group_size();
    let mut out = BTreeMap::new();
    for (&layer, units) in &artifact.units {
        let mut heads = Vec::with_capacity(units.len() * group);
        for &g in units {
            if g >= config.n_kv_heads {
                return Err(MiError::invalid(format!(
                    "expand_groups: group {g} out of range ({} kv units)",
                    config.n_kv_heads
                )));
            }
            heads.extend(g * group..(g + 1) * group);
        }
        out.insert(layer, heads);
    }
    Ok(out)
}

/// Persist an artifact as a versioned JSON document.
pub fn save_artifact(artifact: &SelectorArtifact, path: impl AsRef<Path>) -> Result<()> {
    let mut json = serde_json::to_string_pretty(artifact)
        .map_err(|e| MiError::Format(format!("artifact serialization: {e}")))?;
    json.push('\n');
    fs::write(path, json)?;
    Ok(())
}

/// Load an artifact and verify schema version, site ranges, and model
/// fingerprint.
pub fn load_artifact(path: impl AsRef<Path>, model: &Model) -> Result<SelectorArtifact> {
    let text = fs::read_to_string(&path)?;
    let artifact: SelectorArtifact = serde_json::from_str(&text)
        .map_err(|e| MiError::Format(format!("artifact parse: {e}")))?;
    artifact.validate_against(model)?;
    Ok(artifact)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::banks::{build_bank, BankSpec, KeepPolicy, TemplateId};
    use crate::model::synth_model;

    fn model() -> Model {
        let cfg = ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_q_heads: 4,
            n_kv_heads: 2,
            head_dim: 4,
            vocab_size: 260,
            rope_theta: 10000.0,
            norm_eps: 1e-6,
            qk_norm_enabled: false,
        };
        synth_model(&cfg, 31).unwrap()
    }

    fn all_sites(model: &Model) -> Vec<(usize, usize)> {
        let cfg = model.config();
        (0..cfg.n_layers)
            .flat_map(|l| (0..cfg.n_kv_heads).map(move |u| (l, u)))
            .collect()
    }

    fn text_bank(model: &Model, id: &str, role: BankRole, text: &str) -> KVBank {
        let spec = BankSpec {
            bank_id: id.into(),
            role,
            source_text: text.into(),
            templates: vec![TemplateId::Direct],
            keep_policy: KeepPolicy::DescriptorSpanOnly,
            prior: 0.0,
            phases: None,
        };
        build_bank(model, &spec, &all_sites(model)).unwrap()
    }

    #[test]
    fn identical_banks_give_zero_margin_and_valid_masses() {
        let m = model();
        let target = text_bank(&m, "t", BankRole::Target, "same text");
        let reference = text_bank(&m, "r", BankRole::Reference, "same text");
        let cfg = SelectorConfig::defaults_for(m.config(), 1, 1);
        let prompts = vec![vec![72u32, 105, 33]];
        let trace = trace_calibration(&m, &prompts, &target, Some(&reference), &cfg).unwrap();
        for stats in trace.stats().values() {
            assert!(stats.mean_margin().abs() < 1e-9);
            let total = stats.mean_target_mass()
                + stats.mean_reference_mass()
                + stats.mean_prompt_mass();
            assert!((total - 1.0).abs() < 1e-9);
            assert!(stats.mean_target_mass() >= 0.0 && stats.mean_target_mass() <= 1.0);
        }
    }

    #[test]
    fn score_units_arithmetic_and_monotonicity() {
        let mut stats = BTreeMap::new();
        stats.insert(
            (0usize, 0usize),
            SiteStats {
                margin_sum: 0.5,
                target_mass_sum: 0.4,
                reference_mass_sum: 0.0,
                prompt_mass_sum: 0.2,
                engagement: 0,
                samples: 1,
            },
        );
        let trace = CalibrationTrace { stats };
        let mut cfg = SelectorConfig::defaults_for(&model().config().clone(), 1, 1);
        cfg.xi = 0.5;
        cfg.chi = 0.5;
        let scores = score_units(&trace, &cfg);
        assert!((scores[&(0, 0)] - 0.6).abs() < 1e-12);

        // xi = chi = 0: ordering by margin alone
        cfg.xi = 0.0;
        cfg.chi = 0.0;
        let scores = score_units(&trace, &cfg);
        assert!((scores[&(0, 0)] - 0.5).abs() < 1e-12);

        // raising prompt mass strictly lowers the score when chi > 0
        cfg.chi = 0.5;
        let lo = score_units(&trace, &cfg)[&(0, 0)];
        let mut stats2 = trace.stats.clone();
        stats2.get_mut(&(0, 0)).unwrap().prompt_mass_sum = 0.8;
        let hi_prompt = CalibrationTrace { stats: stats2 };
        let hi = score_units(&hi_prompt, &cfg)[&(0, 0)];
        assert!(hi < lo);
    }

    #[test]
    fn select_argmax_and_ties() {
        let m = model();
        let cfg = SelectorConfig::defaults_for(m.config(), 1, 1);
        let trace = CalibrationTrace { stats: BTreeMap::new() };

        let mut scores = BTreeMap::new();
        for l in 0..3 {
            for u in 0..2 {
                scores.insert((l, u), 0.1);
            }
        }
        scores.insert((1, 1), 2.0);
        let artifact = select(&scores, &trace, &cfg, "fp").unwrap();
        assert_eq!(artifact.layers, vec![1]);
        assert_eq!(artifact.units[&1], vec![1]);

        // equal scores everywhere: lowest indices win
        let flat: BTreeMap<(usize, usize), f64> =
            scores.keys().map(|&k| (k, 1.0)).collect();
        let artifact = select(&flat, &trace, &cfg, "fp").unwrap();
        assert_eq!(artifact.layers, vec![0]);
        assert_eq!(artifact.units[&0], vec![0]);
    }

    #[test]
    fn select_respects_budgets_and_shift_invariance() {
        let m = model();
        let mut cfg = SelectorConfig::defaults_for(m.config(), 2, 2);
        cfg.aggregation = Aggregation::Mean;
        let trace = CalibrationTrace { stats: BTreeMap::new() };
        let mut scores = BTreeMap::new();
        let vals = [0.3, -0.1, 0.9, 0.2, 0.5, 0.05];
        let mut i = 0;
        for l in 0..3 {
            for u in 0..2 {
                scores.insert((l, u), vals[i]);
                i += 1;
            }
        }
        let a = select(&scores, &trace, &cfg, "fp").unwrap();
        assert!(a.layers.len() <= 2);
        for units in a.units.values() {
            assert!(units.len() <= 2);
        }
        let shifted: BTreeMap<(usize, usize), f64> =
            scores.iter().map(|(&k, &v)| (k, v + 13.5)).collect();
        let b = select(&shifted, &trace, &cfg, "fp").unwrap();
        assert_eq!(a.layers, b.layers);
        assert_eq!(a.units, b.units);
    }

    #[test]
    fn expansion_partitions_heads() {
        let m = model();
        let artifact =
            SelectorArtifact::manual(&[(0, 0), (0, 1), (2, 1)], m.fingerprint()).unwrap();
        let heads = expand_groups(&artifact, m.config()).unwrap();
        assert_eq!(heads[&0], vec![0, 1, 2, 3]);
        assert_eq!(heads[&2], vec![2, 3]);

        // paper head layout: 32 query heads, 4 kv groups
        let qwen_like = ModelConfig {
            n_layers: 2,
            d_model: 128,
            n_q_heads: 32,
            n_kv_heads: 4,
            head_dim: 4,
            vocab_size: 300,
            rope_theta: 10000.0,
            norm_eps: 1e-6,
            qk_norm_enabled: true,
        };
        let art = SelectorArtifact::manual(&[(0, 1)], "fp").unwrap();
        let heads = expand_groups(&art, &qwen_like).unwrap();
        assert_eq!(heads[&0], (8..16).collect::<Vec<_>>());
    }

    #[test]
    fn expansion_rejects_out_of_range_group() {
        let m = model();
        let artifact = SelectorArtifact::manual(&[(0, 5)], m.fingerprint()).unwrap();
        assert!(expand_groups(&artifact, m.config()).is_err());
    }

    #[test]
    fn artifact_roundtrip_and_validation() {
        let m = model();
        let target = text_bank(&m, "t", BankRole::Target, "be brief");
        let cfg = SelectorConfig::defaults_for(m.config(), 1, 2);
        let prompts = vec![vec![104u32, 105]];
        let trace = trace_calibration(&m, &prompts, &target, None, &cfg).unwrap();
        let scores = score_units(&trace, &cfg);
        let artifact = select(&scores, &trace, &cfg, m.fingerprint()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("artifact.json");
        save_artifact(&artifact, &path).unwrap();
        let loaded = load_artifact(&path, &m).unwrap();
        assert_eq!(artifact, loaded);

        // identical inputs, identical bytes
        let path2 = dir.path().join("artifact2.json");
        let trace2 = trace_calibration(&m, &prompts, &target, None, &cfg).unwrap();
        let artifact2 = select(&score_units(&trace2, &cfg), &trace2, &cfg, m.fingerprint()).unwrap();
        save_artifact(&artifact2, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());

        // out-of-range edit rejected
        let mut edited = artifact.clone();
        edited.layers = vec![99];
        edited.units = std::iter::once((99usize, vec![0usize])).collect();
        edited.rho = std::iter::once((99usize, 1.0)).collect();
        save_artifact(&edited, &path).unwrap();
        assert!(load_artifact(&path, &m).is_err());

        // fingerprint mismatch rejected
        let other = synth_model(
            &ModelConfig {
                n_layers: 3,
                d_model: 16,
                n_q_heads: 4,
                n_kv_heads: 2,
                head_dim: 4,
                vocab_size: 260,
                rope_theta: 10000.0,
                norm_eps: 1e-6,
                qk_norm_enabled: false,
            },
            32,
        )
        .unwrap();
        save_artifact(&artifact, &path).unwrap();
        let err = load_artifact(&path, &other).unwrap_err();
        assert!(matches!(err, MiError::Compatibility(_)));
    }

    #[test]
    fn observation_mode_is_pure() {
        let m = model();
        let target = text_bank(&m, "t", BankRole::Target, "observation purity");
        let cfg = SelectorConfig::defaults_for(m.config(), 2, 3);
        let prompt = vec![84u32, 101, 115, 116];

        // plain greedy continuation
        let mut plain_state = m.prefill(&prompt[..3], false).unwrap().0;
        let mut plain_tokens = Vec::new();
        let mut next = prompt[3];
        for _ in 0..cfg.calib_steps {
            let logits = m.decode_step(&mut plain_state, next, None).unwrap();
            next = argmax(&logits) as u32;
            plain_tokens.push(next);
        }

        // traced continuation must take the same greedy path
        let trace = trace_calibration(&m, &[prompt.clone()], &target, None, &cfg).unwrap();
        assert!(trace.stats().values().all(|s| s.samples() > 0));
        let mut traced_state = m.prefill(&prompt[..3], false).unwrap().0;
        let mut traced_tokens = Vec::new();
        let mut next = prompt[3];
        for _ in 0..cfg.calib_steps {
            let mut probe = |_: &ProbeSample| Ok(());
            let logits = m.decode_step_probed(&mut traced_state, next, &mut probe).unwrap();
            next = argmax(&logits) as u32;
            traced_tokens.push(next);
        }
        assert_eq!(plain_tokens, traced_tokens);
    }
}
