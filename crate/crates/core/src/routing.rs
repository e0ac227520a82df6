//! Steering attention paths: reference augmented-cache, factored
//! bank-mixture, and the side-bank approximation, plus contrastive gating
//! and the post-attention residual (CAA) baseline.
//!
//! All three paths agree on the same routing quantities: per-bank
//! size-normalized evidence (a log-mean-exp of slot scores plus any prior
//! or gain term), a softmax over evidences giving bank weights, and
//! within-bank softmax attention outputs. Memory slots are scored in
//! canonical pre-rotation coordinates against the de-rotated live query,
//! so a slot with zero phase is position-independent.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{MiError, Result};
use crate::numerics::{dot, logsumexp, sigmoid, softmax, RotaryOperator};

/// Role a bank plays in routing. `PromptSentinel` is reserved for the
/// internal prompt-bank entry in diagnostics and is never built from text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BankRole {
    Target,
    Reference,
    Auxiliary,
    PromptSentinel,
}

/// Steering gains: positive/negative bank gains, gate sharpness, per-layer
/// gains from the selector, and per-bank auxiliary gains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutingGains {
    pub lambda_plus: f64,
    pub lambda_minus: f64,
    pub gamma: f64,
    #[serde(default)]
    pub layer_gains: BTreeMap<usize, f64>,
    #[serde(default)]
    pub aux_gains: BTreeMap<String, f64>,
}

impl RoutingGains {
    pub fn new(lambda_plus: f64, lambda_minus: f64, gamma: f64) -> Result<Self> {
        if lambda_plus < 0.0 || lambda_minus < 0.0 {
            return Err(MiError::invalid("gains: lambda_plus/lambda_minus must be nonnegative"));
        }
        if !(gamma > 0.0) {
            return Err(MiError::invalid("gains: gamma must be positive"));
        }
        Ok(RoutingGains {
            lambda_plus,
            lambda_minus,
            gamma,
            layer_gains: BTreeMap::new(),
            aux_gains: BTreeMap::new(),
        })
    }

    /// Observation mode: all steering gains zeroed, used for calibration
    /// tracing so diagnostics are read-only.
    pub fn observation() -> Self {
        RoutingGains {
            lambda_plus: 0.0,
            lambda_minus: 0.0,
            gamma: 1.0,
            layer_gains: BTreeMap::new(),
            aux_gains: BTreeMap::new(),
        }
    }

    /// Layer gain rho_l; layers without an explicit entry read 1.0.
    pub fn rho(&self, layer: usize) -> f64 {
        self.layer_gains.get(&layer).copied().unwrap_or(1.0)
    }

    pub fn aux_gain(&self, bank_id: &str) -> f64 {
        self.aux_gains.get(bank_id).copied().unwrap_or(0.0)
    }
}

/// One bank's slot slice at a single (layer, unit) site. Keys are stored
/// canonical pre-rotation; values are plain value slots. Both are flat
/// `slots x head_dim`, f32.
#[derive(Debug, Clone, Copy)]
pub struct SiteBank<'a> {
    pub bank_id: &'a str,
    pub role: BankRole,
    pub slots: usize,
    pub keys: &'a [f32],
    pub values: &'a [f32],
    pub prior: f64,
    pub phases: &'a [i64],
}

impl<'a> SiteBank<'a> {
    fn validate(&self, head_dim: usize) -> Result<()> {
        if self.slots == 0 {
            return Err(MiError::invalid(format!("bank {}: zero slots", self.bank_id)));
        }
        if self.keys.len() != self.slots * head_dim || self.values.len() != self.slots * head_dim {
            return Err(MiError::invalid(format!(
                "bank {}: slot payload does not match {} x {}",
                self.bank_id, self.slots, head_dim
            )));
        }
        if self.phases.len() != self.slots {
            return Err(MiError::invalid(format!(
                "bank {}: phase table length {} != slot count {}",
                self.bank_id,
                self.phases.len(),
                self.slots
            )));
        }
        if self.role == BankRole::PromptSentinel {
            return Err(MiError::invalid(format!(
                "bank {}: prompt-sentinel role is reserved for diagnostics",
                self.bank_id
            )));
        }
        Ok(())
    }
}

/// The live query at one attention site: post-rotation query vector, its
/// absolute position, and the rotary operator to de-rotate it with.
#[derive(Debug, Clone, Copy)]
pub struct QueryAtSite<'a> {
    pub query: &'a [f64],
    pub position: i64,
    pub rope: &'a RotaryOperator,
}

impl<'a> QueryAtSite<'a> {
    fn head_dim(&self) -> Result<usize> {
        let d = self.rope.head_dim();
        if self.query.len() != d {
            return Err(MiError::invalid(format!(
                "query length {} does not match head_dim {}",
                self.query.len(),
                d
            )));
        }
        Ok(d)
    }
}

/// Per-bank routing diagnostics. `beta_raw` is the un-normalized evidence
/// (log-sum-exp plus prior); `beta` is the size-normalized routed logit
/// including gate/gain terms; `pi` is the bank's mixture weight, which
/// equals its share of attention mass.
#[derive(Debug, Clone, Serialize)]
pub struct BankDiag {
    pub bank_id: String,
    pub role: BankRole,
    pub beta_raw: f64,
    pub beta: f64,
    pub pi: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoutingDiagnostics {
    pub banks: Vec<BankDiag>,
    pub delta: Option<f64>,
    pub g_plus: Option<f64>,
    pub g_minus: Option<f64>,
}

impl RoutingDiagnostics {
    /// Total mixture weight carried by banks of `role`.
    pub fn mass(&self, role: BankRole) -> f64 {
        self.banks
            .iter()
            .filter(|b| b.role == role)
            .map(|b| b.pi)
            .sum()
    }

    pub fn pi_sum(&self) -> f64 {
        self.banks.iter().map(|b| b.pi).sum()
    }

    fn prompt_only(beta_raw: f64, beta: f64) -> Self {
        RoutingDiagnostics {
            banks: vec![BankDiag {
                bank_id: "prompt".to_owned(),
                role: BankRole::PromptSentinel,
                beta_raw,
                beta,
                pi: 1.0,
            }],
            delta: None,
            g_plus: None,
            g_minus: None,
        }
    }
}

/// Standard attention over flat `T x head_dim` keys/values:
/// `softmax(q K^T / sqrt(d_h)) V`.
pub fn attend_baseline(
    query: &[f64],
    keys: &[f64],
    values: &[f64],
    head_dim: usize,
) -> Result<Vec<f64>> {
    if head_dim == 0 || query.len() != head_dim {
        return Err(MiError::invalid("attend: query/head_dim mismatch"));
    }
    if keys.len() != values.len() || keys.len() % head_dim != 0 {
        return Err(MiError::invalid("attend: keys/values shape mismatch"));
    }
    let t = keys.len() / head_dim;
    if t == 0 {
        return Err(MiError::invalid("attend: empty context"));
    }
    let scale = 1.0 / (head_dim as f64).sqrt();
    let scores: Vec<f64> = (0..t)
        .map(|j| dot(query, &keys[j * head_dim..(j + 1) * head_dim]) * scale)
        .collect();
    let weights = softmax(&scores)?;
    let mut out = vec![0.0; head_dim];
    for (j, w) in weights.iter().enumerate() {
        let v = &values[j * head_dim..(j + 1) * head_dim];
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// Slot scores for one bank: `<q̄, R_{δ_m} k̃_m> / sqrt(d_h)` where q̄ is
/// the de-rotated query.
pub fn memory_scores(q_bar: &[f64], bank: &SiteBank, rope: &RotaryOperator) -> Result<Vec<f64>> {
    let d = rope.head_dim();
    bank.validate(d)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = Vec::with_capacity(bank.slots);
    let mut key_f64 = vec![0.0f64; d];
    for m in 0..bank.slots {
        let key = &bank.keys[m * d..(m + 1) * d];
        for (o, k) in key_f64.iter_mut().zip(key.iter()) {
            *o = *k as f64;
        }
        let delta = bank.phases[m];
        if delta != 0 {
            rope.apply_in_place(&mut key_f64, delta)?;
        }
        scores.push(dot(q_bar, &key_f64) * scale);
    }
    Ok(scores)
}

/// Query-adaptive gates from the target-reference evidence gap:
/// `g+ = sigma(gamma * delta)`, `g- = 1 - g+`. The complement form keeps
/// `g+ + g- = 1` exact and `delta = 0` at exactly (0.5, 0.5).
pub fn contrastive_gates(delta: f64, gamma: f64) -> (f64, f64) {
    let g_plus = sigmoid(gamma * delta);
    (g_plus, 1.0 - g_plus)
}

struct BankTerms {
    output: Vec<f64>,
    lse: f64,
    /// Size-normalized evidence without prior/gain: lse - ln(slots).
    evidence: f64,
}

fn bank_terms(query: &QueryAtSite, bank: &SiteBank) -> Result<BankTerms> {
    let d = query.head_dim()?;
    let q_bar = query.rope.unapply(query.query, query.position)?;
    let scores = memory_scores(&q_bar, bank, query.rope)?;
    let weights = softmax(&scores)?;
    let mut output = vec![0.0; d];
    for (m, w) in weights.iter().enumerate() {
        let v = &bank.values[m * d..(m + 1) * d];
        for (o, x) in output.iter_mut().zip(v.iter()) {
            *o += w * *x as f64;
        }
    }
    let lse = logsumexp(&scores)?;
    let evidence = lse - (bank.slots as f64).ln();
    Ok(BankTerms {
        output,
        lse,
        evidence,
    })
}

fn find_roles(banks: &[SiteBank]) -> Result<(Option<usize>, Option<usize>)> {
    let mut target = None;
    let mut reference = None;
    for (i, b) in banks.iter().enumerate() {
        match b.role {
            BankRole::Target => {
                if target.replace(i).is_some() {
                    return Err(MiError::invalid("routing: more than one target bank"));
                }
            }
            BankRole::Reference => {
                if reference.replace(i).is_some() {
                    return Err(MiError::invalid("routing: more than one reference bank"));
                }
            }
            _ => {}
        }
    }
    if reference.is_some() && target.is_none() {
        return Err(MiError::Configuration(
            "routing: contrastive gating requires a target bank when a reference bank is present"
                .to_owned(),
        ));
    }
    Ok((target, reference))
}

/// Gate/gain state shared by the mixture, side-bank, and slot-bias paths.
struct GateState {
    delta: Option<f64>,
    g_plus: Option<f64>,
    g_minus: Option<f64>,
}

fn gate_state(
    terms: &[BankTerms],
    target: Option<usize>,
    reference: Option<usize>,
    gains: &RoutingGains,
) -> GateState {
    match (target, reference) {
        (Some(t), Some(r)) => {
            let delta = terms[t].evidence - terms[r].evidence;
            let (gp, gm) = contrastive_gates(delta, gains.gamma);
            GateState {
                delta: Some(delta),
                g_plus: Some(gp),
                g_minus: Some(gm),
            }
        }
        // No reference: delta-dependent gates are disabled and the
        // positive gate is pinned to 1, reducing to a pure positive gain.
        (Some(_), None) => GateState {
            delta: None,
            g_plus: Some(1.0),
            g_minus: None,
        },
        _ => GateState {
            delta: None,
            g_plus: None,
            g_minus: None,
        },
    }
}

/// The gain/prior term added to each bank's size-normalized evidence.
/// For the augmented path this same quantity is the per-slot bias.
fn bank_bias_terms(
    banks: &[SiteBank],
    terms: &[BankTerms],
    gains: &RoutingGains,
    layer: usize,
) -> Result<(Vec<f64>, GateState)> {
    let (target, reference) = find_roles(banks)?;
    let gates = gate_state(terms, target, reference, gains);
    let rho = gains.rho(layer);
    let mut biases = Vec::with_capacity(banks.len());
    for bank in banks {
        let bias = match bank.role {
            BankRole::Target => bank.prior + rho * gains.lambda_plus * gates.g_plus.unwrap_or(1.0),
            BankRole::Reference => {
                bank.prior - rho * gains.lambda_minus * gates.g_minus.unwrap_or(0.0)
            }
            BankRole::Auxiliary => bank.prior + gains.aux_gain(bank.bank_id),
            BankRole::PromptSentinel => unreachable!("rejected by validate"),
        };
        biases.push(bias);
    }
    Ok((biases, gates))
}

/// Per-bank slot biases (prior plus gate/gain terms) for the augmented
/// concatenated path, computed from the same evidence terms the mixture
/// path uses. The augmented op itself adds the -ln(slots) size term.
pub fn bank_slot_biases(
    query: &QueryAtSite,
    banks: &[SiteBank],
    gains: &RoutingGains,
    layer: usize,
) -> Result<Vec<f64>> {
    let terms: Vec<BankTerms> = banks
        .iter()
        .map(|b| bank_terms(query, b))
        .collect::<Result<_>>()?;
    let (biases, _) = bank_bias_terms(banks, &terms, gains, layer)?;
    Ok(biases)
}

fn prompt_scores(query: &QueryAtSite, prompt_keys: &[f64]) -> Result<Vec<f64>> {
    let d = query.head_dim()?;
    if prompt_keys.len() % d != 0 || prompt_keys.is_empty() {
        return Err(MiError::invalid("routing: prompt keys empty or misshapen"));
    }
    let t = prompt_keys.len() / d;
    let scale = 1.0 / (d as f64).sqrt();
    Ok((0..t)
        .map(|j| dot(query.query, &prompt_keys[j * d..(j + 1) * d]) * scale)
        .collect())
}

/// Factored bank-mixture attention at one selected site.
///
/// Computes within-bank attention outputs, size-normalized bank evidences
/// with contrastive gate terms, and mixes the outputs with a softmax over
/// evidences. With no banks the call degenerates to `attend_baseline`
/// bit-exactly.
pub fn attend_mixture(
    query: &QueryAtSite,
    prompt_keys: &[f64],
    prompt_values: &[f64],
    banks: &[SiteBank],
    gains: &RoutingGains,
    layer: usize,
) -> Result<(Vec<f64>, RoutingDiagnostics)> {
    let d = query.head_dim()?;
    if banks.is_empty() {
        let out = attend_baseline(query.query, prompt_keys, prompt_values, d)?;
        let scores = prompt_scores(query, prompt_keys)?;
        let lse = logsumexp(&scores)?;
        let beta = lse - (scores.len() as f64).ln();
        return Ok((out, RoutingDiagnostics::prompt_only(lse, beta)));
    }
    let scores = prompt_scores(query, prompt_keys)?;
    if prompt_values.len() != prompt_keys.len() {
        return Err(MiError::invalid("routing: prompt keys/values mismatch"));
    }
    let prompt_out = attend_baseline(query.query, prompt_keys, prompt_values, d)?;
    let prompt_lse = logsumexp(&scores)?;
    let prompt_beta = prompt_lse - (scores.len() as f64).ln();

    let terms: Vec<BankTerms> = banks
        .iter()
        .map(|b| bank_terms(query, b))
        .collect::<Result<_>>()?;
    let (biases, gates) = bank_bias_terms(banks, &terms, gains, layer)?;
    mixture_core(
        d, prompt_lse, prompt_beta, &prompt_out, banks, &terms, &biases, gates,
    )
}

/// Side-bank approximation: the host's already-computed attention output
/// stands in for the prompt bank, with a synthetic single-slot evidence.
pub fn attend_sidebank(
    prompt_output: &[f64],
    synthetic_prompt_score: f64,
    query: &QueryAtSite,
    banks: &[SiteBank],
    gains: &RoutingGains,
    layer: usize,
) -> Result<(Vec<f64>, RoutingDiagnostics)> {
    let d = query.head_dim()?;
    if prompt_output.len() != d {
        return Err(MiError::invalid("sidebank: prompt output length mismatch"));
    }
    if !synthetic_prompt_score.is_finite() {
        return Err(MiError::invalid("sidebank: synthetic score must be finite"));
    }
    if banks.is_empty() {
        return Ok((
            prompt_output.to_vec(),
            RoutingDiagnostics::prompt_only(synthetic_prompt_score, synthetic_prompt_score),
        ));
    }
    let terms: Vec<BankTerms> = banks
        .iter()
        .map(|b| bank_terms(query, b))
        .collect::<Result<_>>()?;
    let (biases, gates) = bank_bias_terms(banks, &terms, gains, layer)?;
    // Single synthetic slot: log-sum-exp of one score is the score itself
    // and the size term ln(1) vanishes.
    mixture_core(
        d,
        synthetic_prompt_score,
        synthetic_prompt_score,
        prompt_output,
        banks,
        &terms,
        &biases,
        gates,
    )
}

#[allow(clippy::too_many_arguments)]
fn mixture_core(
    head_dim: usize,
    prompt_lse: f64,
    prompt_beta: f64,
    prompt_out: &[f64],
    banks: &[SiteBank],
    terms: &[BankTerms],
    biases: &[f64],
    gates: GateState,
) -> Result<(Vec<f64>, RoutingDiagnostics)> {
    let mut betas = Vec::with_capacity(banks.len() + 1);
    betas.push(prompt_beta);
    for (term, bias) in terms.iter().zip(biases.iter()) {
        betas.push(term.evidence + bias);
    }
    let pi = softmax(&betas)?;
    let mut out = vec![0.0; head_dim];
    for (o, x) in out.iter_mut().zip(prompt_out.iter()) {
        *o += pi[0] * x;
    }
    for (i, term) in terms.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(term.output.iter()) {
            *o += pi[i + 1] * x;
        }
    }
    let mut diag_banks = Vec::with_capacity(banks.len() + 1);
    diag_banks.push(BankDiag {
        bank_id: "prompt".to_owned(),
        role: BankRole::PromptSentinel,
        beta_raw: prompt_lse,
        beta: prompt_beta,
        pi: pi[0],
    });
    for (i, bank) in banks.iter().enumerate() {
        diag_banks.push(BankDiag {
            bank_id: bank.bank_id.to_owned(),
            role: bank.role,
            beta_raw: terms[i].lse + bank.prior,
            beta: betas[i + 1],
            pi: pi[i + 1],
        });
    }
    Ok((
        out,
        RoutingDiagnostics {
            banks: diag_banks,
            delta: gates.delta,
            g_plus: gates.g_plus,
            g_minus: gates.g_minus,
        },
    ))
}

/// Augmented-cache attention: one softmax over prompt slots (bias
/// `-ln T`) and all bank slots (bias `slot_bias - ln M_b`), matching the
/// size-normalized mixture. `slot_bias` carries the prior plus gate/gain
/// terms, e.g. from [`bank_slot_biases`].
pub fn attend_augmented(
    query: &QueryAtSite,
    prompt_keys: &[f64],
    prompt_values: &[f64],
    banks: &[(SiteBank, f64)],
) -> Result<(Vec<f64>, RoutingDiagnostics)> {
    let d = query.head_dim()?;
    if banks.is_empty() {
        let out = attend_baseline(query.query, prompt_keys, prompt_values, d)?;
        let scores = prompt_scores(query, prompt_keys)?;
        let lse = logsumexp(&scores)?;
        return Ok((
            out,
            RoutingDiagnostics::prompt_only(lse, lse - (scores.len() as f64).ln()),
        ));
    }
    if prompt_values.len() != prompt_keys.len() {
        return Err(MiError::invalid("routing: prompt keys/values mismatch"));
    }
    for (bank, _) in banks {
        bank.validate(d)?;
    }
    let p_scores = prompt_scores(query, prompt_keys)?;
    let t = p_scores.len();
    let ln_t = (t as f64).ln();
    let q_bar = query.rope.unapply(query.query, query.position)?;

    // Concatenated biased scores: prompt first, then banks in order.
    let mut biased = Vec::with_capacity(t + banks.iter().map(|(b, _)| b.slots).sum::<usize>());
    let mut raw_bank_scores = Vec::with_capacity(banks.len());
    for s in &p_scores {
        biased.push(s - ln_t);
    }
    for (bank, bias) in banks {
        let scores = memory_scores(&q_bar, bank, query.rope)?;
        let ln_m = (bank.slots as f64).ln();
        for s in &scores {
            biased.push(s + bias - ln_m);
        }
        raw_bank_scores.push(scores);
    }
    let alpha = softmax(&biased)?;

    let mut out = vec![0.0; d];
    for (j, a) in alpha[..t].iter().enumerate() {
        let v = &prompt_values[j * d..(j + 1) * d];
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += a * x;
        }
    }
    let mut offset = t;
    let mut diag_banks = Vec::with_capacity(banks.len() + 1);
    let prompt_lse = logsumexp(&p_scores)?;
    diag_banks.push(BankDiag {
        bank_id: "prompt".to_owned(),
        role: BankRole::PromptSentinel,
        beta_raw: prompt_lse,
        beta: prompt_lse - ln_t,
        pi: alpha[..t].iter().sum(),
    });
    for ((bank, bias), scores) in banks.iter().zip(raw_bank_scores.iter()) {
        let mass: f64 = alpha[offset..offset + bank.slots].iter().sum();
        for (m, a) in alpha[offset..offset + bank.slots].iter().enumerate() {
            let v = &bank.values[m * d..(m + 1) * d];
            for (o, x) in out.iter_mut().zip(v.iter()) {
                *o += a * *x as f64;
            }
        }
        let lse = logsumexp(scores)?;
        diag_banks.push(BankDiag {
            bank_id: bank.bank_id.to_owned(),
            role: bank.role,
            beta_raw: lse + bank.prior,
            beta: lse - (bank.slots as f64).ln() + bias,
            pi: mass,
        });
        offset += bank.slots;
    }
    Ok((
        out,
        RoutingDiagnostics {
            banks: diag_banks,
            delta: None,
            g_plus: None,
            g_minus: None,
        },
    ))
}

/// Post-attention residual offset baseline: `hidden + scale * direction`.
pub fn caa_offset(hidden: &[f64], direction: &[f64], scale: f64) -> Result<Vec<f64>> {
    if hidden.len() != direction.len() {
        return Err(MiError::invalid(format!(
            "caa: length mismatch ({} vs {})",
            hidden.len(),
            direction.len()
        )));
    }
    Ok(hidden
        .iter()
        .zip(direction.iter())
        .map(|(h, d)| h + scale * d)
        .collect())
}

/// One serializable routing-diagnostics record: one decode step at one
/// steered site, for the `--trace` stream and the harness.
#[derive(Debug, Clone, Serialize)]
pub struct DiagRecord {
    pub position: i64,
    pub layer: usize,
    pub unit: usize,
    pub head: usize,
    #[serde(flatten)]
    pub diag: RoutingDiagnostics,
}
