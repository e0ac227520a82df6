//! Steering plans: a frozen selector artifact, the banks to attach, the
//! routing gains, and the routing mode, compiled against a model into the
//! per-site bank views the decode loop consumes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::banks::KVBank;
use crate::error::{MiError, Result};
use crate::model::Model;
use crate::routing::{BankRole, RoutingGains, SiteBank};
use crate::selector::SelectorArtifact;

/// Which steering attention path selected sites route through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingMode {
    Augmented,
    Mixture,
    Sidebank,
}

/// Post-attention residual offset applied at one layer (the CAA baseline).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaaDirective {
    pub layer: usize,
    pub direction: Vec<f64>,
    pub scale: f64,
}

/// Everything a steered decode needs. Banks may be empty, in which case
/// the plan is a no-op and decoding matches the plain model bit-exactly.
#[derive(Debug, Clone)]
pub struct SteeringPlan {
    pub artifact: SelectorArtifact,
    pub banks: Vec<KVBank>,
    pub gains: RoutingGains,
    pub mode: RoutingMode,
    /// Synthetic single-slot prompt evidence for side-bank mode:
    /// 0 plus this configurable offset.
    pub sidebank_score: f64,
    pub caa: Vec<CaaDirective>,
}

impl SteeringPlan {
    /// Assemble a plan. Layer gains from the artifact populate any
    /// missing `layer_gains` entries so every selected layer has one.
    pub fn new(
        artifact: SelectorArtifact,
        banks: Vec<KVBank>,
        mut gains: RoutingGains,
        mode: RoutingMode,
    ) -> Result<Self> {
        let mut n_target = 0;
        let mut n_reference = 0;
        for b in &banks {
            match b.role() {
                BankRole::Target => n_target += 1,
                BankRole::Reference => n_reference += 1,
                BankRole::Auxiliary => {}
                BankRole::PromptSentinel => {
                    return Err(MiError::InvalidPlan(format!(
                        "bank {} has the reserved prompt-sentinel role",
                        b.bank_id()
                    )));
                }
            }
        }
        if n_target > 1 || n_reference > 1 {
            return Err(MiError::InvalidPlan(
                "a plan carries at most one target and one reference bank".to_owned(),
            ));
        }
        for (&layer, &rho) in &artifact.rho {
            gains.layer_gains.entry(layer).or_insert(rho);
        }
        Ok(SteeringPlan {
            artifact,
            banks,
            gains,
            mode,
            sidebank_score: 0.0,
            caa: Vec::new(),
        })
    }

    /// Validate the plan against a model and build the per-site lookup
    /// used by the decode loop.
    pub fn compile<'a>(&'a self, model: &Model) -> Result<CompiledPlan<'a>> {
        let cfg = model.config();
        if self.artifact.fingerprint != model.fingerprint() {
            return Err(MiError::Compatibility(
                "selector artifact was built against a different model".to_owned(),
            ));
        }
        for (&layer, units) in &self.artifact.units {
            if layer >= cfg.n_layers {
                return Err(MiError::InvalidPlan(format!(
                    "plan layer {layer} out of range (model has {} layers)",
                    cfg.n_layers
                )));
            }
            for &u in units {
                if u >= cfg.n_kv_heads {
                    return Err(MiError::InvalidPlan(format!(
                        "plan unit {u} at layer {layer} out of range (model has {} kv units)",
                        cfg.n_kv_heads
                    )));
                }
            }
        }
        for bank in &self.banks {
            if bank.fingerprint() != model.fingerprint() {
                return Err(MiError::Compatibility(format!(
                    "bank {} was built against a different model",
                    bank.bank_id()
                )));
            }
            if bank.head_dim() != cfg.head_dim {
                return Err(MiError::InvalidPlan(format!(
                    "bank {} head_dim mismatch",
                    bank.bank_id()
                )));
            }
        }
        let mut sites: BTreeMap<(usize, usize), Vec<SiteBank<'a>>> = BTreeMap::new();
        if !self.banks.is_empty() {
            for (&layer, units) in &self.artifact.units {
                for &unit in units {
                    let mut views = Vec::with_capacity(self.banks.len());
                    for bank in &self.banks {
                        match bank.site_view(layer, unit) {
                            Some(v) => views.push(v),
                            None => {
                                return Err(MiError::InvalidPlan(format!(
                                    "bank {} has no slots for selected site ({layer},{unit})",
                                    bank.bank_id()
                                )));
                            }
                        }
                    }
                    sites.insert((layer, unit), views);
                }
            }
        }
        let mut caa: BTreeMap<usize, Vec<&'a CaaDirective>> = BTreeMap::new();
        for directive in &self.caa {
            if directive.layer >= cfg.n_layers {
                return Err(MiError::InvalidPlan(format!(
                    "caa layer {} out of range",
                    directive.layer
                )));
            }
            if directive.direction.len() != cfg.d_model {
                return Err(MiError::InvalidPlan("caa direction length mismatch".to_owned()));
            }
            caa.entry(directive.layer).or_default().push(directive);
        }
        Ok(CompiledPlan {
            mode: self.mode,
            gains: &self.gains,
            sidebank_score: self.sidebank_score,
            sites,
            caa,
        })
    }

    /// Lowest steered layer, if any bank is attached.
    pub fn min_layer(&self) -> Option<usize> {
        if self.banks.is_empty() {
            None
        } else {
            self.artifact.layers.iter().min().copied()
        }
    }
}

/// Plan resolved against one model: per-(layer, unit) bank views plus the
/// routing knobs. Borrows from the plan; rebuild per decode call.
pub struct CompiledPlan<'a> {
    pub(crate) mode: RoutingMode,
    pub(crate) gains: &'a RoutingGains,
    pub(crate) sidebank_score: f64,
    sites: BTreeMap<(usize, usize), Vec<SiteBank<'a>>>,
    caa: BTreeMap<usize, Vec<&'a CaaDirective>>,
}

impl<'a> CompiledPlan<'a> {
    pub(crate) fn site(&self, layer: usize, unit: usize) -> Option<&[SiteBank<'a>]> {
        self.sites.get(&(layer, unit)).map(Vec::as_slice)
    }

    pub(crate) fn caa_at(&self, layer: usize) -> impl Iterator<Item = &&'a CaaDirective> {
        self.caa.get(&layer).into_iter().flatten()
    }
}
