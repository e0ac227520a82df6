//! Memory-inception engine: text-derived latent key/value banks attached
//! at selected attention sites of a decoder-only transformer, with
//! bank-level routing, automatic layer/unit selection, contrastive gating,
//! and KV-budget accounting.
//!
//! Banks store canonical pre-rotation keys and are scored against the
//! de-rotated live query, so a zero-phase slot is position-independent.
//! Three steering paths (augmented cache, factored bank mixture, and the
//! side-bank approximation) agree to numerical precision; `mi check`
//! exercises that and every other invariant over seeded random instances.

pub mod banks;
pub mod budget;
pub mod cli;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod plan;
pub mod rng;
pub mod routing;
pub mod selector;
pub mod tokenizer;

pub use banks::{build_bank, BankSpec, KVBank, KeepPolicy, TemplateId};
pub use error::{MiError, Result};
pub use model::{synth_model, DecodeState, Model, ModelConfig};
pub use plan::{CaaDirective, RoutingMode, SteeringPlan};
pub use routing::{BankRole, RoutingDiagnostics, RoutingGains};
pub use selector::{SelectorArtifact, SelectorConfig};
