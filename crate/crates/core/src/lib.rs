//! Root-cause analysis of degraded sessions from multi-KPI time series.

pub mod contrastive;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod finetune;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod pipeline;
pub mod rules;
pub mod schema;
pub mod synth;

pub use dataset::{KpiSample, LabelSource, LabeledDataset, ZScore};
pub use error::{RcaError, Result};
pub use rules::{rule_label, CompiledRuleSet, RuleSet};
pub use schema::{KpiSchema, RootCause, NUM_CLASSES};
