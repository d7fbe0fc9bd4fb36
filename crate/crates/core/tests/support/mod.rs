#![allow(dead_code)]
pub mod uplink_table;

use qoe_numeric::{Rng, Tensor};
use qoe_rca::synth::{generate_pools, PoolConfig};
use qoe_rca::{KpiSchema, LabeledDataset, RuleSet, ZScore};

/// Normalised synthetic pools: (rule, expert, holdout), z-scored on the
/// rule pool.
pub fn pools(n_rule: usize, n_expert: usize, n_holdout: usize, seed: u64) -> (LabeledDataset, LabeledDataset, LabeledDataset) {
    let schema = KpiSchema::default_schema();
    let rules = RuleSet::default_rules().compile(&schema).unwrap();
    let cfg = PoolConfig {
        n_rule,
        n_expert,
        n_holdout,
        seed,
        ..PoolConfig::default()
    };
    let p = generate_pools(&cfg, &schema, &rules).unwrap();
    let z = ZScore::fit(&p.rule.samples).unwrap();
    (
        p.rule.normalized_with(&z).unwrap(),
        p.expert.normalized_with(&z).unwrap(),
        p.holdout.normalized_with(&z).unwrap(),
    )
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut Rng::seed_from_u64(seed))
}

pub fn refs(ds: &LabeledDataset) -> Vec<&Tensor> {
    ds.samples.iter().map(|s| s.values()).collect()
}

/// Error bridge for closures handed to the finite-difference checker.
pub fn numeric(e: qoe_rca::RcaError) -> qoe_numeric::NumericError {
    match e {
        qoe_rca::RcaError::Numeric(n) => n,
        other => qoe_numeric::NumericError::Invalid(other.to_string()),
    }
}
