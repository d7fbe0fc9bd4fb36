//! Central finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Evaluates `loss_fn` and returns the loss value plus one gradient per
/// parameter of `store`, in store order.
pub fn grad<F>(store: &ParamStore, loss_fn: F) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(store, &mut g)?;
    let grads = g.backward(loss)?;
    let value = g.value(loss).data()[0];
    let per_param = store
        .ids()
        .map(|id| grads.param(id).unwrap_or_else(|| Tensor::zeros(store.value(id).shape())))
        .collect();
    Ok((value, per_param))
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor so entries with a vanishing true gradient are
    /// judged on absolute error.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-3,
            abs_floor: 1e-6,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn finite_diff_check<F>(store: &ParamStore, loss_fn: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    assert!(cfg.step > 0.0, "finite-difference step must be positive");
    let (_, analytic) = grad(store, &loss_fn)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let v = loss_fn(s, &mut g)?;
        Ok(g.value(v).data()[0])
    };
    let mut rng = Rng::seed_from_u64(cfg.seed).split("gradcheck");
    let mut work = store.clone();
    let mut params = Vec::new();
    let mut worst: f64 = 0.0;
    for (pi, id) in store.ids().enumerate() {
        let n = store.value(id).len();
        let mut entries: Vec<usize> = (0..n).collect();
        if let Some(k) = cfg.max_entries_per_param {
            if k < n {
                rng.shuffle(&mut entries);
                entries.truncate(k);
                entries.sort_unstable();
            }
        }
        let mut max_rel: f64 = 0.0;
        for &e in &entries {
            let orig = work.value(id).data()[e];
            work.get_mut(id).value.data_mut()[e] = orig + cfg.step;
            let lp = eval(&work)?;
            work.get_mut(id).value.data_mut()[e] = orig - cfg.step;
            let lm = eval(&work)?;
            work.get_mut(id).value.data_mut()[e] = orig;
            let numeric = (lp - lm) / (2.0 * cfg.step);
            let rel = relative_error(analytic[pi].data()[e], numeric, cfg.abs_floor);
            max_rel = max_rel.max(rel);
        }
        worst = worst.max(max_rel);
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            entries_checked: entries.len(),
            max_rel_error: max_rel,
        });
    }
    Ok(GradCheckReport {
        params,
        max_rel_error: worst,
        tolerance: cfg.tolerance,
    })
}
