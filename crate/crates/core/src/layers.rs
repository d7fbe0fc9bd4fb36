//! Parameterised building blocks shared by the predictor, encoder and head.

use qoe_numeric::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    /// He-normal weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        Self::with_gain(store, name, c_in, c_out, k, 1.0, rng)
    }

    /// He-normal scaled by `gain`.
    pub fn with_gain(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let std = gain * (2.0 / (c_in * k) as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::randn(&[c_out, c_in, k], std, rng))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c_out]))?;
        Ok(Self { w, b })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        Ok(g.conv1d(x, w, b)?)
    }

    pub fn apply_relu(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.apply(g, store, x)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        let w = store.add(format!("{name}.w"), Tensor::randn(&[n_out, n_in], std, rng))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[n_out]))?;
        Ok(Self { w, b })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        Ok(g.dense(x, w, b)?)
    }
}
