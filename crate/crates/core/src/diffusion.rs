//! Class-conditional denoising diffusion over KPI matrices, used as an
//! augmentation engine: a sample is noised to step `t` in closed form and
//! pulled back with a single predicted-noise correction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use qoe_numeric::{adam_step, AdamConfig, AdamState, Checkpoint, Graph, ParamId, ParamStore, Rng, Tensor, Var};

use crate::dataset::{LabelSource, LabeledDataset};
use crate::error::{config_err, RcaError, Result};
use crate::layers::{Conv, Dense};
use crate::schema::{RootCause, NUM_CLASSES};

/// Steps whose cumulative signal fraction is at or below this are refused by
/// the reverse update.
pub const ALPHA_BAR_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `beta` interpolated linearly from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps < 2 {
            return config_err(format!("schedule needs T >= 2, got {t_steps}"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return config_err(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"));
        }
        let step = (beta_end - beta_start) / (t_steps - 1) as f64;
        let beta = (0..t_steps).map(|i| beta_start + step * i as f64).collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return config_err("every beta must lie in (0, 1)");
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `alpha_bar` at 1-based step `t`.
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps() {
            return Err(RcaError::Config(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(self.alpha_bar[t - 1])
    }
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * eps`.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let ab = schedule.alpha_bar_at(t)?;
    noise_with(x0, ab, eps)
}

fn noise_with(x0: &Tensor, ab: f64, eps: &Tensor) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(RcaError::Data(format!("noise shape {:?} vs sample {:?}", eps.shape(), x0.shape())));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

/// Single-step estimate of the clean sample from `x_t` and predicted noise.
pub fn reverse_step(x_t: &Tensor, t: usize, eps_hat: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let ab = schedule.alpha_bar_at(t)?;
    if ab <= ALPHA_BAR_FLOOR {
        return Err(RcaError::Config(format!(
            "alpha_bar at t={t} is {ab:e}; the reverse update would divide by ~0"
        )));
    }
    if x_t.shape() != eps_hat.shape() {
        return Err(RcaError::Data(format!("predicted noise {:?} vs sample {:?}", eps_hat.shape(), x_t.shape())));
    }
    let (s, r) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x_t.data().iter().zip(eps_hat.data()).map(|(x, e)| (x - r * e) / s).collect();
    Ok(Tensor::new(x_t.shape().to_vec(), data)?)
}

/// Timestep ranges for weak and strong views as fractions of `T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewPolicy {
    pub alpha_frac: f64,
    pub beta_low_frac: f64,
    pub beta_high_frac: f64,
}

impl Default for ViewPolicy {
    fn default() -> Self {
        Self {
            alpha_frac: 0.2,
            beta_low_frac: 0.2,
            beta_high_frac: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ViewRanges {
    pub weak: (usize, usize),
    pub strong: (usize, usize),
    /// The ranges share at least one step.
    pub overlap: bool,
}

impl ViewPolicy {
    pub fn ranges(&self, t_steps: usize) -> Result<ViewRanges> {
        let (a, lo, hi) = (self.alpha_frac, self.beta_low_frac, self.beta_high_frac);
        if !(0.0 < a && a <= lo && lo < hi && hi <= 1.0) {
            return config_err(format!(
                "view policy needs 0 < alpha <= beta_low < beta_high <= 1, got {a}, {lo}, {hi}"
            ));
        }
        let f = |x: f64| (x * t_steps as f64).floor() as usize;
        let weak = (1, f(a));
        let strong = (f(lo).max(1), f(hi));
        if weak.1 < weak.0 || strong.1 < strong.0 {
            return config_err(format!("view ranges {weak:?}/{strong:?} are empty at T={t_steps}"));
        }
        Ok(ViewRanges {
            weak,
            strong,
            overlap: weak.1 >= strong.0,
        })
    }

    /// `(t_weak, t_strong)`, each uniform on its integer range.
    pub fn sample(&self, t_steps: usize, rng: &mut Rng) -> Result<(usize, usize)> {
        let r = self.ranges(t_steps)?;
        let tw = rng.int_inclusive(r.weak.0, r.weak.1);
        let ts = rng.int_inclusive(r.strong.0, r.strong.1);
        Ok((tw, ts))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub embed_dim: usize,
    /// Backbone widths at full and half time resolution.
    pub channels: [usize; 2],
    pub kernel: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub view_policy: ViewPolicy,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            embed_dim: 32,
            channels: [32, 64],
            kernel: 3,
            epochs: 300,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            view_policy: ViewPolicy::default(),
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_steps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.view_policy.ranges(self.t_steps)?;
        if self.embed_dim == 0 || self.channels.contains(&0) || self.kernel % 2 == 0 || self.batch_size == 0 {
            return config_err("diffusion widths, batch size must be positive and the kernel odd");
        }
        if !(self.lr > 0.0) {
            return config_err("diffusion lr must be positive");
        }
        Ok(())
    }
}

/// Anything that predicts the injected noise of a channel-major batch.
pub trait NoiseModel {
    /// `x_t` is `[m, b, l]`; returns the predicted noise with the same shape.
    fn predict(&self, g: &mut Graph, x_t: Var, t: &[usize], y: &[RootCause]) -> Result<Var>;
}

/// Label/timestep conditioning followed by a two-level conv encoder-decoder
/// with skip connections.
#[derive(Clone, Debug)]
pub struct NoisePredictor {
    pub config: DiffusionConfig,
    pub m: usize,
    pub store: ParamStore,
    pub label_table: ParamId,
    pub time_table: ParamId,
    pub proj: Dense,
    pub fusion: Conv,
    enc1: [Conv; 2],
    enc2: [Conv; 2],
    mid: Conv,
    dec2: Conv,
    dec1: Conv,
    out: Conv,
    /// 1x1 path from the fused input straight to the output.
    shortcut: Conv,
}

impl NoisePredictor {
    pub fn new(config: &DiffusionConfig, m: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let [c1, c2] = config.channels;
        let k = config.kernel;
        let mut s = ParamStore::new();
        let label_table = s.add("diff.label_emb", Tensor::randn(&[NUM_CLASSES, d], 1.0, rng))?;
        let time_table = s.add("diff.time_emb", Tensor::randn(&[config.t_steps, d], 1.0, rng))?;
        let proj = Dense::new(&mut s, "diff.proj", d, m, (1.0 / d as f64).sqrt(), rng)?;
        let fusion = Conv::new(&mut s, "diff.fusion", 2 * m, m, 1, rng)?;
        let enc1 = [
            Conv::new(&mut s, "diff.enc1a", m, c1, k, rng)?,
            Conv::new(&mut s, "diff.enc1b", c1, c1, k, rng)?,
        ];
        let enc2 = [
            Conv::new(&mut s, "diff.enc2a", c1, c2, k, rng)?,
            Conv::new(&mut s, "diff.enc2b", c2, c2, k, rng)?,
        ];
        let mid = Conv::new(&mut s, "diff.mid", c2, c2, k, rng)?;
        let dec2 = Conv::new(&mut s, "diff.dec2", 2 * c2, c2, k, rng)?;
        let dec1 = Conv::new(&mut s, "diff.dec1", c2 + c1, c1, k, rng)?;
        let out = Conv::with_gain(&mut s, "diff.out", c1, m, k, 0.1, rng)?;
        let shortcut = Conv::with_gain(&mut s, "diff.shortcut", m, m, 1, 0.1, rng)?;
        Ok(Self {
            config: config.clone(),
            m,
            store: s,
            label_table,
            time_table,
            proj,
            fusion,
            enc1,
            enc2,
            mid,
            dec2,
            dec1,
            out,
            shortcut,
        })
    }

    fn check_conditions(&self, b: usize, t: &[usize], y: &[RootCause]) -> Result<()> {
        if t.len() != b || y.len() != b {
            return Err(RcaError::Data(format!("batch of {b} with {} timesteps and {} labels", t.len(), y.len())));
        }
        if let Some(&bad) = t.iter().find(|&&t| t == 0 || t > self.config.t_steps) {
            return Err(RcaError::Config(format!("timestep {bad} outside 1..={}", self.config.t_steps)));
        }
        Ok(())
    }

    /// Fuses `x_t` (`[m, b, l]`) with the label and timestep embeddings.
    pub fn condition(&self, g: &mut Graph, x_t: Var, t: &[usize], y: &[RootCause]) -> Result<Var> {
        let shape = g.value(x_t).shape().to_vec();
        let [m, b, l] = shape[..] else {
            return Err(RcaError::Data(format!("expected [m, b, l] input, got {shape:?}")));
        };
        if m != self.m {
            return Err(RcaError::Data(format!("input has {m} channels, predictor expects {}", self.m)));
        }
        self.check_conditions(b, t, y)?;
        let e = self.embedding(g, t, y)?;
        let e = self.proj.apply(g, &self.store, e)?;
        let e = g.broadcast_time(e, l)?;
        let cat = g.concat0(x_t, e)?;
        self.fusion.apply(g, &self.store, cat)
    }

    /// `e_y + e_t`, `[b, embed_dim]`.
    fn embedding(&self, g: &mut Graph, t: &[usize], y: &[RootCause]) -> Result<Var> {
        let lt = g.param(&self.store, self.label_table);
        let tt = g.param(&self.store, self.time_table);
        let ey = g.gather_rows(lt, &y.iter().map(|c| c.index()).collect::<Vec<_>>())?;
        let et = g.gather_rows(tt, &t.iter().map(|t| t - 1).collect::<Vec<_>>())?;
        Ok(g.add(ey, et)?)
    }

    /// Convenience forward pass outside any training graph.
    pub fn predict_tensor(&self, x_t: &Tensor, t: &[usize], y: &[RootCause]) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(x_t.clone());
        let out = self.predict(&mut g, x, t, y)?;
        Ok(g.value(out).clone())
    }

    pub fn save(&self, path: &Path, fingerprint: &str) -> Result<()> {
        Checkpoint::from_store(&self.store, fingerprint).save(path)?;
        Ok(())
    }

    /// Rebuilds the architecture from `config` and loads matching weights.
    pub fn load(path: &Path, config: &DiffusionConfig, m: usize, fingerprint: &str) -> Result<Self> {
        let ck = Checkpoint::load_matching(path, fingerprint)?;
        let mut p = Self::new(config, m, &mut Rng::seed_from_u64(0))?;
        p.store.copy_values_from(&ck.into_store()?)?;
        Ok(p)
    }
}

impl NoiseModel for NoisePredictor {
    fn predict(&self, g: &mut Graph, x_t: Var, t: &[usize], y: &[RootCause]) -> Result<Var> {
        let s = &self.store;
        let x = self.condition(g, x_t, t, y)?;
        let h = self.enc1[0].apply_relu(g, s, x)?;
        let skip1 = self.enc1[1].apply_relu(g, s, h)?;
        let l1 = g.value(skip1).shape()[2];
        let h = g.avg_pool2(skip1)?;
        let h = self.enc2[0].apply_relu(g, s, h)?;
        let skip2 = self.enc2[1].apply_relu(g, s, h)?;
        let l2 = g.value(skip2).shape()[2];
        let h = g.avg_pool2(skip2)?;
        let h = self.mid.apply_relu(g, s, h)?;
        let h = g.upsample(h, l2)?;
        let h = g.concat0(h, skip2)?;
        let h = self.dec2.apply_relu(g, s, h)?;
        let h = g.upsample(h, l1)?;
        let h = g.concat0(h, skip1)?;
        let h = self.dec1.apply_relu(g, s, h)?;
        let h = self.out.apply(g, s, h)?;
        let direct = self.shortcut.apply(g, s, x)?;
        Ok(g.add(h, direct)?)
    }
}

/// Model that always predicts zero noise.
pub struct ZeroNoise;

impl NoiseModel for ZeroNoise {
    fn predict(&self, g: &mut Graph, x_t: Var, _t: &[usize], _y: &[RootCause]) -> Result<Var> {
        let shape = g.value(x_t).shape().to_vec();
        Ok(g.input(Tensor::zeros(&shape)))
    }
}

/// Timesteps and noise for one training batch, in channel-major layout.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub t: Vec<usize>,
    pub eps: Tensor,
}

/// Per item: a uniform step in `1..=T`, then `m * l` standard normals.
pub fn draw_noise(b: usize, m: usize, l: usize, schedule: &NoiseSchedule, rng: &mut Rng) -> NoiseDraw {
    let mut t = Vec::with_capacity(b);
    let mut eps = vec![0.0; m * b * l];
    for i in 0..b {
        t.push(rng.int_inclusive(1, schedule.steps()));
        for c in 0..m {
            for e in &mut eps[(c * b + i) * l..][..l] {
                *e = rng.normal();
            }
        }
    }
    NoiseDraw {
        t,
        eps: Tensor::new(vec![m, b, l], eps).expect("finite normals"),
    }
}

/// Applies per-item forward noising to a channel-major batch.
pub fn noise_batch(x0: &Tensor, t: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let [m, b, l] = x0.shape()[..] else {
        return Err(RcaError::Data(format!("expected [m, b, l], got {:?}", x0.shape())));
    };
    if eps.shape() != x0.shape() || t.len() != b {
        return Err(RcaError::Data("noise batch shape mismatch".into()));
    }
    let coef = t
        .iter()
        .map(|&t| schedule.alpha_bar_at(t).map(|ab| (ab.sqrt(), (1.0 - ab).sqrt())))
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![0.0; m * b * l];
    let (xd, ed) = (x0.data(), eps.data());
    for c in 0..m {
        for (i, &(a, s)) in coef.iter().enumerate() {
            let o = (c * b + i) * l;
            for j in o..o + l {
                out[j] = a * xd[j] + s * ed[j];
            }
        }
    }
    Ok(Tensor::new(vec![m, b, l], out)?)
}

/// Mean squared error between predicted and injected noise for a batch.
pub fn diffusion_loss_graph(
    g: &mut Graph,
    model: &dyn NoiseModel,
    x0: &Tensor,
    y: &[RootCause],
    draw: &NoiseDraw,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let x_t = noise_batch(x0, &draw.t, &draw.eps, schedule)?;
    let x_t = g.input(x_t);
    let pred = model.predict(g, x_t, &draw.t, y)?;
    let target = g.input(draw.eps.clone());
    Ok(g.mse(pred, target)?)
}

/// Loss on `x0s` with noise drawn from `rng`.
pub fn diffusion_loss(
    x0s: &[&Tensor],
    y: &[RootCause],
    schedule: &NoiseSchedule,
    model: &dyn NoiseModel,
    rng: &mut Rng,
) -> Result<f64> {
    if x0s.is_empty() {
        return Err(RcaError::Data("diffusion loss of an empty batch".into()));
    }
    let x0 = Tensor::stack_channel_major(x0s)?;
    let [m, b, l] = x0.shape()[..] else { unreachable!() };
    let draw = draw_noise(b, m, l, schedule, rng);
    let mut g = Graph::new();
    let loss = diffusion_loss_graph(&mut g, model, &x0, y, &draw, schedule)?;
    Ok(g.value(loss).item().unwrap())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

pub(crate) fn check_finite(loss: f64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(RcaError::Numeric(qoe_numeric::NumericError::NonFinite(format!("{what} loss"))))
    }
}

/// Minibatch Adam on the noise-prediction loss. Expert-labelled, normalised
/// data only.
pub fn train_diffusion(data: &LabeledDataset, config: &DiffusionConfig) -> Result<(NoisePredictor, Vec<EpochLoss>)> {
    if !data.all_from(LabelSource::Expert) {
        return Err(RcaError::Contract("diffusion training accepts expert-labelled samples only".into()));
    }
    if data.normalization.is_none() {
        return Err(RcaError::Contract("diffusion training needs normalised data".into()));
    }
    if data.is_empty() {
        return Err(RcaError::Data("empty diffusion training set".into()));
    }
    let schedule = config.schedule()?;
    let root = Rng::seed_from_u64(config.seed).split("diffusion");
    let mut model = NoisePredictor::new(config, data.schema.m(), &mut root.split("init"))?;
    let mut opt = AdamState::new(&model.store);
    let adam = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let l = data.seq_len().unwrap();
    let m = data.schema.m();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        root.split_index("shuffle", epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let xs: Vec<&Tensor> = chunk.iter().map(|&i| data.samples[i].values()).collect();
            let ys: Vec<RootCause> = chunk.iter().map(|&i| data.labels[i]).collect();
            let x0 = Tensor::stack_channel_major(&xs)?;
            let draw = draw_noise(chunk.len(), m, l, &schedule, &mut root.split_index("noise", step));
            let mut g = Graph::new();
            let loss = diffusion_loss_graph(&mut g, &model, &x0, &ys, &draw, &schedule)?;
            let v = g.value(loss).item().unwrap();
            check_finite(v, "diffusion")?;
            g.backward(loss)?.write_to(&mut model.store);
            adam_step(&mut model.store, &mut opt, &adam)?;
            total += v * chunk.len() as f64;
            step += 1;
        }
        trace.push(EpochLoss {
            epoch: epoch + 1,
            loss: total / data.len() as f64,
        });
    }
    Ok((model, trace))
}

/// Noised input and its single-step reconstruction.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub noised: Tensor,
    pub denoised: Tensor,
}

/// Noises each `[m, l]` sample to its step with fresh noise (drawn item by
/// item from `rng`) and reconstructs all of them in one batched pass.
pub fn reconstruct_batch(
    x0s: &[&Tensor],
    ts: &[usize],
    ys: &[RootCause],
    model: &dyn NoiseModel,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Vec<Reconstruction>> {
    if x0s.is_empty() {
        return Ok(Vec::new());
    }
    if ts.len() != x0s.len() || ys.len() != x0s.len() {
        return Err(RcaError::Data("reconstruct_batch: length mismatch".into()));
    }
    let mut noised = Vec::with_capacity(x0s.len());
    for (x0, &t) in x0s.iter().zip(ts) {
        let ab = schedule.alpha_bar_at(t)?;
        if ab <= ALPHA_BAR_FLOOR {
            return Err(RcaError::Config(format!("alpha_bar at t={t} is {ab:e}; refusing to reconstruct")));
        }
        let mut e = vec![0.0; x0.len()];
        rng.fill_normal(&mut e);
        noised.push(noise_with(x0, ab, &Tensor::new(x0.shape().to_vec(), e)?)?);
    }
    let refs: Vec<&Tensor> = noised.iter().collect();
    let batch = Tensor::stack_channel_major(&refs)?;
    let mut g = Graph::new();
    let xv = g.input(batch);
    let pred = model.predict(&mut g, xv, ts, ys)?;
    let eps_hat = g.value(pred).unstack_channel_major()?;
    noised
        .into_iter()
        .zip(eps_hat)
        .zip(ts)
        .map(|((n, e), &t)| {
            let denoised = reverse_step(&n, t, &e, schedule)?;
            Ok(Reconstruction { noised: n, denoised })
        })
        .collect()
}

pub fn augment_single_step(
    x0: &Tensor,
    t: usize,
    y: RootCause,
    model: &dyn NoiseModel,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    let mut r = reconstruct_batch(&[x0], &[t], &[y], model, schedule, rng)?;
    Ok(r.pop().unwrap().denoised)
}

/// `(weak, strong)` views of one sample.
pub fn augment_pair(
    x0: &Tensor,
    y: RootCause,
    policy: &ViewPolicy,
    model: &dyn NoiseModel,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    let (tw, ts) = policy.sample(schedule.steps(), rng)?;
    let weak = augment_single_step(x0, tw, y, model, schedule, rng)?;
    let strong = augment_single_step(x0, ts, y, model, schedule, rng)?;
    Ok((weak, strong))
}

/// Weak and strong views for many samples with one batched predictor pass.
/// Item `i` uses its own stream `rng.split_index("view", i)`, so results do
/// not depend on batch composition.
pub fn augment_pairs(
    x0s: &[&Tensor],
    ys: &[RootCause],
    policy: &ViewPolicy,
    model: &dyn NoiseModel,
    schedule: &NoiseSchedule,
    rng: &Rng,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let n = x0s.len();
    let mut ts = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(2 * n);
    let mut noised = Vec::with_capacity(2 * n);
    for (i, (&x0, &y)) in x0s.iter().zip(ys).enumerate() {
        let mut r = rng.split_index("view", i as u64);
        let (tw, tsg) = policy.sample(schedule.steps(), &mut r)?;
        for t in [tw, tsg] {
            let mut e = vec![0.0; x0.len()];
            r.fill_normal(&mut e);
            noised.push(forward_noise(x0, t, &Tensor::new(x0.shape().to_vec(), e)?, schedule)?);
            ts.push(t);
            labels.push(y);
        }
    }
    if n == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let refs: Vec<&Tensor> = noised.iter().collect();
    let mut g = Graph::new();
    let xv = g.input(Tensor::stack_channel_major(&refs)?);
    let pred = model.predict(&mut g, xv, &ts, &labels)?;
    let eps_hat = g.value(pred).unstack_channel_major()?;
    let mut weak = Vec::with_capacity(n);
    let mut strong = Vec::with_capacity(n);
    for (k, e) in eps_hat.iter().enumerate() {
        let v = reverse_step(&noised[k], ts[k], e, schedule)?;
        if k % 2 == 0 {
            weak.push(v);
        } else {
            strong.push(v);
        }
    }
    Ok((weak, strong))
}

/// Euclidean distance between equally shaped tensors.
pub fn l2_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
