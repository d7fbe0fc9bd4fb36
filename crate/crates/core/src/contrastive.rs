//! Shared conv encoder and supervised contrastive pretraining on
//! rule-labelled samples with diffusion views.

use std::path::Path;

use serde::{Deserialize, Serialize};

use qoe_numeric::{adam_step, AdamConfig, AdamState, Checkpoint, Graph, ParamStore, Rng, Tensor, Var};

use crate::dataset::{LabelSource, LabeledDataset};
use crate::diffusion::{augment_pairs, check_finite, NoiseModel, NoiseSchedule, ViewPolicy};
use crate::error::{config_err, data_err, RcaError, Result};
use crate::layers::Conv;
use crate::schema::RootCause;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output channels of each conv block; one block per entry.
    pub channels: Vec<usize>,
    pub kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 64],
            kernel: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return config_err("encoder needs at least one block with positive width");
        }
        if self.kernel % 2 == 0 {
            return config_err(format!("encoder kernel {} must be odd", self.kernel));
        }
        Ok(())
    }

    /// Flattened feature size for inputs of length `l`.
    pub fn output_dim(&self, l: usize) -> Result<usize> {
        let mut len = l;
        for _ in &self.channels {
            len /= 2;
            if len == 0 {
                return config_err(format!("sequence length {l} too short for {} pooling blocks", self.channels.len()));
            }
        }
        Ok(len * self.channels.last().unwrap())
    }
}

/// Layer handles of the encoder; the values live in whichever store the
/// caller passes (the encoder's own, or a classifier's that embeds it).
#[derive(Clone, Debug)]
pub struct EncoderNet {
    pub config: EncoderConfig,
    pub m: usize,
    pub l: usize,
    blocks: Vec<Conv>,
}

pub const ENCODER_PREFIX: &str = "enc.";

impl EncoderNet {
    pub fn build(store: &mut ParamStore, config: &EncoderConfig, m: usize, l: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        config.output_dim(l)?;
        let mut blocks = Vec::with_capacity(config.channels.len());
        let mut c_in = m;
        for (i, &c) in config.channels.iter().enumerate() {
            blocks.push(Conv::new(store, &format!("{ENCODER_PREFIX}block{i}"), c_in, c, config.kernel, rng)?);
            c_in = c;
        }
        Ok(Self {
            config: config.clone(),
            m,
            l,
            blocks,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.output_dim(self.l).unwrap()
    }

    /// `[m, b, l]` -> feature map `[c, b, l / 2^blocks]`.
    pub fn feature_map(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.m || shape[2] != self.l {
            return data_err(format!("encoder expects [{}, b, {}], got {shape:?}", self.m, self.l));
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.apply_relu(g, store, h)?;
            h = g.avg_pool2(h)?;
        }
        Ok(h)
    }

    /// `[m, b, l]` -> flattened features `[b, D]`.
    pub fn flat(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.feature_map(g, store, x)?;
        Ok(g.to_batch_major(h)?)
    }

    /// `[m, b, l]` -> unit-norm embeddings `[b, D]`.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.flat(g, store, x)?;
        normalize_flatten_var(g, h)
    }
}

/// Row-wise `vec(z) / ||vec(z)||`; all-zero rows are an error.
pub fn normalize_flatten_var(g: &mut Graph, x: Var) -> Result<Var> {
    Ok(g.l2_normalize_rows(x)?)
}

pub fn normalize_flatten(feature_map: &Tensor) -> Result<Tensor> {
    let flat = Tensor::new(vec![feature_map.len()], feature_map.data().to_vec())?;
    let mut g = Graph::new();
    let x = g.input(flat);
    let z = normalize_flatten_var(&mut g, x)?;
    Ok(g.value(z).clone())
}

/// A standalone encoder with its parameters.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub net: EncoderNet,
    pub store: ParamStore,
}

impl Encoder {
    pub fn new(config: &EncoderConfig, m: usize, l: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(seed).split("encoder");
        let net = EncoderNet::build(&mut store, config, m, l, &mut rng)?;
        Ok(Self { net, store })
    }

    /// Feature map of one `[m, l]` sample.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(Tensor::stack_channel_major(&[x])?);
        let h = self.net.feature_map(&mut g, &self.store, xv)?;
        let mut items = g.value(h).unstack_channel_major()?;
        Ok(items.pop().unwrap())
    }

    /// Unit-norm embeddings of many samples, row-major `[n, D]`.
    pub fn embed_all(&self, xs: &[&Tensor]) -> Result<Tensor> {
        embed_with(&self.net, &self.store, xs)
    }

    pub fn save(&self, path: &Path, fingerprint: &str) -> Result<()> {
        Checkpoint::from_store(&self.store, fingerprint).save(path)?;
        Ok(())
    }

    pub fn load(path: &Path, config: &EncoderConfig, m: usize, l: usize, fingerprint: &str) -> Result<Self> {
        let ck = Checkpoint::load_matching(path, fingerprint)?;
        let mut e = Self::new(config, m, l, 0)?;
        e.store.copy_values_from(&ck.into_store()?)?;
        Ok(e)
    }
}

const EMBED_CHUNK: usize = 256;

pub(crate) fn embed_with(net: &EncoderNet, store: &ParamStore, xs: &[&Tensor]) -> Result<Tensor> {
    let d = net.dim();
    let mut out = Vec::with_capacity(xs.len() * d);
    for chunk in xs.chunks(EMBED_CHUNK) {
        let mut g = Graph::new();
        let x = g.input(Tensor::stack_channel_major(chunk)?);
        let z = net.embed(&mut g, store, x)?;
        out.extend_from_slice(g.value(z).data());
    }
    Ok(Tensor::new(vec![xs.len(), d], out)?)
}

/// `M[i][j] = 1` iff `i != j` and the labels match.
pub fn positive_mask(labels: &[RootCause]) -> Tensor {
    let n = labels.len();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j && labels[i] == labels[j] {
                m[i * n + j] = 1.0;
            }
        }
    }
    Tensor::new(vec![n, n], m).unwrap()
}

/// Two views per sample: rows `0..n` are the first views, `n..2n` the second.
#[derive(Clone, Debug)]
pub struct ContrastBatch {
    pub features: Tensor,
    /// One label per sample (length `n`).
    pub labels: Vec<RootCause>,
    pub mask: Tensor,
}

impl ContrastBatch {
    pub fn new(features: Tensor, labels: Vec<RootCause>) -> Result<Self> {
        let [rows, d] = features.shape()[..] else {
            return data_err(format!("features must be [2n, D], got {:?}", features.shape()));
        };
        if rows != 2 * labels.len() || rows < 2 {
            return data_err(format!("{rows} feature rows for {} samples", labels.len()));
        }
        for (r, row) in features.data().chunks(d).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return data_err(format!("feature row {r} has norm {norm}"));
            }
        }
        let mask = positive_mask(&duplicate(&labels));
        Ok(Self { features, labels, mask })
    }
}

fn duplicate(labels: &[RootCause]) -> Vec<RootCause> {
    labels.iter().chain(labels).copied().collect()
}

/// Supervised contrastive loss over unit-norm rows `z` (`[2n, D]`) whose
/// labels are `labels` repeated twice. The softmax of each anchor runs over
/// every other row; anchors without positives are dropped from the mean.
pub fn supcon_loss_graph(g: &mut Graph, z: Var, labels: &[RootCause], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return config_err(format!("temperature must be positive, got {tau}"));
    }
    let rows = g.value(z).shape()[0];
    if rows < 2 || rows != 2 * labels.len() {
        return data_err(format!("contrast set of {rows} rows for {} samples", labels.len()));
    }
    let sim = g.matmul_nt(z, z)?;
    let sim = g.scale(sim, 1.0 / tau);
    let logp = g.log_softmax_rows(sim, true)?;
    let mut w = positive_mask(&duplicate(labels));
    let positives: Vec<f64> = w.data().chunks(rows).map(|r| r.iter().sum()).collect();
    let anchors = positives.iter().filter(|&&p| p > 0.0).count();
    if anchors == 0 {
        return data_err("no anchor in the batch has a positive");
    }
    for (row, &p) in w.data_mut().chunks_mut(rows).zip(&positives) {
        if p > 0.0 {
            row.iter_mut().for_each(|v| *v *= -1.0 / (p * anchors as f64));
        }
    }
    Ok(g.weighted_sum(logp, w)?)
}

pub fn supcon_loss(batch: &ContrastBatch, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.input(batch.features.clone());
    let l = supcon_loss_graph(&mut g, z, &batch.labels, tau)?;
    Ok(g.value(l).item().unwrap())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub lr: f64,
    pub seed: u64,
    pub fresh_views_per_epoch: bool,
    pub encoder: EncoderConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            tau: 0.1,
            lr: 1e-3,
            seed: 0,
            fresh_views_per_epoch: true,
            encoder: EncoderConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.batch_size < 2 {
            return config_err("pretrain batch_size must be at least 2");
        }
        if !(self.tau > 0.0) || !(self.lr > 0.0) {
            return config_err("pretrain tau and lr must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Mean loss of each epoch, in order.
pub fn epoch_means(trace: &[StepLoss]) -> Vec<f64> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for s in trace {
        if out.len() < s.epoch {
            out.resize(s.epoch, (0.0, 0));
        }
        let e = &mut out[s.epoch - 1];
        e.0 += s.loss;
        e.1 += 1;
    }
    out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}

pub fn write_loss_trace(path: &Path, trace: &[StepLoss]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "step", "loss"])?;
    for s in trace {
        w.write_record([s.epoch.to_string(), s.step.to_string(), format!("{}", s.loss)])?;
    }
    w.flush()?;
    Ok(())
}

/// Splits `labels` into batches of roughly `batch_size` in which every
/// present class has at least two members (a singleton class stays alone).
pub fn stratified_batches(labels: &[RootCause], batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for c in RootCause::ALL {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rng.shuffle(&mut idx);
        let mut chunks: Vec<Vec<usize>> = idx.chunks(2).map(<[usize]>::to_vec).collect();
        if chunks.len() > 1 && chunks.last().unwrap().len() == 1 {
            let last = chunks.pop().unwrap();
            chunks.last_mut().unwrap().extend(last);
        }
        groups.extend(chunks);
    }
    rng.shuffle(&mut groups);
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    for gr in groups {
        cur.extend(gr);
        if cur.len() >= batch_size {
            batches.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

const VIEW_CHUNK: usize = 128;

/// Weak and strong views of every sample, item `i` seeded from `rng` and `i`.
pub fn views_for(
    data: &LabeledDataset,
    policy: &ViewPolicy,
    model: &dyn NoiseModel,
    schedule: &NoiseSchedule,
    rng: &Rng,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mut weak = Vec::with_capacity(data.len());
    let mut strong = Vec::with_capacity(data.len());
    for (c, start) in (0..data.len()).step_by(VIEW_CHUNK).enumerate() {
        let end = (start + VIEW_CHUNK).min(data.len());
        let xs: Vec<&Tensor> = data.samples[start..end].iter().map(|s| s.values()).collect();
        let (w, s) = augment_pairs(&xs, &data.labels[start..end], policy, model, schedule, &rng.split_index("chunk", c as u64))?;
        weak.extend(w);
        strong.extend(s);
    }
    Ok((weak, strong))
}

/// Trains a fresh encoder with the supervised contrastive loss on
/// diffusion views of normalised rule-labelled data.
pub fn pretrain(
    rule_data: &LabeledDataset,
    model: &dyn NoiseModel,
    schedule: &NoiseSchedule,
    policy: &ViewPolicy,
    config: &PretrainConfig,
) -> Result<(Encoder, Vec<StepLoss>)> {
    config.validate()?;
    if !rule_data.all_from(LabelSource::Rule) {
        return Err(RcaError::Contract("contrastive pretraining accepts rule-labelled samples only".into()));
    }
    if rule_data.normalization.is_none() {
        return Err(RcaError::Contract("contrastive pretraining needs normalised data".into()));
    }
    let Some(l) = rule_data.seq_len() else {
        return data_err("empty pretraining set");
    };
    let mut enc = Encoder::new(&config.encoder, rule_data.schema.m(), l, config.seed)?;
    let root = Rng::seed_from_u64(config.seed).split("pretrain");
    let mut opt = AdamState::new(&enc.store);
    let adam = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut trace = Vec::new();
    let mut views = None;
    let mut step = 0;
    for epoch in 0..config.epochs {
        if views.is_none() || config.fresh_views_per_epoch {
            let r = root.split_index("views", if config.fresh_views_per_epoch { epoch as u64 } else { 0 });
            views = Some(views_for(rule_data, policy, model, schedule, &r)?);
        }
        let (weak, strong) = views.as_ref().unwrap();
        let batches = stratified_batches(&rule_data.labels, config.batch_size, &mut root.split_index("batches", epoch as u64));
        for batch in batches {
            if batch.len() < 2 {
                continue;
            }
            let items: Vec<&Tensor> = batch.iter().map(|&i| &strong[i]).chain(batch.iter().map(|&i| &weak[i])).collect();
            let ys: Vec<RootCause> = batch.iter().map(|&i| rule_data.labels[i]).collect();
            let mut g = Graph::new();
            let x = g.input(Tensor::stack_channel_major(&items)?);
            let z = enc.net.embed(&mut g, &enc.store, x)?;
            let loss = supcon_loss_graph(&mut g, z, &ys, config.tau)?;
            let v = g.value(loss).item().unwrap();
            check_finite(v, "contrastive")?;
            g.backward(loss)?.write_to(&mut enc.store);
            adam_step(&mut enc.store, &mut opt, &adam)?;
            step += 1;
            trace.push(StepLoss {
                epoch: epoch + 1,
                step,
                loss: v,
            });
        }
    }
    Ok((enc, trace))
}
