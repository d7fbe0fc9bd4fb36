//! Classification head on the encoder, cross-entropy fine-tuning and the
//! ablation training modes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use qoe_numeric::{adam_step, ops, AdamConfig, AdamState, Checkpoint, Graph, ParamStore, Rng, Tensor, Var};

use crate::contrastive::{embed_with, Encoder, EncoderConfig, EncoderNet, ENCODER_PREFIX};
use crate::dataset::{LabelSource, LabeledDataset};
use crate::diffusion::check_finite;
use crate::error::{config_err, data_err, RcaError, Result};
use crate::layers::Dense;
use crate::schema::{RootCause, NUM_CLASSES};

/// Encoder plus a dense head on the unit-norm embedding, in one store.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub net: EncoderNet,
    pub head: Dense,
    pub store: ParamStore,
}

const HEAD_STD: f64 = 0.01;

impl Classifier {
    /// Wraps a (pretrained) encoder with a freshly initialised head.
    pub fn from_encoder(encoder: &Encoder, seed: u64) -> Result<Self> {
        let mut store = encoder.store.clone();
        let mut rng = Rng::seed_from_u64(seed).split("head");
        let head = Dense::new(&mut store, "head", encoder.net.dim(), NUM_CLASSES, HEAD_STD, &mut rng)?;
        Ok(Self {
            net: encoder.net.clone(),
            head,
            store,
        })
    }

    /// Randomly initialised encoder and head.
    pub fn scratch(config: &EncoderConfig, m: usize, l: usize, seed: u64) -> Result<Self> {
        Self::from_encoder(&Encoder::new(config, m, l, seed)?, seed)
    }

    pub fn encoder(&self) -> Result<Encoder> {
        let mut e = Encoder::new(&self.net.config, self.net.m, self.net.l, 0)?;
        e.store.copy_values_from(&self.store)?;
        Ok(e)
    }

    fn set_encoder_frozen(&mut self, frozen: bool) {
        for p in self.store.iter_mut() {
            if p.name.starts_with(ENCODER_PREFIX) {
                p.frozen = frozen;
            }
        }
    }

    /// Logits `[b, 6]` from unit-norm embeddings `[b, D]`.
    pub fn head_logits(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.head.apply(g, &self.store, z)
    }

    /// Logits `[b, 6]` from a channel-major batch `[m, b, l]`.
    pub fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let z = self.net.embed(g, &self.store, x)?;
        self.head_logits(g, z)
    }

    pub fn embed_all(&self, xs: &[&Tensor]) -> Result<Tensor> {
        embed_with(&self.net, &self.store, xs)
    }

    /// Class probabilities for each sample.
    pub fn predict_proba(&self, xs: &[&Tensor]) -> Result<Vec<[f64; NUM_CLASSES]>> {
        let z = self.embed_all(xs)?;
        let mut g = Graph::new();
        let zv = g.input(z);
        let h = self.head_logits(&mut g, zv)?;
        Ok(g.value(h).data().chunks(NUM_CLASSES).map(probabilities).collect())
    }

    pub fn predict(&self, xs: &[&Tensor]) -> Result<Vec<RootCause>> {
        Ok(self.predict_proba(xs)?.iter().map(|p| RootCause::from_index(ops::argmax(p).unwrap())).collect())
    }

    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f64> {
        let xs: Vec<&Tensor> = data.samples.iter().map(|s| s.values()).collect();
        crate::metrics::accuracy(&self.predict(&xs)?, &data.labels)
    }

    pub fn save(&self, path: &Path, fingerprint: &str) -> Result<()> {
        Checkpoint::from_store(&self.store, fingerprint).save(path)?;
        Ok(())
    }

    pub fn load(path: &Path, config: &EncoderConfig, m: usize, l: usize, fingerprint: &str) -> Result<Self> {
        let ck = Checkpoint::load_matching(path, fingerprint)?;
        let mut c = Self::scratch(config, m, l, 0)?;
        c.store.copy_values_from(&ck.into_store()?)?;
        Ok(c)
    }
}

/// Softmax of one logit row.
pub fn probabilities(logits: &[f64]) -> [f64; NUM_CLASSES] {
    let mut p = [0.0; NUM_CLASSES];
    p.copy_from_slice(&ops::softmax(logits).expect("finite logits"));
    p
}

/// Mean negative log-probability of the true class, from logits `[b, 6]`.
pub fn cross_entropy_graph(g: &mut Graph, logits: Var, labels: &[RootCause]) -> Result<Var> {
    let shape = g.value(logits).shape().to_vec();
    if shape != [labels.len(), NUM_CLASSES] || labels.is_empty() {
        return data_err(format!("logits {shape:?} for {} labels", labels.len()));
    }
    let logp = g.log_softmax_rows(logits, false)?;
    let mut w = vec![0.0; labels.len() * NUM_CLASSES];
    for (i, y) in labels.iter().enumerate() {
        w[i * NUM_CLASSES + y.index()] = -1.0 / labels.len() as f64;
    }
    Ok(g.weighted_sum(logp, Tensor::new(shape, w)?)?)
}

/// Cross-entropy of probability rows against labels.
pub fn cross_entropy(probas: &[[f64; NUM_CLASSES]], labels: &[RootCause]) -> Result<f64> {
    if probas.len() != labels.len() || labels.is_empty() {
        return data_err(format!("{} probability rows for {} labels", probas.len(), labels.len()));
    }
    for p in probas {
        let s: f64 = p.iter().sum();
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (s - 1.0).abs() > 1e-9 {
            return data_err("probability row is not on the simplex");
        }
    }
    let total: f64 = probas.iter().zip(labels).map(|(p, y)| -p[y.index()].ln()).sum();
    Ok(total / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FinetuneMode {
    /// Encoder and head.
    Full,
    /// Head only; the encoder is frozen.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mode: FinetuneMode::Full,
            epochs: 60,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return config_err("finetune batch_size must be positive");
        }
        if !(self.lr > 0.0) {
            return config_err("finetune lr must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

/// Cross-entropy fine-tuning on expert labels. With a validation set the
/// parameters of the best-validation epoch (earliest on ties) are returned.
pub fn finetune(
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    init: Classifier,
    config: &FinetuneConfig,
) -> Result<(Classifier, Vec<FinetuneEpoch>)> {
    for d in std::iter::once(train).chain(val) {
        if !d.all_from(LabelSource::Expert) {
            return Err(RcaError::Contract("fine-tuning accepts expert-labelled samples only".into()));
        }
    }
    train_supervised(train, val, init, config)
}

fn train_supervised(
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    mut clf: Classifier,
    config: &FinetuneConfig,
) -> Result<(Classifier, Vec<FinetuneEpoch>)> {
    config.validate()?;
    if train.is_empty() {
        return data_err("empty fine-tuning set");
    }
    let linear = config.mode == FinetuneMode::Linear;
    clf.set_encoder_frozen(linear);
    let root = Rng::seed_from_u64(config.seed).split("finetune");
    let mut opt = AdamState::new(&clf.store);
    let adam = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let xs: Vec<&Tensor> = train.samples.iter().map(|s| s.values()).collect();
    // A frozen encoder maps each sample to a fixed embedding.
    let frozen_z = if linear { Some(clf.embed_all(&xs)?) } else { None };
    let mut best: Option<(f64, ParamStore)> = None;
    let mut trace = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        root.split_index("shuffle", epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let ys: Vec<RootCause> = chunk.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::new();
            let logits = match &frozen_z {
                Some(z) => {
                    let d = z.shape()[1];
                    let rows: Vec<f64> = chunk.iter().flat_map(|&i| z.data()[i * d..(i + 1) * d].iter().copied()).collect();
                    let zv = g.input(Tensor::new(vec![chunk.len(), d], rows)?);
                    clf.head_logits(&mut g, zv)?
                }
                None => {
                    let batch: Vec<&Tensor> = chunk.iter().map(|&i| xs[i]).collect();
                    let x = g.input(Tensor::stack_channel_major(&batch)?);
                    clf.logits(&mut g, x)?
                }
            };
            let loss = cross_entropy_graph(&mut g, logits, &ys)?;
            let v = g.value(loss).item().unwrap();
            check_finite(v, "cross-entropy")?;
            g.backward(loss)?.write_to(&mut clf.store);
            adam_step(&mut clf.store, &mut opt, &adam)?;
            total += v * chunk.len() as f64;
        }
        let train_accuracy = clf.accuracy(train)?;
        let val_accuracy = val.map(|v| clf.accuracy(v)).transpose()?;
        if let Some(acc) = val_accuracy {
            if best.as_ref().map_or(true, |(b, _)| acc > *b) {
                best = Some((acc, clf.store.clone()));
            }
        }
        trace.push(FinetuneEpoch {
            epoch: epoch + 1,
            loss: total / train.len() as f64,
            train_accuracy,
            val_accuracy,
        });
    }
    if let Some((_, store)) = best {
        clf.store = store;
    }
    clf.set_encoder_frozen(false);
    Ok((clf, trace))
}

pub fn write_predictions(path: &Path, ids: &[String], probas: &[[f64; NUM_CLASSES]]) -> Result<()> {
    if ids.len() != probas.len() {
        return data_err("prediction export: ids and probabilities differ in length");
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string(), "predicted_class".to_string()];
    header.extend(RootCause::ALL.iter().map(|c| format!("p_{}", c.id())));
    w.write_record(&header)?;
    for (id, p) in ids.iter().zip(probas) {
        let mut rec = vec![id.clone(), RootCause::from_index(ops::argmax(p).unwrap()).id().to_string()];
        rec.extend(p.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AblationMode {
    /// Supervised from scratch on expert labels.
    CnnExp,
    /// Supervised from scratch on expert and rule labels together.
    CnnFull,
    /// Pretrained encoder, encoder and head fine-tuned.
    DkrootFull,
    /// Pretrained encoder frozen, head fine-tuned.
    FtLinear,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [Self::CnnExp, Self::CnnFull, Self::DkrootFull, Self::FtLinear];

    pub fn name(self) -> &'static str {
        match self {
            Self::CnnExp => "CNN_EXP",
            Self::CnnFull => "CNN_FULL",
            Self::DkrootFull => "DKROOT_FULL",
            Self::FtLinear => "FT_LINEAR",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| RcaError::Config(format!("unknown ablation mode `{s}`")))
    }

    pub fn needs_pretrained(self) -> bool {
        matches!(self, Self::DkrootFull | Self::FtLinear)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Training settings shared by all modes (the mode field is overridden).
    pub finetune: FinetuneConfig,
    /// Epochs for CNN_FULL, whose training set is much larger.
    pub full_epochs: usize,
    pub encoder: EncoderConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            finetune: FinetuneConfig::default(),
            full_epochs: 8,
            encoder: EncoderConfig::default(),
        }
    }
}

/// Inputs for one ablation run. `rule_train` is required by CNN_FULL and
/// `pretrained` by DKROOT_FULL and FT_LINEAR.
pub struct AblationInputs<'a> {
    pub expert_train: &'a LabeledDataset,
    pub expert_val: Option<&'a LabeledDataset>,
    pub rule_train: Option<&'a LabeledDataset>,
    pub pretrained: Option<&'a Encoder>,
}

pub fn train_ablation(
    mode: AblationMode,
    inputs: &AblationInputs,
    config: &AblationConfig,
    seed: u64,
) -> Result<(Classifier, Vec<FinetuneEpoch>)> {
    let train = inputs.expert_train;
    if train.is_empty() {
        return data_err(format!("{} needs a non-empty expert training set", mode.name()));
    }
    if !train.all_from(LabelSource::Expert) {
        return Err(RcaError::Contract("ablation expert set contains non-expert labels".into()));
    }
    let m = train.schema.m();
    let l = train.seq_len().unwrap();
    let mut ft = config.finetune.clone();
    ft.seed = seed;
    ft.mode = if mode == AblationMode::FtLinear {
        FinetuneMode::Linear
    } else {
        FinetuneMode::Full
    };
    match mode {
        AblationMode::CnnExp => {
            let init = Classifier::scratch(&config.encoder, m, l, seed)?;
            finetune(train, inputs.expert_val, init, &ft)
        }
        AblationMode::CnnFull => {
            let Some(rule) = inputs.rule_train else {
                return Err(RcaError::Contract("CNN_FULL needs the rule-labelled pool".into()));
            };
            if !rule.all_from(LabelSource::Rule) {
                return Err(RcaError::Contract("CNN_FULL rule pool contains non-rule labels".into()));
            }
            let combined = rule.concat(train)?;
            ft.epochs = config.full_epochs;
            let init = Classifier::scratch(&config.encoder, m, l, seed)?;
            train_supervised(&combined, inputs.expert_val, init, &ft)
        }
        AblationMode::DkrootFull | AblationMode::FtLinear => {
            let Some(enc) = inputs.pretrained else {
                return Err(RcaError::Dependency(format!("{} needs a pretrained encoder", mode.name())));
            };
            if enc.net.config.channels != config.encoder.channels || enc.net.config.kernel != config.encoder.kernel {
                return Err(RcaError::Contract("pretrained encoder architecture differs from the baselines".into()));
            }
            finetune(train, inputs.expert_val, Classifier::from_encoder(enc, seed)?, &ft)
        }
    }
}
