//! Stage wiring: run configuration, on-disk layout, manifests and the
//! reproducible metrics report.
//!
//! Layout under the output root:
//! `data/` pools and schema, `stages/<stage>/` checkpoints and traces,
//! `report/` metrics and plot tables, `manifest.json` run bookkeeping.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use qoe_numeric::{fingerprint, NumericError, Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::contrastive::{epoch_means, pretrain, write_loss_trace, Encoder, PretrainConfig, StepLoss};
use crate::dataset::{split_dataset, KpiSample, LabeledDataset, ZScore};
use crate::diffusion::{reconstruct_batch, DiffusionConfig, EpochLoss, NoisePredictor, NoiseSchedule};
use crate::error::{config_err, RcaError, Result};
use crate::finetune::{
    finetune, train_ablation, write_predictions, AblationConfig, AblationInputs, AblationMode, Classifier,
    FinetuneConfig, FinetuneEpoch,
};
use crate::io::{load_dataset, save_dataset, write_samples, DatasetPaths};
use crate::metrics::{
    accuracy, classical_augment, cloud_report, finite_or_null, knn_baseline, l2_view_audit, mean_std,
    ClassicalAugment, CloudReport, KnnKind, L2Audit, PointCloud,
};
use crate::rules::{rule_label, RuleSet};
use crate::schema::{KpiSchema, RootCause};
use crate::synth::{generate_pools, PoolConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Stratified train/validation/test fractions of the expert pool.
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: [0.7, 0.15, 0.15],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// Epochs for CNN_FULL; the other modes use the finetune section.
    pub full_epochs: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { full_epochs: 8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpace {
    /// Flattened z-scored samples.
    Raw,
    /// Encoder embeddings of the first seed's pretrained encoder.
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Seed of the view and classical-augmentation draws.
    pub seed: u64,
    /// Space reported as the headline separability table; both are computed.
    pub feature_space: FeatureSpace,
    pub noise_injection_ratio: f64,
    pub scaling_sigma: f64,
    pub knn_k: usize,
    pub knn_window: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            feature_space: FeatureSpace::Raw,
            noise_injection_ratio: 0.1,
            scaling_sigma: 1.1,
            knn_k: 1,
            knn_window: 20,
        }
    }
}

/// The single top-level configuration; every section has defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Number of seeds; runs use seeds `0..seeds`, added to each stage's base seed.
    pub seeds: usize,
    pub data: PoolConfig,
    pub split: SplitConfig,
    pub diffusion: DiffusionConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub ablation: AblationSection,
    pub evaluate: EvaluateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: 5,
            data: PoolConfig::default(),
            split: SplitConfig::default(),
            diffusion: DiffusionConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            ablation: AblationSection::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| RcaError::Config(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return config_err("seeds must be at least 1");
        }
        let [a, b, c] = self.split.fractions;
        if a <= 0.0 || b < 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
            return config_err(format!("split fractions {:?} must be positive and sum to 1", self.split.fractions));
        }
        self.data.generator.validate()?;
        self.diffusion.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        let e = &self.evaluate;
        if e.knn_k == 0 || e.knn_window == 0 || e.knn_window > self.data.l {
            return config_err("evaluate needs knn_k >= 1 and 1 <= knn_window <= l");
        }
        if !(e.noise_injection_ratio >= 0.0) || !(e.scaling_sigma >= 0.0) {
            return config_err("classical augmentation parameters must be non-negative");
        }
        Ok(())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).collect()
    }

    pub fn fingerprint(&self) -> Result<String> {
        Ok(fingerprint(&[&serde_json::to_vec(self)?]))
    }

    fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            finetune: self.finetune.clone(),
            full_epochs: self.ablation.full_epochs,
            encoder: self.pretrain.encoder.clone(),
        }
    }
}

/// Paths under one output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.root.join("stages").join(stage)
    }

    pub fn seed_dir(&self, stage: &str, seed: u64) -> PathBuf {
        self.stage_dir(stage).join(format!("seed{seed}"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn metrics_json(&self) -> PathBuf {
        self.report_dir().join("metrics.json")
    }

    fn diffusion_ckpt(&self) -> PathBuf {
        self.stage_dir("diffusion").join("predictor.ckpt")
    }

    fn encoder_ckpt(&self, seed: u64) -> PathBuf {
        self.seed_dir("pretrain", seed).join("encoder.ckpt")
    }

    fn classifier_ckpt(&self, seed: u64) -> PathBuf {
        self.seed_dir("finetune", seed).join("classifier.ckpt")
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).display().to_string()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// One executed stage as recorded in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub wall_clock_secs: f64,
    pub checkpoints: Vec<String>,
    pub artifacts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_fingerprint: String,
    pub seeds: Vec<u64>,
    pub config: RunConfig,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    fn fresh(cfg: &RunConfig) -> Result<Self> {
        let fp = cfg.fingerprint()?;
        Ok(Self {
            run_id: fp[..16].to_string(),
            config_fingerprint: fp,
            seeds: cfg.seed_list(),
            config: cfg.clone(),
            stages: Vec::new(),
        })
    }

    /// Appends to the manifest under `layout`, starting a new one when the
    /// configuration changed.
    pub fn append(layout: &Layout, cfg: &RunConfig, records: Vec<StageRecord>) -> Result<Self> {
        let path = layout.manifest();
        let fp = cfg.fingerprint()?;
        let mut m = match read_json::<RunManifest>(&path) {
            Ok(m) if m.config_fingerprint == fp => m,
            _ => Self::fresh(cfg)?,
        };
        m.stages.extend(records);
        write_json(&path, &m)?;
        Ok(m)
    }
}

struct Recorder<'a> {
    layout: &'a Layout,
    start: Instant,
    stage: &'static str,
    checkpoints: Vec<String>,
    artifacts: Vec<String>,
}

impl<'a> Recorder<'a> {
    fn new(layout: &'a Layout, stage: &'static str) -> Self {
        Self {
            layout,
            start: Instant::now(),
            stage,
            checkpoints: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    fn checkpoint(&mut self, p: &Path) {
        self.checkpoints.push(self.layout.rel(p));
    }

    fn artifact(&mut self, p: &Path) {
        self.artifacts.push(self.layout.rel(p));
    }

    fn finish(self) -> StageRecord {
        StageRecord {
            stage: self.stage.to_string(),
            wall_clock_secs: self.start.elapsed().as_secs_f64(),
            checkpoints: self.checkpoints,
            artifacts: self.artifacts,
        }
    }
}

/// Pool sizes and label quality written by `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub n_rule: usize,
    pub n_expert: usize,
    pub n_holdout: usize,
    pub rule_class_counts: [usize; 6],
    pub expert_class_counts: [usize; 6],
    pub rule_noise_rate: f64,
}

fn write_truth(path: &Path, ids: &[&str], truth: &[RootCause]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "class_id"])?;
    for (id, c) in ids.iter().zip(truth) {
        w.write_record([*id, &c.id().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Generates the rule-labelled, expert-labelled and holdout pools with the
/// default schema and rules, and writes them under `data/`.
pub fn gen_data(cfg: &PoolConfig, layout: &Layout) -> Result<(DataSummary, StageRecord)> {
    let mut rec = Recorder::new(layout, "gen-data");
    let schema = KpiSchema::default_schema();
    let rules = RuleSet::default_rules();
    let pools = generate_pools(cfg, &schema, &rules.compile(&schema)?)?;
    let dir = layout.data_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("schema.json"), schema.to_json()?)?;
    fs::write(dir.join("rules.json"), rules.to_json()?)?;
    rec.artifact(&dir.join("schema.json"));
    rec.artifact(&dir.join("rules.json"));
    for (stem, ds) in [("rule", &pools.rule), ("expert", &pools.expert), ("holdout", &pools.holdout)] {
        let p = DatasetPaths::in_dir(&dir, stem);
        save_dataset(ds, &p)?;
        rec.artifact(&p.samples);
        rec.artifact(&p.labels);
    }
    let ids: Vec<&str> = pools.rule.samples.iter().map(|s| s.id.as_str()).collect();
    write_truth(&dir.join("rule_truth.csv"), &ids, &pools.rule_truth)?;
    rec.artifact(&dir.join("rule_truth.csv"));
    let summary = DataSummary {
        n_rule: pools.rule.len(),
        n_expert: pools.expert.len(),
        n_holdout: pools.holdout.len(),
        rule_class_counts: pools.rule.class_counts(),
        expert_class_counts: pools.expert.class_counts(),
        rule_noise_rate: pools.rule_noise_rate(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    rec.artifact(&dir.join("summary.json"));
    Ok((summary, rec.finish()))
}

/// Outcome of applying the rules to a samples file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelSummary {
    pub labelled: usize,
    pub unlabelled: usize,
    pub class_counts: [usize; 6],
}

/// Labels every sample of `samples` with the rule engine and writes a labels
/// file; samples no rule matches are left out.
pub fn label_samples(samples: &Path, schema: &KpiSchema, rules: &RuleSet, out: &Path) -> Result<LabelSummary> {
    let compiled = rules.compile(schema)?;
    let xs = crate::io::read_samples(samples, schema)?;
    let mut rows = Vec::new();
    let mut counts = [0usize; 6];
    for s in &xs {
        if let Some(c) = rule_label(s, &compiled)? {
            counts[c.index()] += 1;
            rows.push(crate::io::LabelRow {
                sample_id: s.id.clone(),
                class: c,
                source: crate::dataset::LabelSource::Rule,
            });
        }
    }
    crate::io::write_labels(out, &rows)?;
    Ok(LabelSummary {
        labelled: rows.len(),
        unlabelled: xs.len() - rows.len(),
        class_counts: counts,
    })
}

/// Normalised pools and splits shared by all stages. The z-score is fitted on
/// the rule-labelled pool.
pub struct Prepared {
    pub schema: KpiSchema,
    pub zscore: ZScore,
    pub rule: LabeledDataset,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    /// Expert test split followed by the holdout pool.
    pub test: LabeledDataset,
    pub l: usize,
    pub fingerprint: String,
    pub rule_noise_rate: f64,
}

fn missing(what: &str, path: &Path, stage: &str) -> RcaError {
    RcaError::Dependency(format!(
        "{what} not found at {}; run the `{stage}` stage first",
        path.display()
    ))
}

pub fn prepare(cfg: &RunConfig, layout: &Layout) -> Result<Prepared> {
    let dir = layout.data_dir();
    let schema_path = dir.join("schema.json");
    if !schema_path.exists() {
        return Err(missing("dataset", &dir, "gen-data"));
    }
    let schema = KpiSchema::from_json(&fs::read_to_string(&schema_path)?)?;
    let mut hashed: Vec<Vec<u8>> = vec![fs::read(&schema_path)?];
    let mut load = |stem: &str| -> Result<LabeledDataset> {
        let p = DatasetPaths::in_dir(&dir, stem);
        if !p.samples.exists() || !p.labels.exists() {
            return Err(missing(&format!("{stem} pool"), &p.samples, "gen-data"));
        }
        hashed.push(fs::read(&p.samples)?);
        hashed.push(fs::read(&p.labels)?);
        load_dataset(&p, &schema)
    };
    let rule_raw = load("rule")?;
    let expert_raw = load("expert")?;
    let holdout_raw = load("holdout")?;
    let parts: Vec<&[u8]> = hashed.iter().map(|v| v.as_slice()).collect();
    let data_fp = fingerprint(&parts);
    let summary: DataSummary = read_json(&dir.join("summary.json"))?;

    let zscore = ZScore::fit(&rule_raw.samples)?;
    let rule = rule_raw.normalized_with(&zscore)?;
    let expert = expert_raw.normalized_with(&zscore)?;
    let holdout = holdout_raw.normalized_with(&zscore)?;
    let (train, val, test) = split_dataset(&expert, cfg.split.fractions, cfg.split.seed)?;
    let test = test.concat(&holdout)?;
    let l = rule.seq_len().ok_or_else(|| RcaError::Data("empty rule pool".into()))?;
    if l != cfg.data.l {
        return config_err(format!("stored data has l = {l} but the config says {}", cfg.data.l));
    }
    let split_json = serde_json::to_vec(&cfg.split)?;
    Ok(Prepared {
        schema,
        zscore,
        rule,
        train,
        val,
        test,
        l,
        fingerprint: fingerprint(&[data_fp.as_bytes(), &split_json]),
        rule_noise_rate: summary.rule_noise_rate,
    })
}

/// Checkpoint fingerprints chain each stage to its inputs, so a stale
/// downstream checkpoint is refused rather than silently reused.
struct Fingerprints {
    diffusion: String,
    pretrain: Vec<String>,
    finetune: Vec<String>,
    ablation: String,
}

impl Fingerprints {
    fn new(cfg: &RunConfig, prep: &Prepared) -> Result<Self> {
        let diffusion = fingerprint(&[prep.fingerprint.as_bytes(), &serde_json::to_vec(&cfg.diffusion)?]);
        let pre_json = serde_json::to_vec(&cfg.pretrain)?;
        let ft_json = serde_json::to_vec(&cfg.finetune)?;
        let pretrain: Vec<String> = cfg
            .seed_list()
            .iter()
            .map(|s| fingerprint(&[diffusion.as_bytes(), &pre_json, &s.to_le_bytes()]))
            .collect();
        let finetune = pretrain.iter().map(|p| fingerprint(&[p.as_bytes(), &ft_json])).collect();
        let mut parts: Vec<&[u8]> = pretrain.iter().map(|p| p.as_bytes()).collect();
        let abl_json = serde_json::to_vec(&cfg.ablation)?;
        parts.push(&ft_json);
        parts.push(&abl_json);
        let ablation = fingerprint(&parts);
        Ok(Self {
            diffusion,
            pretrain,
            finetune,
            ablation,
        })
    }
}

fn load_or_stale<T>(r: Result<T>, path: &Path, stage: &str) -> Result<T> {
    match r {
        Err(RcaError::Numeric(NumericError::Fingerprint { .. })) => Err(RcaError::Dependency(format!(
            "{} was produced with a different configuration; rerun the `{stage}` stage",
            path.display()
        ))),
        other => other,
    }
}

fn load_predictor(cfg: &RunConfig, prep: &Prepared, layout: &Layout, fps: &Fingerprints) -> Result<NoisePredictor> {
    let p = layout.diffusion_ckpt();
    if !p.exists() {
        return Err(missing("diffusion checkpoint", &p, "diffusion"));
    }
    load_or_stale(NoisePredictor::load(&p, &cfg.diffusion, prep.schema.m(), &fps.diffusion), &p, "diffusion")
}

fn load_encoder(cfg: &RunConfig, prep: &Prepared, layout: &Layout, fps: &Fingerprints, k: usize) -> Result<Encoder> {
    let p = layout.encoder_ckpt(k as u64);
    if !p.exists() {
        return Err(missing(&format!("pretrain checkpoint for seed {k}"), &p, "pretrain"));
    }
    load_or_stale(
        Encoder::load(&p, &cfg.pretrain.encoder, prep.schema.m(), prep.l, &fps.pretrain[k]),
        &p,
        "pretrain",
    )
}

fn load_classifier(cfg: &RunConfig, prep: &Prepared, layout: &Layout, fps: &Fingerprints, k: usize) -> Result<Classifier> {
    let p = layout.classifier_ckpt(k as u64);
    if !p.exists() {
        return Err(missing(&format!("finetune checkpoint for seed {k}"), &p, "finetune"));
    }
    load_or_stale(
        Classifier::load(&p, &cfg.pretrain.encoder, prep.schema.m(), prep.l, &fps.finetune[k]),
        &p,
        "finetune",
    )
}

fn write_epoch_losses(path: &Path, trace: &[EpochLoss]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss"])?;
    for e in trace {
        w.write_record([e.epoch.to_string(), e.loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_finetune_trace(path: &Path, trace: &[FinetuneEpoch]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss", "train_accuracy", "val_accuracy"])?;
    for e in trace {
        let val = e.val_accuracy.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([e.epoch.to_string(), e.loss.to_string(), e.train_accuracy.to_string(), val])?;
    }
    w.flush()?;
    Ok(())
}

fn refs(ds: &LabeledDataset) -> Vec<&Tensor> {
    ds.samples.iter().map(|s| s.values()).collect()
}

pub fn run_diffusion(cfg: &RunConfig, layout: &Layout) -> Result<StageRecord> {
    let prep = prepare(cfg, layout)?;
    let fps = Fingerprints::new(cfg, &prep)?;
    let mut rec = Recorder::new(layout, "diffusion");
    let (model, trace) = crate::diffusion::train_diffusion(&prep.train, &cfg.diffusion)?;
    let ck = layout.diffusion_ckpt();
    fs::create_dir_all(ck.parent().unwrap())?;
    model.save(&ck, &fps.diffusion)?;
    rec.checkpoint(&ck);
    let loss = layout.stage_dir("diffusion").join("loss.csv");
    write_epoch_losses(&loss, &trace)?;
    rec.artifact(&loss);
    let warn = layout.stage_dir("diffusion").join("loss_warning.txt");
    match (trace.first(), trace.last()) {
        (Some(a), Some(b)) if b.loss > a.loss => {
            fs::write(&warn, format!("final loss {} exceeds initial loss {}\n", b.loss, a.loss))?;
            rec.artifact(&warn);
        }
        _ => {
            if warn.exists() {
                fs::remove_file(&warn)?;
            }
        }
    }
    Ok(rec.finish())
}

pub fn run_pretrain(cfg: &RunConfig, layout: &Layout) -> Result<StageRecord> {
    let prep = prepare(cfg, layout)?;
    let fps = Fingerprints::new(cfg, &prep)?;
    let model = load_predictor(cfg, &prep, layout, &fps)?;
    let schedule = cfg.diffusion.schedule()?;
    let mut rec = Recorder::new(layout, "pretrain");
    for (k, s) in cfg.seed_list().into_iter().enumerate() {
        let mut pc = cfg.pretrain.clone();
        pc.seed = cfg.pretrain.seed.wrapping_add(s);
        let (enc, trace) = pretrain(&prep.rule, &model, &schedule, &cfg.diffusion.view_policy, &pc)?;
        let ck = layout.encoder_ckpt(s);
        fs::create_dir_all(ck.parent().unwrap())?;
        enc.save(&ck, &fps.pretrain[k])?;
        rec.checkpoint(&ck);
        let loss = layout.seed_dir("pretrain", s).join("loss.csv");
        write_loss_trace(&loss, &trace)?;
        rec.artifact(&loss);
    }
    Ok(rec.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FinetuneResults {
    fingerprint: String,
    test_accuracy: Vec<f64>,
}

pub fn run_finetune(cfg: &RunConfig, layout: &Layout) -> Result<StageRecord> {
    let prep = prepare(cfg, layout)?;
    let fps = Fingerprints::new(cfg, &prep)?;
    let encoders = (0..cfg.seeds)
        .map(|k| load_encoder(cfg, &prep, layout, &fps, k))
        .collect::<Result<Vec<_>>>()?;
    let mut rec = Recorder::new(layout, "finetune");
    let ids: Vec<String> = prep.test.samples.iter().map(|s| s.id.clone()).collect();
    let xs = refs(&prep.test);
    let mut accs = Vec::new();
    for (k, s) in cfg.seed_list().into_iter().enumerate() {
        let mut fc = cfg.finetune.clone();
        fc.seed = cfg.finetune.seed.wrapping_add(s);
        let init = Classifier::from_encoder(&encoders[k], fc.seed)?;
        let (clf, trace) = finetune(&prep.train, Some(&prep.val), init, &fc)?;
        let dir = layout.seed_dir("finetune", s);
        fs::create_dir_all(&dir)?;
        let ck = layout.classifier_ckpt(s);
        clf.save(&ck, &fps.finetune[k])?;
        rec.checkpoint(&ck);
        write_finetune_trace(&dir.join("trace.csv"), &trace)?;
        rec.artifact(&dir.join("trace.csv"));
        let probas = clf.predict_proba(&xs)?;
        write_predictions(&dir.join("predictions.csv"), &ids, &probas)?;
        rec.artifact(&dir.join("predictions.csv"));
        accs.push(clf.accuracy(&prep.test)?);
    }
    let results = layout.stage_dir("finetune").join("results.json");
    write_json(
        &results,
        &FinetuneResults {
            fingerprint: fps.finetune.concat(),
            test_accuracy: accs,
        },
    )?;
    rec.artifact(&results);
    Ok(rec.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AblationResults {
    fingerprint: String,
    /// Test accuracy per mode, one entry per seed.
    test_accuracy: BTreeMap<String, Vec<f64>>,
    /// Per mode, per seed, the epoch trace.
    traces: BTreeMap<String, Vec<Vec<FinetuneEpoch>>>,
}

pub fn run_ablation(cfg: &RunConfig, layout: &Layout) -> Result<StageRecord> {
    let prep = prepare(cfg, layout)?;
    let fps = Fingerprints::new(cfg, &prep)?;
    let encoders = (0..cfg.seeds)
        .map(|k| load_encoder(cfg, &prep, layout, &fps, k))
        .collect::<Result<Vec<_>>>()?;
    let mut rec = Recorder::new(layout, "ablation");
    let acfg = cfg.ablation_config();
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut traces: BTreeMap<String, Vec<Vec<FinetuneEpoch>>> = BTreeMap::new();
    for (k, s) in cfg.seed_list().into_iter().enumerate() {
        let inputs = AblationInputs {
            expert_train: &prep.train,
            expert_val: Some(&prep.val),
            rule_train: Some(&prep.rule),
            pretrained: Some(&encoders[k]),
        };
        let dir = layout.seed_dir("ablation", s);
        fs::create_dir_all(&dir)?;
        for mode in AblationMode::ALL {
            let (clf, trace) = train_ablation(mode, &inputs, &acfg, cfg.finetune.seed.wrapping_add(s))?;
            let p = dir.join(format!("{}_trace.csv", mode.name()));
            write_finetune_trace(&p, &trace)?;
            rec.artifact(&p);
            acc.entry(mode.name().into()).or_default().push(clf.accuracy(&prep.test)?);
            traces.entry(mode.name().into()).or_default().push(trace);
        }
    }
    let curves = layout.stage_dir("ablation").join("accuracy_curves.csv");
    write_curves(&curves, &traces)?;
    rec.artifact(&curves);
    let results = layout.stage_dir("ablation").join("results.json");
    write_json(
        &results,
        &AblationResults {
            fingerprint: fps.ablation.clone(),
            test_accuracy: acc,
            traces,
        },
    )?;
    rec.artifact(&results);
    Ok(rec.finish())
}

/// Seed-averaged train and validation accuracy per epoch for each mode.
fn write_curves(path: &Path, traces: &BTreeMap<String, Vec<Vec<FinetuneEpoch>>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mode", "epoch", "train_accuracy", "val_accuracy"])?;
    for (mode, per_seed) in traces {
        let epochs = per_seed.iter().map(|t| t.len()).min().unwrap_or(0);
        for e in 0..epochs {
            let n = per_seed.len() as f64;
            let tr = per_seed.iter().map(|t| t[e].train_accuracy).sum::<f64>() / n;
            let val: Option<Vec<f64>> = per_seed.iter().map(|t| t[e].val_accuracy).collect();
            let val = val.map(|v| (v.iter().sum::<f64>() / n).to_string()).unwrap_or_default();
            w.write_record([mode.clone(), (e + 1).to_string(), tr.to_string(), val])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Test accuracy across seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracySummary {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl AccuracySummary {
    fn of(values: &[f64]) -> Result<Self> {
        let ms = mean_std(values)?;
        Ok(Self {
            per_seed: values.to_vec(),
            mean: ms.mean,
            std: ms.std,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Separability {
    pub silhouette: f64,
    #[serde(serialize_with = "finite_or_null")]
    pub calinski_harabasz: f64,
    #[serde(serialize_with = "finite_or_null")]
    pub davies_bouldin: f64,
}

impl Separability {
    fn mean_of(reports: &[CloudReport]) -> Self {
        let n = reports.len() as f64;
        Self {
            silhouette: reports.iter().map(|r| r.silhouette).sum::<f64>() / n,
            calinski_harabasz: reports.iter().map(|r| r.calinski_harabasz).sum::<f64>() / n,
            davies_bouldin: reports.iter().map(|r| r.davies_bouldin).sum::<f64>() / n,
        }
    }
}

/// Test-set embedding quality after contrastive pretraining and after
/// fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Representation {
    pub pretrain: Vec<CloudReport>,
    pub finetune: Vec<CloudReport>,
    pub pretrain_mean: Separability,
    pub finetune_mean: Separability,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeparabilityTable {
    pub primary_space: FeatureSpace,
    /// Keyed by view: original, weak, strong, noise_injection, scaling.
    pub raw: BTreeMap<String, CloudReport>,
    pub embedding: BTreeMap<String, CloudReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossSummary {
    pub first: f64,
    pub last: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub seeds: Vec<u64>,
    pub n_rule: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub rule_noise_rate: f64,
    pub diffusion_loss: LossSummary,
    /// Epoch-mean contrastive loss per seed.
    pub pretrain_loss: Vec<LossSummary>,
    pub separability: SeparabilityTable,
    pub l2_audit: L2Audit,
    /// Test accuracy of the four training modes and the KNN baselines.
    pub accuracy: BTreeMap<String, AccuracySummary>,
    pub finetune: AccuracySummary,
    pub representation: Representation,
}

/// Weak and strong reconstructions of every sample. Item `i` draws its
/// steps and noise from `rng.split_index("view", i)`.
pub struct ViewSet {
    pub weak_noised: Vec<Tensor>,
    pub weak: Vec<Tensor>,
    pub strong_noised: Vec<Tensor>,
    pub strong: Vec<Tensor>,
}

pub fn view_set(
    xs: &[&Tensor],
    ys: &[RootCause],
    cfg: &DiffusionConfig,
    model: &NoisePredictor,
    schedule: &NoiseSchedule,
    rng: &Rng,
) -> Result<ViewSet> {
    let mut out = ViewSet {
        weak_noised: Vec::with_capacity(xs.len()),
        weak: Vec::with_capacity(xs.len()),
        strong_noised: Vec::with_capacity(xs.len()),
        strong: Vec::with_capacity(xs.len()),
    };
    for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let mut r = rng.split_index("view", i as u64);
        let (tw, ts) = cfg.view_policy.sample(schedule.steps(), &mut r)?;
        let mut rs = reconstruct_batch(&[x, x], &[tw, ts], &[y, y], model, schedule, &mut r)?;
        let s = rs.pop().unwrap();
        let w = rs.pop().unwrap();
        out.weak_noised.push(w.noised);
        out.weak.push(w.denoised);
        out.strong_noised.push(s.noised);
        out.strong.push(s.denoised);
    }
    Ok(out)
}

fn embed_cloud(enc: &Encoder, xs: &[&Tensor], labels: &[RootCause]) -> Result<PointCloud> {
    let z = enc.embed_all(xs)?;
    PointCloud::new(z.shape()[1], z.data().to_vec(), labels.to_vec())
}

fn as_samples(ids: &[String], suffix: &str, xs: &[Tensor], z: &ZScore) -> Result<Vec<KpiSample>> {
    ids.iter()
        .zip(xs)
        .map(|(id, x)| z.invert(&KpiSample::new(format!("{id}{suffix}"), x.clone())?))
        .collect()
}

fn write_embeddings(path: &Path, ids: &[String], labels: &[RootCause], z: &Tensor) -> Result<()> {
    let d = z.shape()[1];
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string(), "class_id".to_string()];
    header.extend((0..d).map(|j| format!("z_{j}")));
    w.write_record(&header)?;
    for (i, row) in z.data().chunks(d).enumerate() {
        let mut rec = vec![ids[i].clone(), labels[i].id().to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_audit_bars(path: &Path, a: &L2Audit) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["view", "stage", "mean", "std"])?;
    for (view, stage, ms) in [
        ("weak", "noise", a.weak_noise),
        ("weak", "denoise", a.weak_denoise),
        ("strong", "noise", a.strong_noise),
        ("strong", "denoise", a.strong_denoise),
    ] {
        w.write_record([view, stage, &ms.mean.to_string(), &ms.std.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_pretrain_losses(path: &Path, traces: &[(u64, Vec<StepLoss>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seed", "epoch", "step", "loss"])?;
    for (s, trace) in traces {
        for t in trace {
            w.write_record([s.to_string(), t.epoch.to_string(), t.step.to_string(), t.loss.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_step_losses(path: &Path) -> Result<Vec<StepLoss>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let p = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| RcaError::Data(format!("{}: bad number `{}`", path.display(), &rec[i])))
        };
        out.push(StepLoss {
            epoch: p(0)? as usize,
            step: p(1)? as usize,
            loss: p(2)?,
        });
    }
    Ok(out)
}

fn read_epoch_losses(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            rec[1].parse().map_err(|_| RcaError::Data(format!("{}: bad loss `{}`", path.display(), &rec[1])))
        })
        .collect()
}

fn loss_summary(v: &[f64]) -> LossSummary {
    LossSummary {
        first: v.first().copied().unwrap_or(f64::NAN),
        last: v.last().copied().unwrap_or(f64::NAN),
    }
}

pub fn run_evaluate(cfg: &RunConfig, layout: &Layout) -> Result<(MetricsReport, StageRecord)> {
    let prep = prepare(cfg, layout)?;
    let fps = Fingerprints::new(cfg, &prep)?;
    let model = load_predictor(cfg, &prep, layout, &fps)?;
    let encoders = (0..cfg.seeds)
        .map(|k| load_encoder(cfg, &prep, layout, &fps, k))
        .collect::<Result<Vec<_>>>()?;
    let classifiers = (0..cfg.seeds)
        .map(|k| load_classifier(cfg, &prep, layout, &fps, k))
        .collect::<Result<Vec<_>>>()?;
    let abl_path = layout.stage_dir("ablation").join("results.json");
    if !abl_path.exists() {
        return Err(missing("ablation results", &abl_path, "ablation"));
    }
    let abl: AblationResults = read_json(&abl_path)?;
    if abl.fingerprint != fps.ablation {
        return Err(RcaError::Dependency(format!(
            "{} was produced with a different configuration; rerun the `ablation` stage",
            abl_path.display()
        )));
    }
    let mut rec = Recorder::new(layout, "evaluate");
    let report_dir = layout.report_dir();
    fs::create_dir_all(&report_dir)?;
    let schedule = cfg.diffusion.schedule()?;
    let test = &prep.test;
    let ids: Vec<String> = test.samples.iter().map(|s| s.id.clone()).collect();
    let xs = refs(test);
    let root = Rng::seed_from_u64(cfg.evaluate.seed).split("evaluate");

    // Views of the test cloud and the reconstruction-distance audit.
    let views = view_set(&xs, &test.labels, &cfg.diffusion, &model, &schedule, &root.split("views"))?;
    let wrap = |v: &[Tensor]| -> Result<Vec<KpiSample>> {
        ids.iter().zip(v).map(|(id, x)| KpiSample::new(id.clone(), x.clone())).collect()
    };
    let l2 = l2_view_audit(
        &test.samples,
        &wrap(&views.weak_noised)?,
        &wrap(&views.weak)?,
        &wrap(&views.strong_noised)?,
        &wrap(&views.strong)?,
    )?;
    let p = report_dir.join("fig7_l2_audit.csv");
    write_audit_bars(&p, &l2)?;
    rec.artifact(&p);

    let mut exported = as_samples(&ids, ":weak", &views.weak, &prep.zscore)?;
    exported.extend(as_samples(&ids, ":strong", &views.strong, &prep.zscore)?);
    let p = report_dir.join("views_samples.csv");
    write_samples(&p, &prep.schema, &exported)?;
    rec.artifact(&p);

    let mut classical = BTreeMap::new();
    for kind in [
        ClassicalAugment::NoiseInjection {
            ratio: cfg.evaluate.noise_injection_ratio,
        },
        ClassicalAugment::Scaling {
            sigma: cfg.evaluate.scaling_sigma,
        },
    ] {
        let mut r = root.split(kind.name());
        let v = xs.iter().map(|x| classical_augment(&kind, x, &mut r)).collect::<Result<Vec<_>>>()?;
        classical.insert(kind.name().to_string(), v);
    }
    let mut clouds: Vec<(String, Vec<&Tensor>)> = vec![
        ("original".into(), xs.clone()),
        ("weak".into(), views.weak.iter().collect()),
        ("strong".into(), views.strong.iter().collect()),
    ];
    for (k, v) in &classical {
        clouds.push((k.clone(), v.iter().collect()));
    }
    let mut raw = BTreeMap::new();
    let mut embedding = BTreeMap::new();
    for (name, items) in &clouds {
        raw.insert(name.clone(), cloud_report(&PointCloud::from_tensors(items, test.labels.clone())?)?);
        embedding.insert(name.clone(), cloud_report(&embed_cloud(&encoders[0], items, &test.labels)?)?);
    }

    // Accuracy table.
    let mut acc = BTreeMap::new();
    for (mode, v) in &abl.test_accuracy {
        acc.insert(mode.clone(), AccuracySummary::of(v)?);
    }
    for (name, kind) in [
        (
            "SLIDING_KNN",
            KnnKind::Sliding {
                window: cfg.evaluate.knn_window,
            },
        ),
        ("STAT_KNN", KnnKind::Stat),
    ] {
        let pred = knn_baseline(&kind, &prep.train, &xs, cfg.evaluate.knn_k)?;
        acc.insert(name.to_string(), AccuracySummary::of(&[accuracy(&pred, &test.labels)?])?);
    }
    let p = report_dir.join("fig9_accuracy_curves.csv");
    write_curves(&p, &abl.traces)?;
    rec.artifact(&p);

    let ft: FinetuneResults = read_json(&layout.stage_dir("finetune").join("results.json"))?;

    // Embedding quality before and after fine-tuning.
    let mut pre_reports = Vec::new();
    let mut ft_reports = Vec::new();
    for (k, s) in cfg.seed_list().into_iter().enumerate() {
        let zp = encoders[k].embed_all(&xs)?;
        let zf = classifiers[k].embed_all(&xs)?;
        pre_reports.push(cloud_report(&PointCloud::new(zp.shape()[1], zp.data().to_vec(), test.labels.clone())?)?);
        ft_reports.push(cloud_report(&PointCloud::new(zf.shape()[1], zf.data().to_vec(), test.labels.clone())?)?);
        if k == 0 {
            for (tag, z) in [("pretrain", &zp), ("finetune", &zf)] {
                let p = report_dir.join(format!("embeddings_{tag}_seed{s}.csv"));
                write_embeddings(&p, &ids, &test.labels, z)?;
                rec.artifact(&p);
            }
        }
    }

    let mut pre_traces = Vec::new();
    for s in cfg.seed_list() {
        pre_traces.push((s, read_step_losses(&layout.seed_dir("pretrain", s).join("loss.csv"))?));
    }
    let p = report_dir.join("fig6_pretrain_loss.csv");
    write_pretrain_losses(&p, &pre_traces)?;
    rec.artifact(&p);
    let diff_losses = read_epoch_losses(&layout.stage_dir("diffusion").join("loss.csv"))?;

    let report = MetricsReport {
        seeds: cfg.seed_list(),
        n_rule: prep.rule.len(),
        n_train: prep.train.len(),
        n_val: prep.val.len(),
        n_test: test.len(),
        rule_noise_rate: prep.rule_noise_rate,
        diffusion_loss: loss_summary(&diff_losses),
        pretrain_loss: pre_traces.iter().map(|(_, t)| loss_summary(&epoch_means(t))).collect(),
        separability: SeparabilityTable {
            primary_space: cfg.evaluate.feature_space,
            raw,
            embedding,
        },
        l2_audit: l2,
        accuracy: acc,
        finetune: AccuracySummary::of(&ft.test_accuracy)?,
        representation: Representation {
            pretrain_mean: Separability::mean_of(&pre_reports),
            finetune_mean: Separability::mean_of(&ft_reports),
            pretrain: pre_reports,
            finetune: ft_reports,
        },
    };
    let value = serde_json::to_value(&report)?;
    write_json(&layout.metrics_json(), &value)?;
    rec.artifact(&layout.metrics_json());
    let p = report_dir.join("metrics.csv");
    write_flat_csv(&p, &value)?;
    rec.artifact(&p);
    Ok((report, rec.finish()))
}

/// Flattens nested JSON into dotted column names; arrays use the index.
pub fn flatten_json(value: &serde_json::Value) -> Vec<(String, String)> {
    fn go(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
        let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
        match v {
            serde_json::Value::Object(m) => m.iter().for_each(|(k, v)| go(&key(k), v, out)),
            serde_json::Value::Array(a) => a.iter().enumerate().for_each(|(i, v)| go(&key(&i.to_string()), v, out)),
            serde_json::Value::Null => out.push((prefix.to_string(), String::new())),
            serde_json::Value::String(s) => out.push((prefix.to_string(), s.clone())),
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let mut out = Vec::new();
    go("", value, &mut out);
    out
}

fn write_flat_csv(path: &Path, value: &serde_json::Value) -> Result<()> {
    let flat = flatten_json(value);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(flat.iter().map(|(k, _)| k))?;
    w.write_record(flat.iter().map(|(_, v)| v))?;
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Diffusion,
    Pretrain,
    Finetune,
    Ablation,
    Evaluate,
    All,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "diffusion" => Self::Diffusion,
            "pretrain" => Self::Pretrain,
            "finetune" => Self::Finetune,
            "ablation" => Self::Ablation,
            "evaluate" => Self::Evaluate,
            "all" => Self::All,
            other => return config_err(format!("unknown stage `{other}`")),
        })
    }
}

/// Runs one stage (or all in order) and appends the records to the
/// manifest. Returns the metrics when `evaluate` ran.
pub fn run_stage(stage: Stage, cfg: &RunConfig, layout: &Layout) -> Result<(Option<MetricsReport>, RunManifest)> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut report = None;
    let result = (|| -> Result<()> {
        let all = stage == Stage::All;
        if all || stage == Stage::Diffusion {
            records.push(run_diffusion(cfg, layout)?);
        }
        if all || stage == Stage::Pretrain {
            records.push(run_pretrain(cfg, layout)?);
        }
        if all || stage == Stage::Finetune {
            records.push(run_finetune(cfg, layout)?);
        }
        if all || stage == Stage::Ablation {
            records.push(run_ablation(cfg, layout)?);
        }
        if all || stage == Stage::Evaluate {
            let (r, rec) = run_evaluate(cfg, layout)?;
            records.push(rec);
            report = Some(r);
        }
        Ok(())
    })();
    let manifest = RunManifest::append(layout, cfg, records)?;
    result?;
    Ok((report, manifest))
}
