//! Samples, labeled datasets, per-channel standardisation and stratified splits.

use serde::{Deserialize, Serialize};

use qoe_numeric::{Rng, Tensor};

use crate::error::{config_err, data_err, RcaError, Result};
use crate::schema::{KpiSchema, RootCause, NUM_CLASSES};

pub const DEFAULT_LEN: usize = 40;

/// One degraded session: an `m x l` matrix, row `i` is KPI `i` over time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KpiSample {
    pub id: String,
    values: Tensor,
}

impl KpiSample {
    pub fn new(id: impl Into<String>, values: Tensor) -> Result<Self> {
        if values.ndim() != 2 {
            return data_err(format!("sample values must be m x l, got {:?}", values.shape()));
        }
        Ok(Self { id: id.into(), values })
    }

    pub fn from_rows(id: impl Into<String>, m: usize, l: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(id, Tensor::new(vec![m, l], data)?)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn m(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        let l = self.len();
        &self.values.data()[i * l..(i + 1) * l]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Rule,
    Expert,
}

impl LabelSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelSource::Rule => "rule",
            LabelSource::Expert => "expert",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rule" => Ok(LabelSource::Rule),
            "expert" => Ok(LabelSource::Expert),
            other => data_err(format!("unknown label source `{other}`")),
        }
    }
}

/// Per-channel `(mean, std)`; `std` is always strictly positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScore {
    /// Population statistics over all samples and timesteps. Constant
    /// channels get `std = 1` so they map to zero.
    pub fn fit(samples: &[KpiSample]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(RcaError::Data("cannot fit normalisation on an empty dataset".into()));
        };
        let m = first.m();
        let mut mean = vec![0.0; m];
        let mut std = vec![0.0; m];
        for c in 0..m {
            let mut n = 0usize;
            let mut s = 0.0;
            for x in samples {
                s += x.channel(c).iter().sum::<f64>();
                n += x.len();
            }
            let mu = s / n as f64;
            let mut v = 0.0;
            for x in samples {
                v += x.channel(c).iter().map(|e| (e - mu) * (e - mu)).sum::<f64>();
            }
            let sd = (v / n as f64).sqrt();
            mean[c] = mu;
            std[c] = if sd > 1e-12 * mu.abs().max(1.0) { sd } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &KpiSample) -> Result<KpiSample> {
        self.map(x, |v, mu, sd| (v - mu) / sd)
    }

    pub fn invert(&self, x: &KpiSample) -> Result<KpiSample> {
        self.map(x, |v, mu, sd| v * sd + mu)
    }

    fn map(&self, x: &KpiSample, f: impl Fn(f64, f64, f64) -> f64) -> Result<KpiSample> {
        if x.m() != self.mean.len() {
            return data_err(format!("sample `{}` has {} channels, stats have {}", x.id, x.m(), self.mean.len()));
        }
        let l = x.len();
        let data = x
            .values()
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, self.mean[i / l], self.std[i / l]))
            .collect();
        KpiSample::from_rows(x.id.clone(), x.m(), l, data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub schema: KpiSchema,
    pub samples: Vec<KpiSample>,
    pub labels: Vec<RootCause>,
    pub sources: Vec<LabelSource>,
    pub normalization: Option<ZScore>,
}

impl LabeledDataset {
    pub fn new(
        schema: KpiSchema,
        samples: Vec<KpiSample>,
        labels: Vec<RootCause>,
        sources: Vec<LabelSource>,
    ) -> Result<Self> {
        if samples.len() != labels.len() || samples.len() != sources.len() {
            return data_err(format!(
                "length mismatch: {} samples, {} labels, {} sources",
                samples.len(),
                labels.len(),
                sources.len()
            ));
        }
        let l = samples.first().map(KpiSample::len);
        for s in &samples {
            if s.m() != schema.m() {
                return data_err(format!("sample `{}` has {} rows, schema has {}", s.id, s.m(), schema.m()));
            }
            if Some(s.len()) != l {
                return data_err(format!("sample `{}` has length {}, expected {}", s.id, s.len(), l.unwrap()));
            }
        }
        Ok(Self {
            schema,
            samples,
            labels,
            sources,
            normalization: None,
        })
    }

    /// Every sample tagged with the same source.
    pub fn uniform(schema: KpiSchema, samples: Vec<KpiSample>, labels: Vec<RootCause>, source: LabelSource) -> Result<Self> {
        let n = samples.len();
        Self::new(schema, samples, labels, vec![source; n])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seq_len(&self) -> Option<usize> {
        self.samples.first().map(KpiSample::len)
    }

    pub fn all_from(&self, source: LabelSource) -> bool {
        self.sources.iter().all(|&s| s == source)
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for y in &self.labels {
            c[y.index()] += 1;
        }
        c
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            schema: self.schema.clone(),
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            sources: idx.iter().map(|&i| self.sources[i]).collect(),
            normalization: self.normalization.clone(),
        }
    }

    /// Concatenation; both sides must share schema and normalisation.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.schema != other.schema {
            return data_err("cannot concatenate datasets with different schemas");
        }
        if self.normalization != other.normalization {
            return data_err("cannot concatenate datasets with different normalisation");
        }
        let mut out = self.clone();
        out.samples.extend(other.samples.iter().cloned());
        out.labels.extend(&other.labels);
        out.sources.extend(&other.sources);
        Ok(out)
    }

    /// Standardises with `stats`. Applying to an already-normalised dataset
    /// is an error.
    pub fn normalized_with(&self, stats: &ZScore) -> Result<Self> {
        if self.normalization.is_some() {
            return Err(RcaError::Contract("dataset is already normalised".into()));
        }
        let samples = self.samples.iter().map(|s| stats.apply(s)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            normalization: Some(stats.clone()),
            ..self.clone()
        })
    }

    pub fn denormalized(&self) -> Result<Self> {
        let Some(stats) = &self.normalization else {
            return Ok(self.clone());
        };
        let samples = self.samples.iter().map(|s| stats.invert(s)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            normalization: None,
            ..self.clone()
        })
    }
}

/// Fits per-channel statistics on `dataset` and returns it standardised.
pub fn zscore_fit_transform(dataset: &LabeledDataset) -> Result<LabeledDataset> {
    if dataset.is_empty() {
        return data_err("cannot normalise an empty dataset");
    }
    let stats = ZScore::fit(&dataset.samples)?;
    dataset.normalized_with(&stats)
}

/// Largest-remainder apportionment of `n` items to `fractions`.
fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

/// Stratified train/validation/test partition.
///
/// Each class is shuffled independently; samples are then interleaved by
/// their relative rank within their class, so any prefix of the ordering is
/// close to class-proportional. Split sizes are exact apportionments of the
/// total.
pub fn split_indices(labels: &[RootCause], fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    if labels.is_empty() {
        return data_err("cannot split an empty dataset");
    }
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return config_err(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1"));
    }
    let root = Rng::seed_from_u64(seed).split("split");
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(labels.len());
    for c in RootCause::ALL {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        root.split_index("class", c.id() as u64).shuffle(&mut members);
        let n = members.len() as f64;
        for (rank, &i) in members.iter().enumerate() {
            keyed.push(((rank as f64 + 0.5) / n, c.index(), i));
        }
    }
    keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let counts = apportion(labels.len(), &fractions);
    let mut it = keyed.into_iter().map(|k| k.2);
    let mut take = |k: usize| {
        let mut v: Vec<usize> = it.by_ref().take(k).collect();
        v.sort_unstable();
        v
    };
    Ok([take(counts[0]), take(counts[1]), take(counts[2])])
}

pub fn split_dataset(dataset: &LabeledDataset, fractions: [f64; 3], seed: u64) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let [a, b, c] = split_indices(&dataset.labels, fractions, seed)?;
    Ok((dataset.subset(&a), dataset.subset(&b), dataset.subset(&c)))
}
