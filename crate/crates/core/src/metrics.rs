//! Accuracy, cluster-separability indices, binned mutual information,
//! reconstruction-distance audits, classical augmentations and KNN baselines.
//!
//! Variances are population variances throughout. Degenerate indices (zero
//! within-cluster scatter for CH, coincident centroids for DB) are
//! `f64::INFINITY`; JSON output writes them as `null`.

use serde::{Deserialize, Serialize, Serializer};

use qoe_numeric::{ops, par, Rng, Tensor};

use crate::dataset::{KpiSample, LabeledDataset};
use crate::diffusion::l2_distance;
use crate::error::{config_err, data_err, RcaError, Result};
use crate::schema::{RootCause, NUM_CLASSES};

pub fn accuracy(predictions: &[RootCause], labels: &[RootCause]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return data_err(format!("{} predictions for {} labels", predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return data_err("accuracy of an empty set");
    }
    let hits = predictions.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Population mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    match ops::mean_std(values) {
        Some((mean, std)) => Ok(MeanStd { mean, std }),
        None => data_err("mean/std of an empty list"),
    }
}

/// Labelled points in `R^dim`, stored row-major.
#[derive(Clone, Debug)]
pub struct PointCloud {
    dim: usize,
    data: Vec<f64>,
    pub labels: Vec<RootCause>,
}

impl PointCloud {
    pub fn new(dim: usize, data: Vec<f64>, labels: Vec<RootCause>) -> Result<Self> {
        if dim == 0 || data.len() != dim * labels.len() {
            return data_err(format!("{} values do not form {} points of dim {dim}", data.len(), labels.len()));
        }
        if labels.len() < 2 {
            return data_err("a point cloud needs at least 2 points");
        }
        if data.iter().any(|v| !v.is_finite()) {
            return data_err("non-finite coordinate in point cloud");
        }
        Ok(Self { dim, data, labels })
    }

    /// Flattens each `[m, l]` tensor row-major.
    pub fn from_tensors(items: &[&Tensor], labels: Vec<RootCause>) -> Result<Self> {
        let dim = items.first().map_or(0, |t| t.len());
        let mut data = Vec::with_capacity(dim * items.len());
        for t in items {
            if t.len() != dim {
                return data_err("point cloud items differ in size");
            }
            data.extend_from_slice(t.data());
        }
        Self::new(dim, data, labels)
    }

    pub fn from_dataset(ds: &LabeledDataset) -> Result<Self> {
        let items: Vec<&Tensor> = ds.samples.iter().map(KpiSample::values).collect();
        Self::from_tensors(&items, ds.labels.clone())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn classes(&self) -> Vec<RootCause> {
        let mut c: Vec<RootCause> = self.labels.clone();
        c.sort();
        c.dedup();
        c
    }

    fn require_classes(&self, k: usize, what: &str) -> Result<Vec<RootCause>> {
        let c = self.classes();
        if c.len() < k {
            return data_err(format!("{what} needs at least {k} classes, cloud has {}", c.len()));
        }
        Ok(c)
    }

    fn centroid(&self, idx: impl Iterator<Item = usize>) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        let mut n = 0usize;
        for i in idx {
            for (a, v) in c.iter_mut().zip(self.point(i)) {
                *a += v;
            }
            n += 1;
        }
        c.iter_mut().for_each(|a| *a /= n as f64);
        c
    }

    fn members(&self, class: RootCause) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

/// Mean Euclidean distance over unordered pairs of class centroids.
pub fn avg_interclass_distance(cloud: &PointCloud) -> Result<f64> {
    let classes = cloud.require_classes(2, "inter-class distance")?;
    let cents: Vec<Vec<f64>> = classes.iter().map(|&c| cloud.centroid(cloud.members(c).into_iter())).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..cents.len() {
        for j in i + 1..cents.len() {
            total += dist(&cents[i], &cents[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Mean silhouette. Points in singleton classes contribute 0.
pub fn silhouette(cloud: &PointCloud) -> Result<f64> {
    let classes = cloud.require_classes(2, "silhouette")?;
    let n = cloud.len();
    let slot = |c: RootCause| classes.iter().position(|&k| k == c).unwrap();
    let mut sizes = vec![0usize; classes.len()];
    for &c in &cloud.labels {
        sizes[slot(c)] += 1;
    }
    let per_point = par::map_indexed(n, |i| {
        let mut sums = vec![0.0; classes.len()];
        let p = cloud.point(i);
        for j in 0..n {
            if j != i {
                sums[slot(cloud.labels[j])] += dist(p, cloud.point(j));
            }
        }
        let own = slot(cloud.labels[i]);
        if sizes[own] < 2 {
            return 0.0;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..classes.len())
            .filter(|&k| k != own)
            .map(|k| sums[k] / sizes[k] as f64)
            .fold(f64::INFINITY, f64::min);
        let den = a.max(b);
        if den == 0.0 {
            0.0
        } else {
            (b - a) / den
        }
    });
    Ok(per_point.iter().sum::<f64>() / n as f64)
}

/// Between- over within-cluster dispersion, each divided by its degrees of freedom.
pub fn calinski_harabasz(cloud: &PointCloud) -> Result<f64> {
    let classes = cloud.require_classes(2, "Calinski-Harabasz")?;
    let (n, k) = (cloud.len(), classes.len());
    if n <= k {
        return data_err(format!("Calinski-Harabasz needs more points ({n}) than classes ({k})"));
    }
    let overall = cloud.centroid(0..n);
    let mut between = 0.0;
    let mut within = 0.0;
    for &c in &classes {
        let idx = cloud.members(c);
        let cent = cloud.centroid(idx.iter().copied());
        between += idx.len() as f64 * dist2(&cent, &overall);
        within += idx.iter().map(|&i| dist2(cloud.point(i), &cent)).sum::<f64>();
    }
    if within == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

pub fn davies_bouldin(cloud: &PointCloud) -> Result<f64> {
    let classes = cloud.require_classes(2, "Davies-Bouldin")?;
    let mut cents = Vec::with_capacity(classes.len());
    let mut scatter = Vec::with_capacity(classes.len());
    for &c in &classes {
        let idx = cloud.members(c);
        let cent = cloud.centroid(idx.iter().copied());
        scatter.push(idx.iter().map(|&i| dist(cloud.point(i), &cent)).sum::<f64>() / idx.len() as f64);
        cents.push(cent);
    }
    let k = classes.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in 0..k {
            if j == i {
                continue;
            }
            let m = dist(&cents[i], &cents[j]);
            if m == 0.0 {
                return Ok(f64::INFINITY);
            }
            worst = worst.max((scatter[i] + scatter[j]) / m);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

pub const MI_BINS: usize = 16;

/// Plug-in mutual information (nats) between each coordinate, cut into
/// `MI_BINS` equal-width bins over its observed range, and the label;
/// averaged over coordinates. Constant coordinates contribute 0.
pub fn mutual_information(cloud: &PointCloud) -> Result<f64> {
    let n = cloud.len();
    if n < 10 {
        return data_err(format!("mutual information needs at least 10 points, got {n}"));
    }
    let ys: Vec<usize> = cloud.labels.iter().map(|c| c.index()).collect();
    let mut py = [0.0; NUM_CLASSES];
    for &y in &ys {
        py[y] += 1.0 / n as f64;
    }
    let per_dim = par::map_indexed(cloud.dim(), |d| {
        let col = (0..n).map(|i| cloud.data[i * cloud.dim + d]);
        let (lo, hi) = col.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if hi <= lo {
            return 0.0;
        }
        let w = (hi - lo) / MI_BINS as f64;
        let mut joint = [[0.0f64; NUM_CLASSES]; MI_BINS];
        for (v, &y) in col.zip(&ys) {
            let b = (((v - lo) / w) as usize).min(MI_BINS - 1);
            joint[b][y] += 1.0;
        }
        let mut mi = 0.0;
        for row in &joint {
            let pb: f64 = row.iter().sum::<f64>() / n as f64;
            for (y, &cnt) in row.iter().enumerate() {
                if cnt > 0.0 {
                    let p = cnt / n as f64;
                    mi += p * (p / (pb * py[y])).ln();
                }
            }
        }
        mi.max(0.0)
    });
    Ok(per_dim.iter().sum::<f64>() / cloud.dim() as f64)
}

/// Per class (index = class id - 1): mean over coordinates of the population
/// variance; `None` for classes with no points.
pub fn intra_class_variance(cloud: &PointCloud) -> [Option<f64>; NUM_CLASSES] {
    let mut out = [None; NUM_CLASSES];
    for c in RootCause::ALL {
        let idx = cloud.members(c);
        if idx.is_empty() {
            continue;
        }
        let cent = cloud.centroid(idx.iter().copied());
        let ss: f64 = idx.iter().map(|&i| dist2(cloud.point(i), &cent)).sum();
        out[c.index()] = Some(ss / (idx.len() * cloud.dim()) as f64);
    }
    out
}

pub fn finite_or_null<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

/// The separability and dependence battery for one point cloud.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CloudReport {
    pub n: usize,
    pub dim: usize,
    pub avg_interclass_distance: f64,
    pub silhouette: f64,
    #[serde(serialize_with = "finite_or_null")]
    pub calinski_harabasz: f64,
    #[serde(serialize_with = "finite_or_null")]
    pub davies_bouldin: f64,
    pub mutual_information_nats: f64,
    pub per_class_intra_variance: [Option<f64>; NUM_CLASSES],
}

pub fn cloud_report(cloud: &PointCloud) -> Result<CloudReport> {
    Ok(CloudReport {
        n: cloud.len(),
        dim: cloud.dim(),
        avg_interclass_distance: avg_interclass_distance(cloud)?,
        silhouette: silhouette(cloud)?,
        calinski_harabasz: calinski_harabasz(cloud)?,
        davies_bouldin: davies_bouldin(cloud)?,
        mutual_information_nats: mutual_information(cloud)?,
        per_class_intra_variance: intra_class_variance(cloud),
    })
}

/// Mean and spread of reconstruction distances for weak and strong views.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct L2Audit {
    pub weak_noise: MeanStd,
    pub weak_denoise: MeanStd,
    pub strong_noise: MeanStd,
    pub strong_denoise: MeanStd,
    /// Fraction of samples whose strong reconstruction is farther from the
    /// original than its weak one.
    pub strong_beyond_weak: f64,
}

pub fn l2_view_audit(
    originals: &[KpiSample],
    weak_noised: &[KpiSample],
    weak_denoised: &[KpiSample],
    strong_noised: &[KpiSample],
    strong_denoised: &[KpiSample],
) -> Result<L2Audit> {
    let n = originals.len();
    if n == 0 {
        return data_err("L2 audit of no samples");
    }
    for set in [weak_noised, weak_denoised, strong_noised, strong_denoised] {
        if set.len() != n || set.iter().zip(originals).any(|(a, b)| a.id != b.id) {
            return data_err("L2 audit inputs must list the same sample ids in the same order");
        }
    }
    let d = |set: &[KpiSample]| -> Vec<f64> { set.iter().zip(originals).map(|(a, o)| l2_distance(a.values(), o.values())).collect() };
    let (wn, wd, sn, sd) = (d(weak_noised), d(weak_denoised), d(strong_noised), d(strong_denoised));
    let beyond = sd.iter().zip(&wd).filter(|(s, w)| s > w).count() as f64 / n as f64;
    Ok(L2Audit {
        weak_noise: mean_std(&wn)?,
        weak_denoise: mean_std(&wd)?,
        strong_noise: mean_std(&sn)?,
        strong_denoise: mean_std(&sd)?,
        strong_beyond_weak: beyond,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassicalAugment {
    /// `x + ratio * sigma_c * N(0, 1)` with `sigma_c` the channel's
    /// standard deviation over time.
    NoiseInjection { ratio: f64 },
    /// `x[c, t] * a_t` with `a_t ~ N(1, sigma^2)` shared across channels.
    Scaling { sigma: f64 },
}

impl ClassicalAugment {
    pub fn parse(kind: &str) -> Result<Self> {
        match kind {
            "noise_injection" => Ok(Self::NoiseInjection { ratio: 0.1 }),
            "scaling" => Ok(Self::Scaling { sigma: 1.1 }),
            other => config_err(format!("unknown classical augmentation `{other}`")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::NoiseInjection { .. } => "noise_injection",
            Self::Scaling { .. } => "scaling",
        }
    }
}

/// Applies a classical augmentation to one `[m, l]` sample.
pub fn classical_augment(kind: &ClassicalAugment, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let [m, l] = x.shape()[..] else {
        return data_err(format!("expected [m, l], got {:?}", x.shape()));
    };
    let xd = x.data();
    let mut out = xd.to_vec();
    match *kind {
        ClassicalAugment::NoiseInjection { ratio } => {
            for c in 0..m {
                let row = &xd[c * l..(c + 1) * l];
                let (_, sigma) = ops::mean_std(row).unwrap();
                for t in 0..l {
                    out[c * l + t] += ratio * sigma * rng.normal();
                }
            }
        }
        ClassicalAugment::Scaling { sigma } => {
            let a: Vec<f64> = (0..l).map(|_| 1.0 + sigma * rng.normal()).collect();
            for c in 0..m {
                for t in 0..l {
                    out[c * l + t] *= a[t];
                }
            }
        }
    }
    Ok(Tensor::new(vec![m, l], out)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KnnKind {
    /// Minimum over aligned windows of the Euclidean window distance.
    Sliding { window: usize },
    /// Per-channel mean, std, min, max and last-minus-first.
    Stat,
}

fn stat_features(x: &Tensor) -> Vec<f64> {
    let l = x.shape()[1];
    let mut f = Vec::with_capacity(5 * x.shape()[0]);
    for row in x.data().chunks(l) {
        let (mean, std) = ops::mean_std(row).unwrap();
        let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        f.extend_from_slice(&[mean, std, min, max, row[l - 1] - row[0]]);
    }
    f
}

fn sliding_distance(a: &Tensor, b: &Tensor, w: usize) -> f64 {
    let (m, l) = (a.shape()[0], a.shape()[1]);
    let mut per_t = vec![0.0; l];
    for c in 0..m {
        let (ra, rb) = (&a.data()[c * l..(c + 1) * l], &b.data()[c * l..(c + 1) * l]);
        for t in 0..l {
            let d = ra[t] - rb[t];
            per_t[t] += d * d;
        }
    }
    let mut best = f64::INFINITY;
    for start in 0..=l - w {
        best = best.min(per_t[start..start + w].iter().sum::<f64>());
    }
    best.sqrt()
}

/// Majority vote of the `k` nearest training samples (distance ties broken by
/// training order, vote ties by the smallest class id).
pub fn knn_baseline(kind: &KnnKind, train: &LabeledDataset, test: &[&Tensor], k: usize) -> Result<Vec<RootCause>> {
    if train.is_empty() {
        return data_err("KNN baseline needs a non-empty training set");
    }
    if k == 0 {
        return config_err("KNN needs k >= 1");
    }
    let l = train.seq_len().unwrap();
    if let KnnKind::Sliding { window } = *kind {
        if window == 0 || window > l {
            return config_err(format!("sliding window {window} must be in 1..={l}"));
        }
    }
    let train_feats: Vec<Vec<f64>> = match kind {
        KnnKind::Stat => train.samples.iter().map(|s| stat_features(s.values())).collect(),
        KnnKind::Sliding { .. } => Vec::new(),
    };
    let out = par::map_slice(test, |x| -> Result<RootCause> {
        if x.shape() != train.samples[0].values().shape() {
            return Err(RcaError::Data(format!("test sample shape {:?} differs from training", x.shape())));
        }
        let mut d: Vec<(f64, usize)> = match *kind {
            KnnKind::Stat => {
                let f = stat_features(x);
                train_feats.iter().enumerate().map(|(i, t)| (dist(&f, t), i)).collect()
            }
            KnnKind::Sliding { window } => train
                .samples
                .iter()
                .enumerate()
                .map(|(i, s)| (sliding_distance(x, s.values(), window), i))
                .collect(),
        };
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = [0usize; NUM_CLASSES];
        for &(_, i) in d.iter().take(k) {
            votes[train.labels[i].index()] += 1;
        }
        let best = (0..NUM_CLASSES).max_by(|&a, &b| votes[a].cmp(&votes[b]).then(b.cmp(&a))).unwrap();
        Ok(RootCause::from_index(best))
    });
    out.into_iter().collect()
}
