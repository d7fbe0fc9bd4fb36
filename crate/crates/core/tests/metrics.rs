mod support;

use proptest::prelude::*;
use qoe_numeric::{Rng, Tensor};
use qoe_rca::metrics::*;
use qoe_rca::{KpiSample, KpiSchema, LabelSource, LabeledDataset, RcaError, RootCause, NUM_CLASSES};

fn rc(i: usize) -> RootCause {
    RootCause::from_index(i)
}

fn cloud(dim: usize, data: &[f64], labels: &[usize]) -> PointCloud {
    PointCloud::new(dim, data.to_vec(), labels.iter().map(|&i| rc(i)).collect()).unwrap()
}

fn four_points() -> PointCloud {
    cloud(1, &[0.0, 0.2, 10.0, 10.2], &[0, 0, 1, 1])
}

// Literal definitions, one point pair at a time.

fn d(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s.sqrt()
}

fn classes_of(c: &PointCloud) -> Vec<RootCause> {
    let mut v = c.labels.clone();
    v.sort();
    v.dedup();
    v
}

fn centroid_of(c: &PointCloud, class: RootCause) -> Vec<f64> {
    let mut s = vec![0.0; c.dim()];
    let mut n = 0.0;
    for i in 0..c.len() {
        if c.labels[i] == class {
            for k in 0..c.dim() {
                s[k] += c.point(i)[k];
            }
            n += 1.0;
        }
    }
    s.iter().map(|v| v / n).collect()
}

fn literal_silhouette(c: &PointCloud) -> f64 {
    let mut total = 0.0;
    for i in 0..c.len() {
        let own = c.labels[i];
        let (mut a_sum, mut a_n) = (0.0, 0.0);
        for j in 0..c.len() {
            if j != i && c.labels[j] == own {
                a_sum += d(c.point(i), c.point(j));
                a_n += 1.0;
            }
        }
        if a_n == 0.0 {
            continue;
        }
        let a = a_sum / a_n;
        let mut b = f64::INFINITY;
        for other in classes_of(c) {
            if other == own {
                continue;
            }
            let (mut s, mut n) = (0.0, 0.0);
            for j in 0..c.len() {
                if c.labels[j] == other {
                    s += d(c.point(i), c.point(j));
                    n += 1.0;
                }
            }
            b = b.min(s / n);
        }
        total += (b - a) / a.max(b);
    }
    total / c.len() as f64
}

fn literal_ch(c: &PointCloud) -> f64 {
    let all: Vec<f64> = (0..c.dim()).map(|k| (0..c.len()).map(|i| c.point(i)[k]).sum::<f64>() / c.len() as f64).collect();
    let ks = classes_of(c);
    let (mut b, mut w) = (0.0, 0.0);
    for &k in &ks {
        let cent = centroid_of(c, k);
        for i in 0..c.len() {
            if c.labels[i] == k {
                b += d(&cent, &all).powi(2);
                w += d(c.point(i), &cent).powi(2);
            }
        }
    }
    (b / (ks.len() - 1) as f64) / (w / (c.len() - ks.len()) as f64)
}

fn literal_db(c: &PointCloud) -> f64 {
    let ks = classes_of(c);
    let scatter = |k: RootCause| {
        let cent = centroid_of(c, k);
        let (mut s, mut n) = (0.0, 0.0);
        for i in 0..c.len() {
            if c.labels[i] == k {
                s += d(c.point(i), &cent);
                n += 1.0;
            }
        }
        s / n
    };
    let mut total = 0.0;
    for &i in &ks {
        let mut worst: f64 = 0.0;
        for &j in &ks {
            if i != j {
                worst = worst.max((scatter(i) + scatter(j)) / d(&centroid_of(c, i), &centroid_of(c, j)));
            }
        }
        total += worst;
    }
    total / ks.len() as f64
}

fn literal_interclass(c: &PointCloud) -> f64 {
    let ks = classes_of(c);
    let (mut s, mut n) = (0.0, 0.0);
    for a in 0..ks.len() {
        for b in a + 1..ks.len() {
            s += d(&centroid_of(c, ks[a]), &centroid_of(c, ks[b]));
            n += 1.0;
        }
    }
    s / n
}

fn literal_variance(c: &PointCloud, k: RootCause) -> f64 {
    let cent = centroid_of(c, k);
    let (mut s, mut n) = (0.0, 0.0);
    for i in 0..c.len() {
        if c.labels[i] == k {
            for q in 0..c.dim() {
                s += (c.point(i)[q] - cent[q]).powi(2);
                n += 1.0;
            }
        }
    }
    s / n
}

fn random_cloud(seed: u64) -> PointCloud {
    let mut rng = Rng::seed_from_u64(seed);
    let n = 12 + rng.below(100);
    let dim = 1 + rng.below(8);
    let k = 2 + rng.below(5);
    let labels: Vec<RootCause> = (0..n).map(|i| rc(if i < 2 * k { i / 2 } else { rng.below(k) })).collect();
    let data: Vec<f64> = labels
        .iter()
        .flat_map(|c| {
            let shift = c.index() as f64;
            (0..dim).map(|_| shift + rng.normal()).collect::<Vec<_>>()
        })
        .collect();
    PointCloud::new(dim, data, labels).unwrap()
}

#[test]
fn accuracy_and_seed_summary() {
    let y = [rc(0), rc(1), rc(2)];
    assert_eq!(accuracy(&y, &y).unwrap(), 1.0);
    assert!((accuracy(&[rc(0), rc(1), rc(3)], &y).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert!(accuracy(&y[..2], &y).is_err());
    assert!(accuracy(&[], &[]).is_err());
    let s = mean_std(&[0.6, 0.7, 0.8]).unwrap();
    assert!((s.mean - 0.7).abs() < 1e-12);
    assert!((s.std - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
    assert!((s.std - 0.0816).abs() < 1e-4);
}

#[test]
fn four_point_fixture() {
    let c = four_points();
    let s = silhouette(&c).unwrap();
    let by_hand = ((10.1 - 0.2) / 10.1 + (9.9 - 0.2) / 9.9) / 2.0;
    assert!((s - by_hand).abs() < 1e-12);
    assert!((s - 0.980).abs() < 1e-3);
    // B = 4 * 5^2, W = 4 * 0.1^2.
    assert!((calinski_harabasz(&c).unwrap() - 5000.0).abs() < 1e-6);
    assert!((davies_bouldin(&c).unwrap() - 0.02).abs() < 1e-6);
    assert!((avg_interclass_distance(&c).unwrap() - 10.0).abs() < 1e-12);
    let v = intra_class_variance(&c);
    assert!((v[0].unwrap() - 0.01).abs() < 1e-12);
    assert!((v[1].unwrap() - 0.01).abs() < 1e-12);
    assert!(v[2..].iter().all(Option::is_none));
}

#[test]
fn hand_computed_variants() {
    let c = cloud(1, &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0], &[0, 0, 1, 1, 2, 2]);
    assert!((avg_interclass_distance(&c).unwrap() - 4.0 / 3.0).abs() < 1e-12);
    let tight = cloud(1, &[0.05, 0.15, 10.05, 10.15], &[0, 0, 1, 1]);
    assert!((davies_bouldin(&tight).unwrap() - 0.01).abs() < 1e-9);
    let single = cloud(1, &[3.0, 0.0, 1.0], &[0, 1, 1]);
    assert_eq!(intra_class_variance(&single)[0], Some(0.0));
}

#[test]
fn degenerate_clouds() {
    assert!(PointCloud::new(1, vec![0.0], vec![rc(0)]).is_err());
    assert!(PointCloud::new(2, vec![0.0; 3], vec![rc(0), rc(1)]).is_err());
    assert!(PointCloud::new(1, vec![0.0, f64::NAN], vec![rc(0), rc(1)]).is_err());
    let one_class = cloud(1, &[0.0, 1.0, 2.0], &[0, 0, 0]);
    for f in [silhouette, calinski_harabasz, davies_bouldin, avg_interclass_distance] {
        assert!(matches!(f(&one_class), Err(RcaError::Data(_))));
    }
    let stacked = cloud(1, &[1.0, 1.0, 2.0, 2.0], &[0, 0, 1, 1]);
    assert_eq!(calinski_harabasz(&stacked).unwrap(), f64::INFINITY);
    let coincident = cloud(1, &[0.0, 2.0, 1.0, 1.0], &[0, 0, 1, 1]);
    assert_eq!(davies_bouldin(&coincident).unwrap(), f64::INFINITY);
    assert!(calinski_harabasz(&cloud(1, &[0.0, 1.0], &[0, 1])).is_err());
    let singleton = cloud(1, &[0.0, 0.1, 5.0], &[0, 0, 1]);
    let s = silhouette(&singleton).unwrap();
    assert!((s - literal_silhouette(&singleton)).abs() < 1e-12);
}

#[test]
fn metrics_match_literal_definitions() {
    for seed in 0..20 {
        let c = random_cloud(seed);
        assert!((silhouette(&c).unwrap() - literal_silhouette(&c)).abs() < 1e-9, "seed {seed}");
        assert!((calinski_harabasz(&c).unwrap() - literal_ch(&c)).abs() < 1e-9 * literal_ch(&c).max(1.0), "seed {seed}");
        assert!((davies_bouldin(&c).unwrap() - literal_db(&c)).abs() < 1e-9, "seed {seed}");
        assert!((avg_interclass_distance(&c).unwrap() - literal_interclass(&c)).abs() < 1e-9, "seed {seed}");
        let v = intra_class_variance(&c);
        for k in classes_of(&c) {
            assert!((v[k.index()].unwrap() - literal_variance(&c, k)).abs() < 1e-9, "seed {seed}");
        }
    }
}

fn mapped(c: &PointCloud, f: impl Fn(f64) -> f64) -> PointCloud {
    let data: Vec<f64> = (0..c.len()).flat_map(|i| c.point(i).iter().map(|&v| f(v)).collect::<Vec<_>>()).collect();
    PointCloud::new(c.dim(), data, c.labels.clone()).unwrap()
}

proptest! {
    #[test]
    fn translation_and_scale_invariance(seed in 0u64..1000, shift in -50.0f64..50.0, scale in 0.1f64..20.0) {
        let c = random_cloud(seed);
        let t = mapped(&c, |v| v + shift);
        let s = mapped(&c, |v| v * scale);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-7 * a.abs().max(1.0);
        prop_assert!(close(silhouette(&c).unwrap(), silhouette(&t).unwrap()));
        prop_assert!(close(calinski_harabasz(&c).unwrap(), calinski_harabasz(&t).unwrap()));
        prop_assert!(close(davies_bouldin(&c).unwrap(), davies_bouldin(&t).unwrap()));
        prop_assert!(close(avg_interclass_distance(&c).unwrap(), avg_interclass_distance(&t).unwrap()));
        let (vc, vt) = (intra_class_variance(&c), intra_class_variance(&t));
        for k in 0..NUM_CLASSES {
            prop_assert_eq!(vc[k].is_some(), vt[k].is_some());
            if let (Some(a), Some(b)) = (vc[k], vt[k]) {
                prop_assert!(close(a, b));
            }
        }
        prop_assert!(close(silhouette(&c).unwrap(), silhouette(&s).unwrap()));
        prop_assert!(close(calinski_harabasz(&c).unwrap(), calinski_harabasz(&s).unwrap()));
        prop_assert!(close(davies_bouldin(&c).unwrap(), davies_bouldin(&s).unwrap()));
    }

    #[test]
    fn metric_bounds(seed in 0u64..1000) {
        let c = random_cloud(seed);
        let s = silhouette(&c).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!(calinski_harabasz(&c).unwrap() >= 0.0);
        prop_assert!(davies_bouldin(&c).unwrap() >= 0.0);
        prop_assert!(mutual_information(&c).unwrap() >= 0.0);
    }
}

#[test]
fn wider_spacing_separates_better() {
    for seed in 0..5 {
        let c = random_cloud(seed);
        let cents: Vec<Vec<f64>> = c.labels.iter().map(|&k| centroid_of(&c, k)).collect();
        let data: Vec<f64> = (0..c.len())
            .flat_map(|i| c.point(i).iter().zip(&cents[i]).map(|(v, m)| v + m).collect::<Vec<_>>())
            .collect();
        let wide = PointCloud::new(c.dim(), data, c.labels.clone()).unwrap();
        assert!(avg_interclass_distance(&wide).unwrap() > avg_interclass_distance(&c).unwrap());
        assert!(silhouette(&wide).unwrap() > silhouette(&c).unwrap());
        assert!(calinski_harabasz(&wide).unwrap() > calinski_harabasz(&c).unwrap());
        assert!(davies_bouldin(&wide).unwrap() < davies_bouldin(&c).unwrap());
    }
}

#[test]
fn shuffled_labels_score_worse() {
    let c = random_cloud(3);
    let mut labels = c.labels.clone();
    Rng::seed_from_u64(1).shuffle(&mut labels);
    let data: Vec<f64> = (0..c.len()).flat_map(|i| c.point(i).to_vec()).collect();
    let shuffled = PointCloud::new(c.dim(), data, labels).unwrap();
    assert!(davies_bouldin(&shuffled).unwrap() > davies_bouldin(&c).unwrap());
    assert!(calinski_harabasz(&shuffled).unwrap() < calinski_harabasz(&c).unwrap());
    let overlapping = cloud(1, &[0.0, 1.0, 0.0, 1.0], &[0, 0, 1, 1]);
    assert!(silhouette(&overlapping).unwrap() <= 0.0);
}

#[test]
fn mutual_information_limits() {
    let labels: Vec<usize> = (0..600).map(|i| i % 6).collect();
    let perfect = cloud(1, &labels.iter().map(|&y| y as f64).collect::<Vec<_>>(), &labels);
    assert!((mutual_information(&perfect).unwrap() - 6f64.ln()).abs() < 1e-12);

    let mut rng = Rng::seed_from_u64(5);
    let n = 10_000;
    let labels: Vec<usize> = (0..n).map(|i| i % 6).collect();
    let noise: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let mi = mutual_information(&cloud(1, &noise, &labels)).unwrap();
    assert!((0.0..0.05).contains(&mi), "independent MI {mi}");

    let constant = cloud(2, &(0..24).map(|i| if i % 2 == 0 { 1.0 } else { (i / 2) as f64 }).collect::<Vec<_>>(), &(0..12).map(|i| i % 2).collect::<Vec<_>>());
    let one_dim = cloud(1, &(0..12).map(|i| i as f64).collect::<Vec<_>>(), &(0..12).map(|i| i % 2).collect::<Vec<_>>());
    assert!((mutual_information(&constant).unwrap() - mutual_information(&one_dim).unwrap() / 2.0).abs() < 1e-12);
    assert!(mutual_information(&cloud(1, &[0.0; 9], &[0, 1, 0, 1, 0, 1, 0, 1, 0])).is_err());
}

fn sample(id: &str, values: &[f64], m: usize) -> KpiSample {
    KpiSample::from_rows(id, m, values.len() / m, values.to_vec()).unwrap()
}

#[test]
fn l2_audit_by_hand() {
    let o = vec![sample("a", &[0.0, 0.0], 1), sample("b", &[1.0, 1.0], 1)];
    let shifted = |dx: f64| o.iter().map(|s| sample(&s.id, &s.values().data().iter().map(|v| v + dx).collect::<Vec<_>>(), 1)).collect::<Vec<_>>();
    let a = l2_view_audit(&o, &shifted(1.0), &o, &shifted(3.0), &shifted(2.0)).unwrap();
    assert_eq!(a.weak_denoise.mean, 0.0);
    assert!((a.weak_noise.mean - 2f64.sqrt()).abs() < 1e-12);
    assert!((a.strong_noise.mean - 3.0 * 2f64.sqrt()).abs() < 1e-12);
    assert!((a.strong_denoise.mean - 2.0 * 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(a.strong_beyond_weak, 1.0);
    let mut renamed = shifted(1.0);
    renamed[0].id = "z".into();
    assert!(l2_view_audit(&o, &renamed, &o, &o, &o).is_err());
    assert!(l2_view_audit(&o, &o[..1], &o, &o, &o).is_err());
}

#[test]
fn classical_augmentations() {
    let x = support::randn(&[3, 10], 2);
    let mut rng = Rng::seed_from_u64(0);
    let same = classical_augment(&ClassicalAugment::NoiseInjection { ratio: 0.0 }, &x, &mut rng).unwrap();
    assert_eq!(same, x);
    let flat = Tensor::new(vec![2, 5], vec![4.0; 10]).unwrap();
    let y = classical_augment(&ClassicalAugment::parse("noise_injection").unwrap(), &flat, &mut rng).unwrap();
    assert_eq!(y, flat);
    let a = classical_augment(&ClassicalAugment::parse("scaling").unwrap(), &x, &mut Rng::seed_from_u64(4)).unwrap();
    let b = classical_augment(&ClassicalAugment::parse("scaling").unwrap(), &x, &mut Rng::seed_from_u64(4)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), x.shape());
    assert!(ClassicalAugment::parse("jitter").is_err());
    assert!(classical_augment(&ClassicalAugment::Scaling { sigma: 1.0 }, &Tensor::zeros(&[4]), &mut rng).is_err());

    // One channel of ones exposes the per-step factors.
    let ones = Tensor::new(vec![1, 10_000], vec![1.0; 10_000]).unwrap();
    let alpha = classical_augment(&ClassicalAugment::Scaling { sigma: 1.1 }, &ones, &mut Rng::seed_from_u64(8)).unwrap();
    let mean = alpha.data().iter().sum::<f64>() / 10_000.0;
    assert!((mean - 1.0).abs() < 0.03, "scaling mean {mean}");
}

fn toy_train() -> LabeledDataset {
    let schema = KpiSchema::default_schema();
    let m = schema.m();
    let mk = |id: &str, level: f64| sample(id, &vec![level; m * 4], m);
    LabeledDataset::uniform(
        schema,
        vec![mk("p", 0.0), mk("q", 0.1), mk("r", 5.0)],
        vec![rc(0), rc(0), rc(1)],
        LabelSource::Expert,
    )
    .unwrap()
}

#[test]
fn knn_baselines() {
    let train = toy_train();
    let m = train.schema.m();
    let stat = KnnKind::Stat;
    let slide = KnnKind::Sliding { window: 2 };
    for kind in [stat, slide] {
        let exact = train.samples[2].values().clone();
        assert_eq!(knn_baseline(&kind, &train, &[&exact], 1).unwrap(), vec![rc(1)]);
        let near_r = Tensor::new(vec![m, 4], vec![4.0; m * 4]).unwrap();
        assert_eq!(knn_baseline(&kind, &train, &[&near_r], 1).unwrap(), vec![rc(1)]);
        assert_eq!(knn_baseline(&kind, &train, &[&near_r], 3).unwrap(), vec![rc(0)]);
        assert!(knn_baseline(&kind, &train, &[&near_r], 0).is_err());
        assert!(knn_baseline(&kind, &train.subset(&[]), &[&near_r], 1).is_err());
    }
    // Two neighbours, one per class: the vote tie goes to the smaller id.
    let mid = Tensor::new(vec![m, 4], vec![2.55; m * 4]).unwrap();
    assert_eq!(knn_baseline(&stat, &train.subset(&[1, 2]), &[&mid], 2).unwrap(), vec![rc(0)]);
    assert!(knn_baseline(&KnnKind::Sliding { window: 5 }, &train, &[&mid], 1).is_err());
    assert!(knn_baseline(&stat, &train, &[&Tensor::zeros(&[m, 3])], 1).is_err());
}

#[test]
fn sliding_distance_takes_the_best_window() {
    let schema = KpiSchema::default_schema();
    let m = schema.m();
    let mut a = vec![0.0; m * 4];
    let mut b = vec![9.0; m * 4];
    for c in 0..m {
        a[c * 4 + 3] = 9.0;
        b[c * 4 + 3] = 0.0;
    }
    let train = LabeledDataset::uniform(schema, vec![sample("a", &a, m), sample("b", &b, m)], vec![rc(2), rc(4)], LabelSource::Expert).unwrap();
    // Matches `a` over the first three steps and `b` over none.
    let mut x = vec![0.0; m * 4];
    for c in 0..m {
        x[c * 4 + 3] = 1.0;
    }
    let x = Tensor::new(vec![m, 4], x).unwrap();
    assert_eq!(knn_baseline(&KnnKind::Sliding { window: 3 }, &train, &[&x], 1).unwrap(), vec![rc(2)]);
}

#[test]
fn cloud_report_serialises_infinite_indices_as_null() {
    let stacked = cloud(1, &(0..12).map(|i| (i % 2) as f64).collect::<Vec<_>>(), &(0..12).map(|i| i % 2).collect::<Vec<_>>());
    let r = cloud_report(&stacked).unwrap();
    assert_eq!(r.calinski_harabasz, f64::INFINITY);
    let v = serde_json::to_value(&r).unwrap();
    assert!(v["calinski_harabasz"].is_null());
    assert!(v["per_class_intra_variance"][5].is_null());
    assert_eq!(v["n"], 12);
}
