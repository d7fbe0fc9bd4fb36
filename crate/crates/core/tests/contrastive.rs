mod support;

use proptest::prelude::*;
use qoe_numeric::{finite_diff_check, GradCheckConfig, Graph, Rng, Tensor};
use qoe_rca::contrastive::*;
use qoe_rca::diffusion::{ViewPolicy, ZeroNoise};
use qoe_rca::metrics::{silhouette, PointCloud};
use qoe_rca::{LabelSource, RcaError, RootCause};

fn unit_rows(n: usize, d: usize, rng: &mut Rng) -> Tensor {
    let mut data = vec![0.0; n * d];
    rng.fill_normal(&mut data);
    for row in data.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::new(vec![n, d], data).unwrap()
}

/// Direct evaluation of the loss: for each anchor, the mean negative
/// log-probability of its positives under a softmax over all other rows.
fn literal_supcon(z: &Tensor, labels: &[RootCause], tau: f64) -> f64 {
    let rows = z.shape()[0];
    let d = z.shape()[1];
    let y: Vec<RootCause> = labels.iter().chain(labels).copied().collect();
    let sim = |i: usize, k: usize| -> f64 { (0..d).map(|j| z.data()[i * d + j] * z.data()[k * d + j]).sum::<f64>() / tau };
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..rows {
        let mut denom = 0.0;
        for k in 0..rows {
            if k != i {
                denom += sim(i, k).exp();
            }
        }
        let mut acc = 0.0;
        let mut npos = 0;
        for k in 0..rows {
            if k != i && y[k] == y[i] {
                acc += sim(i, k) - denom.ln();
                npos += 1;
            }
        }
        if npos > 0 {
            total += -acc / npos as f64;
            anchors += 1;
        }
    }
    total / anchors as f64
}

#[test]
fn normalise_by_hand() {
    let z = normalize_flatten(&Tensor::from_vec(vec![3.0, 4.0]).unwrap()).unwrap();
    assert!((z.data()[0] - 0.6).abs() < 1e-12 && (z.data()[1] - 0.8).abs() < 1e-12);
    let scaled = normalize_flatten(&Tensor::from_vec(vec![21.0, 28.0]).unwrap()).unwrap();
    assert!(z.data().iter().zip(scaled.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    let again = normalize_flatten(&z).unwrap();
    assert!(z.data().iter().zip(again.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    let fm = Tensor::new(vec![2, 3], vec![1.0, 2.0, 2.0, 0.0, 4.0, 0.0]).unwrap();
    let n = normalize_flatten(&fm).unwrap();
    assert_eq!(n.len(), 6);
    assert!((n.data().iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn zero_feature_map_cannot_be_normalised() {
    assert!(normalize_flatten(&Tensor::zeros(&[2, 3])).is_err());
}

#[test]
fn masks_by_hand() {
    let one = RootCause::from_index(0);
    let two = RootCause::from_index(1);
    let m = positive_mask(&[one, one, one, one]);
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(m.data()[i * 4 + j], if i == j { 0.0 } else { 1.0 });
        }
    }
    // Labels [1, 2] duplicated: only (0, 2) and (1, 3) pair up.
    let m = positive_mask(&[one, two, one, two]);
    let ones: Vec<(usize, usize)> = (0..16).filter(|&k| m.data()[k] == 1.0).map(|k| (k / 4, k % 4)).collect();
    assert_eq!(ones, vec![(0, 2), (1, 3), (2, 0), (3, 1)]);
    let b = ContrastBatch::new(unit_rows(6, 4, &mut Rng::seed_from_u64(1)), (0..3).map(RootCause::from_index).collect()).unwrap();
    for i in 0..6 {
        for j in 0..6 {
            assert_eq!(b.mask.data()[i * 6 + j], if (i as i64 - j as i64).abs() == 3 { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn batch_checks_shape_and_norms() {
    let labels = vec![RootCause::from_index(0)];
    assert!(ContrastBatch::new(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.5, 0.5]).unwrap(), labels.clone()).is_err());
    assert!(ContrastBatch::new(unit_rows(3, 2, &mut Rng::seed_from_u64(2)), labels).is_err());
}

#[test]
fn identical_embeddings_give_ln3_for_any_temperature() {
    let z = Tensor::new(vec![4, 2], vec![0.6, 0.8, 0.6, 0.8, 0.6, 0.8, 0.6, 0.8]).unwrap();
    let c = RootCause::from_index(2);
    let b = ContrastBatch::new(z, vec![c, c]).unwrap();
    for tau in [0.05, 0.1, 1.0] {
        assert!((supcon_loss(&b, tau).unwrap() - 3f64.ln()).abs() < 1e-9, "tau {tau}");
    }
}

#[test]
fn orthogonal_classes_by_hand() {
    let z = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = ContrastBatch::new(z, vec![RootCause::from_index(0), RootCause::from_index(1)]).unwrap();
    let want = (std::f64::consts::E + 2.0).ln() - 1.0;
    assert!((supcon_loss(&b, 1.0).unwrap() - want).abs() < 1e-12);
    assert!((want - 0.5514).abs() < 1e-4);
}

#[test]
fn temperature_and_size_errors() {
    let z = unit_rows(4, 3, &mut Rng::seed_from_u64(3));
    let b = ContrastBatch::new(z.clone(), vec![RootCause::from_index(0); 2]).unwrap();
    assert!(matches!(supcon_loss(&b, 0.0), Err(RcaError::Config(_))));
    assert!(matches!(supcon_loss(&b, -1.0), Err(RcaError::Config(_))));
    let mut g = Graph::new();
    let one = g.input(unit_rows(1, 3, &mut Rng::seed_from_u64(4)));
    assert!(supcon_loss_graph(&mut g, one, &[], 0.1).is_err());
}

#[test]
fn fast_loss_matches_literal_on_random_batches() {
    let mut rng = Rng::seed_from_u64(10);
    for trial in 0..50 {
        let n = rng.int_inclusive(1, 32);
        let classes = rng.int_inclusive(1, 6);
        let labels: Vec<RootCause> = (0..n).map(|_| RootCause::from_index(rng.below(classes))).collect();
        let z = unit_rows(2 * n, 1 + rng.below(16), &mut rng);
        let tau = [0.05, 0.1, 1.0][trial % 3];
        let fast = supcon_loss(&ContrastBatch::new(z.clone(), labels.clone()).unwrap(), tau).unwrap();
        let slow = literal_supcon(&z, &labels, tau);
        assert!((fast - slow).abs() < 1e-9, "trial {trial}: {fast} vs {slow}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_matches_literal(seed in 0u64..10_000, n in 1usize..20, classes in 1usize..7, tau in 0.05f64..2.0) {
        let mut rng = Rng::seed_from_u64(seed);
        let labels: Vec<RootCause> = (0..n).map(|_| RootCause::from_index(rng.below(classes))).collect();
        let z = unit_rows(2 * n, 5, &mut rng);
        let fast = supcon_loss(&ContrastBatch::new(z.clone(), labels.clone()).unwrap(), tau).unwrap();
        prop_assert!((fast - literal_supcon(&z, &labels, tau)).abs() < 1e-9);
        prop_assert!(fast >= 0.0);
    }

    #[test]
    fn loss_is_permutation_equivariant(seed in 0u64..10_000, n in 2usize..16) {
        let mut rng = Rng::seed_from_u64(seed);
        let labels: Vec<RootCause> = (0..n).map(|_| RootCause::from_index(rng.below(6))).collect();
        let d = 4;
        let z = unit_rows(2 * n, d, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let mut pz = Vec::with_capacity(2 * n * d);
        for view in 0..2 {
            for &p in &perm {
                let r = view * n + p;
                pz.extend_from_slice(&z.data()[r * d..(r + 1) * d]);
            }
        }
        let pl: Vec<RootCause> = perm.iter().map(|&p| labels[p]).collect();
        let a = supcon_loss(&ContrastBatch::new(z, labels).unwrap(), 0.1).unwrap();
        let b = supcon_loss(&ContrastBatch::new(Tensor::new(vec![2 * n, d], pz).unwrap(), pl).unwrap(), 0.1).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        channels: vec![3, 4],
        kernel: 3,
    }
}

#[test]
fn encoder_dimension_and_determinism() {
    let e = Encoder::new(&EncoderConfig::default(), 47, 40, 0).unwrap();
    assert_eq!(e.net.dim(), 320);
    let x = support::randn(&[47, 40], 1);
    let a = e.encode(&x).unwrap();
    let b = e.encode(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 320);
    assert!(e.encode(&support::randn(&[46, 40], 1)).is_err());
    let z = e.embed_all(&[&x, &x]).unwrap();
    assert_eq!(z.shape(), &[2, 320]);
}

#[test]
fn zeroed_encoder_maps_zero_to_zero() {
    let mut e = Encoder::new(&small_encoder(), 2, 8, 0).unwrap();
    for p in e.store.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = Tensor::zeros(&shape);
    }
    let f = e.encode(&Tensor::zeros(&[2, 8])).unwrap();
    assert!(f.data().iter().all(|&v| v == 0.0));
}

#[test]
fn encoder_feature_gradients() {
    let e = Encoder::new(&small_encoder(), 2, 8, 3).unwrap();
    let x = support::randn(&[2, 3, 8], 4);
    let cfg = GradCheckConfig {
        step: 1e-5,
        tolerance: 1e-3,
        ..GradCheckConfig::default()
    };
    let report = finite_diff_check(
        &e.store,
        |s, g| {
            let xv = g.input(x.clone());
            let f = e.net.feature_map(g, s, xv).map_err(support::numeric)?;
            Ok(g.sum(f))
        },
        &cfg,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn encoder_supcon_composite_gradients() {
    let e = Encoder::new(&small_encoder(), 2, 8, 5).unwrap();
    let x = support::randn(&[2, 6, 8], 6);
    let labels = vec![RootCause::from_index(0), RootCause::from_index(1), RootCause::from_index(0)];
    let cfg = GradCheckConfig {
        step: 1e-5,
        tolerance: 1e-3,
        ..GradCheckConfig::default()
    };
    let report = finite_diff_check(
        &e.store,
        |s, g| {
            let xv = g.input(x.clone());
            let z = e.net.embed(g, s, xv).map_err(support::numeric)?;
            supcon_loss_graph(g, z, &labels, 0.5).map_err(support::numeric)
        },
        &cfg,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn encoder_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.ckpt");
    let e = Encoder::new(&small_encoder(), 2, 8, 9).unwrap();
    e.save(&p, "x").unwrap();
    let back = Encoder::load(&p, &small_encoder(), 2, 8, "x").unwrap();
    assert!(e.store.bitwise_eq(&back.store));
    assert!(Encoder::load(&p, &small_encoder(), 2, 8, "y").is_err());
}

#[test]
fn stratified_batches_pair_every_class() {
    let mut rng = Rng::seed_from_u64(1);
    let labels: Vec<RootCause> = (0..301).map(|_| RootCause::from_index(rng.below(6))).collect();
    let batches = stratified_batches(&labels, 32, &mut rng);
    let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..301).collect::<Vec<_>>());
    for b in &batches {
        for c in RootCause::ALL {
            let k = b.iter().filter(|&&i| labels[i] == c).count();
            assert!(k == 0 || k >= 2, "class {c} appears once");
        }
    }
}

#[test]
fn loss_trace_csv_and_epoch_means() {
    let trace = vec![
        StepLoss { epoch: 1, step: 1, loss: 2.0 },
        StepLoss { epoch: 1, step: 2, loss: 4.0 },
        StepLoss { epoch: 2, step: 3, loss: 1.0 },
    ];
    assert_eq!(epoch_means(&trace), vec![3.0, 1.0]);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("loss.csv");
    write_loss_trace(&p, &trace).unwrap();
    let text = std::fs::read_to_string(p).unwrap();
    assert_eq!(text.lines().next(), Some("epoch,step,loss"));
    assert_eq!(text.lines().count(), 4);
}

fn pretrain_config(epochs: usize) -> PretrainConfig {
    PretrainConfig {
        epochs,
        batch_size: 64,
        encoder: EncoderConfig {
            channels: vec![8, 16],
            kernel: 3,
        },
        seed: 3,
        ..PretrainConfig::default()
    }
}

#[test]
fn zero_epochs_return_the_initial_encoder() {
    let (rule, _, _) = support::pools(60, 6, 6, 1);
    let cfg = pretrain_config(0);
    let s = qoe_rca::diffusion::DiffusionConfig::default().schedule().unwrap();
    let (e, trace) = pretrain(&rule, &ZeroNoise, &s, &ViewPolicy::default(), &cfg).unwrap();
    assert!(trace.is_empty());
    let init = Encoder::new(&cfg.encoder, rule.schema.m(), 40, cfg.seed).unwrap();
    assert!(e.store.bitwise_eq(&init.store));
}

#[test]
fn pretraining_rejects_expert_data() {
    let (_, expert, _) = support::pools(1, 12, 6, 1);
    assert!(expert.all_from(LabelSource::Expert));
    let s = qoe_rca::diffusion::DiffusionConfig::default().schedule().unwrap();
    let r = pretrain(&expert, &ZeroNoise, &s, &ViewPolicy::default(), &pretrain_config(1));
    assert!(matches!(r, Err(RcaError::Contract(_))));
}

#[test]
fn pretraining_is_reproducible_and_improves_separation() {
    let (rule, _, holdout) = support::pools(600, 6, 120, 2);
    let cfg = pretrain_config(12);
    let s = qoe_rca::diffusion::DiffusionConfig::default().schedule().unwrap();
    let pol = ViewPolicy::default();
    let (enc, trace) = pretrain(&rule, &ZeroNoise, &s, &pol, &cfg).unwrap();
    let (_, again) = pretrain(&rule, &ZeroNoise, &s, &pol, &cfg).unwrap();
    assert_eq!(trace, again);

    let means = epoch_means(&trace);
    assert!(means.last().unwrap() < &means[0], "{means:?}");

    // Smoothed trace (window 5) decreases at most steps.
    let losses: Vec<f64> = trace.iter().map(|t| t.loss).collect();
    let smooth: Vec<f64> = losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    let down = smooth.windows(2).filter(|w| w[1] <= w[0]).count();
    let frac = down as f64 / (smooth.len() - 1) as f64;
    assert!(frac >= 0.6, "smoothed decrease fraction {frac}");

    let xs = support::refs(&holdout);
    let sil = |e: &Encoder| {
        let z = e.embed_all(&xs).unwrap();
        silhouette(&PointCloud::new(z.shape()[1], z.data().to_vec(), holdout.labels.clone()).unwrap()).unwrap()
    };
    let random = Encoder::new(&cfg.encoder, rule.schema.m(), 40, cfg.seed).unwrap();
    let (before, after) = (sil(&random), sil(&enc));
    assert!(after > before, "silhouette {before} -> {after}");
}
