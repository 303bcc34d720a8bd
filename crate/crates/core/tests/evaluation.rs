use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semix::data::{synth_shapes, Dataset};
use semix::evaluation::{
    accuracy, accuracy_from_logits, auroc, corrupt, corrupted_accuracy, corruption_suite_eval, cross_class_pairs,
    default_lambda_grid, equivariance_gap, gaussian_kernel, msp_from_logits, pca_project, projection_csv,
    CorruptionKind, CorruptionSpec,
};
use semix::mixing::MixPolicy;
use semix::models::{LayerDesc, ModelSpec};
use semix::tensor::Tensor;
use semix::training::{train, LrSchedule, SemConfig, TrainConfig};
use semix::Error;

fn pairwise_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut s = 0.0;
    for &a in id {
        for &b in ood {
            s += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (id.len() * ood.len()) as f64
}

#[test]
fn auroc_matches_pairwise_oracle_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for fixture in 0..100 {
        let n1 = rng.random_range(1..60);
        let n2 = rng.random_range(1..60);
        // coarse grid so ties are frequent
        let levels = if fixture % 2 == 0 { 5 } else { 1000 };
        let mut draw = |shift: f64| (rng.random_range(0..levels) as f64 / levels as f64) + shift;
        let id: Vec<f64> = (0..n1).map(|_| draw(0.1)).collect();
        let ood: Vec<f64> = (0..n2).map(|_| draw(0.0)).collect();
        let a = auroc(&id, &ood).unwrap();
        assert!((a - pairwise_auroc(&id, &ood)).abs() <= 1e-12);
    }
}

#[test]
fn auroc_of_identical_distributions_is_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let id: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let ood: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    assert!((auroc(&id, &ood).unwrap() - 0.5).abs() <= 0.02);
}

#[test]
fn msp_edge_cases() {
    let uniform = Tensor::new([1, 4], vec![0.3; 4]).unwrap();
    assert_eq!(msp_from_logits(&uniform), vec![0.25]);
    let peaked = Tensor::new([1, 3], vec![20.0, 0.0, 0.0]).unwrap();
    assert!((msp_from_logits(&peaked)[0] - 1.0).abs() <= 1e-8);
    let z = Tensor::new([2, 3], vec![0.1, -1.0, 2.0, 3.0, 3.5, -2.0]).unwrap();
    let shifted = Tensor::new([2, 3], z.data().iter().map(|v| v + 4.0).collect()).unwrap();
    let (a, b) = (msp_from_logits(&z), msp_from_logits(&shifted));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-6);
        assert!(*x >= 1.0 / 3.0 && *x <= 1.0);
    }
}

#[test]
fn accuracy_fixture_and_errors() {
    // predictions 0, 1, 1, 2 (the last row ties between 2 and 2 -> lowest)
    let logits = Tensor::new([4, 3], vec![5., 1., 0., 0., 2., 1., 0., 3., 3., 0., 1., 4.]).unwrap();
    let labels = Tensor::one_hot(&[0, 1, 2, 2], 3).unwrap();
    assert_eq!(accuracy_from_logits(&logits, &labels).unwrap(), 0.75);
}

// Dense head whose logits equal the flattened input.
fn pass_through_model(k: usize) -> ModelSpec {
    let mut m = ModelSpec::new(&[k], &[LayerDesc::Dense { out: k }], k, 0).unwrap();
    for p in m.params_mut() {
        let eye = |n: usize| (0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect::<Vec<f32>>();
        if p.name.ends_with("weight") {
            p.value.data_mut().copy_from_slice(&eye(k));
        } else {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    m
}

#[test]
fn oracle_and_constant_classifiers() {
    let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
    let onehots = Tensor::one_hot(&labels, 3).unwrap();
    let images = onehots.clone().reshape(vec![300, 1, 1, 3]).unwrap();
    let data = Dataset::from_labels("oracle", images, &labels, 3).unwrap();
    assert_eq!(accuracy(&pass_through_model(3), &data).unwrap(), 1.0);

    let mut constant = pass_through_model(3);
    for p in constant.params_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    assert!((accuracy(&constant, &data).unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn gaussian_noise_has_requested_spread() {
    let img = Tensor::full([1, 1, 100, 100], 0.5);
    let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 1).unwrap();
    let out = corrupt(&img, &spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let n = out.len() as f64;
    let mean = out.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let std = (out.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((std - 0.04).abs() <= 0.004, "std {std}");
}

#[test]
fn contrast_is_affine_about_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = Tensor::new([2, 1, 4, 4], (0..32).map(|_| rng.random::<f32>()).collect()).unwrap();
    let spec = CorruptionSpec::new(CorruptionKind::Contrast, 5).unwrap();
    let out = corrupt(&img, &spec, &mut rng).unwrap();
    for (o, p) in out.data().iter().zip(img.data()) {
        assert_eq!(*o, (0.5 + 0.15 * (*p as f64 - 0.5)) as f32);
    }
}

#[test]
fn blurred_impulse_reproduces_kernel() {
    let mut img = Tensor::zeros([1, 1, 15, 15]);
    img.data_mut()[7 * 15 + 7] = 1.0;
    for severity in 1..=5 {
        let spec = CorruptionSpec::new(CorruptionKind::GaussianBlur, severity).unwrap();
        let out = corrupt(&img, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // closed form of the discrete kernel, independent of the library
        let sigma = spec.parameter();
        let r = (3.0 * sigma).ceil() as i64;
        let z: f64 = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).sum();
        let k = |i: i64| if i.abs() > r { 0.0 } else { (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() / z };
        for x in 0..15i64 {
            let want = k(0) * k(x - 7);
            assert!((out.data()[7 * 15 + x as usize] as f64 - want).abs() < 1e-6);
        }
        assert_eq!(gaussian_kernel(sigma).len(), (2 * r + 1) as usize);
    }
}

#[test]
fn corruption_is_deterministic_and_clamped() {
    let data = synth_shapes(8, 16, 2, 0.0, 0).unwrap();
    for spec in semix::evaluation::corruption_grid() {
        let a = corrupt(data.images(), &spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = corrupt(data.images(), &spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

fn trained_cnn() -> (ModelSpec, Dataset) {
    let data = synth_shapes(1500, 16, 3, 0.05, 21).unwrap();
    let parts = semix::data::split(&data, &[0.7, 0.3], 1).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 32,
        lr: 0.05,
        lr_schedule: LrSchedule::step_decay(10),
        mix: MixPolicy::none(),
        sem: SemConfig::default(),
        es_fraction: 0.0,
        ..Default::default()
    };
    let (m, _) = train(ModelSpec::small_cnn(1, 16, 3, 2).unwrap(), &parts[0], None, &cfg).unwrap();
    (m, parts[1].clone())
}

#[test]
fn corruption_suite_sanity() {
    let (model, test) = trained_cnn();
    let clean = accuracy(&model, &test).unwrap();
    assert!(clean > 0.8, "clean accuracy {clean}");
    for kind in CorruptionKind::ALL {
        let control = CorruptionSpec::with_parameter(kind, if kind == CorruptionKind::Contrast { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(corrupted_accuracy(&model, &test, &control, 0, 0).unwrap(), clean, "{kind}");
    }
    let suite = corruption_suite_eval(&model, &test, 0).unwrap();
    assert_eq!(suite.cells.len(), 20);
    let below = suite.cells.iter().filter(|c| c.1 <= clean).count();
    assert!(below >= 18, "{below}/20 cells at or below clean");
    let monotone = CorruptionKind::ALL
        .iter()
        .filter(|&&k| {
            let accs: Vec<f64> = suite.cells.iter().filter(|c| c.0.kind() == k).map(|c| c.1).collect();
            accs.windows(2).all(|w| w[1] <= w[0])
        })
        .count();
    assert!(monotone >= 3, "{monotone}/4 kinds monotone: {:?}", suite.cells);
    let mean = suite.cells.iter().map(|c| c.1).sum::<f64>() / 20.0;
    assert!((suite.mean_accuracy - mean).abs() < 1e-15);
}

#[test]
fn gap_endpoints_vanish_and_linear_models_are_exact() {
    let (model, test) = trained_cnn();
    let (a, b) = cross_class_pairs(&test, 50, 3).unwrap();
    let labels = test.label_indices();
    assert!(a.iter().zip(&b).all(|(&i, &j)| labels[i] != labels[j]));
    let xi = test.images().select_rows(&a).unwrap();
    let xj = test.images().select_rows(&b).unwrap();
    let curve = equivariance_gap(&model, &xi, &xj, &default_lambda_grid()).unwrap();
    assert_eq!(curve.pair_count, 50);
    assert!(curve.gap_mean[0] <= 1e-5 && curve.gap_mean[10] <= 1e-5);
    assert!(curve.gap_mean.iter().all(|&g| g >= 0.0));
    assert!(curve.gap_mean[5] > 0.0);

    // halving the grid step: shared points agree, new midpoints stay within
    // the pairwise spread of their neighbours
    let fine: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let fine_curve = equivariance_gap(&model, &xi, &xj, &fine).unwrap();
    for i in 0..10 {
        assert_eq!(fine_curve.gap_mean[2 * i], curve.gap_mean[i]);
        let mid = fine_curve.gap_mean[2 * i + 1];
        let (lo, hi) = (curve.gap_mean[i].min(curve.gap_mean[i + 1]), curve.gap_mean[i].max(curve.gap_mean[i + 1]));
        let spread = curve.gap_std[i].max(curve.gap_std[i + 1]);
        assert!(mid >= lo - spread && mid <= hi + spread, "lambda {}: {mid} vs [{lo}, {hi}] +- {spread}", fine[2 * i + 1]);
    }

    let linear = ModelSpec::linear(256, 8, 3, 0).unwrap();
    let c = equivariance_gap(&linear, &xi, &xj, &default_lambda_grid()).unwrap();
    assert!(c.gap_mean.iter().all(|&g| g <= 1e-5));
    assert!(c.to_csv().starts_with("lambda,gap_mean,gap_std\n0,"));
}

#[test]
fn relu_gap_hand_computed() {
    let mut m = ModelSpec::new(&[2], &[LayerDesc::Dense { out: 2 }, LayerDesc::Relu], 2, 0).unwrap();
    m.params_mut()[0].value.data_mut().copy_from_slice(&[1., 0., 0., 1.]);
    m.params_mut()[1].value.data_mut().copy_from_slice(&[0., 0.]);
    let xi = Tensor::new([1, 2], vec![1., -1.]).unwrap();
    let xj = Tensor::new([1, 2], vec![-1., 1.]).unwrap();
    let c = equivariance_gap(&m, &xi, &xj, &[0.5]).unwrap();
    assert!((c.gap_mean[0] - 0.5f64.sqrt()).abs() < 1e-6);
}

fn svd_oracle(rows: &[Vec<f64>]) -> Vec<f64> {
    let (n, d) = (rows.len(), rows[0].len());
    let mean: Vec<f64> = (0..d).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n as f64).collect();
    let m = DMatrix::from_fn(n, d, |r, c| rows[r][c] - mean[c]);
    let mut s: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

#[test]
fn pca_matches_svd_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let (n, d) = (rng.random_range(5..40), rng.random_range(2..9));
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let t = Tensor::new([n, d], rows.iter().flatten().map(|&v| v as f32).collect()).unwrap();
        let rows32: Vec<Vec<f64>> = t.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let pca = pca_project(&t, 2).unwrap();
        let oracle = svd_oracle(&rows32);
        for (a, b) in pca.singular_values.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-6 * oracle[0].max(1.0));
        }
        // reconstruction error equals the trailing energy
        let mut err = 0.0;
        for (i, row) in rows32.iter().enumerate() {
            let p = pca.projection.row(i);
            for c in 0..d {
                let rec = pca.mean[c] + p[0] * pca.components[0][c] + p[1] * pca.components[1][c];
                err += (row[c] - rec).powi(2);
            }
        }
        let trailing: f64 = oracle[2..].iter().map(|s| s * s).sum();
        assert!((err - trailing).abs() <= 1e-6 * (1.0 + trailing));
        for c in &pca.components {
            let lead = c.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(lead > 0.0);
        }
    }
}

#[test]
fn pca_of_planar_data_is_an_isometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pts: Vec<[f32; 2]> = (0..20).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let t = Tensor::new([20, 2], pts.iter().flatten().copied().collect()).unwrap();
    let p = pca_project(&t, 2).unwrap().projection;
    for i in 0..20 {
        for j in 0..20 {
            let d0 = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt() as f64;
            let (a, b) = (p.row(i), p.row(j));
            let d1 = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            assert!((d0 - d1).abs() <= 1e-5);
        }
    }
}

#[test]
fn pca_rank_one_and_errors() {
    let t = Tensor::new([5, 3], (0..5).flat_map(|i| [i as f32, 2.0 * i as f32, -(i as f32)]).collect()).unwrap();
    let p = pca_project(&t, 2).unwrap();
    let second: Vec<f64> = (0..5).map(|i| p.projection.row(i)[1]).collect();
    let var = second.iter().map(|v| v * v).sum::<f64>() / 5.0;
    assert!(var <= 1e-8);
    assert!(matches!(pca_project(&Tensor::zeros([5, 1]), 1), Err(Error::Usage(_))));
    assert!(matches!(pca_project(&Tensor::zeros([2, 3]), 2), Err(Error::Usage(_))));
    let csv = projection_csv(&p.projection, &[0.0; 5], &[0, 1, 0, 1, 0]).unwrap();
    assert!(csv.starts_with("x,y,lambda,class\n"));
    assert_eq!(csv.lines().count(), 6);
}

proptest! {
    #[test]
    fn msp_stays_in_range(z in prop::collection::vec(-30.0f32..30.0, 2..8)) {
        let k = z.len();
        let s = msp_from_logits(&Tensor::new([1, k], z).unwrap())[0];
        prop_assert!(s >= 1.0 / k as f64 - 1e-12 && s <= 1.0);
    }

    #[test]
    fn auroc_is_complementary(id in prop::collection::vec(0u8..10, 1..20), ood in prop::collection::vec(0u8..10, 1..20)) {
        let id: Vec<f64> = id.into_iter().map(f64::from).collect();
        let ood: Vec<f64> = ood.into_iter().map(f64::from).collect();
        let a = auroc(&id, &ood).unwrap();
        let b = auroc(&ood, &id).unwrap();
        prop_assert!((a + b - 1.0).abs() <= 1e-12);
    }
}
