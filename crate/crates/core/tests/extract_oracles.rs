use approx::assert_abs_diff_eq;
use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use steerscope::extract::{
    diff_normalize, fit_concept, kmeans_direction, pca_first_component, FitOptions, Method, Normalization,
    TrainMatrix,
};
use steerscope::store::{ActivationDump, Manifest, Polarity};

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

fn train(values: Array2<f64>) -> TrainMatrix {
    TrainMatrix {
        values,
        layer: 0,
        checkpoint: 0,
        normalization: Normalization::None,
    }
}

/// First right singular vector of the column-centred matrix, taken as the
/// top eigenvector of a full symmetric eigendecomposition of `xc^T xc`.
fn svd_first_direction(x: &Array2<f64>) -> Array1<f64> {
    let (n, m) = x.dim();
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    let xc = x - &mean;
    let dm = DMatrix::from_fn(n, m, |i, j| xc[[i, j]]);
    let eig = (dm.transpose() * &dm).symmetric_eigen();
    let (best, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
    Array1::from_iter(eig.eigenvectors.column(best).iter().copied())
}

fn abs_cos(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    (a.dot(b) / (a.dot(a) * b.dot(b)).sqrt()).abs()
}

#[test]
fn pca_matches_svd_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..100 {
        let rows = rng.random_range(8..=64);
        let dims = rng.random_range(8..=128);
        let x = gaussian(&mut rng, rows, dims);
        let got = pca_first_component(&train(x.clone())).unwrap();
        let want = svd_first_direction(&x);
        let c = abs_cos(&got.vector, &want);
        assert!(c >= 1.0 - 1e-6, "case {case} ({rows}x{dims}): |cos| = {c}");
        assert_abs_diff_eq!(got.vector.dot(&got.vector), 1.0, epsilon = 1e-12);
    }
}

#[test]
fn pca_ratios_match_singular_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = gaussian(&mut rng, 40, 12);
    let got = pca_first_component(&train(x.clone())).unwrap();
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    let xc = &x - &mean;
    let sv = DMatrix::from_fn(40, 12, |i, j| xc[[i, j]]).singular_values();
    let mut ev: Vec<f64> = sv.iter().map(|s| s * s).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = ev.iter().sum();
    for (k, r) in got.ratios.iter().enumerate() {
        assert_abs_diff_eq!(*r, ev[k] / total, epsilon = 1e-6);
    }
}

#[test]
fn kmeans_equals_mean_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let n = rng.random_range(1..=40);
        let d = rng.random_range(1..=64);
        let hp = gaussian(&mut rng, n, d);
        let hn = gaussian(&mut rng, n, d);
        let got = kmeans_direction(hp.view(), hn.view()).unwrap();
        let mut diff = vec![0.0; d];
        for j in 0..d {
            let mp: f64 = (0..n).map(|i| hp[[i, j]]).sum::<f64>() / n as f64;
            let mn: f64 = (0..n).map(|i| hn[[i, j]]).sum::<f64>() / n as f64;
            diff[j] = mp - mn;
        }
        let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..d {
            assert!((got[j] - diff[j] / norm).abs() <= 1e-12);
        }
    }
}

#[test]
fn fit_orients_toward_positive_class() {
    let labels = vec!["a".to_string(), "b".to_string()];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dir: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
    let mut dumps = Vec::new();
    for (stream, sign, pol) in [(1u64, 1.0, Polarity::Positive), (2, -1.0, Polarity::Negative)] {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        r.set_stream(stream);
        let m = Manifest::new("t", labels.clone(), 2, 6, 16, pol, "c", 0);
        let dump = ActivationDump::from_shards(m, |_, _| {
            Ok((0..16 * 6)
                .map(|i| (sign * dir[i % 6] + 0.1 * r.sample::<f64, _>(StandardNormal)) as f32)
                .collect())
        })
        .unwrap();
        dumps.push(dump);
    }
    let ids: Vec<usize> = (0..16).collect();
    for method in [Method::Pca, Method::Kmeans] {
        let opts = FitOptions {
            method,
            ..Default::default()
        };
        let sets = fit_concept(&dumps[0], &dumps[1], &ids, opts).unwrap();
        for set in &sets {
            for v in &set.vectors {
                let proj: f64 = v.iter().zip(&dir).map(|(a, b)| a * b).sum();
                assert!(proj > 0.0, "{method:?} vector points away from the positive class");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pca_invariant_under_positive_row_scaling(
        seed in 0u64..10_000,
        rows in 4usize..24,
        cols in 3usize..20,
        scales in prop::collection::vec(0.1f64..10.0, 24),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hp = gaussian(&mut rng, rows, cols);
        let hn = gaussian(&mut rng, rows, cols);
        let mut hp_s = hp.clone();
        let mut hn_s = hn.clone();
        for (i, &k) in scales.iter().take(rows).enumerate() {
            hp_s.row_mut(i).mapv_inplace(|v| v * k);
            hn_s.row_mut(i).mapv_inplace(|v| v * k);
        }
        let a = pca_first_component(&diff_normalize(hp.view(), hn.view(), Normalization::PerRowL2).unwrap()).unwrap();
        let b = pca_first_component(&diff_normalize(hp_s.view(), hn_s.view(), Normalization::PerRowL2).unwrap()).unwrap();
        prop_assert!(abs_cos(&a.vector, &b.vector) >= 1.0 - 1e-9);
    }

    #[test]
    fn zscore_columns_have_zero_mean_unit_variance(seed in 0u64..10_000, rows in 3usize..30, cols in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hp = gaussian(&mut rng, rows, cols);
        let hn = gaussian(&mut rng, rows, cols);
        let t = diff_normalize(hp.view(), hn.view(), Normalization::PerDimZscore).unwrap();
        for col in t.values.columns() {
            let mean = col.sum() / rows as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-8);
        }
    }
}
