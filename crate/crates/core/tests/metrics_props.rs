use ndarray::Array2;
use proptest::prelude::*;
use steerscope::metrics::{detect_spike, layer_diff, minmax_normalize, row_entropy, IdMatrix};

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("c{c}")).collect()
}

fn grid(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-50.0f64..50.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (2usize..12, 2usize..16)
}

fn matrix(raw: Array2<f64>, stderr: Array2<f64>) -> IdMatrix {
    let n = raw.nrows();
    IdMatrix::from_raw("c", labels(n), raw, stderr, 8).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn normalized_in_unit_interval(raw in dims().prop_flat_map(|(r, c)| grid(r, c))) {
        let n = minmax_normalize(raw.view());
        prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (a, b) in raw.iter().zip(n.iter()) {
            let want = if hi > lo { (a - lo) / (hi - lo) } else { 0.5 };
            prop_assert!((b - want).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_matrix_maps_to_half(v in -10.0f64..10.0, (r, c) in dims()) {
        let n = minmax_normalize(Array2::from_elem((r, c), v).view());
        prop_assert!(n.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn spike_invariant_under_affine_maps(
        raw in (2usize..10, 2usize..12).prop_flat_map(|(r, c)| grid(r, c)),
        scale in 0.01f64..100.0,
        shift in -1e3f64..1e3,
    ) {
        let se = raw.mapv(|v| 0.1 + v.abs() * 0.01);
        let a = detect_spike(&matrix(raw.clone(), se.clone())).unwrap();
        let b = detect_spike(&matrix(raw.mapv(|v| scale * v + shift), se.mapv(|v| scale * v))).unwrap();
        prop_assert_eq!(a.checkpoint, b.checkpoint);
        prop_assert_eq!(a.layer, b.layer);
        prop_assert!((a.magnitude - b.magnitude).abs() < 1e-9);
        prop_assert!((a.significance - b.significance).abs() <= 1e-9 * a.significance.abs().max(1.0));
    }

    #[test]
    fn entropy_bounded_by_log_layers(row in prop::collection::vec(0.0f64..1.0, 1..64)) {
        let e = row_entropy(&row);
        prop_assert!(e >= 0.0);
        prop_assert!(e <= (row.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn layer_diffs_telescope(raw in (2usize..8, 2usize..20).prop_flat_map(|(r, c)| grid(r, c))) {
        let se = Array2::zeros(raw.dim());
        let m = matrix(raw, se);
        for c in 0..m.num_checkpoints() {
            let d = layer_diff(&m, c).unwrap();
            let row = m.normalized.row(c);
            let total: f64 = d.iter().sum();
            prop_assert!((total - (row[row.len() - 1] - row[0])).abs() < 1e-12);
        }
    }
}

#[test]
fn entropy_extremes() {
    for l in 1..=64 {
        let uniform = vec![0.37; l];
        assert!((row_entropy(&uniform) - (l as f64).ln()).abs() < 1e-9);
        for hot in [0, l - 1] {
            let mut onehot = vec![0.0; l];
            onehot[hot] = 1.0;
            assert!(row_entropy(&onehot).abs() < 1e-9, "one-hot of length {l}");
        }
    }
}
