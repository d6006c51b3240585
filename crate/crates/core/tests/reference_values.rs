//! Values frozen from scipy / mpmath runs on the same inputs.

use exaggerator_core::evalsuite::{cosine_distance, fid, PixelFlipCurve};
use exaggerator_core::losses::{kl_compatibility, KlDirection};
use exaggerator_core::stats::{paired_t_test, pearson, spearman, welch_t_test};
use exaggerator_core::{BinIndex, ConditionSpec};

fn close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b}");
}

#[test]
fn bernoulli_kl() {
    let cases = [
        (0.3, 0.6, 0.18378689738681227),
        (0.9, 0.2, 1.1457255029306631),
        (0.01, 0.5, 0.63714564620509797),
        (0.75, 0.7, 0.0061642644167249426),
    ];
    for (p, q, want) in cases {
        close(kl_compatibility(p, q, KlDirection::TargetFirst), want, 1e-12);
        close(kl_compatibility(q, p, KlDirection::ActualFirst), want, 1e-12);
    }
    close(kl_compatibility(0.5, 0.25, KlDirection::TargetFirst), 0.5 * (4.0f64 / 3.0).ln(), 1e-12);
}

const X: [f64; 8] = [2.1, 3.4, 1.9, 5.6, 4.4, 3.3, 2.8, 6.1];
const Y: [f64; 8] = [1.0, 2.9, 2.2, 4.8, 5.1, 2.7, 2.5, 7.3];

#[test]
fn correlations() {
    close(pearson(&X, &Y).unwrap(), 0.9351938671621214, 1e-12);
    close(spearman(&X, &Y).unwrap(), 0.9523809523809524, 1e-12);
}

#[test]
fn t_tests() {
    let t = paired_t_test(&X, &Y).unwrap();
    close(t.statistic, 0.4894935754389832, 1e-10);
    close(t.dof, 7.0, 0.0);
    close(t.p_value, 0.6394577550031746, 1e-8);
    let w = welch_t_test(&[5.1, 4.9, 6.2, 5.8, 6.0, 5.5], &[4.1, 4.5, 3.9, 5.0, 4.4, 4.2, 4.8]).unwrap();
    close(w.statistic, 4.576808033838437, 1e-10);
    close(w.p_value, 0.0012299048520964286, 1e-8);
}

#[test]
fn frechet_distance_in_two_dimensions() {
    let a = [[0.0, 1.0], [1.0, 0.5], [2.0, 2.5], [0.5, -1.0], [1.5, 0.0]];
    let b = [[1.0, 2.0], [3.0, 1.0], [2.5, 2.0], [0.0, 0.0], [2.0, 3.5], [1.0, 1.0]];
    let a: Vec<Vec<f64>> = a.iter().map(|r| r.to_vec()).collect();
    let b: Vec<Vec<f64>> = b.iter().map(|r| r.to_vec()).collect();
    // sqrtm-based value; the toolkit adds 1e-6 to each covariance diagonal
    close(fid(&a, &b).unwrap(), 1.4223203399716349, 1e-5);
}

#[test]
fn pixel_flip_area() {
    let fractions: Vec<f64> = (0..=10).map(|i| i as f64 * 0.05).collect();
    let acc = vec![1.0, 0.98, 0.9, 0.8, 0.7, 0.6, 0.55, 0.52, 0.5, 0.5, 0.5];
    let c = PixelFlipCurve {
        fractions,
        random_accuracy: vec![1.0; 11],
        accuracy: acc,
        seed: 0,
    };
    close(c.auc(), 0.68, 1e-12);
    close(c.random_auc(), 1.0, 1e-12);
}

#[test]
fn cosine() {
    close(cosine_distance(&[1.0, 2.0, 3.0], &[2.0, 0.0, 1.0]).unwrap(), 0.4023856953328032, 1e-12);
}

#[test]
fn bin_grid() {
    let s = ConditionSpec::new(0.1).unwrap();
    assert_eq!(s.bins(), 10);
    for (p, k) in [(0.0, 0), (0.05, 0), (0.1, 1), (0.55, 5), (0.99, 9), (1.0, 9)] {
        assert_eq!(s.bin_index(p).unwrap(), BinIndex(k), "p = {p}");
    }
    let s = ConditionSpec::new(0.3).unwrap();
    assert_eq!(s.bins(), 3);
    assert_eq!(s.bin_index(0.95).unwrap(), BinIndex(2));
    assert_eq!(s.shift_condition(0.2, 0.3), BinIndex(1));
    assert_eq!(s.shift_condition(0.2, -0.5), BinIndex(0));
    close(s.bin_target_posterior(BinIndex(1)).unwrap(), 0.5, 1e-12);
}
