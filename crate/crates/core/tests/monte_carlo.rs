mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{max_z, monte_carlo_moments};
use evidential::evidence::DirichletPrediction;

#[test]
fn three_class_covariance_matches_sampling() {
    let alpha = [2.0, 3.0, 5.0];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mc = monte_carlo_moments(&alpha, 1_000_000, &mut rng);
    let b = DirichletPrediction::new(alpha.to_vec()).unwrap().covariance_bundle();
    assert!(max_z(&mc.total, &mc.total_se, &b.total) < 4.0);
    assert!(max_z(&mc.aleatoric, &mc.aleatoric_se, &b.aleatoric) < 4.0);
    assert!(max_z(&mc.epistemic, &mc.epistemic_se, &b.epistemic) < 4.0);
    // the sampled totals also land on the rounded closed-form values
    let expected = [[0.16, -0.06, -0.10], [-0.06, 0.21, -0.15], [-0.10, -0.15, 0.25]];
    for (row, want) in mc.total.iter().zip(&expected) {
        for (got, want) in row.iter().zip(want) {
            assert!((got - want).abs() < 2e-3);
        }
    }
}

fn min_eigenvalue(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mat = DMatrix::from_fn(n, n, |i, j| m[i][j]);
    mat.symmetric_eigen().eigenvalues.min()
}

proptest! {
    #[test]
    fn covariance_matrices_are_positive_semidefinite(
        alpha in prop::collection::vec(0.01f64..100.0, 2..12)
    ) {
        let b = DirichletPrediction::new(alpha).unwrap().covariance_bundle();
        for m in [&b.total, &b.aleatoric, &b.epistemic] {
            prop_assert!(min_eigenvalue(m) > -1e-12);
        }
        // every row of the total covariance sums to zero, so the all-ones
        // vector is in its null space
        for row in &b.total {
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
