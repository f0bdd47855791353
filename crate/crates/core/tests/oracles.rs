mod common;

use common::*;

#[test]
fn prox_matches_grid_search() {
    let err = prox_vs_grid_max_err(2_000, 1);
    assert!(err <= 1e-4, "max error {err}");
}

#[test]
fn grid_search_oracle_is_sound() {
    let pen = l1cavity::model::PenaltyModel::l1(1.0).unwrap();
    assert!((grid_prox(&pen, 3.0, 0.5) - 2.5).abs() < 1e-6);
    assert!(grid_prox(&pen, 0.2, 0.5).abs() < 1e-6);
}

#[test]
fn simplex_matches_vertex_enumeration() {
    for seed in 0..60 {
        let err = lp_vs_enumeration(seed);
        assert!(err <= 1e-8, "seed {seed}: {err}");
    }
}

#[test]
fn enumeration_oracle_handles_square_system() {
    let h = nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
    let v = vertex_enumeration_optimum(&h, &[1.0, 1.0], None, 0.0).unwrap();
    assert!((v - 1.5).abs() < 1e-14);
}

#[test]
fn quenched_moments_agree_with_monte_carlo() {
    for c in mc_vs_quadrature(1_000_000, 5) {
        // 1e6 samples: allow four standard errors.
        assert!((c.mc - c.reference).abs() <= 4.0 * c.stderr, "{c:?}");
    }
}
