use denkf_core::downstream::{run_with_missing, MissingMask};
use denkf_core::filter::{kalman_update, run_sequence, FilterConfig};
use denkf_core::models::{Denkf, ModelSet, Normalizer, Variant};
use denkf_core::embed::EmbeddingConfig;
use denkf_core::sim::{generate_trajectory, SyntheticArmConfig};
use denkf_core::train::initial_ensemble;
use denkf_core::{canonical_placements, Ensemble, SamplingFrequency};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols)
        .prop_map(move |v| DMatrix::from_row_slice(rows, cols, &v))
}

fn update_case() -> impl Strategy<Value = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
    (2usize..40, 1usize..8, 1usize..8).prop_flat_map(|(e, d, m)| {
        (
            matrix(e, d),
            matrix(e, m),
            matrix(e, m),
            prop::collection::vec(1e-6f64..3.0, m).prop_map(DVector::from_vec),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn update_algebra_holds((prior, hx, learned, noise) in update_case()) {
        let (post, trace) = kalman_update(&prior, &hx, &learned, &noise, 1e-6, 1e-2, 0).unwrap();
        let s = &trace.innovation_covariance;
        prop_assert!((s - s.transpose()).amax() < 1e-9);
        prop_assert!(s.clone().cholesky().is_some());
        for a in [&trace.anomalies, &trace.obs_anomalies] {
            for col in a.column_iter() {
                prop_assert!(col.sum().abs() < 1e-10);
            }
        }
        prop_assert!(post.iter().all(|v| v.is_finite()));
        let (same, _) = kalman_update(&prior, &hx, &hx, &noise, 1e-6, 1e-2, 0).unwrap();
        prop_assert_eq!(same, prior);
    }
}

#[test]
fn unmasked_run_equals_plain_run() {
    let cfg = SyntheticArmConfig::default();
    let ds = generate_trajectory(&cfg, &canonical_placements()[0], SamplingFrequency::Hz10, 6.0, 3)
        .unwrap();
    let models = ModelSet::new(Variant::PeTe, EmbeddingConfig::default(), 0.1, 9).unwrap();
    let pipeline = Denkf::new(models, Normalizer::identity());
    let init: Ensemble = initial_ensemble(&pipeline, &ds.frames[0].truth, 16, 0.1, 4).unwrap();
    let fcfg = FilterConfig {
        ensemble_size: 16,
        ..Default::default()
    };
    let frames = ds.frame_refs();
    let plain = run_sequence(&init, &frames, &pipeline, &fcfg).unwrap();
    let masked =
        run_with_missing(&init, &frames, &MissingMask::none(frames.len()), &pipeline, &fcfg).unwrap();
    assert_eq!(plain.len(), masked.len());
    for (a, b) in plain.iter().zip(&masked) {
        assert_eq!(a.updated_mean, b.updated_mean);
        assert_eq!(a.predicted_mean, b.predicted_mean);
        assert_eq!(a.ensemble_std, b.ensemble_std);
        assert_eq!(a.innovation, b.innovation);
        assert_eq!(a.diagnostics, b.diagnostics);
    }
}
