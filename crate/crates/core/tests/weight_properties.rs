use proptest::prelude::*;
use swcrt_core::design::{DesignSpec, StructureKind, TreatmentStructure};
use swcrt_core::weights::{
    expected_misspecified_estimate, family_weights, lambda_decomposition, lambda_weights, reference_design,
    w1_exposure_weights, FinalPeriod, WeightFamily,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn every_family_sums_to_one(q in 2usize..13, g in 0.0f64..0.999, f in 0usize..4) {
        let family = WeightFamily::ALL[f];
        let p = family_weights(family, q, g).unwrap();
        prop_assert!((p.sum() - 1.0).abs() < 1e-9, "{family:?} Q={q} gamma={g}: {}", p.sum());
    }

    #[test]
    fn period_effects_cancel(q in 2usize..9, g in 0.0f64..0.99, a in 0usize..3, fp in any::<bool>()) {
        let d = reference_design(q).unwrap();
        let fp = if fp { FinalPeriod::Exclude } else { FinalPeriod::Retain };
        let dec = lambda_decomposition(&d, StructureKind::ALL[a], StructureKind::ExposureVarying, g, fp).unwrap();
        for s in &dec.period_weight_sums {
            prop_assert!(s.abs() < 1e-9);
        }
    }

    #[test]
    fn exposure_weights_engine_matches_formula(q in 2usize..13, g in 0.0f64..0.99) {
        let num = lambda_weights(&reference_design(q).unwrap(), StructureKind::Immediate, StructureKind::ExposureVarying, g).unwrap();
        let ana = w1_exposure_weights(q, g).unwrap();
        for (a, b) in num.weights.iter().zip(&ana.weights) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn misspecified_expectation_is_linear_in_truth(
        g in 0.0f64..0.95,
        delta in proptest::collection::vec(-5.0f64..5.0, 5),
        k in -3.0f64..3.0,
    ) {
        let d = reference_design(5).unwrap();
        let p = lambda_weights(&d, StructureKind::Immediate, StructureKind::ExposureVarying, g).unwrap();
        let t = TreatmentStructure::ExposureVarying { delta: delta.clone() };
        let shifted = TreatmentStructure::ExposureVarying { delta: delta.iter().map(|v| v + k).collect() };
        let a = expected_misspecified_estimate(&p, &t).unwrap();
        let b = expected_misspecified_estimate(&p, &shifted).unwrap();
        prop_assert!((b - a - k).abs() < 1e-9);
    }
}

#[test]
fn weights_nonnegative_without_correlation() {
    for q in 2..=12 {
        for family in [WeightFamily::W1, WeightFamily::W3, WeightFamily::W4] {
            let p = family_weights(family, q, 0.0).unwrap();
            assert!(p.weights.iter().all(|&w| w >= -1e-12), "{family:?} Q={q}: {:?}", p.weights);
        }
    }
}

#[test]
fn strong_correlation_produces_negative_weights() {
    let w3 = family_weights(WeightFamily::W3, 9, 0.9).unwrap();
    let w4 = family_weights(WeightFamily::W4, 9, 0.9).unwrap();
    assert!(w3.weights.iter().chain(&w4.weights).any(|&w| w < 0.0));
}

#[test]
fn replicated_sequences_leave_weights_unchanged() {
    let one = reference_design(4).unwrap();
    let two = DesignSpec::new(8, 5, 7).unwrap();
    for family in WeightFamily::ALL {
        let (a, t) = family.pair();
        let x = lambda_weights(&one, a, t, 0.6).unwrap();
        let y = lambda_weights(&two, a, t, 0.6).unwrap();
        for (u, v) in x.weights.iter().zip(&y.weights) {
            assert!((u - v).abs() < 1e-10);
        }
    }
}
