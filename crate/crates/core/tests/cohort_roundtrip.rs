use proptest::prelude::*;
use stackfusion::cohort::{load_cohort, save_cohort};
use stackfusion::guards::{guard_cohort, GuardConfig};
use stackfusion::synth::{generate_cohort, GenSpec};
use stackfusion::Task;

fn preset() -> impl Strategy<Value = GenSpec> {
    prop_oneof![
        Just(GenSpec::detection_default()),
        Just(GenSpec::mortality_default()),
        Just(GenSpec::abx_default()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn load_inverts_save(
        spec in preset(),
        n in 0usize..25,
        seed in any::<u64>(),
        jitter in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 3),
        guard in any::<bool>(),
    ) {
        let mut cohort = generate_cohort(&spec, n, seed).unwrap();
        if guard {
            cohort = guard_cohort(&cohort, Task::Detection, &GuardConfig::default()).unwrap().cohort;
        }
        // Awkward but valid floats exercise the shortest-roundtrip path.
        for (r, &v) in cohort.records.iter_mut().zip(&jitter) {
            r.static_vector.numeric[0] = v;
            if let Some(img) = &mut r.image_feature_vector {
                img.0[0] = -v;
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        save_cohort(&cohort, &path).unwrap();
        prop_assert_eq!(load_cohort(&path).unwrap(), cohort);
    }
}
