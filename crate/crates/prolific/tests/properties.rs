//! Property tests for the structural invariants: CSV round trips, indicator
//! purity, decision-rule bookkeeping, and the low-rank inverse identity.

use nalgebra::DMatrix;
use prolific::data::{
    derive_indicators, lambda_indicator, save_dataset, tau_indicator, CsvFormat, CsvSchema,
    CurveObservation, FunctionalCrossoverDataset, SubjectRecord,
};
use prolific::gftest::VarianceRatios;
use prolific::prolific::{apply_rule, LayerStages, Stage2Branch, StageOutcome};
use proptest::prelude::*;

fn arb_dataset() -> impl Strategy<Value = FunctionalCrossoverDataset> {
    let grid_len = 3usize..8;
    let n_subjects = 2usize..5;
    (grid_len, n_subjects, 0usize..3).prop_flat_map(|(r, n, n_cov)| {
        let curve = (0.0f64..=1.0, proptest::collection::vec(-10.0f64..10.0, r))
            .prop_map(|(day, values)| CurveObservation { day, values });
        let period = proptest::collection::vec(curve, 0..3);
        let subject = (
            1u8..=2,
            proptest::collection::vec(-5.0f64..5.0, n_cov),
            proptest::collection::vec(period, 4),
        );
        proptest::collection::vec(subject, n).prop_map(move |subjects| {
            let grid: Vec<f64> = (0..r).map(|i| i as f64 / (r - 1) as f64).collect();
            let records = subjects
                .into_iter()
                .enumerate()
                .map(|(i, (group, covariates, mut periods))| SubjectRecord {
                    id: format!("s{i:02}"),
                    group,
                    covariates,
                    periods: [
                        std::mem::take(&mut periods[0]),
                        std::mem::take(&mut periods[1]),
                        std::mem::take(&mut periods[2]),
                        std::mem::take(&mut periods[3]),
                    ],
                })
                .collect();
            FunctionalCrossoverDataset::new(
                records,
                grid,
                (0..n_cov).map(|l| format!("c{l}")).collect(),
            )
            .unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn csv_round_trip_is_bitwise(ds in arb_dataset(), long in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let schema = CsvSchema {
            format: if long { CsvFormat::Long } else { CsvFormat::Wide },
            period_length: None,
        };
        save_dataset(&ds, &path, &schema).unwrap();
        let back = prolific::data::load_dataset(&path, &schema).unwrap();
        prop_assert_eq!(ds, back);
    }

    #[test]
    fn indicators_depend_only_on_group_and_period(ds in arb_dataset()) {
        let ind = derive_indicators(&ds);
        for (i, subject) in ds.subjects.iter().enumerate() {
            for p in 0..4 {
                prop_assert_eq!(ind.tau_at(i, p), tau_indicator(subject.group, p));
                prop_assert_eq!(ind.lambda_at(i, p), lambda_indicator(subject.group, p));
                prop_assert!(!(ind.tau_at(i, p) && ind.lambda_at(i, p)));
            }
        }
    }
}

fn arb_stages(k: usize) -> impl Strategy<Value = Vec<LayerStages>> {
    let one = (1u32..=1000, 1u32..=1000, 1u32..=1000).prop_map(|(a, b, c)| {
        let ratios = VarianceRatios {
            pi: 0.0,
            eta: 0.0,
            gamma: 0.0,
            sigma2: 1.0,
            objective_value: 0.0,
        };
        LayerStages {
            k: 0,
            stage1: StageOutcome {
                statistic: a as f64,
                p: a as f64 / 1001.0,
            },
            stage2a: Some(StageOutcome {
                statistic: b as f64,
                p: b as f64 / 1001.0,
            }),
            stage2b: Some(StageOutcome {
                statistic: c as f64,
                p: c as f64 / 1001.0,
            }),
            ratios_full: ratios,
            ratios_reduced: Some(ratios),
        }
    });
    proptest::collection::vec(one, k..=k)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn decision_rule_bookkeeping_holds(
        stages in (1usize..=4).prop_flat_map(arb_stages),
        alpha in 0.001f64..0.5,
        alpha1 in 0.001f64..0.5,
    ) {
        let mut stages = stages;
        for (i, s) in stages.iter_mut().enumerate() {
            s.k = i;
        }
        let result = apply_rule(&stages, alpha, alpha1).unwrap();
        let k = result.k as f64;
        prop_assert_eq!(result.k, stages.len());
        for (record, s) in result.layers.iter().zip(stages.iter()) {
            prop_assert_eq!(record.carryover_rejected, s.stage1.p < alpha1 / k);
            match record.stage2_branch {
                Stage2Branch::A => {
                    prop_assert!(record.carryover_rejected);
                    prop_assert_eq!(record.stage2_p, s.stage2a.unwrap().p);
                }
                Stage2Branch::B => {
                    prop_assert!(!record.carryover_rejected);
                    prop_assert_eq!(record.stage2_p, s.stage2b.unwrap().p);
                }
            }
        }
        let min_p = result
            .layers
            .iter()
            .map(|l| l.stage2_p)
            .fold(f64::INFINITY, f64::min);
        prop_assert_eq!(result.min_p, min_p);
        prop_assert_eq!(result.global_reject, min_p < alpha / k);

        // Lowering alpha can only remove rejections.
        let tighter = apply_rule(&stages, alpha / 2.0, alpha1).unwrap();
        if tighter.global_reject {
            prop_assert!(result.global_reject);
        }
    }

    #[test]
    fn low_rank_inverse_identity(
        seed in 0u64..1000,
        q in 1usize..5,
        ratio in 1e-3f64..1e3,
    ) {
        use rand::Rng;
        let mut rng = prolific::rng::stream(seed, prolific::rng::StreamKind::Replicate, 0, 0);
        let n = 18;
        let z = DMatrix::from_fn(n, q, |_, _| rng.gen::<f64>() - 0.5);
        let v = DMatrix::<f64>::identity(n, n) + ratio * &z * z.transpose();
        let dense = v.clone().try_inverse().unwrap();
        let mut core = z.transpose() * &z;
        for i in 0..q {
            core[(i, i)] += 1.0 / ratio;
        }
        let fast = DMatrix::<f64>::identity(n, n)
            - &z * core.try_inverse().unwrap() * z.transpose();
        prop_assert!((&dense - &fast).norm() / dense.norm() < 1e-10);
    }
}
