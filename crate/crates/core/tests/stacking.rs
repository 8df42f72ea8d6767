use stackfusion::gbdt::{fit_gbdt, GBDTModel, Node};
use stackfusion::guards::{guard_cohort, GuardConfig};
use stackfusion::harness::{run_ablation, ExperimentConfig, Variant};
use stackfusion::metrics::roc_auc;
use stackfusion::moe::{in_fold_stack, oof_stack, MetaDataset, MetaLayout, MoeParams};
use stackfusion::nn::{ExpertConfigs, ExpertKind};
use stackfusion::synth::{generate_cohort, GenSpec};
use stackfusion::{Cohort, PatientRecord, Task};

const TRI: [ExpertKind; 3] = [ExpertKind::Historian, ExpertKind::Monitor, ExpertKind::Reader];

fn cohort(n: usize, seed: u64) -> Cohort {
    let raw = generate_cohort(&GenSpec::detection_default(), n, seed).unwrap();
    guard_cohort(&raw, Task::Detection, &GuardConfig::default()).unwrap().cohort
}

/// Gate fitted on the first 80% of meta rows, AUC on the remaining 20%.
fn held_out_gate_auc(meta: &MetaDataset, gate: &stackfusion::gbdt::GBDTParams) -> f64 {
    let cut = meta.rows.len() * 4 / 5;
    let model = fit_gbdt(
        &meta.rows[..cut],
        &meta.labels[..cut],
        2,
        &meta.layout.feature_schema(),
        gate,
    )
    .unwrap();
    let scores: Vec<f64> = meta.rows[cut..].iter().map(|r| model.predict(r).unwrap()[1]).collect();
    let labels: Vec<bool> = meta.labels[cut..].iter().map(|&c| c == 1).collect();
    roc_auc(&scores, &labels).unwrap()
}

#[test]
fn in_fold_stacking_inflates_gate_validation_auc() {
    let configs = ExpertConfigs::default();
    let gate = MoeParams::default().gate;
    let mut diffs = Vec::new();
    for seed in 0..5 {
        let c = cohort(800, 100 + seed);
        let refs: Vec<&PatientRecord> = c.records.iter().collect();
        let y = c.labels(Task::Detection).unwrap();
        let layout = MetaLayout::new(&TRI, 2, &c.schema, None).unwrap();
        let oof = oof_stack(&refs, &y, &layout, &c.schema, &configs, 5, seed).unwrap();
        let leaky = in_fold_stack(&refs, &y, &layout, &c.schema, &configs, seed).unwrap();
        diffs.push(held_out_gate_auc(&leaky.meta, &gate) - held_out_gate_auc(&oof.meta, &gate));
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    assert!(mean > 0.0, "in-fold minus OOF gate AUC per seed: {diffs:?}");
}

fn same_structure(a: &GBDTModel, b: &GBDTModel, transformed: &[usize]) -> bool {
    a.base_scores == b.base_scores
        && a.trees.iter().flatten().zip(b.trees.iter().flatten()).all(|(ta, tb)| {
            ta.nodes.len() == tb.nodes.len()
                && ta.nodes.iter().zip(&tb.nodes).all(|pair| match pair {
                    (Node::Leaf { value: va }, Node::Leaf { value: vb }) => va == vb,
                    (
                        Node::Split { feature: fa, rule: ra, default_left: da, gain: ga, left: la, right: rta },
                        Node::Split { feature: fb, rule: rb, default_left: db, gain: gb, left: lb, right: rtb },
                    ) => {
                        fa == fb
                            && da == db
                            && ga == gb
                            && la == lb
                            && rta == rtb
                            && (transformed.contains(fa) || ra == rb)
                    }
                    _ => false,
                })
        })
}

#[test]
fn increasing_transform_of_one_block_keeps_the_gate_tree() {
    let c = cohort(600, 7);
    let refs: Vec<&PatientRecord> = c.records.iter().collect();
    let y = c.labels(Task::Detection).unwrap();
    let layout = MetaLayout::new(&TRI, 2, &c.schema, None).unwrap();
    let meta = oof_stack(&refs, &y, &layout, &c.schema, &ExpertConfigs::default(), 5, 3).unwrap().meta;
    let block = [0usize, 1];
    let mut warped = meta.rows.clone();
    for row in &mut warped {
        for &j in &block {
            row[j] = (3.0 * row[j]).exp();
        }
    }
    // The transform must keep every pairwise order, ties included.
    for &j in &block {
        for (a, wa) in meta.rows.iter().zip(&warped) {
            for (b, wb) in meta.rows.iter().zip(&warped) {
                assert_eq!(a[j].total_cmp(&b[j]), wa[j].total_cmp(&wb[j]));
            }
        }
    }
    let schema = layout.feature_schema();
    let params = MoeParams::default().gate;
    let original = fit_gbdt(&meta.rows, &meta.labels, 2, &schema, &params).unwrap();
    let recal = fit_gbdt(&warped, &meta.labels, 2, &schema, &params).unwrap();
    assert!(same_structure(&original, &recal, &block));
    let touched = original
        .trees
        .iter()
        .flatten()
        .flat_map(|t| &t.nodes)
        .any(|n| matches!(n, Node::Split { feature, .. } if block.contains(feature)));
    assert!(touched, "the gate never split on the transformed block");
}

#[test]
fn gate_matches_or_beats_late_concat_on_detection() {
    let config = ExperimentConfig {
        name: "gate_vs_late".into(),
        task: Task::Detection,
        n: Some(4000),
        variants: vec![Variant::LateConcat, Variant::MoeTrimodal],
        seeds: vec![0],
        ..ExperimentConfig::default()
    };
    let report = run_ablation(&config).unwrap();
    let auc = |v| report.cell(v, 0).unwrap().test_auc.unwrap();
    assert!(
        auc(Variant::MoeTrimodal) >= auc(Variant::LateConcat),
        "gate {} vs late concat {}",
        auc(Variant::MoeTrimodal),
        auc(Variant::LateConcat)
    );
}
