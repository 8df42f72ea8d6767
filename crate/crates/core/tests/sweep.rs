use stackfusion::harness::{sample_size_sweep, ExperimentConfig};
use stackfusion::Task;

/// The deep-fusion overfit gap should shrink as the cohort grows.
#[test]
fn fusionformer_gap_shrinks_with_cohort_size() {
    let config = ExperimentConfig {
        name: "sweep".into(),
        task: Task::Detection,
        seeds: vec![0],
        ..ExperimentConfig::default()
    };
    let sizes = [500, 2000, 8000, 32000];
    let report = sample_size_sweep(&config, &sizes).unwrap();
    let gaps: Vec<f64> = report.aggregates().map(|r| r.fusionformer_gap.unwrap()).collect();
    assert_eq!(gaps.len(), sizes.len());
    let falling = gaps.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(falling * 2 > gaps.len() - 1, "gaps by size: {gaps:?}");
}
