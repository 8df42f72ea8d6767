use proptest::prelude::*;
use stackfusion::gbdt::{fit_gbdt, gbdt_predict, FeatureSchema, GBDTModel, GBDTParams, Node, Tree};

fn dataset() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, usize)> {
    (8usize..60, 1usize..4, 2usize..4).prop_flat_map(|(n, d, k)| {
        let cell = prop_oneof![4 => (-3i32..4).prop_map(|v| v as f64 * 0.7), 1 => Just(f64::NAN)];
        (
            prop::collection::vec(prop::collection::vec(cell, d), n),
            prop::collection::vec(0..k, n),
            Just(k),
        )
    })
}

fn params() -> impl Strategy<Value = GBDTParams> {
    (1usize..6, 1usize..4, 1usize..4, prop_oneof![Just(0.0), Just(1.0), Just(2.5)], 0.05f64..1.0).prop_map(
        |(rounds, max_depth, min_samples_leaf, lambda, learning_rate)| GBDTParams {
            rounds,
            learning_rate,
            max_depth,
            min_samples_leaf,
            lambda,
            subsample: 1.0,
            seed: 0,
        },
    )
}

fn fit(x: &[Vec<f64>], y: &[usize], k: usize, p: &GBDTParams) -> GBDTModel {
    fit_gbdt(x, y, k, &FeatureSchema::numeric(x[0].len()), p).unwrap()
}

fn subtree(tree: &Tree, root: usize, out: &mut Vec<usize>) {
    out.push(root);
    if let Node::Split { left, right, .. } = tree.nodes[root] {
        subtree(tree, left, out);
        subtree(tree, right, out);
    }
}

fn depth(tree: &Tree, node: usize) -> usize {
    match tree.nodes[node] {
        Node::Leaf { .. } => 0,
        Node::Split { left, right, .. } => 1 + depth(tree, left).max(depth(tree, right)),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn training_loss_never_increases((x, y, k) in dataset(), p in params()) {
        let m = fit(&x, &y, k, &p);
        for w in m.train_loss.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "loss rose {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn outputs_are_on_the_simplex_and_trees_respect_depth((x, y, k) in dataset(), p in params()) {
        let m = fit(&x, &y, k, &p);
        for row in &x {
            let probs = gbdt_predict(&m, row).unwrap();
            prop_assert_eq!(probs.len(), k);
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for t in m.trees.iter().flatten() {
            prop_assert!(depth(t, 0) <= p.max_depth);
        }
    }

    /// Scaling every leaf by a power of two and the shrinkage by its inverse
    /// is exact in floating point, so predictions must not move at all.
    #[test]
    fn shrinkage_scaling_is_bit_exact((x, y, k) in dataset(), p in params(), e in -3i32..4) {
        let m = fit(&x, &y, k, &p);
        let c = 2f64.powi(e);
        let mut scaled = m.clone();
        scaled.shrinkage /= c;
        for t in scaled.trees.iter_mut().flatten() {
            for node in &mut t.nodes {
                if let Node::Leaf { value } = node {
                    *value *= c;
                }
            }
        }
        for row in &x {
            prop_assert_eq!(gbdt_predict(&m, row).unwrap(), gbdt_predict(&scaled, row).unwrap());
        }
    }

    /// A row missing the root feature follows the stored default branch, so
    /// perturbing leaves on the other side cannot change its tree output.
    #[test]
    fn missing_values_follow_the_default_branch((x, y, k) in dataset(), p in params()) {
        let m = fit(&x, &y, k, &p);
        for t in m.trees.iter().flatten() {
            let Node::Split { feature, default_left, left, right, .. } = t.nodes[0] else { continue };
            let other = if default_left { right } else { left };
            let mut off = Vec::new();
            subtree(t, other, &mut off);
            let mut perturbed = t.clone();
            for &i in &off {
                if let Node::Leaf { value } = &mut perturbed.nodes[i] {
                    *value += 1.0;
                }
            }
            for row in &x {
                let mut row = row.clone();
                row[feature] = f64::NAN;
                prop_assert_eq!(t.predict(&row), perturbed.predict(&row));
            }
        }
    }
}

#[test]
fn identical_seed_gives_identical_model() {
    let x: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 7) as f64, (i % 3) as f64]).collect();
    let y: Vec<usize> = (0..40).map(|i| usize::from(i % 7 > 3)).collect();
    let p = GBDTParams {
        subsample: 0.7,
        seed: 9,
        ..GBDTParams::default()
    };
    assert_eq!(fit(&x, &y, 2, &p), fit(&x, &y, 2, &p));
}
