//! Regression trees grown on gradient statistics.

use serde::{Deserialize, Serialize};

use super::split::{best_categorical, best_numeric_presorted, GradStats, Scorer, Split, SplitRule};
use super::{FeatureKind, GBDTParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        rule: SplitRule,
        default_left: bool,
        gain: f64,
        left: usize,
        right: usize,
    },
}

/// Nodes in preorder; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Tree {
            nodes: vec![Node::Leaf { value }],
        }
    }

    /// Index of the leaf reached by `row`.
    pub fn leaf_index(&self, row: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { .. } => return at,
                Node::Split {
                    feature,
                    rule,
                    default_left,
                    left,
                    right,
                    ..
                } => {
                    let go_left = rule.goes_left(row[*feature]).unwrap_or(*default_left);
                    at = if go_left { *left } else { *right };
                }
            }
        }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(row)] {
            Node::Leaf { value } => value,
            Node::Split { .. } => unreachable!("leaf_index returns a leaf"),
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaves_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.nodes.iter_mut().filter_map(|n| match n {
            Node::Leaf { value } => Some(value),
            Node::Split { .. } => None,
        })
    }
}

/// Column-major training data with per-feature ascending row orders.
pub(crate) struct Columns<'a> {
    pub columns: Vec<Vec<f64>>,
    pub sorted: Vec<Vec<usize>>,
    pub kinds: &'a [FeatureKind],
}

impl<'a> Columns<'a> {
    pub fn new(rows: &[Vec<f64>], kinds: &'a [FeatureKind]) -> Self {
        let columns: Vec<Vec<f64>> = (0..kinds.len())
            .map(|j| rows.iter().map(|r| r[j]).collect())
            .collect();
        let sorted = columns
            .iter()
            .zip(kinds)
            .map(|(col, kind)| match kind {
                FeatureKind::Numeric => {
                    let mut idx: Vec<usize> = (0..col.len()).filter(|&i| !col[i].is_nan()).collect();
                    idx.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
                    idx
                }
                FeatureKind::Categorical { .. } => Vec::new(),
            })
            .collect();
        Columns {
            columns,
            sorted,
            kinds,
        }
    }
}

pub(crate) fn grow_tree(
    data: &Columns,
    g: &[f64],
    h: &[f64],
    rows: &[usize],
    params: &GBDTParams,
) -> Tree {
    let mut in_node = vec![false; g.len()];
    let mut nodes = Vec::new();
    grow(data, g, h, rows, 0, params, &mut in_node, &mut nodes);
    Tree { nodes }
}

#[allow(clippy::too_many_arguments)]
fn grow(
    data: &Columns,
    g: &[f64],
    h: &[f64],
    rows: &[usize],
    depth: usize,
    params: &GBDTParams,
    in_node: &mut [bool],
    nodes: &mut Vec<Node>,
) -> usize {
    let mut total = GradStats::default();
    for &i in rows {
        total.add(g[i], h[i]);
    }
    let at = nodes.len();
    nodes.push(Node::Leaf {
        value: total.leaf_value(params.lambda),
    });
    if depth >= params.max_depth || rows.len() < 2 * params.min_samples_leaf {
        return at;
    }
    let Some((feature, split)) = best_split(data, g, h, rows, total, params, in_node) else {
        return at;
    };
    let col = &data.columns[feature];
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
        .iter()
        .partition(|&&i| split.rule.goes_left(col[i]).unwrap_or(split.default_left));
    let left = grow(data, g, h, &left_rows, depth + 1, params, in_node, nodes);
    let right = grow(data, g, h, &right_rows, depth + 1, params, in_node, nodes);
    nodes[at] = Node::Split {
        feature,
        rule: split.rule,
        default_left: split.default_left,
        gain: split.gain,
        left,
        right,
    };
    at
}

/// Best split over all features; ties keep the lowest feature index.
fn best_split(
    data: &Columns,
    g: &[f64],
    h: &[f64],
    rows: &[usize],
    total: GradStats,
    params: &GBDTParams,
    in_node: &mut [bool],
) -> Option<(usize, Split)> {
    for &i in rows {
        in_node[i] = true;
    }
    let scorer = Scorer::new(total, params);
    let mut best: Option<(usize, Split)> = None;
    for (j, kind) in data.kinds.iter().enumerate() {
        let col = &data.columns[j];
        let mut missing = GradStats::default();
        for &i in rows {
            if col[i].is_nan() {
                missing.add(g[i], h[i]);
            }
        }
        let cand = match kind {
            FeatureKind::Numeric => {
                let sorted: Vec<usize> = data.sorted[j].iter().copied().filter(|&i| in_node[i]).collect();
                best_numeric_presorted(col, g, h, &sorted, missing, &scorer)
            }
            FeatureKind::Categorical { cardinality } => {
                let mut stats = vec![GradStats::default(); *cardinality as usize];
                for &i in rows {
                    if !col[i].is_nan() {
                        stats[col[i] as usize].add(g[i], h[i]);
                    }
                }
                best_categorical(&stats, *cardinality, missing, &scorer)
            }
        };
        if let Some(c) = cand {
            if best.as_ref().is_none_or(|(_, b)| c.gain > b.gain) {
                best = Some((j, c));
            }
        }
    }
    for &i in rows {
        in_node[i] = false;
    }
    best
}
