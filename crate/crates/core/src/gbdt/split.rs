//! Exact greedy split search on gradient statistics.
//!
//! Missing values are NaN. Each candidate is scored with missing rows sent
//! right and then left, so the learned default branch is the better of the
//! two.

use serde::{Deserialize, Serialize};

use super::GBDTParams;
use crate::error::{Error, Result};

/// Sum of gradients, hessians and rows.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradStats {
    pub g: f64,
    pub h: f64,
    pub n: usize,
}

impl GradStats {
    pub fn add(&mut self, g: f64, h: f64) {
        self.g += g;
        self.h += h;
        self.n += 1;
    }

    pub fn plus(self, o: GradStats) -> GradStats {
        GradStats {
            g: self.g + o.g,
            h: self.h + o.h,
            n: self.n + o.n,
        }
    }

    pub fn minus(self, o: GradStats) -> GradStats {
        GradStats {
            g: self.g - o.g,
            h: self.h - o.h,
            n: self.n - o.n,
        }
    }

    /// `G^2 / (H + lambda)`, zero when the denominator vanishes.
    pub fn score(&self, lambda: f64) -> f64 {
        let d = self.h + lambda;
        if d > 0.0 {
            self.g * self.g / d
        } else {
            0.0
        }
    }

    /// Newton leaf value `-G / (H + lambda)`.
    pub fn leaf_value(&self, lambda: f64) -> f64 {
        let d = self.h + lambda;
        if d > 0.0 {
            -self.g / d
        } else {
            0.0
        }
    }
}

/// Rows go left when the value is `<= threshold` or in the category set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    Threshold(f64),
    Categories(Vec<u32>),
}

impl SplitRule {
    /// `None` for a missing value.
    pub fn goes_left(&self, x: f64) -> Option<bool> {
        if x.is_nan() {
            return None;
        }
        Some(match self {
            SplitRule::Threshold(t) => x <= *t,
            SplitRule::Categories(set) => set.binary_search(&(x as u32)).is_ok(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub rule: SplitRule,
    pub default_left: bool,
    pub gain: f64,
    pub left: GradStats,
    pub right: GradStats,
}

pub(crate) struct Scorer {
    pub lambda: f64,
    pub min_leaf: usize,
    pub total: GradStats,
    pub parent: f64,
}

impl Scorer {
    pub fn new(total: GradStats, params: &GBDTParams) -> Self {
        Scorer {
            lambda: params.lambda,
            min_leaf: params.min_samples_leaf,
            total,
            parent: total.score(params.lambda),
        }
    }

    /// Try `left` (non-missing rows) with missing rows on either side and
    /// keep the candidate if it beats `best`.
    pub fn consider(
        &self,
        left_present: GradStats,
        missing: GradStats,
        rule: impl Fn() -> SplitRule,
        best: &mut Option<Split>,
    ) {
        for default_left in [false, true] {
            if default_left && missing.n == 0 {
                continue;
            }
            let left = if default_left {
                left_present.plus(missing)
            } else {
                left_present
            };
            let right = self.total.minus(left);
            if left.n < self.min_leaf || right.n < self.min_leaf {
                continue;
            }
            let gain = left.score(self.lambda) + right.score(self.lambda) - self.parent;
            let better = match best {
                Some(b) => gain > b.gain,
                None => gain > 0.0,
            };
            if better {
                // With no missing rows at this node the default follows the
                // larger child.
                let default_left = if missing.n == 0 { left.n >= right.n } else { default_left };
                *best = Some(Split {
                    rule: rule(),
                    default_left,
                    gain,
                    left,
                    right,
                });
            }
        }
    }
}

fn check_lengths(values: &[f64], g: &[f64], h: &[f64]) -> Result<()> {
    if values.len() != g.len() || values.len() != h.len() {
        return Err(Error::Dimension {
            expected: values.len(),
            actual: g.len().min(h.len()),
        });
    }
    if h.iter().any(|&x| x < 0.0) {
        return Err(Error::InvalidInput("hessians must be non-negative".into()));
    }
    Ok(())
}

/// Midpoint of consecutive distinct values, kept strictly below `hi` so that
/// `<=` routes `lo` left and `hi` right.
pub fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m >= hi {
        lo
    } else {
        m
    }
}

/// Best threshold split of a numeric column over the given rows, visiting
/// `sorted` (row ids with non-missing values in ascending value order).
pub(crate) fn best_numeric_presorted(
    values: &[f64],
    g: &[f64],
    h: &[f64],
    sorted: &[usize],
    missing: GradStats,
    scorer: &Scorer,
) -> Option<Split> {
    let mut best = None;
    let mut left = GradStats::default();
    for (k, &i) in sorted.iter().enumerate() {
        left.add(g[i], h[i]);
        let Some(&next) = sorted.get(k + 1) else { break };
        if values[next] == values[i] {
            continue;
        }
        let thr = midpoint(values[i], values[next]);
        scorer.consider(left, missing, || SplitRule::Threshold(thr), &mut best);
    }
    best
}

pub const EXHAUSTIVE_MAX_CARDINALITY: u32 = 8;

/// Best category-subset split. `stats[c]` holds category `c`'s totals.
pub(crate) fn best_categorical(
    stats: &[GradStats],
    cardinality: u32,
    missing: GradStats,
    scorer: &Scorer,
) -> Option<Split> {
    let present: Vec<u32> = (0..stats.len() as u32).filter(|&c| stats[c as usize].n > 0).collect();
    let m = present.len();
    if m < 2 {
        return None;
    }
    let mut best = None;
    if cardinality <= EXHAUSTIVE_MAX_CARDINALITY {
        for mask in 1u32..(1u32 << m) - 1 {
            let mut left = GradStats::default();
            for (b, &c) in present.iter().enumerate() {
                if mask >> b & 1 == 1 {
                    left = left.plus(stats[c as usize]);
                }
            }
            let subset = || {
                present
                    .iter()
                    .enumerate()
                    .filter(|(b, _)| mask >> b & 1 == 1)
                    .map(|(_, &c)| c)
                    .collect()
            };
            scorer.consider(left, missing, || SplitRule::Categories(subset()), &mut best);
        }
    } else {
        let mut order = present.clone();
        let key = |c: u32| {
            let s = stats[c as usize];
            if s.h > 0.0 {
                s.g / s.h
            } else {
                0.0
            }
        };
        order.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
        let mut left = GradStats::default();
        for k in 0..m - 1 {
            left = left.plus(stats[order[k] as usize]);
            let mut set: Vec<u32> = order[..=k].to_vec();
            set.sort_unstable();
            scorer.consider(left, missing, || SplitRule::Categories(set.clone()), &mut best);
        }
    }
    best
}

/// Best split of one numeric column (NaN = missing), or `None` when no
/// split has positive gain under the leaf-size constraint.
pub fn exact_best_split(
    values: &[f64],
    g: &[f64],
    h: &[f64],
    params: &GBDTParams,
) -> Result<Option<Split>> {
    check_lengths(values, g, h)?;
    let mut total = GradStats::default();
    let mut missing = GradStats::default();
    let mut sorted = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        total.add(g[i], h[i]);
        if values[i].is_nan() {
            missing.add(g[i], h[i]);
        } else {
            sorted.push(i);
        }
    }
    sorted.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let scorer = Scorer::new(total, params);
    Ok(best_numeric_presorted(values, g, h, &sorted, missing, &scorer))
}

/// Categorical counterpart of [`exact_best_split`]; values are category
/// codes in `[0, cardinality)` or NaN.
pub fn exact_best_categorical_split(
    values: &[f64],
    cardinality: u32,
    g: &[f64],
    h: &[f64],
    params: &GBDTParams,
) -> Result<Option<Split>> {
    check_lengths(values, g, h)?;
    let mut stats = vec![GradStats::default(); cardinality as usize];
    let mut total = GradStats::default();
    let mut missing = GradStats::default();
    for i in 0..values.len() {
        total.add(g[i], h[i]);
        if values[i].is_nan() {
            missing.add(g[i], h[i]);
        } else {
            let c = values[i] as usize;
            if c >= stats.len() {
                return Err(Error::InvalidInput(format!("category {c} outside cardinality {cardinality}")));
            }
            stats[c].add(g[i], h[i]);
        }
    }
    let scorer = Scorer::new(total, params);
    Ok(best_categorical(&stats, cardinality, missing, &scorer))
}
