//! Exhaustive counterparts of the AUC and split-finding routines.

/// `(2 * concordant + ties) / (2 * P * N)` by visiting every
/// positive/negative pair.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice, mut pos, mut neg) = (0u128, 0u128, 0u128);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            neg += 1;
            continue;
        }
        pos += 1;
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                twice += 2;
            } else if scores[i] == scores[j] {
                twice += 1;
            }
        }
    }
    twice as f64 / (2 * pos * neg) as f64
}

/// Gradient sums of one side of a partition.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Side {
    pub g: f64,
    pub h: f64,
    pub n: usize,
}

fn score(s: Side, lambda: f64) -> f64 {
    s.g * s.g / (s.h + lambda)
}

/// Left and right sums of the rows with `left[i]` set.
pub fn sides(g: &[f64], h: &[f64], left: &[bool]) -> (Side, Side) {
    let (mut l, mut r) = (Side::default(), Side::default());
    for i in 0..g.len() {
        let s = if left[i] { &mut l } else { &mut r };
        s.g += g[i];
        s.h += h[i];
        s.n += 1;
    }
    (l, r)
}

/// Gain of sending the rows flagged in `left` to the left child, or `None`
/// when either child has fewer than `min_leaf` rows.
pub fn partition_gain(g: &[f64], h: &[f64], left: &[bool], lambda: f64, min_leaf: usize) -> Option<f64> {
    let (l, r) = sides(g, h, left);
    if l.n < min_leaf || r.n < min_leaf {
        return None;
    }
    let all = Side {
        g: l.g + r.g,
        h: l.h + r.h,
        n: g.len(),
    };
    Some(score(l, lambda) + score(r, lambda) - score(all, lambda))
}

/// Highest gain over every threshold between distinct present values and
/// both directions for missing rows; `None` when no admissible partition
/// has positive gain.
pub fn best_gain(values: &[f64], g: &[f64], h: &[f64], lambda: f64, min_leaf: usize) -> Option<f64> {
    let mut distinct: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let any_missing = values.iter().any(|v| v.is_nan());
    let mut best: Option<f64> = None;
    for &cut in distinct.iter().take(distinct.len().saturating_sub(1)) {
        for missing_left in [false, true] {
            if missing_left && !any_missing {
                continue;
            }
            let left: Vec<bool> = values
                .iter()
                .map(|&v| if v.is_nan() { missing_left } else { v <= cut })
                .collect();
            if let Some(gain) = partition_gain(g, h, &left, lambda, min_leaf) {
                if gain > 0.0 && best.is_none_or(|b| gain > b) {
                    best = Some(gain);
                }
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_counts_ties_as_half() {
        assert_eq!(pairwise_auc(&[0.5, 0.5, 0.1], &[true, false, false]), 0.75);
    }

    #[test]
    fn perfect_split_is_found() {
        let v = [1.0, 2.0, 3.0, 4.0];
        let g = [-1.0, -1.0, 1.0, 1.0];
        let h = [1.0; 4];
        let gain = best_gain(&v, &g, &h, 0.0, 1).unwrap();
        assert!((gain - 4.0).abs() < 1e-12);
        assert_eq!(best_gain(&v, &[1.0; 4], &h, 0.0, 1), None);
    }
}
