//! Segmentation and reconstruction metrics: adjusted Rand index over pixel
//! labelings (all pixels or ground-truth foreground only) and MSE.

use std::collections::HashMap;

fn comb2(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same items, from the
/// contingency table. Degenerate cases where the index and its expectation
/// coincide (e.g. both labelings a single cluster) score 1.
pub fn ari(truth: &[i32], pred: &[i32]) -> f64 {
    assert_eq!(truth.len(), pred.len(), "labelings differ in length");
    let n = truth.len() as u64;
    if n < 2 {
        return 1.0;
    }
    let mut table: HashMap<(i32, i32), u64> = HashMap::new();
    let mut rows: HashMap<i32, u64> = HashMap::new();
    let mut cols: HashMap<i32, u64> = HashMap::new();
    for (&a, &b) in truth.iter().zip(pred) {
        *table.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| comb2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| comb2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| comb2(c)).sum();
    let expected = sum_a * sum_b / comb2(n);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// ARI restricted to pixels whose ground-truth label is foreground (> 0).
/// `None` when the frame has fewer than two foreground pixels.
pub fn fari(truth: &[i32], pred: &[i32]) -> Option<f64> {
    let (t, p): (Vec<i32>, Vec<i32>) = truth.iter().zip(pred).filter(|(t, _)| **t > 0).map(|(t, p)| (*t, *p)).unzip();
    (t.len() >= 2).then(|| ari(&t, &p))
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Per-pixel labels from soft masks `[K·P]`: index of the largest `m̂`.
pub fn argmax_labels(masks: &[f64], slots: usize) -> Vec<i32> {
    let p = masks.len() / slots;
    (0..p)
        .map(|i| {
            (0..slots)
                .max_by(|&a, &b| masks[a * p + i].total_cmp(&masks[b * p + i]).then(b.cmp(&a)))
                .expect("at least one slot") as i32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Pair-counting definition: agreements over all item pairs.
    fn ari_by_pairs(a: &[i32], b: &[i32]) -> f64 {
        let n = a.len();
        let (mut both, mut only_a, mut only_b, mut pairs) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let sa = a[i] == a[j];
                let sb = b[i] == b[j];
                both += (sa && sb) as u8 as f64;
                only_a += sa as u8 as f64;
                only_b += sb as u8 as f64;
                pairs += 1.0;
            }
        }
        let expected = only_a * only_b / pairs;
        (both - expected) / (0.5 * (only_a + only_b) - expected)
    }

    #[test]
    fn permutation_of_labels_is_perfect() {
        let t = [0, 0, 1, 1, 2, 2, 2];
        let p = [5, 5, 9, 9, 1, 1, 1];
        assert_eq!(ari(&t, &p), 1.0);
    }

    #[test]
    fn matches_pair_counting() {
        let t = [0, 0, 0, 1, 1, 1, 2, 2, 2, 2];
        let p = [0, 0, 1, 1, 1, 2, 2, 2, 0, 2];
        assert!((ari(&t, &p) - ari_by_pairs(&t, &p)).abs() < 1e-12);
    }

    #[test]
    fn known_value() {
        // Classic example: ARI([0,0,1,1],[0,0,1,2]) = 4/7.
        assert!((ari(&[0, 0, 1, 1], &[0, 0, 1, 2]) - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn foreground_only() {
        let t = [0, 0, 1, 1, 2, 2];
        let p = [0, 1, 1, 1, 2, 2];
        assert_eq!(fari(&t, &p), Some(1.0));
        assert!(ari(&t, &p) < 1.0);
        assert_eq!(fari(&[0, 0, 1], &[0, 1, 2]), None);
    }

    #[test]
    fn argmax_breaks_ties_to_the_lower_slot() {
        let m = [0.5, 0.2, 0.5, 0.8];
        assert_eq!(argmax_labels(&m, 2), vec![0, 1]);
    }
}
