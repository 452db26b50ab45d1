use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Label;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no scorable results")]
    EmptyResults,
    #[error("AUROC needs both classes present")]
    SingleClass,
    #[error("score is NaN or infinite")]
    NonFiniteScore,
}

/// Fraction of `(predicted, gold)` pairs that agree.
pub fn accuracy(pairs: &[(Label, Label)]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyResults);
    }
    let correct = pairs.iter().filter(|(p, g)| p == g).count();
    Ok(correct as f64 / pairs.len() as f64)
}

/// Area under the ROC curve as the Mann–Whitney statistic: the probability
/// that a random hateful meme scores above a random non-hateful one, ties
/// counting one half. Computed from mid-ranks in O(n log n).
pub fn auroc(scored: &[(f64, Label)]) -> Result<f64, MetricsError> {
    if scored.iter().any(|(s, _)| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore);
    }
    let n_pos = scored.iter().filter(|(_, l)| *l == Label::Hateful).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut sorted: Vec<&(f64, Label)> = scored.iter().collect();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));

    // sum of 1-based mid-ranks of the positives
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        let positives = sorted[i..=j].iter().filter(|(_, l)| *l == Label::Hateful).count();
        pos_rank_sum += mid_rank * positives as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let u = pos_rank_sum - p * (p + 1.0) / 2.0;
    Ok((u / (p * n)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: Option<f64>,
    /// Absent when only one class is present among scored results.
    pub auroc: Option<f64>,
    /// Results with a gold label that entered the metrics.
    pub n: usize,
    pub fallback_probability_count: usize,
    pub refusal_count: usize,
    pub failure_count: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Label::*;

    /// Pairwise definition, O(n²).
    fn pairwise(scored: &[(f64, Label)]) -> f64 {
        let pos: Vec<f64> = scored.iter().filter(|s| s.1 == Hateful).map(|s| s.0).collect();
        let neg: Vec<f64> = scored.iter().filter(|s| s.1 == NonHateful).map(|s| s.0).collect();
        let mut total = 0.0;
        for &p in &pos {
            for &n in &neg {
                total += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        total / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn accuracy_examples() {
        let three_of_four = [(Hateful, Hateful), (NonHateful, NonHateful), (Hateful, Hateful), (Hateful, NonHateful)];
        assert_eq!(accuracy(&three_of_four), Ok(0.75));
        assert_eq!(accuracy(&[(Hateful, Hateful), (NonHateful, NonHateful)]), Ok(1.0));
        let preds = [Hateful, Hateful, NonHateful, NonHateful];
        let gold = [Hateful, NonHateful, Hateful, NonHateful];
        let pairs: Vec<_> = preds.into_iter().zip(gold).collect();
        assert_eq!(accuracy(&pairs), Ok(0.5));
        assert_eq!(accuracy(&[]), Err(MetricsError::EmptyResults));
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[(0.9, Hateful), (0.8, Hateful), (0.1, NonHateful)]), Ok(1.0));
        assert_eq!(auroc(&[(0.5, Hateful), (0.5, NonHateful)]), Ok(0.5));
        // pairs (0.7, 0.5) -> 1 and (0.3, 0.5) -> 0
        assert_eq!(auroc(&[(0.7, Hateful), (0.3, Hateful), (0.5, NonHateful)]), Ok(0.5));
        assert_eq!(auroc(&[(0.7, Hateful)]), Err(MetricsError::SingleClass));
        assert_eq!(auroc(&[(f64::NAN, Hateful), (0.1, NonHateful)]), Err(MetricsError::NonFiniteScore));
    }

    fn arb_scored() -> impl Strategy<Value = Vec<(f64, Label)>> {
        // coarse grid so ties are common
        proptest::collection::vec(((0u32..20).prop_map(|s| s as f64 / 19.0), any::<bool>()), 2..200)
            .prop_map(|v| v.into_iter().map(|(s, h)| (s, if h { Hateful } else { NonHateful })).collect())
            .prop_filter("both classes", |v: &Vec<(f64, Label)>| {
                v.iter().any(|s| s.1 == Hateful) && v.iter().any(|s| s.1 == NonHateful)
            })
    }

    proptest! {
        #[test]
        fn matches_pairwise_oracle(scored in arb_scored()) {
            let fast = auroc(&scored).unwrap();
            prop_assert!((fast - pairwise(&scored)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&fast));
        }

        #[test]
        fn invariant_under_monotone_maps(scored in arb_scored(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let mapped: Vec<_> = scored.iter().map(|&(s, l)| ((a * s).exp() + b, l)).collect();
            prop_assert!((auroc(&scored).unwrap() - auroc(&mapped).unwrap()).abs() < 1e-12);
        }
    }
}
