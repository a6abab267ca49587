use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Label;

/// Threshold metrics plus AUC, security being the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "MetricsRecord", try_from = "MetricsRecord")]
pub struct MetricsReport {
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub f1: f64,
    pub plus_recall: f64,
    pub minus_recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub n: usize,
}

/// Flat, percent-scaled serialized form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    #[serde(rename = "AUC")]
    pub auc: Option<f64>,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "+Recall")]
    pub plus_recall: f64,
    #[serde(rename = "-Recall")]
    pub minus_recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n: usize,
}

impl From<MetricsReport> for MetricsRecord {
    fn from(m: MetricsReport) -> Self {
        MetricsRecord {
            auc: m.auc.map(|a| a * 100.0),
            f1: m.f1 * 100.0,
            plus_recall: m.plus_recall * 100.0,
            minus_recall: m.minus_recall * 100.0,
            tp: m.tp,
            fp: m.fp,
            tn: m.tn,
            fn_: m.fn_,
            n: m.n,
        }
    }
}

impl TryFrom<MetricsRecord> for MetricsReport {
    type Error = String;

    fn try_from(r: MetricsRecord) -> std::result::Result<Self, String> {
        let report = MetricsReport {
            auc: r.auc.map(|a| a / 100.0),
            f1: r.f1 / 100.0,
            plus_recall: r.plus_recall / 100.0,
            minus_recall: r.minus_recall / 100.0,
            tp: r.tp,
            fp: r.fp,
            tn: r.tn,
            fn_: r.fn_,
            n: r.n,
        };
        report.check().map_err(|e| e.to_string())?;
        Ok(report)
    }
}

impl MetricsReport {
    /// Confusion counts sum to `n` and every rate lies in `[0, 1]`.
    pub fn check(&self) -> Result<()> {
        if self.tp + self.fp + self.tn + self.fn_ != self.n {
            return Err(Error::InvalidInput(format!(
                "confusion counts {}+{}+{}+{} != n={}",
                self.tp, self.fp, self.tn, self.fn_, self.n
            )));
        }
        let rates = [self.auc.unwrap_or(0.0), self.f1, self.plus_recall, self.minus_recall];
        // percent round trips may land a hair outside the unit interval
        if rates.iter().any(|r| !(-1e-12..=1.0 + 1e-12).contains(r)) {
            return Err(Error::InvalidInput(format!("metric outside [0, 1]: {rates:?}")));
        }
        Ok(())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_inputs(probs: &[f64], labels: &[Label]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: probs.len(),
            right: labels.len(),
        });
    }
    if probs.is_empty() {
        return Err(Error::InvalidInput("no predictions to score".into()));
    }
    if probs.iter().any(|p| p.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    Ok(())
}

/// Probability that a random security sample outscores a random
/// non-security one, ties counting one half (Mann-Whitney U / n₊n₋).
pub fn auc(probs: &[f64], labels: &[Label]) -> Result<f64> {
    check_inputs(probs, labels)?;
    let n_pos = labels.iter().filter(|l| l.is_security()).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass { present: labels[0] });
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    // Midranks (1-based) over tied groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && probs[order[j + 1]] == probs[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += midrank * order[i..=j].iter().filter(|&&k| labels[k].is_security()).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Threshold metrics (security iff `prob >= threshold`) and AUC. The AUC is
/// left empty when one class is absent; everything else is still filled.
pub fn compute_metrics(probs: &[f64], labels: &[Label], threshold: f64) -> Result<MetricsReport> {
    check_inputs(probs, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (p, l) in probs.iter().zip(labels) {
        match (*p >= threshold, l.is_security()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let auc = match auc(probs, labels) {
        Ok(a) => Some(a),
        Err(Error::SingleClass { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        auc,
        f1,
        plus_recall: recall,
        minus_recall: ratio(tn, tn + fp),
        tp,
        fp,
        tn,
        fn_,
        n: probs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, Just, Strategy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use Label::{NonSecurity as N, Security as S};

    fn pair_count_auc(probs: &[f64], labels: &[Label]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..probs.len() {
            for j in 0..probs.len() {
                if labels[i] == S && labels[j] == N {
                    pairs += 1.0;
                    if probs[i] > probs[j] {
                        wins += 1.0;
                    } else if probs[i] == probs[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn perfect_predictor() {
        let m = compute_metrics(&[0.9, 0.8, 0.2, 0.1], &[S, S, N, N], 0.5).unwrap();
        assert_eq!((m.auc, m.f1, m.plus_recall, m.minus_recall), (Some(1.0), 1.0, 1.0, 1.0));
        assert_eq!((m.tp, m.fp, m.tn, m.fn_, m.n), (2, 0, 2, 0, 4));
    }

    #[test]
    fn all_ties_give_half() {
        assert_eq!(auc(&[0.5; 6], &[S, N, S, N, N, S]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_keeps_other_metrics() {
        let m = compute_metrics(&[0.7, 0.2], &[S, S], 0.5).unwrap();
        assert_eq!(m.auc, None);
        assert_eq!(m.plus_recall, 0.5);
        assert!(matches!(auc(&[0.7, 0.2], &[S, S]), Err(Error::SingleClass { present: S })));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(compute_metrics(&[0.1], &[S, N], 0.5), Err(Error::LengthMismatch { .. })));
        assert!(compute_metrics(&[], &[], 0.5).is_err());
    }

    #[test]
    fn random_pairs_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        // two decimals so ties occur
        let probs: Vec<f64> = (0..200).map(|_| (rng.random_range(0.0..1.0f64) * 100.0).round() / 100.0).collect();
        let labels: Vec<Label> = (0..200).map(|_| if rng.random_bool(0.4) { S } else { N }).collect();
        let m = compute_metrics(&probs, &labels, 0.5).unwrap();
        assert!((m.auc.unwrap() - pair_count_auc(&probs, &labels)).abs() < 1e-12);

        let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..200 {
            let pred = probs[i] >= 0.5;
            let pos = labels[i] == S;
            tp += (pred && pos) as u8 as f64;
            fp += (pred && !pos) as u8 as f64;
            tn += (!pred && !pos) as u8 as f64;
            fn_ += (!pred && pos) as u8 as f64;
        }
        let prec = tp / (tp + fp);
        let rec = tp / (tp + fn_);
        assert!((m.f1 - 2.0 * prec * rec / (prec + rec)).abs() < 1e-12);
        assert!((m.plus_recall - rec).abs() < 1e-12);
        assert!((m.minus_recall - tn / (tn + fp)).abs() < 1e-12);
    }

    #[test]
    fn threshold_extremes() {
        let probs = [0.0, 0.3, 1.0, 0.6];
        let labels = [S, N, S, N];
        let low = compute_metrics(&probs, &labels, 0.0).unwrap();
        assert_eq!((low.plus_recall, low.minus_recall), (1.0, 0.0));
        let high = compute_metrics(&probs, &labels, 1.0 + 1e-9).unwrap();
        assert_eq!((high.plus_recall, high.minus_recall), (0.0, 1.0));
    }

    #[test]
    fn serializes_percent_scaled() {
        let m = compute_metrics(&[0.9, 0.4, 0.2, 0.6], &[S, S, N, N], 0.5).unwrap();
        let json = serde_json::to_value(m).unwrap();
        assert_eq!(json["+Recall"], 50.0);
        assert_eq!(json["AUC"], 75.0);
        assert_eq!(json["fn"], 1);
        let back: MetricsReport = serde_json::from_value(json).unwrap();
        assert_eq!(back.tp, m.tp);
        assert!((back.auc.unwrap() - 0.75).abs() < 1e-12);
    }

    fn arb_scores() -> impl Strategy<Value = (Vec<f64>, Vec<Label>, Vec<usize>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec(0u8..20, n).prop_map(|v| v.into_iter().map(|x| x as f64 / 20.0).collect::<Vec<_>>()),
                proptest::collection::vec(proptest::bool::ANY, n).prop_map(|v| v.into_iter().map(|b| if b { S } else { N }).collect::<Vec<_>>()),
                Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
            )
        })
    }

    proptest! {
        #[test]
        fn permutation_invariant((probs, labels, perm) in arb_scores()) {
            let a = compute_metrics(&probs, &labels, 0.5).unwrap();
            let p2: Vec<f64> = perm.iter().map(|&i| probs[i]).collect();
            let l2: Vec<Label> = perm.iter().map(|&i| labels[i]).collect();
            let b = compute_metrics(&p2, &l2, 0.5).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn auc_invariant_under_monotone_map((probs, labels, _) in arb_scores()) {
            if let Ok(a) = auc(&probs, &labels) {
                let mapped: Vec<f64> = probs.iter().map(|p| (3.0 * p).exp() - 7.0).collect();
                prop_assert!((auc(&mapped, &labels).unwrap() - a).abs() < 1e-12);
                prop_assert!((a - pair_count_auc(&probs, &labels)).abs() < 1e-12);
            }
        }

        #[test]
        fn report_is_consistent((probs, labels, _) in arb_scores(), t in 0.0f64..1.1) {
            let m = compute_metrics(&probs, &labels, t).unwrap();
            prop_assert!(m.check().is_ok());
        }
    }
}
