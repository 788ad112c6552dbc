//! Classification metrics: confusion matrices, per-class precision /
//! recall / F1, accuracy, balanced accuracy and macro one-vs-rest ROC-AUC.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// C×C counts; rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[&[u64]]) -> Self {
        let classes = rows.len();
        let mut counts = Vec::with_capacity(classes * classes);
        for row in rows {
            assert_eq!(row.len(), classes, "confusion matrix must be square");
            counts.extend_from_slice(row);
        }
        ConfusionMatrix { classes, counts }
    }

    pub fn at(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Additive merge; the merge of two folds equals the matrix of their
    /// concatenated labels.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn to_csv(&self, class_names: &[&str]) -> String {
        let mut out = String::from("true\\predicted");
        for name in class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, name) in class_names.iter().enumerate() {
            out.push_str(name);
            for j in 0..self.classes {
                out.push_str(&format!(",{}", self.at(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

/// Tallies a confusion matrix from label pairs.
pub fn confusion(true_labels: &[usize], predicted: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if true_labels.len() != predicted.len() {
        return Err(Error::Data("label vectors differ in length".into()));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&t, &p) in true_labels.iter().zip(predicted) {
        if t >= classes || p >= classes {
            return Err(Error::Data(format!("label out of range: true {t}, predicted {p}")));
        }
        cm.counts[t * classes + p] += 1;
    }
    Ok(cm)
}

/// Per-class and aggregate rates derived from a confusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Mean of the per-class recalls.
    pub balanced_accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<u64>,
    /// Classes whose precision was 0/0 (nothing predicted as them).
    pub undefined_precision: Vec<usize>,
    /// Macro one-vs-rest ROC-AUC; filled in only when probabilities are
    /// available.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roc_auc_ovr_macro: Option<f64>,
}

/// Precision, recall, F1, accuracy and balanced accuracy from counts.
/// 0/0 precision is defined as 0 and flagged.
pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let c = cm.classes;
    if c == 0 || cm.total() == 0 {
        return Err(Error::Data("empty confusion matrix".into()));
    }
    let mut precision = vec![0.0; c];
    let mut recall = vec![0.0; c];
    let mut f1 = vec![0.0; c];
    let mut support = vec![0u64; c];
    let mut undefined_precision = Vec::new();

    let mut correct = 0u64;
    for i in 0..c {
        correct += cm.at(i, i);
        support[i] = (0..c).map(|j| cm.at(i, j)).sum();
    }
    for i in 0..c {
        let tp = cm.at(i, i) as f64;
        let predicted: u64 = (0..c).map(|t| cm.at(t, i)).sum();
        if predicted == 0 {
            undefined_precision.push(i);
            precision[i] = 0.0;
        } else {
            precision[i] = tp / predicted as f64;
        }
        recall[i] = if support[i] == 0 { 0.0 } else { tp / support[i] as f64 };
        f1[i] = if precision[i] + recall[i] == 0.0 {
            0.0
        } else {
            2.0 * precision[i] * recall[i] / (precision[i] + recall[i])
        };
    }
    let accuracy = correct as f64 / cm.total() as f64;
    let with_support = support.iter().filter(|&&s| s > 0).count();
    let balanced_accuracy = recall
        .iter()
        .zip(&support)
        .filter(|(_, &s)| s > 0)
        .map(|(r, _)| r)
        .sum::<f64>()
        / with_support as f64;

    Ok(MetricsReport {
        accuracy,
        balanced_accuracy,
        precision,
        recall,
        f1,
        support,
        undefined_precision,
        roc_auc_ovr_macro: None,
    })
}

/// Macro one-vs-rest ROC-AUC via the rank (Mann-Whitney) formulation with
/// midrank tie handling. Classes absent from the labels are excluded.
pub fn roc_auc_ovr_macro(true_labels: &[usize], probabilities: &[f64], classes: usize) -> Result<f64> {
    let n = true_labels.len();
    if n == 0 || probabilities.len() != n * classes {
        return Err(Error::Data("probability matrix shape mismatch".into()));
    }
    for row in probabilities.chunks_exact(classes) {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::Data(format!("probability row sums to {s}, expected 1")));
        }
    }

    let mut aucs = Vec::new();
    for c in 0..classes {
        let n_pos = true_labels.iter().filter(|&&t| t == c).count();
        let n_neg = n - n_pos;
        if n_pos == 0 {
            log::warn!("ROC-AUC: class {c} absent from labels; excluded from the macro average");
            continue;
        }
        if n_neg == 0 {
            log::warn!("ROC-AUC: class {c} is the only label present; excluded");
            continue;
        }
        // Midranks of the class-c scores.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            probabilities[a * classes + c]
                .partial_cmp(&probabilities[b * classes + c])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut ranks = vec![0.0f64; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            let score = probabilities[order[i] * classes + c];
            while j + 1 < n && probabilities[order[j + 1] * classes + c] == score {
                j += 1;
            }
            let midrank = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                ranks[idx] = midrank;
            }
            i = j + 1;
        }
        let rank_sum: f64 = (0..n).filter(|&i| true_labels[i] == c).map(|i| ranks[i]).sum();
        let auc = (rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;
        aucs.push(auc);
    }
    if aucs.is_empty() {
        return Err(Error::Data("no class had both positives and negatives".into()));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// All-pairs brute-force AUC used as the oracle for the rank formulation.
pub fn roc_auc_binary_bruteforce(positive: &[f64], negative: &[f64]) -> f64 {
    let mut wins = 0.0f64;
    for &p in positive {
        for &q in negative {
            if p > q {
                wins += 1.0;
            } else if p == q {
                wins += 0.5;
            }
        }
    }
    wins / (positive.len() * negative.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    /// Aggregate confusion matrix reported for the reference system:
    /// rows (375,0,0), (8,7864,3), (8,0,2992).
    pub fn reference_confusion() -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&[&[375, 0, 0], &[8, 7864, 3], &[8, 0, 2992]])
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let t = [0usize, 1, 2, 1, 0];
        let cm = confusion(&t, &t, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(cm.at(i, j), 0);
                }
            }
        }
        let m = metrics_from_confusion(&cm).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.balanced_accuracy, 1.0);
    }

    #[test]
    fn reference_matrix_totals_and_metrics() {
        let cm = reference_confusion();
        assert_eq!(cm.total(), 11_250);
        let m = metrics_from_confusion(&cm).unwrap();

        assert!((m.accuracy - 11_231.0 / 11_250.0).abs() < 1e-12);
        assert!((m.accuracy - 0.9983).abs() < 0.001);
        assert!((m.balanced_accuracy - 0.9986).abs() < 0.001);

        // baseline: precision 375/391, recall 1.0, F1 0.979
        assert!((m.precision[0] - 0.959).abs() < 0.001);
        assert!((m.recall[0] - 1.0).abs() < 1e-12);
        assert!((m.f1[0] - 0.979).abs() < 0.001);
        // loose screw: 1.0 / 0.999 / 0.999
        assert!((m.precision[1] - 1.0).abs() < 0.001);
        assert!((m.recall[1] - 0.999).abs() < 0.001);
        assert!((m.f1[1] - 0.999).abs() < 0.001);
        // crack: 0.999 / 0.997 / 0.998
        assert!((m.precision[2] - 0.999).abs() < 0.001);
        assert!((m.recall[2] - 2992.0 / 3000.0).abs() < 1e-12);
        assert!((m.f1[2] - 0.998).abs() < 0.001);
    }

    #[test]
    fn merging_folds_equals_concatenated_labels() {
        let t1 = [0usize, 1, 2, 2];
        let p1 = [0usize, 1, 1, 2];
        let t2 = [1usize, 1, 0];
        let p2 = [1usize, 0, 0];
        let mut merged = confusion(&t1, &p1, 3).unwrap();
        merged.merge(&confusion(&t2, &p2, 3).unwrap());

        let t: Vec<usize> = t1.iter().chain(&t2).copied().collect();
        let p: Vec<usize> = p1.iter().chain(&p2).copied().collect();
        assert_eq!(merged, confusion(&t, &p, 3).unwrap());
    }

    #[test]
    fn merge_is_commutative() {
        let a = confusion(&[0, 1, 1], &[0, 1, 0], 2).unwrap();
        let b = confusion(&[1, 0], &[1, 1], 2).unwrap();
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        assert_eq!(ab, ba);
    }

    #[test]
    fn out_of_range_labels_rejected() {
        assert!(confusion(&[3], &[0], 3).is_err());
        assert!(confusion(&[0], &[5], 3).is_err());
    }

    #[test]
    fn metrics_agree_with_per_sample_counting_oracle() {
        let mut rng = RngStream::new(31);
        for trial in 0..20 {
            let n = 50 + (rng.below(950) as usize);
            let classes = 2 + (rng.below(4) as usize);
            let t: Vec<usize> = (0..n).map(|_| rng.below(classes as u64) as usize).collect();
            let p: Vec<usize> = (0..n).map(|_| rng.below(classes as u64) as usize).collect();
            let cm = confusion(&t, &p, classes).unwrap();
            let m = metrics_from_confusion(&cm).unwrap();

            // Brute-force per-sample counting.
            let correct = t.iter().zip(&p).filter(|(a, b)| a == b).count();
            assert_eq!(m.accuracy, correct as f64 / n as f64, "trial {trial}");
            for c in 0..classes {
                let tp = t.iter().zip(&p).filter(|(&a, &b)| a == c && b == c).count() as f64;
                let pred = p.iter().filter(|&&b| b == c).count() as f64;
                let sup = t.iter().filter(|&&a| a == c).count() as f64;
                if pred > 0.0 {
                    assert_eq!(m.precision[c], tp / pred);
                }
                if sup > 0.0 {
                    assert_eq!(m.recall[c], tp / sup);
                }
            }
        }
    }

    #[test]
    fn zero_prediction_class_flagged_not_inflated() {
        // Class 2 never predicted.
        let cm = ConfusionMatrix::from_rows(&[&[5, 0, 0], &[1, 4, 0], &[2, 1, 0]]);
        let m = metrics_from_confusion(&cm).unwrap();
        assert_eq!(m.precision[2], 0.0);
        assert_eq!(m.undefined_precision, vec![2]);
    }

    #[test]
    fn auc_perfect_and_random_scores() {
        // Perfectly separating scores.
        let labels = [1usize, 1, 0, 0];
        let probs = [
            0.1, 0.9, //
            0.2, 0.8, //
            0.8, 0.2, //
            0.9, 0.1,
        ];
        let auc = roc_auc_ovr_macro(&labels, &probs, 2).unwrap();
        assert_eq!(auc, 1.0);

        // Scores independent of labels (all equal): 0.5 per class.
        let probs = [0.5; 8];
        let auc = roc_auc_ovr_macro(&labels, &probs, 2).unwrap();
        assert_eq!(auc, 0.5);
    }

    #[test]
    fn auc_single_inversion_is_three_quarters() {
        // 2 positives, 2 negatives, one positive-negative pair inverted:
        // 3 of 4 pairs won -> 0.75 for the positive class.
        let labels = [1usize, 1, 0, 0];
        let probs = [
            0.4, 0.6, // pos, score .6
            0.7, 0.3, // pos, score .3 (inverted vs the .4 negative)
            0.6, 0.4, // neg, score .4
            0.9, 0.1, // neg, score .1
        ];
        let pos: Vec<f64> = vec![0.6, 0.3];
        let neg: Vec<f64> = vec![0.4, 0.1];
        assert_eq!(roc_auc_binary_bruteforce(&pos, &neg), 0.75);
        // class 0 mirrors class 1 with two classes of complementary scores
        let auc = roc_auc_ovr_macro(&labels, &probs, 2).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auc_rank_formulation_matches_bruteforce_with_ties() {
        let mut rng = RngStream::new(17);
        for trial in 0..50 {
            let n = 10 + rng.below(190) as usize;
            let classes = 3;
            let labels: Vec<usize> = (0..n).map(|_| rng.below(classes as u64) as usize).collect();
            // Quantized probabilities force plenty of ties.
            let mut probs = vec![0.0f64; n * classes];
            for row in probs.chunks_exact_mut(classes) {
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (rng.below(8) as f64) + 1.0;
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            let got = match roc_auc_ovr_macro(&labels, &probs, classes) {
                Ok(v) => v,
                Err(_) => continue, // a class may be absent on tiny draws
            };
            let mut expect = Vec::new();
            for c in 0..classes {
                let pos: Vec<f64> = (0..n)
                    .filter(|&i| labels[i] == c)
                    .map(|i| probs[i * classes + c])
                    .collect();
                let neg: Vec<f64> = (0..n)
                    .filter(|&i| labels[i] != c)
                    .map(|i| probs[i * classes + c])
                    .collect();
                if pos.is_empty() || neg.is_empty() {
                    continue;
                }
                expect.push(roc_auc_binary_bruteforce(&pos, &neg));
            }
            let expect: f64 = expect.iter().sum::<f64>() / expect.len() as f64;
            assert!((got - expect).abs() < 1e-12, "trial {trial}: {got} vs {expect}");
        }
    }

    #[test]
    fn auc_rejects_unnormalized_rows() {
        let labels = [0usize, 1];
        let probs = [0.9, 0.9, 0.1, 0.1];
        assert!(roc_auc_ovr_macro(&labels, &probs, 2).is_err());
    }

    #[test]
    fn csv_export_has_labels() {
        let cm = reference_confusion();
        let csv = cm.to_csv(&["baseline", "loose_screw", "crack"]);
        assert!(csv.contains("baseline,375,0,0"));
        assert!(csv.contains("crack,8,0,2992"));
    }
}
