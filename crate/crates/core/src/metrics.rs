//! Confusion matrix, one-vs-rest sensitivity/specificity/HM, Mann-Whitney
//! AUC and multi-class accuracy.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes).map(<[u64]>::to_vec).collect()
    }
}

pub fn confusion(predicted: &[usize], truth: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if predicted.len() != truth.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let mut counts = vec![0u64; classes * classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        for label in [p, t] {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
        }
        counts[t * classes + p] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryMetrics {
    pub sen: f64,
    pub spe: f64,
    pub hm: f64,
    pub acc: f64,
}

/// `2ab / (a + b)`, or 0 when both are 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Sensitivity, specificity and their harmonic mean with `positive` against
/// all other classes; accuracy over all classes.
pub fn sen_spe_hm_acc(cm: &ConfusionMatrix, positive: usize) -> Result<BinaryMetrics> {
    let k = cm.classes;
    if positive >= k {
        return Err(Error::LabelOutOfRange {
            label: positive,
            classes: k,
        });
    }
    let pos_support: u64 = (0..k).map(|p| cm.get(positive, p)).sum();
    let total = cm.total();
    let neg_support = total - pos_support;
    if pos_support == 0 || neg_support == 0 {
        return Err(Error::UndefinedMetric(format!(
            "sensitivity/specificity need both classes present (positive {pos_support}, negative {neg_support})"
        )));
    }
    let tp = cm.get(positive, positive);
    let fp: u64 = (0..k).filter(|&t| t != positive).map(|t| cm.get(t, positive)).sum();
    let tn = neg_support - fp;
    let sen = tp as f64 / pos_support as f64;
    let spe = tn as f64 / neg_support as f64;
    Ok(BinaryMetrics {
        sen,
        spe,
        hm: harmonic_mean(sen, spe),
        acc: cm.trace() as f64 / total as f64,
    })
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs where the
/// positive scores higher, counting ties as one half.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Config(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative sample".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "auc" });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average 1-based ranks over tie groups; doubled to stay in integers.
    let mut pos_rank_sum2: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let rank2 = (start + 1 + end) as u64;
        let pos_in_group = order[start..end].iter().filter(|&&i| positive[i]).count() as u64;
        pos_rank_sum2 += rank2 * pos_in_group;
        start = end;
    }
    let (np, nn) = (n_pos as u64, n_neg as u64);
    let u2 = pos_rank_sum2 - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

/// Metrics of one evaluation pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub sen: f64,
    pub spe: f64,
    pub hm: f64,
    pub auc: f64,
    pub acc: f64,
}

impl EpochMetrics {
    /// Derives every metric from argmax predictions and positive-class scores.
    pub fn evaluate(
        epoch: usize,
        predicted: &[usize],
        truth: &[usize],
        positive_scores: &[f64],
        classes: usize,
        positive_class: usize,
    ) -> Result<Self> {
        let cm = confusion(predicted, truth, classes)?;
        let b = sen_spe_hm_acc(&cm, positive_class)?;
        let is_pos: Vec<bool> = truth.iter().map(|&t| t == positive_class).collect();
        Ok(EpochMetrics {
            epoch,
            sen: b.sen,
            spe: b.spe,
            hm: b.hm,
            auc: auc(positive_scores, &is_pos)?,
            acc: b.acc,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanVar {
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
}

impl MeanVar {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanVar { mean, variance }
    }
}

/// Mean and variance of each metric over the final evaluation window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip)]
    pub positive_class: usize,
    pub sen: MeanVar,
    pub spe: MeanVar,
    pub hm: MeanVar,
    pub auc: MeanVar,
    pub acc: MeanVar,
}

impl MetricsReport {
    /// Aggregates the last `window` epochs (all of them if fewer).
    pub fn from_history(history: &[EpochMetrics], window: usize, positive_class: usize) -> Result<Self> {
        if history.is_empty() || window == 0 {
            return Err(Error::Empty("no evaluated epochs to aggregate".into()));
        }
        let tail = &history[history.len().saturating_sub(window)..];
        for m in tail {
            if (m.hm - harmonic_mean(m.sen, m.spe)).abs() > 1e-12 {
                return Err(Error::UndefinedMetric(format!(
                    "epoch {}: hm {} is not the harmonic mean of sen {} and spe {}",
                    m.epoch, m.hm, m.sen, m.spe
                )));
            }
        }
        let col = |f: fn(&EpochMetrics) -> f64| MeanVar::of(&tail.iter().map(f).collect::<Vec<_>>());
        Ok(MetricsReport {
            positive_class,
            sen: col(|m| m.sen),
            spe: col(|m| m.spe),
            hm: col(|m| m.hm),
            auc: col(|m| m.auc),
            acc: col(|m| m.acc),
        })
    }
}

/// `epoch,sen,spe,hm,auc,acc` with 17 significant digits.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,sen,spe,hm,auc,acc\n");
    for m in history {
        let _ = writeln!(
            s,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            m.epoch, m.sen, m.spe, m.hm, m.auc, m.acc
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_are_diagonal() {
        let y = [0, 1, 2, 1, 0];
        let cm = confusion(&y, &y, 3).unwrap();
        assert_eq!(cm.total(), 5);
        assert_eq!(cm.trace(), 5);
        let m = sen_spe_hm_acc(&cm, 0).unwrap();
        assert_eq!((m.sen, m.spe, m.hm, m.acc), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn single_miss() {
        let cm = confusion(&[1], &[0], 2).unwrap();
        assert_eq!(cm.rows(), vec![vec![0, 1], vec![0, 0]]);
    }

    #[test]
    fn out_of_range_label() {
        assert!(matches!(
            confusion(&[2], &[0], 2),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn all_negative_predictions() {
        let cm = confusion(&[1, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        let m = sen_spe_hm_acc(&cm, 0).unwrap();
        assert_eq!(m.sen, 0.0);
        assert_eq!(m.spe, 1.0);
        assert_eq!(m.hm, 0.0);
        assert_eq!(m.acc, 0.5);
    }

    #[test]
    fn missing_support_is_undefined() {
        let cm = confusion(&[1, 1], &[1, 1], 2).unwrap();
        assert!(matches!(sen_spe_hm_acc(&cm, 0), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn accuracy_is_multiclass() {
        // positive class 0 is perfect, classes 1 and 2 are swapped
        let cm = confusion(&[0, 2, 1], &[0, 1, 2], 3).unwrap();
        let m = sen_spe_hm_acc(&cm, 0).unwrap();
        assert_eq!((m.sen, m.spe, m.hm), (1.0, 1.0, 1.0));
        assert!((m.acc - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn reported_hm_triple() {
        let hm = harmonic_mean(0.990, 0.971);
        assert!((hm - 0.980).abs() < 5e-4, "{hm}");
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        let a = auc(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(a, 0.75);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn window_aggregation_uses_population_variance() {
        let h: Vec<EpochMetrics> = (0..12)
            .map(|e| {
                let sen = if e % 2 == 0 { 0.8 } else { 1.0 };
                EpochMetrics {
                    epoch: e,
                    sen,
                    spe: 1.0,
                    hm: harmonic_mean(sen, 1.0),
                    auc: 1.0,
                    acc: 0.9,
                }
            })
            .collect();
        let r = MetricsReport::from_history(&h, 10, 0).unwrap();
        assert!((r.sen.mean - 0.9).abs() < 1e-15);
        assert!((r.sen.variance - 0.01).abs() < 1e-15);
        assert!(r.acc.variance < 1e-30);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json.as_object().unwrap().len(), 5);
        assert!(json["hm"]["variance"].is_number());
    }

    #[test]
    fn aggregation_rejects_inconsistent_hm() {
        let h = [EpochMetrics {
            epoch: 0,
            sen: 0.5,
            spe: 1.0,
            hm: 0.9,
            auc: 1.0,
            acc: 1.0,
        }];
        assert!(MetricsReport::from_history(&h, 10, 0).is_err());
    }
}
