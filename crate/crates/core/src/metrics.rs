//! Bag- and patch-level evaluation: accuracy, macro F1, one-vs-rest AUC,
//! FROC and CPM.

use std::collections::HashSet;

use log::warn;

use crate::error::{Error, Result};

/// False-positive-per-image operating points averaged by CPM.
pub const CPM_FPI: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub accuracy: f64,
    /// Positive-class F1 when `n == 2`, macro F1 otherwise.
    pub f1: f64,
}

fn f1_for(pred: &[usize], truth: &[usize], class: usize) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == class, t == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

pub fn classification_metrics(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<ClassMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Metric("no samples".into()));
    }
    if let Some(&c) = pred.iter().chain(truth).find(|&&c| c >= n_classes) {
        return Err(Error::Metric(format!("class {c} outside {n_classes} classes")));
    }
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    let f1 = if n_classes == 2 {
        f1_for(pred, truth, 1)
    } else {
        (0..n_classes).map(|c| f1_for(pred, truth, c)).sum::<f64>() / n_classes as f64
    };
    Ok(ClassMetrics {
        accuracy: correct as f64 / pred.len() as f64,
        f1,
    })
}

/// Mann–Whitney AUC of `scores` for the `positive` flags, ties counting
/// half. `None` when either side is empty.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks over tie groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Macro one-vs-rest AUC over the classes that have both positives and
/// negatives in `truth`. `scores` holds one probability row per sample.
pub fn auc_ovr<R: AsRef<[f64]>>(scores: &[R], truth: &[usize], n_classes: usize) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::Metric(format!("{} score rows for {} labels", scores.len(), truth.len())));
    }
    for (i, row) in scores.iter().enumerate() {
        let row = row.as_ref();
        if row.len() != n_classes {
            return Err(Error::Metric(format!("score row {i} has {} entries", row.len())));
        }
        if (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Metric(format!("score row {i} does not sum to 1")));
        }
    }
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..n_classes {
        let column: Vec<f64> = scores.iter().map(|r| r.as_ref()[c]).collect();
        let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        match auc_binary(&column, &positive) {
            Some(a) => {
                total += a;
                used += 1;
            }
            None => warn!("class {c} has no positives or no negatives; excluded from AUC"),
        }
    }
    if used == 0 {
        return Err(Error::Metric("no class has both positives and negatives".into()));
    }
    Ok(total / used as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fpi: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrocCurve {
    pub points: Vec<FrocPoint>,
}

impl FrocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpi,sensitivity\n");
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p.fpi, p.sensitivity));
        }
        out
    }
}

/// Sweeps a threshold over every distinct score (`score ≥ threshold` is a
/// detection). Points come out in increasing fpi.
pub fn froc<S: AsRef<str>>(scores: &[f64], tumor: &[bool], slide_ids: &[S]) -> Result<FrocCurve> {
    if scores.len() != tumor.len() || scores.len() != slide_ids.len() {
        return Err(Error::Metric("froc inputs differ in length".into()));
    }
    let positives = tumor.iter().filter(|&&t| t).count();
    if positives == 0 {
        return Err(Error::Metric("sensitivity undefined without tumor instances".into()));
    }
    let slides = slide_ids.iter().map(|s| s.as_ref()).collect::<HashSet<_>>().len() as f64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if tumor[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(FrocPoint {
            threshold,
            fpi: fp as f64 / slides,
            sensitivity: tp as f64 / positives as f64,
        });
    }
    Ok(FrocCurve { points })
}

/// Sensitivity read at `fpi` as the best point not exceeding it.
pub fn sensitivity_at(curve: &FrocCurve, fpi: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.fpi <= fpi)
        .map(|p| p.sensitivity)
        .fold(0.0, f64::max)
}

/// Mean sensitivity at [`CPM_FPI`].
pub fn cpm(curve: &FrocCurve) -> f64 {
    CPM_FPI.iter().map(|&f| sensitivity_at(curve, f)).sum::<f64>() / CPM_FPI.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn pair_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
        let (mut num, mut pairs) = (0.0, 0usize);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if positive[i] && !positive[j] {
                    pairs += 1;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        (pairs > 0).then(|| num / pairs as f64)
    }

    #[test]
    fn classification_examples() {
        let m = classification_metrics(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap();
        assert_eq!((m.accuracy, m.f1), (1.0, 1.0));
        let m = classification_metrics(&[0, 0, 0, 0], &[0, 1, 0, 1], 2).unwrap();
        assert_eq!((m.accuracy, m.f1), (0.5, 0.0));
        assert!(classification_metrics(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn macro_f1_matches_confusion_matrix() {
        let mut rng = crate::rng::stream(4, 0);
        let n = 3;
        let pred: Vec<usize> = (0..20).map(|_| rng.random_range(0..n)).collect();
        let truth: Vec<usize> = (0..20).map(|_| rng.random_range(0..n)).collect();
        let mut cm = [[0usize; 3]; 3];
        for (&p, &t) in pred.iter().zip(&truth) {
            cm[t][p] += 1;
        }
        let mut f1 = 0.0;
        for c in 0..n {
            let tp = cm[c][c] as f64;
            let predicted: f64 = (0..n).map(|t| cm[t][c] as f64).sum();
            let actual: f64 = cm[c].iter().sum::<usize>() as f64;
            let (p, r) = (tp / predicted, tp / actual);
            f1 += if tp == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        }
        let m = classification_metrics(&pred, &truth, n).unwrap();
        assert!((m.f1 - f1 / 3.0).abs() < 1e-12);
        let acc = (0..n).map(|c| cm[c][c]).sum::<usize>() as f64 / 20.0;
        assert_eq!(m.accuracy, acc);
    }

    #[test]
    fn auc_examples() {
        let rows = [[0.9, 0.1], [0.8, 0.2], [0.3, 0.7], [0.1, 0.9]];
        assert_eq!(auc_ovr(&rows, &[0, 0, 1, 1], 2).unwrap(), 1.0);
        let flat = [[0.5, 0.5]; 4];
        assert_eq!(auc_ovr(&flat, &[0, 1, 0, 1], 2).unwrap(), 0.5);
        assert!(auc_ovr(&[[0.6, 0.6]], &[0], 2).is_err());
        assert!(auc_ovr(&rows, &[0, 0, 0, 0], 2).is_err());
    }

    #[test]
    fn eight_sample_auc_equals_pair_count() {
        let s = [0.1, 0.4, 0.4, 0.35, 0.8, 0.9, 0.4, 0.05];
        let p = [false, true, false, true, true, false, true, false];
        assert_eq!(auc_binary(&s, &p), pair_auc(&s, &p));
        assert_eq!(auc_binary(&s, &p), Some(10.0 / 16.0));
    }

    fn brute_froc(scores: &[f64], tumor: &[bool], slides: usize) -> Vec<(f64, f64)> {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let pos = tumor.iter().filter(|&&t| t).count() as f64;
        thresholds
            .iter()
            .map(|&th| {
                let tp = (0..scores.len()).filter(|&i| scores[i] >= th && tumor[i]).count() as f64;
                let fp = (0..scores.len()).filter(|&i| scores[i] >= th && !tumor[i]).count() as f64;
                (fp / slides as f64, tp / pos)
            })
            .collect()
    }

    #[test]
    fn froc_endpoints() {
        let c = froc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false], &["a", "a", "b", "b"]).unwrap();
        assert_eq!(c.points[1].fpi, 0.0);
        assert_eq!(c.points[1].sensitivity, 1.0);
        let last = c.points.last().unwrap();
        assert_eq!((last.fpi, last.sensitivity), (1.0, 1.0));
        assert_eq!(cpm(&c), 1.0);
        assert!(froc(&[0.1], &[false], &["a"]).is_err());
    }

    #[test]
    fn three_slide_hand_case() {
        let scores = [0.9, 0.7, 0.7, 0.4, 0.3, 0.2, 0.6];
        let tumor = [true, false, true, false, true, false, false];
        let ids = ["a", "a", "b", "b", "c", "c", "c"];
        let c = froc(&scores, &tumor, &ids).unwrap();
        let got: Vec<(f64, f64)> = c.points.iter().map(|p| (p.fpi, p.sensitivity)).collect();
        assert_eq!(got, brute_froc(&scores, &tumor, 3));
        assert_eq!(got[1], (1.0 / 3.0, 2.0 / 3.0));
    }

    #[test]
    fn cpm_hand_curve() {
        let pts = [(0.1, 0.2), (0.3, 0.4), (0.9, 0.5), (3.0, 0.8), (6.0, 0.9)];
        let curve = FrocCurve {
            points: pts
                .iter()
                .map(|&(fpi, sensitivity)| FrocPoint {
                    threshold: 0.0,
                    fpi,
                    sensitivity,
                })
                .collect(),
        };
        // 0.125→0.2, 0.25→0.2, 0.5→0.4, 1→0.5, 2→0.5, 4→0.8, 8→0.9
        let expected = (0.2 + 0.2 + 0.4 + 0.5 + 0.5 + 0.8 + 0.9) / 7.0;
        assert!((cpm(&curve) - expected).abs() < 1e-15);
        let flat = FrocCurve {
            points: vec![FrocPoint {
                threshold: 0.0,
                fpi: 0.0,
                sensitivity: 0.5,
            }],
        };
        assert_eq!(cpm(&flat), 0.5);
    }

    proptest! {
        #[test]
        fn auc_equals_pair_count(
            data in prop::collection::vec((0u8..6, any::<bool>()), 2..50),
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 5.0).collect();
            let positive: Vec<bool> = data.iter().map(|(_, p)| *p).collect();
            prop_assert_eq!(auc_binary(&scores, &positive), pair_auc(&scores, &positive));
        }

        #[test]
        fn froc_is_monotone_and_cpm_bounded(
            data in prop::collection::vec((0u8..10, any::<bool>(), 0usize..3), 1..40),
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
            let mut tumor: Vec<bool> = data.iter().map(|d| d.1).collect();
            tumor[0] = true;
            let ids: Vec<String> = data.iter().map(|d| format!("s{}", d.2)).collect();
            let c = froc(&scores, &tumor, &ids).unwrap();
            for w in c.points.windows(2) {
                prop_assert!(w[1].fpi >= w[0].fpi && w[1].sensitivity >= w[0].sensitivity);
            }
            let v = cpm(&c);
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
