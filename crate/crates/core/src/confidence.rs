//! Class-wise confidence scores and pseudo-label initialisation.

use crate::abmil::MilModel;
use crate::databag::{Bag, InstanceRef, UNASSIGNED};
use crate::error::Result;

/// Unclamped selection budget `min((t + 1) K0 log10 N, N / 3)`.
pub fn kt_raw(t: usize, n: usize, k0: usize) -> f64 {
    let n_f = n as f64;
    ((t + 1) as f64 * k0 as f64 * n_f.log10()).min(n_f / 3.0)
}

/// Number of instances per bag promoted to the high-confidence set.
///
/// Rounds [`kt_raw`] to the nearest integer, caps it at `⌊N/3⌋` and clamps
/// into `[1, N]` so every bag contributes at least one instance.
pub fn kt_schedule(t: usize, n: usize, k0: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let rounded = kt_raw(t, n, k0).round().max(0.0) as usize;
    rounded.min(n / 3).clamp(1, n)
}

/// `s_k = a_k · p_k[label]`.
pub fn scores_from(attention: &[f64], label_probs: &[f64]) -> Vec<f64> {
    attention.iter().zip(label_probs).map(|(a, p)| a * p).collect()
}

/// Indices sorted by descending score; equal scores keep ascending index.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagConfidence {
    pub attention: Vec<f64>,
    /// Probability of the bag's own label for each instance.
    pub label_probs: Vec<f64>,
    pub scores: Vec<f64>,
    /// Instance indices by descending score.
    pub order: Vec<usize>,
    pub k_t: usize,
}

impl BagConfidence {
    /// 1-based rank of every instance.
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.order.len()];
        for (r, &i) in self.order.iter().enumerate() {
            ranks[i] = r + 1;
        }
        ranks
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfidenceTable {
    pub bags: Vec<BagConfidence>,
}

/// High- and low-confidence partitions of the training instances.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitSets {
    /// Instances carrying their bag label as pseudo label.
    pub high: Vec<(InstanceRef, usize)>,
    /// Instances left unassigned.
    pub low: Vec<InstanceRef>,
}

impl SplitSets {
    /// Writes the pseudo labels into the instances.
    pub fn apply(&self, bags: &mut [Bag]) {
        for r in &self.low {
            bags[r.bag].instances[r.instance].pseudo_label = UNASSIGNED;
        }
        for (r, label) in &self.high {
            bags[r.bag].instances[r.instance].pseudo_label = *label as i32;
        }
    }
}

pub fn bag_confidence(model: &MilModel, bag: &Bag, t: usize, k0: usize) -> Result<BagConfidence> {
    let forward = model.bag_forward(bag)?;
    let label_probs: Vec<f64> = forward.instance_probs.row_iter().map(|p| p[bag.label]).collect();
    let scores = scores_from(&forward.attention, &label_probs);
    let order = descending_order(&scores);
    Ok(BagConfidence {
        attention: forward.attention,
        label_probs,
        scores,
        order,
        k_t: kt_schedule(t, bag.len(), k0),
    })
}

pub fn confidence_scores(model: &MilModel, bag: &Bag) -> Result<Vec<f64>> {
    Ok(bag_confidence(model, bag, 0, 1)?.scores)
}

/// Splits every bag's instances into the top-`K_t` high set (labelled with
/// the bag label) and the low set.
pub fn split_by_confidence(bags: &[Bag], table: &ConfidenceTable) -> SplitSets {
    let mut sets = SplitSets::default();
    for (b, (bag, conf)) in bags.iter().zip(&table.bags).enumerate() {
        let mut high = vec![false; bag.len()];
        for &i in conf.order.iter().take(conf.k_t) {
            high[i] = true;
        }
        for (i, is_high) in high.into_iter().enumerate() {
            let r = InstanceRef::new(b, i);
            if is_high {
                sets.high.push((r, bag.label));
            } else {
                sets.low.push(r);
            }
        }
    }
    sets
}

pub fn init_pseudo_labels(
    model: &MilModel,
    bags: &[Bag],
    t: usize,
    k0: usize,
) -> Result<(SplitSets, ConfidenceTable)> {
    let table = ConfidenceTable {
        bags: bags
            .iter()
            .map(|b| bag_confidence(model, b, t, k0))
            .collect::<Result<_>>()?,
    };
    Ok((split_by_confidence(bags, &table), table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::databag::{InstanceRecord, Split};
    use proptest::prelude::*;

    #[test]
    fn score_is_a_product() {
        assert_eq!(scores_from(&[0.5], &[0.8]), vec![0.4]);
        assert_eq!(scores_from(&[0.9, 0.1], &[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn schedule_examples() {
        assert!((kt_raw(0, 1000, 10) - 30.0).abs() < 1e-12);
        assert!((kt_raw(5, 100, 10) - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(kt_schedule(0, 1000, 10), 30);
        assert_eq!(kt_schedule(5, 100, 10), 33);
        assert_eq!(kt_schedule(0, 1, 10), 1);
        assert_eq!(kt_schedule(3, 2, 10), 1);
        assert_eq!(kt_schedule(0, 5, 10), 1);
    }

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(descending_order(&[0.2, 0.5, 0.2, 0.5]), vec![1, 3, 0, 2]);
    }

    fn bag_with(n: usize, label: usize) -> Bag {
        Bag {
            slide_id: "s".into(),
            label,
            split: Split::Train,
            instances: (0..n)
                .map(|k| InstanceRecord {
                    slide_id: "s".into(),
                    patch_index: k,
                    raw: vec![],
                    embedding: vec![k as f64],
                    pseudo_label: UNASSIGNED,
                    truth_label: None,
                    origin: None,
                })
                .collect(),
        }
    }

    #[test]
    fn top_k_selection() {
        let bags = vec![bag_with(3, 1)];
        let table = ConfidenceTable {
            bags: vec![BagConfidence {
                attention: vec![1.0 / 3.0; 3],
                label_probs: vec![0.3, 2.7, 0.6],
                scores: vec![0.1, 0.9, 0.2],
                order: descending_order(&[0.1, 0.9, 0.2]),
                k_t: 1,
            }],
        };
        let sets = split_by_confidence(&bags, &table);
        assert_eq!(sets.high, vec![(InstanceRef::new(0, 1), 1)]);
        assert_eq!(sets.low, vec![InstanceRef::new(0, 0), InstanceRef::new(0, 2)]);
        assert_eq!(table.bags[0].ranks(), vec![3, 1, 2]);
    }

    #[test]
    fn negative_bags_get_class_zero() {
        let mut bags = vec![bag_with(30, 0), bag_with(12, 1)];
        let model = crate::abmil::MilModel::new(crate::abmil::MilShape::new(1, 2), 4);
        let (sets, table) = init_pseudo_labels(&model, &bags, 0, 10).unwrap();
        assert!(sets.high.iter().filter(|(r, _)| r.bag == 0).all(|(_, l)| *l == 0));
        let expected: usize = table.bags.iter().map(|b| b.k_t).sum();
        assert_eq!(sets.high.len(), expected);
        assert_eq!(sets.high.len() + sets.low.len(), 42);
        sets.apply(&mut bags);
        assert_eq!(bags[0].instances.iter().filter(|i| i.pseudo_label == 0).count(), table.bags[0].k_t);
    }

    proptest! {
        #[test]
        fn schedule_is_monotone_and_capped(n in 1usize..5000, k0 in 1usize..50, t in 0usize..10) {
            let k = kt_schedule(t, n, k0);
            prop_assert!(k >= 1 && k <= n);
            prop_assert!(k <= (n / 3).max(1));
            prop_assert!(kt_schedule(t + 1, n, k0) >= k);
        }

        #[test]
        fn rescaling_attention_keeps_ranking(
            attention in prop::collection::vec(0.001f64..1.0, 1..40),
            probs in prop::collection::vec(0.0f64..1.0, 40),
            scale in 0.01f64..100.0,
        ) {
            let probs = &probs[..attention.len()];
            let scaled: Vec<f64> = attention.iter().map(|a| a * scale).collect();
            let a = descending_order(&scores_from(&attention, probs));
            let b = descending_order(&scores_from(&scaled, probs));
            let k = kt_schedule(0, attention.len(), 10);
            let mut top_a = a[..k].to_vec();
            let mut top_b = b[..k].to_vec();
            top_a.sort();
            top_b.sort();
            prop_assert_eq!(top_a, top_b);
        }
    }
}
