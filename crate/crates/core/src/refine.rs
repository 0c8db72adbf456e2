//! Two-pass heuristic clustering that turns confidence-split instances into
//! the refined `2n - 1` class patch dataset.
//!
//! 1. K-means over the high-confidence set; each class gets the clusters it
//!    dominates.
//! 2. Low-confidence instances whose nearest class outranks their bag label
//!    cannot be positives of that class, so they become potential negatives.
//! 3. K-means again over the high set plus the potential negatives. Potential
//!    negatives in clusters of a class `≤ Y` are dropped, high-confidence
//!    instances in clusters of a class `> Y` turn into hard negatives, and
//!    high-confidence instances outside their own class's clusters are
//!    removed.
//!
//! Hard negatives mimicking positive class `c` carry label `n + c - 1`.

use std::collections::HashSet;
use std::fmt;

use log::warn;

use crate::confidence::SplitSets;
use crate::databag::{Bag, InstanceRef};
use crate::error::{Error, Result};
use crate::hcluster::{classify_all, kmeans, nearest_class, ClassClusterSets, ClusterModel};
use crate::ndmath::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub n_classes: usize,
    pub clusters: usize,
    pub theta: f64,
    pub restarts: usize,
}

impl RefineConfig {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            clusters: 5,
            theta: 0.5,
            restarts: crate::hcluster::DEFAULT_RESTARTS,
        }
    }
}

/// Label of the hard negative class mimicking positive class `class`.
pub fn hard_negative_label(n_classes: usize, class: usize) -> usize {
    debug_assert!(class >= 1 && class < n_classes);
    n_classes + class - 1
}

/// A negative instance assigned to the class it resembles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Candidate {
    pub instance: InstanceRef,
    pub mimicked: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Positive,
    HardNegativeFromLow,
    HardNegativeFromHigh,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Positive => "pos",
            Source::HardNegativeFromLow => "hardneg_from_Tl",
            Source::HardNegativeFromHigh => "hardneg_from_Th",
        })
    }
}

/// Everything produced along the way, kept for auditing.
#[derive(Debug, Clone)]
pub struct RefinementState {
    pub high: Vec<(InstanceRef, usize)>,
    pub low: Vec<InstanceRef>,
    pub first_clusters: ClusterModel,
    pub first_sets: ClassClusterSets,
    pub original: Vec<Candidate>,
    pub second_clusters: ClusterModel,
    pub second_sets: ClassClusterSets,
    pub middle_low: Vec<Candidate>,
    pub middle_high: Vec<Candidate>,
    pub cleaned_high: Vec<(InstanceRef, usize)>,
    pub warnings: Vec<String>,
}

impl RefinementState {
    /// `middle_high` followed by `middle_low`.
    pub fn final_negatives(&self) -> Vec<(Candidate, Source)> {
        self.middle_high
            .iter()
            .map(|c| (*c, Source::HardNegativeFromHigh))
            .chain(self.middle_low.iter().map(|c| (*c, Source::HardNegativeFromLow)))
            .collect()
    }
}

fn embeddings_of(bags: &[Bag], refs: impl Iterator<Item = InstanceRef>) -> Result<Matrix> {
    let rows: Vec<&[f64]> = refs.map(|r| r.resolve(bags).embedding.as_slice()).collect();
    Matrix::from_rows(&rows)
}

/// K-means over the given points with `clusters` capped at the point count.
fn cluster_and_classify(
    points: &Matrix,
    labels: &[i32],
    cfg: &RefineConfig,
    seed: u64,
    warnings: &mut Vec<String>,
) -> Result<(ClusterModel, ClassClusterSets)> {
    let k = cfg.clusters.min(points.rows());
    if k < cfg.clusters {
        warnings.push(format!(
            "only {} points available, clustering into {k} instead of {} clusters",
            points.rows(),
            cfg.clusters
        ));
    }
    let clusters = kmeans(points, k, seed, cfg.restarts)?;
    let sets = classify_all(&clusters, labels, cfg.n_classes, cfg.theta)?;
    Ok((clusters, sets))
}

/// First clustering over the high-confidence set.
pub fn first_clustering(
    bags: &[Bag],
    high: &[(InstanceRef, usize)],
    cfg: &RefineConfig,
    seed: u64,
) -> Result<(ClusterModel, ClassClusterSets, Vec<String>)> {
    if high.is_empty() {
        return Err(Error::Argument("high-confidence set is empty".into()));
    }
    let points = embeddings_of(bags, high.iter().map(|(r, _)| *r))?;
    let labels: Vec<i32> = high.iter().map(|(_, l)| *l as i32).collect();
    let mut warnings = Vec::new();
    let (clusters, sets) = cluster_and_classify(&points, &labels, cfg, seed, &mut warnings)?;
    Ok((clusters, sets, warnings))
}

/// Low-confidence instances whose nearest class outranks their bag label.
pub fn mine_potential_negatives(
    bags: &[Bag],
    low: &[InstanceRef],
    sets: &ClassClusterSets,
    clusters: &ClusterModel,
) -> Vec<Candidate> {
    low.iter()
        .filter_map(|&r| {
            let inst = r.resolve(bags);
            let nearest = nearest_class(&inst.embedding, sets, clusters)?;
            (nearest > bags[r.bag].label).then_some(Candidate {
                instance: r,
                mimicked: nearest,
            })
        })
        .collect()
}

pub struct Refined {
    pub clusters: ClusterModel,
    pub sets: ClassClusterSets,
    pub middle_low: Vec<Candidate>,
    pub middle_high: Vec<Candidate>,
    pub cleaned_high: Vec<(InstanceRef, usize)>,
    pub warnings: Vec<String>,
}

/// Re-clusters the high set together with the potential negatives and
/// applies hard-negative searching and positive cleaning.
pub fn refine_labels(
    bags: &[Bag],
    high: &[(InstanceRef, usize)],
    original: &[Candidate],
    cfg: &RefineConfig,
    seed: u64,
) -> Result<Refined> {
    if high.is_empty() && original.is_empty() {
        return Err(Error::Argument("nothing to refine".into()));
    }
    let refs = high.iter().map(|(r, _)| *r).chain(original.iter().map(|c| c.instance));
    let points = embeddings_of(bags, refs)?;
    let labels: Vec<i32> = high
        .iter()
        .map(|(_, l)| *l as i32)
        .chain(original.iter().map(|c| c.mimicked as i32))
        .collect();
    let mut warnings = Vec::new();
    let (clusters, sets) = cluster_and_classify(&points, &labels, cfg, seed, &mut warnings)?;
    if sets.is_degenerate() {
        let msg = "second clustering assigned every cluster to one class".to_string();
        warn!("{msg}");
        warnings.push(msg);
    }

    let owner_of = |point: usize| sets.owner[clusters.assignment[point]];

    let mut cleaned_high = Vec::new();
    let mut middle_high = Vec::new();
    for (i, &(r, label)) in high.iter().enumerate() {
        let bag_label = bags[r.bag].label;
        match owner_of(i) {
            Some(j) if j == label && label == bag_label => cleaned_high.push((r, label)),
            Some(j) if j > bag_label => middle_high.push(Candidate {
                instance: r,
                mimicked: j,
            }),
            _ => {}
        }
    }

    let mut middle_low = Vec::new();
    for (i, c) in original.iter().enumerate() {
        let bag_label = bags[c.instance.bag].label;
        match owner_of(high.len() + i) {
            Some(j) if j <= bag_label => {}
            Some(j) => middle_low.push(Candidate {
                instance: c.instance,
                mimicked: j,
            }),
            None => middle_low.push(*c),
        }
    }

    Ok(Refined {
        clusters,
        sets,
        middle_low,
        middle_high,
        cleaned_high,
        warnings,
    })
}

/// Runs both clustering passes on a confidence split.
pub fn refine(bags: &[Bag], split: &SplitSets, cfg: &RefineConfig, seeds: (u64, u64)) -> Result<RefinementState> {
    let (first_clusters, first_sets, mut warnings) = first_clustering(bags, &split.high, cfg, seeds.0)?;
    let original = mine_potential_negatives(bags, &split.low, &first_sets, &first_clusters);
    let refined = refine_labels(bags, &split.high, &original, cfg, seeds.1)?;
    warnings.extend(refined.warnings);
    Ok(RefinementState {
        high: split.high.clone(),
        low: split.low.clone(),
        first_clusters,
        first_sets,
        original,
        second_clusters: refined.clusters,
        second_sets: refined.sets,
        middle_low: refined.middle_low,
        middle_high: refined.middle_high,
        cleaned_high: refined.cleaned_high,
        warnings,
    })
}

/// Checks the subset chain of a refinement and the label ordering rule.
pub fn check_invariants(state: &RefinementState, bags: &[Bag]) -> Result<()> {
    let low: HashSet<InstanceRef> = state.low.iter().copied().collect();
    let high: HashSet<InstanceRef> = state.high.iter().map(|(r, _)| *r).collect();
    let original: HashSet<InstanceRef> = state.original.iter().map(|c| c.instance).collect();
    let fail = |m: &str| Err(Error::Contract(format!("refinement invariant violated: {m}")));

    if !low.is_disjoint(&high) {
        return fail("high and low sets overlap");
    }
    if !original.is_subset(&low) {
        return fail("potential negatives outside the low set");
    }
    if !state.middle_low.iter().all(|c| original.contains(&c.instance)) {
        return fail("low-side hard negatives outside the potential negatives");
    }
    if !state.middle_high.iter().all(|c| high.contains(&c.instance)) {
        return fail("high-side hard negatives outside the high set");
    }
    if !state.cleaned_high.iter().all(|(r, _)| high.contains(r)) {
        return fail("cleaned positives outside the high set");
    }
    let finals: HashSet<InstanceRef> = state.final_negatives().iter().map(|(c, _)| c.instance).collect();
    if state.cleaned_high.iter().any(|(r, _)| finals.contains(r)) {
        return fail("cleaned positives overlap the final hard negatives");
    }
    for (r, label) in &state.cleaned_high {
        if *label != bags[r.bag].label {
            return fail("positive label differs from its bag label");
        }
    }
    for (c, _) in state.final_negatives() {
        if c.mimicked <= bags[c.instance.bag].label {
            return fail("hard negative mimics a class not above its bag label");
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchEntry {
    pub instance: InstanceRef,
    pub label: usize,
    pub source: Source,
}

/// Refined patch-level training set over `2n - 1` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    pub n_classes: usize,
    pub entries: Vec<PatchEntry>,
    pub warnings: Vec<String>,
}

impl PatchDataset {
    pub fn n_outputs(&self) -> usize {
        2 * self.n_classes - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_outputs()];
        for e in &self.entries {
            h[e.label] += 1;
        }
        h
    }

    /// Dataset rows as `slide_id,patch_index,label,source`.
    pub fn to_csv(&self, bags: &[Bag]) -> String {
        let mut out = String::from("slide_id,patch_index,label,source\n");
        for e in &self.entries {
            let inst = e.instance.resolve(bags);
            out.push_str(&format!("{},{},{},{}\n", inst.slide_id, inst.patch_index, e.label, e.source));
        }
        out
    }

    /// Parses [`Self::to_csv`] output against the bags it was written for.
    pub fn from_csv(text: &str, bags: &[Bag], n_classes: usize) -> Result<Self> {
        let index: std::collections::HashMap<(&str, usize), InstanceRef> = bags
            .iter()
            .enumerate()
            .flat_map(|(b, bag)| {
                bag.instances
                    .iter()
                    .enumerate()
                    .map(move |(i, inst)| ((inst.slide_id.as_str(), inst.patch_index), InstanceRef::new(b, i)))
            })
            .collect();
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for (no, line) in text.lines().enumerate() {
            let at = offset;
            offset += line.len() as u64 + 1;
            if no == 0 || line.trim().is_empty() {
                continue;
            }
            let bad = |m: String| Error::format(at, format!("patch dataset line {}: {m}", no + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", f.len())));
            }
            let patch: usize = f[1].parse().map_err(|_| bad(format!("bad patch index {:?}", f[1])))?;
            let label: usize = f[2].parse().map_err(|_| bad(format!("bad label {:?}", f[2])))?;
            let source = match f[3] {
                "pos" => Source::Positive,
                "hardneg_from_Tl" => Source::HardNegativeFromLow,
                "hardneg_from_Th" => Source::HardNegativeFromHigh,
                other => return Err(bad(format!("unknown source {other:?}"))),
            };
            let instance = *index
                .get(&(f[0], patch))
                .ok_or_else(|| bad(format!("unknown instance {}:{patch}", f[0])))?;
            entries.push(PatchEntry {
                instance,
                label,
                source,
            });
        }
        let ds = PatchDataset {
            n_classes,
            entries,
            warnings: Vec::new(),
        };
        ds.validate(bags)?;
        Ok(ds)
    }

    /// Label range, uniqueness and ordering checks.
    pub fn validate(&self, bags: &[Bag]) -> Result<()> {
        let n = self.n_classes;
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.instance) {
                return Err(Error::Contract(format!("instance {:?} appears twice", e.instance)));
            }
            if e.label >= self.n_outputs() {
                return Err(Error::Contract(format!("label {} outside {} classes", e.label, self.n_outputs())));
            }
            let bag_label = bags[e.instance.bag].label;
            if e.label < n {
                if e.label > bag_label {
                    return Err(Error::Contract(format!(
                        "positive label {} exceeds bag label {bag_label}",
                        e.label
                    )));
                }
            } else if e.label - n + 1 <= bag_label {
                return Err(Error::Contract(format!(
                    "hard negative label {} mimics a class not above bag label {bag_label}",
                    e.label
                )));
            }
        }
        Ok(())
    }
}

pub fn build_patch_dataset(
    bags: &[Bag],
    cleaned_high: &[(InstanceRef, usize)],
    final_negatives: &[(Candidate, Source)],
    n_classes: usize,
) -> Result<PatchDataset> {
    let mut entries: Vec<PatchEntry> = cleaned_high
        .iter()
        .map(|&(instance, label)| PatchEntry {
            instance,
            label,
            source: Source::Positive,
        })
        .collect();
    for &(c, source) in final_negatives {
        if c.mimicked == 0 || c.mimicked >= n_classes {
            return Err(Error::Contract(format!("cannot mimic class {}", c.mimicked)));
        }
        entries.push(PatchEntry {
            instance: c.instance,
            label: hard_negative_label(n_classes, c.mimicked),
            source,
        });
    }
    let mut ds = PatchDataset {
        n_classes,
        entries,
        warnings: Vec::new(),
    };
    ds.validate(bags)?;
    for (label, count) in ds.histogram().into_iter().enumerate() {
        if count == 0 {
            let msg = format!("patch dataset has no entries for class {label}");
            warn!("{msg}");
            ds.warnings.push(msg);
        }
    }
    Ok(ds)
}
