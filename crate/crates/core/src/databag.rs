//! Bags, instances, synthetic cohorts and their on-disk form.
//!
//! A cohort is stored as three sibling files sharing one stem:
//!
//! * `<stem>.emb` holds raw instance vectors: magic `HCFTEMB1`, u32 version,
//!   u32 dimension, u64 instance count, then little-endian f32 rows.
//! * `<stem>.manifest` holds one line per bag,
//!   `slide_id<TAB>bag_label<TAB>split<TAB>first_index<TAB>count`.
//! * `<stem>.truth` (optional) holds one little-endian i32 per instance,
//!   `-1` when unknown.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::ndmath::{dot, euclidean, Matrix};
use crate::rng;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"HCFTEMB1";
const EMBEDDING_VERSION: u32 = 1;

/// Pseudo label of an instance that has no positive assignment.
pub const UNASSIGNED: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split `{other}`"))),
        }
    }
}

/// How a synthetic instance was planted. Evaluation metadata only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Normal,
    /// Negative instance drawn near the given positive class.
    Mimic(usize),
    Tumor(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub slide_id: String,
    pub patch_index: usize,
    pub raw: Vec<f64>,
    pub embedding: Vec<f64>,
    pub pseudo_label: i32,
    /// Never read by any training path.
    pub truth_label: Option<usize>,
    pub origin: Option<Origin>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub slide_id: String,
    pub label: usize,
    pub instances: Vec<InstanceRecord>,
    pub split: Split,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Stacked embeddings, one row per instance.
    pub fn embedding_matrix(&self) -> Result<Matrix> {
        if self.instances.is_empty() {
            return Err(Error::Argument(format!("bag {} is empty", self.slide_id)));
        }
        let rows: Vec<&[f64]> = self.instances.iter().map(|i| i.embedding.as_slice()).collect();
        let m = Matrix::from_rows(&rows)?;
        if m.cols() == 0 {
            return Err(Error::Argument(format!("bag {} has no embeddings", self.slide_id)));
        }
        Ok(m)
    }

    pub fn raw_matrix(&self) -> Result<Matrix> {
        let rows: Vec<&[f64]> = self.instances.iter().map(|i| i.raw.as_slice()).collect();
        Matrix::from_rows(&rows)
    }
}

/// Address of one instance inside a cohort slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InstanceRef {
    pub bag: usize,
    pub instance: usize,
}

impl InstanceRef {
    pub fn new(bag: usize, instance: usize) -> Self {
        Self { bag, instance }
    }

    pub fn resolve<'a>(&self, bags: &'a [Bag]) -> &'a InstanceRecord {
        &bags[self.bag].instances[self.instance]
    }
}

/// Removes all evaluation-only metadata.
pub fn strip_truth(bags: &mut [Bag]) {
    for inst in bags.iter_mut().flat_map(|b| b.instances.iter_mut()) {
        inst.truth_label = None;
        inst.origin = None;
    }
}

pub fn bags_in(bags: &[Bag], split: Split) -> Vec<Bag> {
    bags.iter().filter(|b| b.split == split).cloned().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortSpec {
    pub n_classes: usize,
    pub bags_per_class: Vec<usize>,
    pub bag_size_range: (usize, usize),
    pub positive_fraction_range: (f64, f64),
    pub mimic_fraction_range: (f64, f64),
    pub raw_dim: usize,
    pub class_prototype_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_classes: 2,
            bags_per_class: vec![50, 50],
            bag_size_range: (50, 150),
            positive_fraction_range: (0.05, 0.3),
            mimic_fraction_range: (0.2, 0.2),
            raw_dim: 32,
            class_prototype_separation: 4.0,
            noise_sigma: 1.25,
            seed: 1,
        }
    }
}

/// Position of a mimic prototype along the normal-to-class displacement.
pub const MIMIC_OFFSET: f64 = 0.35;
/// Length of the orthogonal mimic jitter relative to the separation.
const MIMIC_JITTER: f64 = 0.3;

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Generation(m));
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.bags_per_class.len() != self.n_classes {
            return bad(format!(
                "bags_per_class has {} entries for {} classes",
                self.bags_per_class.len(),
                self.n_classes
            ));
        }
        let (lo, hi) = self.bag_size_range;
        if lo == 0 || lo > hi {
            return bad(format!("bag size range [{lo}, {hi}] is empty"));
        }
        for (name, (a, b)) in [
            ("positive fraction", self.positive_fraction_range),
            ("mimic fraction", self.mimic_fraction_range),
        ] {
            if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a > b {
                return bad(format!("{name} range [{a}, {b}] is not a subrange of [0, 1]"));
            }
        }
        if self.positive_fraction_range.0 * (lo as f64) < 1.0 {
            return bad(format!(
                "positive fraction {} times minimum bag size {lo} is below one instance",
                self.positive_fraction_range.0
            ));
        }
        if self.positive_fraction_range.1 + self.mimic_fraction_range.1 > 1.0 {
            return bad("positive and mimic fractions can exceed the bag".into());
        }
        if self.raw_dim < self.n_classes {
            return bad(format!(
                "raw dimension {} cannot hold {} orthogonal class directions",
                self.raw_dim, self.n_classes
            ));
        }
        if !(self.class_prototype_separation > 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("separation must be positive and noise non-negative".into());
        }
        Ok(())
    }
}

/// Gaussian prototypes behind a synthetic cohort.
#[derive(Debug, Clone)]
pub struct Prototypes {
    pub normal: Vec<f64>,
    /// Index `c - 1` holds positive class `c`.
    pub classes: Vec<Vec<f64>>,
    pub mimics: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut rng::Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let norm = dot(v, v).sqrt();
    for x in v.iter_mut() {
        *x /= norm;
    }
}

/// Gram-Schmidt against `basis`, then unit length.
fn orthonormal_draw(rng: &mut rng::Rng, d: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    loop {
        let mut v = gaussian(rng, d);
        for b in basis {
            let p = dot(&v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        if dot(&v, &v) > 1e-6 {
            normalize(&mut v);
            return v;
        }
    }
}

fn prototypes(spec: &CohortSpec, rng: &mut rng::Rng) -> Prototypes {
    let d = spec.raw_dim;
    let sep = spec.class_prototype_separation;
    let normal = gaussian(rng, d);
    let mut directions: Vec<Vec<f64>> = Vec::new();
    for _ in 1..spec.n_classes {
        let u = orthonormal_draw(rng, d, &directions);
        directions.push(u);
    }
    let mut classes = Vec::new();
    let mut mimics = Vec::new();
    for u in &directions {
        classes.push(normal.iter().zip(u).map(|(m, x)| m + sep * x).collect());
        let jitter = orthonormal_draw(rng, d, std::slice::from_ref(u));
        mimics.push(
            normal
                .iter()
                .zip(u)
                .zip(&jitter)
                .map(|((m, x), j)| m + MIMIC_OFFSET * sep * x + MIMIC_JITTER * sep * j)
                .collect(),
        );
    }
    Prototypes {
        normal,
        classes,
        mimics,
    }
}

/// Rounds through f32 so the cohort survives the f32 store unchanged.
fn draw_instance(rng: &mut rng::Rng, center: &[f64], sigma: f64) -> Vec<f64> {
    center
        .iter()
        .map(|&c| (c + sigma * rng.sample::<f64, _>(StandardNormal)) as f32 as f64)
        .collect()
}

pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<Bag>> {
    Ok(generate_cohort_with_prototypes(spec)?.0)
}

/// Generates a cohort in which every bag's label is the maximum of its
/// instances' truth labels, and returns the prototypes used.
pub fn generate_cohort_with_prototypes(spec: &CohortSpec) -> Result<(Vec<Bag>, Prototypes)> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, rng::streams::COHORT);
    let protos = prototypes(spec, &mut rng);

    for (c, (mimic, class)) in protos.mimics.iter().zip(&protos.classes).enumerate() {
        if euclidean(mimic, class) >= euclidean(&protos.normal, class) {
            return Err(Error::Generation(format!(
                "mimic prototype of class {} is not closer to it than the normal prototype",
                c + 1
            )));
        }
    }

    let n = spec.n_classes;
    let mut bags = Vec::new();
    let mut bag_no = 0usize;
    for (label, &count) in spec.bags_per_class.iter().enumerate() {
        for _ in 0..count {
            let size = rng.random_range(spec.bag_size_range.0..=spec.bag_size_range.1);
            let n_pos = if label > 0 {
                let (lo, hi) = spec.positive_fraction_range;
                let frac = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                ((frac * size as f64).round() as usize).max(1)
            } else {
                0
            };
            let (lo, hi) = spec.mimic_fraction_range;
            let mfrac = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let n_mimic = (mfrac * size as f64).round() as usize;
            if n_pos + n_mimic > size {
                return Err(Error::Generation(format!(
                    "bag of size {size} cannot hold {n_pos} positives and {n_mimic} mimics"
                )));
            }

            let mut origins = Vec::with_capacity(size);
            origins.extend(std::iter::repeat_n(Origin::Tumor(label), n_pos));
            for _ in 0..n_mimic {
                origins.push(Origin::Mimic(rng.random_range(1..n)));
            }
            origins.extend(std::iter::repeat_n(Origin::Normal, size - n_pos - n_mimic));
            origins.shuffle(&mut rng);

            let slide_id = format!("slide_{bag_no:04}");
            let instances = origins
                .into_iter()
                .enumerate()
                .map(|(k, origin)| {
                    let (center, truth) = match origin {
                        Origin::Normal => (&protos.normal, 0),
                        Origin::Mimic(c) => (&protos.mimics[c - 1], 0),
                        Origin::Tumor(c) => (&protos.classes[c - 1], c),
                    };
                    InstanceRecord {
                        slide_id: slide_id.clone(),
                        patch_index: k,
                        raw: draw_instance(&mut rng, center, spec.noise_sigma),
                        embedding: Vec::new(),
                        pseudo_label: UNASSIGNED,
                        truth_label: Some(truth),
                        origin: Some(origin),
                    }
                })
                .collect();
            bags.push(Bag {
                slide_id,
                label,
                instances,
                split: Split::Train,
            });
            bag_no += 1;
        }
    }

    verify_mimic_geometry(&bags, &protos)?;
    Ok((bags, protos))
}

/// Mimics must on average sit closer to their target class than normals do.
fn verify_mimic_geometry(bags: &[Bag], protos: &Prototypes) -> Result<()> {
    let normal: Vec<&[f64]> = bags
        .iter()
        .flat_map(|b| &b.instances)
        .filter(|i| i.origin == Some(Origin::Normal))
        .map(|i| i.raw.as_slice())
        .collect();
    for (idx, class) in protos.classes.iter().enumerate() {
        let mimic: Vec<&[f64]> = bags
            .iter()
            .flat_map(|b| &b.instances)
            .filter(|i| i.origin == Some(Origin::Mimic(idx + 1)))
            .map(|i| i.raw.as_slice())
            .collect();
        if mimic.is_empty() || normal.is_empty() {
            continue;
        }
        let mean = |xs: &[&[f64]]| xs.iter().map(|x| euclidean(x, class)).sum::<f64>() / xs.len() as f64;
        let (dm, dn) = (mean(&mimic), mean(&normal));
        if dm >= dn {
            return Err(Error::Generation(format!(
                "mimics of class {} average distance {dm:.4} is not below normals' {dn:.4}",
                idx + 1
            )));
        }
    }
    Ok(())
}

/// Stratified assignment of `train`/`val`/`test` by bag label.
///
/// `ratios` lists the train, val and (optionally) test shares.
pub fn split_cohort(bags: &mut [Bag], ratios: &[f64], seed: u64) -> Result<()> {
    if ratios.is_empty() || ratios.len() > 3 || ratios.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::Argument(format!("invalid split ratios {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("split ratios sum to {total}, not 1")));
    }
    const PARTS: [Split; 3] = [Split::Train, Split::Val, Split::Test];
    let active = ratios.iter().filter(|r| **r > 0.0).count();

    let mut rng = rng::stream(seed, rng::streams::SPLIT);
    let max_label = bags.iter().map(|b| b.label).max().unwrap_or(0);
    for label in 0..=max_label {
        let mut members: Vec<usize> = (0..bags.len()).filter(|&i| bags[i].label == label).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < active {
            return Err(Error::Stratification(format!(
                "class {label} has {} bags for {active} split parts",
                members.len()
            )));
        }
        members.shuffle(&mut rng);

        let m = members.len();
        let mut counts = Vec::with_capacity(ratios.len());
        let mut cum = 0.0;
        let mut prev = 0usize;
        for r in ratios {
            cum += r;
            let edge = ((cum * m as f64).round() as usize).min(m);
            counts.push(edge - prev.min(edge));
            prev = edge;
        }
        let assigned: usize = counts.iter().sum();
        counts[0] += m - assigned;
        // every active part receives at least one bag
        for i in 0..counts.len() {
            if ratios[i] > 0.0 && counts[i] == 0 {
                let donor = (0..counts.len()).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }

        let mut it = members.into_iter();
        for (part, &count) in PARTS.iter().zip(&counts) {
            for idx in it.by_ref().take(count) {
                bags[idx].split = *part;
            }
        }
    }
    Ok(())
}

/// The three files that hold one cohort.
#[derive(Debug, Clone)]
pub struct CohortPaths {
    pub embeddings: PathBuf,
    pub manifest: PathBuf,
    pub truth: PathBuf,
}

impl CohortPaths {
    pub fn new(stem: impl AsRef<Path>) -> Self {
        let stem = stem.as_ref();
        let with = |ext: &str| {
            let mut s = stem.as_os_str().to_owned();
            s.push(".");
            s.push(ext);
            PathBuf::from(s)
        };
        Self {
            embeddings: with("emb"),
            manifest: with("manifest"),
            truth: with("truth"),
        }
    }
}

/// Writes rows into the `HCFTEMB1` container. Values must be exactly
/// representable as f32.
pub fn write_embedding_store(path: &Path, dim: usize, rows: &[&[f64]]) -> Result<()> {
    let mut w = ByteWriter::new();
    w.bytes(EMBEDDING_MAGIC);
    w.u32(EMBEDDING_VERSION);
    w.u32(dim as u32);
    w.u64(rows.len() as u64);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(Error::dim("embedding store row", (i, dim), (i, row.len())));
        }
        for &v in row.iter() {
            let narrow = v as f32;
            if narrow as f64 != v {
                return Err(Error::Contract(format!(
                    "row {i} value {v:e} is not representable in the f32 store"
                )));
            }
            w.f32(narrow);
        }
    }
    w.write_to(path)
}

pub fn read_embedding_store(path: &Path) -> Result<(usize, Vec<Vec<f64>>)> {
    let buf = fs::read(path)?;
    let mut r = ByteReader::new(&buf);
    r.magic(EMBEDDING_MAGIC)?;
    r.version(EMBEDDING_VERSION)?;
    let dim = r.u32("dimension")? as usize;
    let count = r.u64("instance count")? as usize;
    let expected = (count as u128) * (dim as u128) * 4;
    if expected > r.remaining() as u128 {
        return Err(Error::format(
            r.offset() + r.remaining() as u64,
            format!("truncated store: {count} rows of dimension {dim} need {expected} payload bytes"),
        ));
    }
    let mut rows = Vec::with_capacity(count);
    for _ in 0..count {
        rows.push(r.f32_vec(dim, "row")?);
    }
    r.finish()?;
    Ok((dim, rows))
}

pub fn save_cohort(bags: &[Bag], stem: impl AsRef<Path>) -> Result<()> {
    let paths = CohortPaths::new(stem);
    let dim = bags
        .iter()
        .flat_map(|b| b.instances.first())
        .map(|i| i.raw.len())
        .next()
        .unwrap_or(0);
    let rows: Vec<&[f64]> = bags.iter().flat_map(|b| b.instances.iter().map(|i| i.raw.as_slice())).collect();
    write_embedding_store(&paths.embeddings, dim, &rows)?;

    let mut manifest = String::new();
    let mut first = 0usize;
    for bag in bags {
        if bag.slide_id.contains(['\t', '\n']) {
            return Err(Error::Contract(format!("slide id {:?} contains a separator", bag.slide_id)));
        }
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            bag.slide_id,
            bag.label,
            bag.split,
            first,
            bag.len()
        ));
        first += bag.len();
    }
    fs::write(&paths.manifest, manifest)?;

    let truth: Vec<i32> = bags
        .iter()
        .flat_map(|b| b.instances.iter().map(|i| i.truth_label.map_or(-1, |t| t as i32)))
        .collect();
    if truth.iter().any(|&t| t >= 0) {
        let mut w = ByteWriter::new();
        for t in truth {
            w.i32(t);
        }
        w.write_to(&paths.truth)?;
    } else if paths.truth.exists() {
        fs::remove_file(&paths.truth)?;
    }
    Ok(())
}

pub fn load_cohort(stem: impl AsRef<Path>) -> Result<Vec<Bag>> {
    let paths = CohortPaths::new(stem);
    let (_, rows) = read_embedding_store(&paths.embeddings)?;

    let truth = if paths.truth.exists() {
        let buf = fs::read(&paths.truth)?;
        let mut r = ByteReader::new(&buf);
        if buf.len() != rows.len() * 4 {
            return Err(Error::format(
                buf.len().min(rows.len() * 4) as u64,
                format!("truth file holds {} bytes for {} instances", buf.len(), rows.len()),
            ));
        }
        Some(r.i32_vec(rows.len(), "truth labels")?)
    } else {
        None
    };

    let text = fs::read_to_string(&paths.manifest)?;
    let mut bags = Vec::new();
    let mut expected_first = 0usize;
    let mut offset = 0u64;
    for line in text.lines() {
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |m: String| Error::format(line_offset, format!("manifest: {m}"));
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", fields.len())));
        }
        let label: usize = fields[1].parse().map_err(|_| bad(format!("bad label {:?}", fields[1])))?;
        let split: Split = fields[2].parse().map_err(|e: Error| bad(e.to_string()))?;
        let first: usize = fields[3].parse().map_err(|_| bad(format!("bad index {:?}", fields[3])))?;
        let count: usize = fields[4].parse().map_err(|_| bad(format!("bad count {:?}", fields[4])))?;
        if first != expected_first {
            return Err(bad(format!("first_index {first} does not follow previous bag ({expected_first})")));
        }
        if count == 0 {
            return Err(bad(format!("bag {} is empty", fields[0])));
        }
        if first + count > rows.len() {
            return Err(bad(format!("bag {} overruns the {} stored rows", fields[0], rows.len())));
        }
        expected_first = first + count;
        let slide_id = fields[0].to_string();
        let instances = (first..first + count)
            .enumerate()
            .map(|(k, idx)| {
                let t = truth.as_ref().map(|t| t[idx]).filter(|&t| t >= 0);
                InstanceRecord {
                    slide_id: slide_id.clone(),
                    patch_index: k,
                    raw: rows[idx].clone(),
                    embedding: Vec::new(),
                    pseudo_label: UNASSIGNED,
                    truth_label: t.map(|t| t as usize),
                    origin: None,
                }
            })
            .collect();
        bags.push(Bag {
            slide_id,
            label,
            instances,
            split,
        });
    }
    if expected_first != rows.len() {
        return Err(Error::format(
            offset,
            format!("manifest covers {expected_first} of {} stored rows", rows.len()),
        ));
    }
    Ok(bags)
}
