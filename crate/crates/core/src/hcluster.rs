//! Seeded K-means and per-class cluster classification.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndmath::{euclidean, squared_distance, Matrix};
use crate::rng;

pub const DEFAULT_RESTARTS: usize = 10;
pub const MAX_ITERATIONS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Matrix,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step of the winning run.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn n_clusters(&self) -> usize {
        self.centroids.rows()
    }

    pub fn nearest(&self, point: &[f64]) -> usize {
        nearest_centroid(&self.centroids, point).0
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters()];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Index and squared distance of the closest centroid; ties go to the lower index.
fn nearest_centroid(centroids: &Matrix, point: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.row_iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_seeds(points: &Matrix, k: usize, rng: &mut rng::Rng) -> Matrix {
    let m = points.rows();
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..m);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = points.row_iter().map(|p| squared_distance(p, points.row(first))).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = m - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..m)
        };
        centroids.row_mut(j).copy_from_slice(points.row(pick));
        for (i, p) in points.row_iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, centroids.row(j)));
        }
    }
    centroids
}

fn assign(points: &Matrix, centroids: &Matrix, assignment: &mut [usize]) -> (f64, bool) {
    let mut inertia = 0.0;
    let mut changed = false;
    for (i, p) in points.row_iter().enumerate() {
        let (j, d) = nearest_centroid(centroids, p);
        inertia += d;
        if assignment[i] != j {
            assignment[i] = j;
            changed = true;
        }
    }
    (inertia, changed)
}

/// Moves every centroid to the mean of its members. An empty cluster is
/// re-seeded at the point farthest from its own centroid.
fn update(points: &Matrix, centroids: &mut Matrix, assignment: &[usize]) {
    let k = centroids.rows();
    let d = points.cols();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (p, &j) in points.row_iter().zip(assignment) {
        counts[j] += 1;
        for (s, v) in sums.row_mut(j).iter_mut().zip(p) {
            *s += v;
        }
    }
    let mut taken: Vec<usize> = Vec::new();
    for j in 0..k {
        if counts[j] > 0 {
            let n = counts[j] as f64;
            for (c, s) in centroids.row_mut(j).iter_mut().zip(sums.row(j)) {
                *c = s / n;
            }
        }
    }
    for j in 0..k {
        if counts[j] == 0 {
            let mut far = (usize::MAX, -1.0);
            for (i, p) in points.row_iter().enumerate() {
                if taken.contains(&i) {
                    continue;
                }
                let dist = squared_distance(p, centroids.row(assignment[i]));
                if dist > far.1 {
                    far = (i, dist);
                }
            }
            if far.0 != usize::MAX {
                taken.push(far.0);
                centroids.row_mut(j).copy_from_slice(points.row(far.0));
            }
        }
    }
}

fn lloyd(points: &Matrix, mut centroids: Matrix) -> ClusterModel {
    let mut assignment = vec![usize::MAX; points.rows()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut inertia = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        iterations += 1;
        let (value, changed) = assign(points, &centroids, &mut assignment);
        inertia = value;
        trace.push(value);
        if !changed {
            break;
        }
        update(points, &mut centroids, &assignment);
    }
    ClusterModel {
        centroids,
        assignment,
        inertia,
        inertia_trace: trace,
        iterations,
    }
}

/// Lloyd's algorithm from k-means++ seeds, keeping the lowest-inertia of
/// `restarts` runs.
pub fn kmeans(points: &Matrix, clusters: usize, seed: u64, restarts: usize) -> Result<ClusterModel> {
    if clusters == 0 {
        return Err(Error::Argument("K-means needs at least one cluster".into()));
    }
    if points.rows() < clusters {
        return Err(Error::Argument(format!(
            "K-means over {} points cannot form {clusters} clusters",
            points.rows()
        )));
    }
    if !points.is_finite() {
        return Err(Error::Contract("K-means input contains non-finite values".into()));
    }
    let mut rng = rng::stream(seed, 0);
    let mut best: Option<ClusterModel> = None;
    for _ in 0..restarts.max(1) {
        let run = lloyd(points, plus_plus_seeds(points, clusters, &mut rng));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// `p_j`: share of labelled members of cluster `j` carrying `class`.
/// Unlabelled members (negative labels) are ignored; an unlabelled
/// cluster gets `None`.
pub fn class_fractions(clusters: &ClusterModel, labels: &[i32], class: usize) -> Vec<Option<f64>> {
    let k = clusters.n_clusters();
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for (&j, &l) in clusters.assignment.iter().zip(labels) {
        if l >= 0 {
            totals[j] += 1;
            if l as usize == class {
                hits[j] += 1;
            }
        }
    }
    hits.iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect()
}

/// Picks the clusters that stand for `class`: all clusters whose fraction
/// exceeds `theta`, or the single best cluster when none does.
pub fn classify_from_fractions(fractions: &[Option<f64>], theta: f64) -> Vec<usize> {
    let above: Vec<usize> = fractions
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_some_and(|p| p > theta))
        .map(|(j, _)| j)
        .collect();
    if !above.is_empty() {
        return above;
    }
    let mut best: Option<(usize, f64)> = None;
    for (j, p) in fractions.iter().enumerate() {
        if let Some(p) = *p {
            if best.is_none_or(|(_, b)| p > b) {
                best = Some((j, p));
            }
        }
    }
    match best {
        Some((j, p)) if p > 0.0 => vec![j],
        _ => vec![0],
    }
}

pub fn classify_clusters(clusters: &ClusterModel, labels: &[i32], class: usize, theta: f64) -> Result<Vec<usize>> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::Argument(format!("theta {theta} outside (0, 1]")));
    }
    if labels.len() != clusters.assignment.len() {
        return Err(Error::dim("classify_clusters", (labels.len(), 1), (clusters.assignment.len(), 1)));
    }
    Ok(classify_from_fractions(&class_fractions(clusters, labels, class), theta))
}

/// Cluster sets of every class plus the single owning class of each cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassClusterSets {
    /// `sets[a]` lists the clusters of class `a`; empty when no labelled
    /// instance carries `a`.
    pub sets: Vec<Vec<usize>>,
    /// `fractions[j][a]`, zero for unlabelled clusters.
    pub fractions: Vec<Vec<f64>>,
    /// Class owning each cluster. A cluster claimed by several classes goes
    /// to the one with the larger fraction (lower class on ties).
    pub owner: Vec<Option<usize>>,
}

impl ClassClusterSets {
    pub fn is_degenerate(&self) -> bool {
        let mut owners = self.owner.iter().flatten();
        match owners.next() {
            Some(first) => owners.all(|o| o == first),
            None => true,
        }
    }
}

pub fn classify_all(clusters: &ClusterModel, labels: &[i32], n_classes: usize, theta: f64) -> Result<ClassClusterSets> {
    let k = clusters.n_clusters();
    let mut sets = Vec::with_capacity(n_classes);
    let mut fractions = vec![vec![0.0; n_classes]; k];
    for a in 0..n_classes {
        let present = labels.iter().any(|&l| l == a as i32);
        let f = class_fractions(clusters, labels, a);
        for (j, p) in f.iter().enumerate() {
            fractions[j][a] = p.unwrap_or(0.0);
        }
        sets.push(if present {
            classify_clusters(clusters, labels, a, theta)?
        } else {
            Vec::new()
        });
    }
    let mut owner = vec![None; k];
    for (a, set) in sets.iter().enumerate() {
        for &j in set {
            owner[j] = match owner[j] {
                Some(prev) if fractions[j][prev] >= fractions[j][a] => Some(prev),
                _ => Some(a),
            };
        }
    }
    Ok(ClassClusterSets { sets, fractions, owner })
}

/// Distance from `h` to the nearest centroid among the clusters of one class.
pub fn distance_to_class(h: &[f64], class_set: &[usize], clusters: &ClusterModel) -> Result<f64> {
    if class_set.is_empty() {
        return Err(Error::Argument("distance to an empty cluster set".into()));
    }
    Ok(class_set
        .iter()
        .map(|&j| euclidean(h, clusters.centroids.row(j)))
        .fold(f64::INFINITY, f64::min))
}

/// Class whose cluster set lies closest to `h`, ignoring empty sets.
pub fn nearest_class(h: &[f64], sets: &ClassClusterSets, clusters: &ClusterModel) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (a, set) in sets.sets.iter().enumerate() {
        if set.is_empty() {
            continue;
        }
        let d = distance_to_class(h, set, clusters).expect("non-empty set");
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((a, d));
        }
    }
    best.map(|(a, _)| a)
}
