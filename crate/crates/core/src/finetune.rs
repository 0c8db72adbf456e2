//! Patch encoder: a single affine + tanh trunk producing the embeddings the
//! MIL model consumes, and a linear head over the `2n - 1` refined classes.

use std::path::Path;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::abmil::{argmax, glorot};
use crate::binio::{read_tensors, write_tensors};
use crate::databag::Bag;
use crate::error::{Error, Result};
use crate::ndmath::{activate, activation_backward, affine, affine_backward, dot, softmax, Activation, Matrix, Parameters};
use crate::optim::{Adam, EarlyStopping, Progress};
use crate::refine::PatchDataset;
use crate::rng;

pub const ENCODER_MAGIC: &[u8; 8] = b"HCFTENC1";

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub trunk_w: Matrix,
    pub trunk_b: Vec<f64>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

pub type EncoderGrads = EncoderModel;

impl Parameters for EncoderModel {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![self.trunk_w.as_slice(), &self.trunk_b, self.head_w.as_slice(), &self.head_b]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.trunk_w.as_mut_slice(),
            &mut self.trunk_b,
            self.head_w.as_mut_slice(),
            &mut self.head_b,
        ]
    }
}

impl EncoderModel {
    pub fn new(raw_dim: usize, embed_dim: usize, n_outputs: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, rng::streams::ENCODER_INIT);
        Self {
            trunk_w: glorot(&mut rng, raw_dim, embed_dim),
            trunk_b: vec![0.0; embed_dim],
            head_w: glorot(&mut rng, embed_dim, n_outputs),
            head_b: vec![0.0; n_outputs],
        }
    }

    /// Identity trunk and an all-zero head.
    pub fn identity(dim: usize, n_outputs: usize) -> Self {
        Self {
            trunk_w: Matrix::identity(dim),
            trunk_b: vec![0.0; dim],
            head_w: Matrix::zeros(dim, n_outputs),
            head_b: vec![0.0; n_outputs],
        }
    }

    /// Random trunk with orthonormal columns (orthonormal rows when the
    /// embedding is wider than the input) and a Glorot head.
    pub fn orthogonal(raw_dim: usize, embed_dim: usize, n_outputs: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, rng::streams::ENCODER_INIT);
        let (long, short) = (raw_dim.max(embed_dim), raw_dim.min(embed_dim));
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
        while basis.len() < short {
            let mut v: Vec<f64> = (0..long).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let mut trunk_w = Matrix::zeros(raw_dim, embed_dim);
        for (k, b) in basis.iter().enumerate() {
            for (i, &x) in b.iter().enumerate() {
                let (r, c) = if raw_dim >= embed_dim { (i, k) } else { (k, i) };
                trunk_w[(r, c)] = x;
            }
        }
        Self {
            trunk_w,
            trunk_b: vec![0.0; embed_dim],
            head_w: glorot(&mut rng, embed_dim, n_outputs),
            head_b: vec![0.0; n_outputs],
        }
    }

    /// Centres the trunk on the mean of `raw` and rescales it so the
    /// pre-activations have root-mean-square `target`, keeping tanh out of
    /// saturation.
    pub fn calibrate(&mut self, raw: &Matrix, target: f64) -> Result<()> {
        self.check_input(raw)?;
        if raw.rows() == 0 {
            return Ok(());
        }
        let n = raw.rows() as f64;
        let mean: Vec<f64> = (0..raw.cols()).map(|j| raw.row_iter().map(|r| r[j]).sum::<f64>() / n).collect();
        for (j, b) in self.trunk_b.iter_mut().enumerate() {
            *b = -mean.iter().enumerate().map(|(i, m)| m * self.trunk_w.row(i)[j]).sum::<f64>();
        }
        let pre = affine(raw, &self.trunk_w, &self.trunk_b)?;
        let rms = (pre.as_slice().iter().map(|v| v * v).sum::<f64>() / pre.as_slice().len() as f64).sqrt();
        if rms > 0.0 {
            let scale = target / rms;
            self.trunk_w.as_mut_slice().iter_mut().for_each(|w| *w *= scale);
            self.trunk_b.iter_mut().for_each(|b| *b *= scale);
        }
        Ok(())
    }

    pub fn raw_dim(&self) -> usize {
        self.trunk_w.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.trunk_w.cols()
    }

    pub fn n_outputs(&self) -> usize {
        self.head_w.cols()
    }

    /// Fresh head over `n_outputs` classes, keeping the trunk.
    pub fn with_new_head(&self, n_outputs: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, rng::streams::ENCODER_INIT);
        Self {
            trunk_w: self.trunk_w.clone(),
            trunk_b: self.trunk_b.clone(),
            head_w: glorot(&mut rng, self.embed_dim(), n_outputs),
            head_b: vec![0.0; n_outputs],
        }
    }

    fn check_input(&self, raw: &Matrix) -> Result<()> {
        if raw.cols() != self.raw_dim() {
            return Err(Error::dim("encoder input", raw.shape(), self.trunk_w.shape()));
        }
        Ok(())
    }

    pub fn embed(&self, raw: &Matrix) -> Result<Matrix> {
        self.check_input(raw)?;
        Ok(activate(&affine(raw, &self.trunk_w, &self.trunk_b)?, Activation::Tanh))
    }

    pub fn logits(&self, raw: &Matrix) -> Result<Matrix> {
        affine(&self.embed(raw)?, &self.head_w, &self.head_b)
    }

    /// Head probabilities, one row per input row.
    pub fn predict_proba(&self, raw: &Matrix) -> Result<Matrix> {
        Ok(activate(&self.logits(raw)?, Activation::SoftmaxRows))
    }

    /// Mean cross-entropy restricted to the classes flagged in `present`.
    pub fn loss(&self, raw: &Matrix, targets: &[usize], present: &[bool]) -> Result<f64> {
        Ok(masked_cross_entropy(&self.logits(raw)?, targets, present)?.0)
    }

    pub fn loss_and_grad(&self, raw: &Matrix, targets: &[usize], present: &[bool]) -> Result<(f64, EncoderGrads)> {
        self.check_input(raw)?;
        let pre = affine(raw, &self.trunk_w, &self.trunk_b)?;
        let emb = activate(&pre, Activation::Tanh);
        let logits = affine(&emb, &self.head_w, &self.head_b)?;
        let (loss, d_logits) = masked_cross_entropy(&logits, targets, present)?;
        let head = affine_backward(&emb, &self.head_w, &d_logits)?;
        let d_pre = activation_backward(Activation::Tanh, &pre, &emb, &head.input)?;
        let trunk = affine_backward(raw, &self.trunk_w, &d_pre)?;
        Ok((
            loss,
            EncoderModel {
                trunk_w: trunk.weight,
                trunk_b: trunk.bias,
                head_w: head.weight,
                head_b: head.bias,
            },
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (d, e, k) = (self.raw_dim(), self.embed_dim(), self.n_outputs());
        write_tensors(
            path,
            ENCODER_MAGIC,
            &[
                (d, e, self.trunk_w.as_slice()),
                (1, e, &self.trunk_b),
                (e, k, self.head_w.as_slice()),
                (1, k, &self.head_b),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t = read_tensors(path, ENCODER_MAGIC)?;
        if t.len() != 4 {
            return Err(Error::format(12, format!("expected 4 tensors, found {}", t.len())));
        }
        let mut it = t.into_iter();
        let mut next = || {
            let (r, c, d) = it.next().unwrap();
            Matrix::from_vec(r, c, d)
        };
        let model = EncoderModel {
            trunk_w: next()?,
            trunk_b: next()?.into_vec(),
            head_w: next()?,
            head_b: next()?.into_vec(),
        };
        let e = model.embed_dim();
        if model.trunk_b.len() != e || model.head_w.rows() != e || model.head_b.len() != model.n_outputs() {
            return Err(Error::format(12, "inconsistent encoder tensor shapes"));
        }
        Ok(model)
    }
}

/// Softmax cross-entropy over the `present` columns only; the other columns
/// get zero probability and zero gradient.
fn masked_cross_entropy(logits: &Matrix, targets: &[usize], present: &[bool]) -> Result<(f64, Matrix)> {
    if targets.len() != logits.rows() || present.len() != logits.cols() {
        return Err(Error::dim("masked_cross_entropy", logits.shape(), (targets.len(), present.len())));
    }
    if logits.rows() == 0 {
        return Err(Error::Contract("cross_entropy over zero rows".into()));
    }
    let n = logits.rows() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (r, &t) in targets.iter().enumerate() {
        if !present.get(t).copied().unwrap_or(false) {
            return Err(Error::Contract(format!("target {t} is not a present class")));
        }
        let row = logits.row(r);
        let max = row
            .iter()
            .zip(present)
            .filter(|(_, &p)| p)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().zip(present).filter(|(_, &p)| p).map(|(v, _)| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[t];
        let g = grad.row_mut(r);
        for (c, gc) in g.iter_mut().enumerate() {
            if present[c] {
                *gc = (row[c] - lse).exp() / n;
            }
        }
        g[t] -= 1.0 / n;
    }
    Ok(((loss / n).max(0.0), grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for EncoderHyper {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            batch_size: 64,
            max_epochs: 200,
            patience: 20,
            val_fraction: 0.2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EncoderHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub best_epoch: usize,
    pub warnings: Vec<String>,
}

/// Per-label shuffle, then the first `round(fraction · count)` of each label
/// go to validation. Labels with a single entry stay in training.
fn stratified_split(labels: &[usize], n_labels: usize, fraction: f64, rng: &mut rng::Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..n_labels {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(rng);
        let take = if members.len() < 2 {
            0
        } else {
            ((members.len() as f64 * fraction).round() as usize).clamp(1, members.len() - 1)
        };
        val.extend_from_slice(&members[..take]);
        train.extend_from_slice(&members[take..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn rows_of(raw: &[&[f64]], idx: &[usize]) -> Result<Matrix> {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| raw[i]).collect();
    Matrix::from_rows(&rows)
}

fn accuracy(model: &EncoderModel, x: &Matrix, y: &[usize], present: &[bool]) -> Result<f64> {
    let logits = model.logits(x)?;
    let correct = logits
        .row_iter()
        .zip(y)
        .filter(|(row, &t)| {
            let masked: Vec<f64> = row
                .iter()
                .zip(present)
                .map(|(&v, &p)| if p { v } else { f64::NEG_INFINITY })
                .collect();
            argmax(&masked) == t
        })
        .count();
    Ok(correct as f64 / y.len() as f64)
}

/// Mini-batch Adam on the refined patch dataset with validation-loss early
/// stopping; returns the best-validation snapshot. Reads raw vectors and the
/// dataset labels only.
pub fn train_encoder(
    encoder: &EncoderModel,
    bags: &[Bag],
    dataset: &PatchDataset,
    hyper: &EncoderHyper,
    seed: u64,
) -> Result<(EncoderModel, EncoderHistory)> {
    if dataset.is_empty() {
        return Err(Error::Argument("patch dataset is empty".into()));
    }
    if encoder.n_outputs() != dataset.n_outputs() {
        return Err(Error::dim(
            "encoder head",
            (encoder.embed_dim(), encoder.n_outputs()),
            (encoder.embed_dim(), dataset.n_outputs()),
        ));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    let mut history = EncoderHistory::default();
    if hyper.max_epochs == 0 {
        return Ok((encoder.clone(), history));
    }

    let raw: Vec<&[f64]> = dataset.entries.iter().map(|e| e.instance.resolve(bags).raw.as_slice()).collect();
    let labels: Vec<usize> = dataset.entries.iter().map(|e| e.label).collect();
    let mut present = vec![false; dataset.n_outputs()];
    for &l in &labels {
        present[l] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        let msg = "patch dataset has a single class; encoder training is degenerate".to_string();
        warn!("{msg}");
        history.warnings.push(msg);
    }

    let mut rng = rng::stream(seed, rng::streams::ENCODER_TRAIN);
    let (mut train_idx, mut val_idx) = stratified_split(&labels, dataset.n_outputs(), hyper.val_fraction, &mut rng);
    if val_idx.is_empty() {
        let msg = "patch dataset too small for a validation split; validating on training entries".to_string();
        warn!("{msg}");
        history.warnings.push(msg);
        val_idx = train_idx.clone();
    }
    let val_x = rows_of(&raw, &val_idx)?;
    let val_y: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();

    let mut current = encoder.clone();
    let mut best = encoder.clone();
    let mut adam = Adam::new(current.param_count(), hyper.beta1, hyper.beta2, hyper.eps);
    let mut stopper = EarlyStopping::new(hyper.patience);

    for epoch in 0..hyper.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train_idx.chunks(hyper.batch_size) {
            let x = rows_of(&raw, batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = current.loss_and_grad(&x, &y, &present)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Training {
                    epoch,
                    message: "non-finite encoder loss or gradient".into(),
                });
            }
            epoch_loss += loss * batch.len() as f64;
            adam.step(&mut current, &grads, hyper.lr);
        }
        let val_loss = current.loss(&val_x, &val_y, &present)?;
        if !val_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                message: "non-finite encoder validation loss".into(),
            });
        }
        history.train_loss.push(epoch_loss / train_idx.len() as f64);
        history.val_loss.push(val_loss);
        history.val_accuracy.push(accuracy(&current, &val_x, &val_y, &present)?);
        match stopper.observe(val_loss) {
            Progress::Improved => {
                best = current.clone();
                history.best_epoch = epoch;
            }
            Progress::Stalled => {}
            Progress::Stop => {
                debug!("encoder early stop at epoch {epoch}, best {}", history.best_epoch);
                break;
            }
        }
    }
    Ok((best, history))
}

/// Replaces every instance embedding with the trunk output of its raw vector.
pub fn reextract(encoder: &EncoderModel, bags: &mut [Bag]) -> Result<()> {
    for bag in bags.iter_mut() {
        if bag.is_empty() {
            continue;
        }
        let emb = encoder.embed(&bag.raw_matrix()?)?;
        for (inst, row) in bag.instances.iter_mut().zip(emb.row_iter()) {
            inst.embedding = row.to_vec();
        }
    }
    Ok(())
}

/// Head probabilities over the `2n - 1` refined classes for one raw vector.
pub fn patch_predict(encoder: &EncoderModel, raw: &[f64]) -> Result<Vec<f64>> {
    let x = Matrix::from_vec(1, raw.len(), raw.to_vec())?;
    Ok(softmax(encoder.logits(&x)?.row(0)))
}

/// Folds hard-negative mass into class 0, giving `n` probabilities.
pub fn collapse_hard_negatives(probs: &[f64], n_classes: usize) -> Vec<f64> {
    let mut out = probs[..n_classes].to_vec();
    out[0] += probs[n_classes..].iter().sum::<f64>();
    out
}

/// Sum of the positive-class probabilities.
pub fn tumor_score(probs: &[f64], n_classes: usize) -> f64 {
    probs[1..n_classes].iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::databag::{InstanceRecord, InstanceRef, Split, UNASSIGNED};
    use crate::ndmath::grad_check;
    use crate::refine::{PatchEntry, Source};

    fn random_matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut rng = rng::stream(seed, 77);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    #[test]
    fn orthogonal_trunk_has_orthonormal_short_side() {
        for (raw, emb) in [(8, 5), (5, 8), (6, 6)] {
            let enc = EncoderModel::orthogonal(raw, emb, 3, 4);
            let w = &enc.trunk_w;
            let gram = if raw >= emb { w.t_matmul(w).unwrap() } else { w.matmul_t(w).unwrap() };
            let eye = Matrix::identity(raw.min(emb));
            for (a, b) in gram.as_slice().iter().zip(eye.as_slice()) {
                assert!((a - b).abs() < 1e-12, "{raw}x{emb}: {a} vs {b}");
            }
            assert_eq!(enc, EncoderModel::orthogonal(raw, emb, 3, 4));
        }
    }

    #[test]
    fn calibrate_centres_and_scales_preactivations() {
        let mut enc = EncoderModel::orthogonal(5, 4, 3, 1);
        let raw = random_matrix(3, 40, 5).map(|v| 3.0 * v + 2.0);
        enc.calibrate(&raw, 0.7).unwrap();
        let pre = affine(&raw, &enc.trunk_w, &enc.trunk_b).unwrap();
        for m in pre.column_sums() {
            assert!(m.abs() < 1e-9, "column mean {m}");
        }
        let rms = (pre.as_slice().iter().map(|v| v * v).sum::<f64>() / pre.as_slice().len() as f64).sqrt();
        assert!((rms - 0.7).abs() < 1e-12);
        assert!(enc.calibrate(&Matrix::zeros(2, 3), 1.0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let model = EncoderModel::new(5, 4, 3, seed);
            let x = random_matrix(seed, 6, 5);
            let targets = [0, 2, 1, 2, 0, 0];
            let present = [true, true, true];
            let err = grad_check(
                |theta| {
                    let mut m = model.clone();
                    m.load_flat(theta).unwrap();
                    let (l, g) = m.loss_and_grad(&x, &targets, &present).unwrap();
                    (l, g.flatten())
                },
                &model.flatten(),
                1e-5,
            );
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn masked_gradient_matches_finite_differences() {
        let model = EncoderModel::new(3, 3, 3, 9);
        let x = random_matrix(2, 4, 3);
        let present = [true, false, true];
        let targets = [0, 2, 2, 0];
        let err = grad_check(
            |theta| {
                let mut m = model.clone();
                m.load_flat(theta).unwrap();
                let (l, g) = m.loss_and_grad(&x, &targets, &present).unwrap();
                (l, g.flatten())
            },
            &model.flatten(),
            1e-5,
        );
        assert!(err < 1e-4, "relative error {err}");
        let (_, g) = model.loss_and_grad(&x, &targets, &present).unwrap();
        assert!(g.head_b[1] == 0.0);
        assert!(model.loss_and_grad(&x, &[1, 0, 0, 0], &present).is_err());
    }

    #[test]
    fn identity_trunk_gives_tanh() {
        let enc = EncoderModel::identity(3, 3);
        let x = Matrix::from_rows(&[[0.5, -1.0, 2.0]]).unwrap();
        let e = enc.embed(&x).unwrap();
        for (a, b) in e.row(0).iter().zip([0.5f64, -1.0, 2.0]) {
            assert_eq!(*a, b.tanh());
        }
        let p = patch_predict(&enc, &[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(p, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn collapse_and_score() {
        let p = [0.1, 0.3, 0.2, 0.15, 0.25];
        let c = collapse_hard_negatives(&p, 3);
        assert!((c[0] - 0.5).abs() < 1e-15);
        assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((tumor_score(&p, 3) - 0.5).abs() < 1e-15);
    }

    fn separable() -> (Vec<Bag>, PatchDataset) {
        let mut rng = rng::stream(5, 0);
        let centers = [[2.0, 0.0, 0.0, 0.0], [0.0, 2.0, 0.0, 0.0], [0.0, 0.0, 2.0, 0.0]];
        let mut instances = Vec::new();
        let mut entries = Vec::new();
        for k in 0..150 {
            let c = k % 3;
            let raw: Vec<f64> = centers[c].iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
            instances.push(InstanceRecord {
                slide_id: "s".into(),
                patch_index: k,
                raw,
                embedding: vec![],
                pseudo_label: UNASSIGNED,
                truth_label: None,
                origin: None,
            });
            // class 2 is a hard negative; it sits in the negative bag
            entries.push((k, c));
        }
        let bags = vec![
            Bag {
                slide_id: "s".into(),
                label: 1,
                split: Split::Train,
                instances: instances.clone(),
            },
            Bag {
                slide_id: "t".into(),
                label: 0,
                split: Split::Train,
                instances,
            },
        ];
        let ds = PatchDataset {
            n_classes: 2,
            entries: entries
                .into_iter()
                .map(|(k, c)| PatchEntry {
                    instance: InstanceRef::new(if c == 1 { 0 } else { 1 }, k),
                    label: c,
                    source: if c == 2 { Source::HardNegativeFromLow } else { Source::Positive },
                })
                .collect(),
            warnings: vec![],
        };
        (bags, ds)
    }

    #[test]
    fn learns_separable_dataset() {
        let (bags, ds) = separable();
        let enc = EncoderModel::new(4, 4, 3, 1);
        let hyper = EncoderHyper {
            lr: 1e-2,
            ..EncoderHyper::default()
        };
        let (trained, hist) = train_encoder(&enc, &bags, &ds, &hyper, 3).unwrap();
        assert!(hist.val_accuracy[hist.best_epoch] >= 0.95, "{:?}", hist.val_accuracy);
        let (again, _) = train_encoder(&enc, &bags, &ds, &hyper, 3).unwrap();
        assert_eq!(trained, again);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (bags, ds) = separable();
        let enc = EncoderModel::new(4, 4, 3, 1);
        let hyper = EncoderHyper {
            max_epochs: 0,
            ..EncoderHyper::default()
        };
        assert_eq!(train_encoder(&enc, &bags, &ds, &hyper, 3).unwrap().0, enc);
    }

    #[test]
    fn stratified_split_keeps_every_class() {
        let labels: Vec<usize> = (0..50).map(|i| i % 3).chain([4]).collect();
        let (train, val) = stratified_split(&labels, 5, 0.2, &mut rng::stream(1, 0));
        assert_eq!(train.len() + val.len(), labels.len());
        for c in 0..3 {
            assert!(val.iter().any(|&i| labels[i] == c));
        }
        assert!(train.iter().any(|&i| labels[i] == 4));
    }

    #[test]
    fn reextract_only_touches_embeddings_and_is_idempotent() {
        let (mut bags, _) = separable();
        let before = bags.clone();
        let enc = EncoderModel::new(4, 2, 3, 8);
        reextract(&enc, &mut bags).unwrap();
        let once = bags.clone();
        reextract(&enc, &mut bags).unwrap();
        assert_eq!(bags, once);
        for (a, b) in bags.iter().zip(&before) {
            assert_eq!(a.label, b.label);
            for (x, y) in a.instances.iter().zip(&b.instances) {
                assert_eq!(x.raw, y.raw);
                assert_eq!(x.embedding.len(), 2);
            }
        }
        let wrong = EncoderModel::new(5, 2, 3, 8);
        assert!(matches!(reextract(&wrong, &mut bags), Err(Error::Dimension { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let enc = EncoderModel::new(6, 3, 5, 2);
        enc.save(&path).unwrap();
        assert_eq!(EncoderModel::load(&path).unwrap(), enc);
        assert!(crate::abmil::MilModel::load(&path).is_err());
    }
}
