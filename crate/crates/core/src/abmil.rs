//! Gated-attention MIL aggregator with an MLP bag classifier.
//!
//! For a bag of embeddings `h_k` the attention logit is
//! `wᵀ(tanh(V1ᵀh_k) ⊙ sigm(V2ᵀh_k))`, softmaxed over the bag. The bag
//! embedding `H = Σ a_k h_k` feeds the classifier `Γ` (affine, relu,
//! affine). The same classifier applied to a single `h_k` gives that
//! instance's class probabilities.

use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::binio::{read_tensors, write_tensors};
use crate::databag::Bag;
use crate::error::{Error, Result};
use crate::ndmath::{
    activate, activation_backward, affine, affine_backward, cross_entropy, dot, softmax, Activation,
    Matrix, Parameters,
};
use crate::optim::{cosine_lr, Adam, EarlyStopping, Progress};
use crate::rng;

pub const MIL_MAGIC: &[u8; 8] = b"HCFTMIL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MilShape {
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
}

impl MilShape {
    pub fn new(embed_dim: usize, n_classes: usize) -> Self {
        Self {
            embed_dim,
            attn_dim: 8,
            hidden_dim: 16,
            n_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    pub v1: Matrix,
    pub v2: Matrix,
    pub w: Vec<f64>,
    pub hidden_w: Matrix,
    pub hidden_b: Vec<f64>,
    pub out_w: Matrix,
    pub out_b: Vec<f64>,
}

/// Gradients share the model's layout.
pub type MilGrads = MilModel;

impl Parameters for MilModel {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![
            self.v1.as_slice(),
            self.v2.as_slice(),
            &self.w,
            self.hidden_w.as_slice(),
            &self.hidden_b,
            self.out_w.as_slice(),
            &self.out_b,
        ]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.v1.as_mut_slice(),
            self.v2.as_mut_slice(),
            &mut self.w,
            self.hidden_w.as_mut_slice(),
            &mut self.hidden_b,
            self.out_w.as_mut_slice(),
            &mut self.out_b,
        ]
    }
}

pub(crate) fn glorot(rng: &mut rng::Rng, rows: usize, cols: usize) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches data")
}

/// Activations kept from a forward pass for the backward pass.
struct Trace {
    pre1: Matrix,
    gate_tanh: Matrix,
    pre2: Matrix,
    gate_sig: Matrix,
    gated: Matrix,
    attention: Vec<f64>,
    bag: Matrix,
    hidden_pre: Matrix,
    hidden: Matrix,
    logits: Matrix,
}

/// Result of running one bag through the model.
#[derive(Debug, Clone, PartialEq)]
pub struct BagForward {
    pub attention: Vec<f64>,
    pub bag_embedding: Vec<f64>,
    pub bag_logits: Vec<f64>,
    /// One row of class probabilities per instance.
    pub instance_probs: Matrix,
}

impl BagForward {
    pub fn bag_probs(&self) -> Vec<f64> {
        softmax(&self.bag_logits)
    }

    pub fn prediction(&self) -> usize {
        argmax(&self.bag_logits)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl MilModel {
    pub fn new(shape: MilShape, seed: u64) -> Self {
        let mut rng = rng::stream(seed, rng::streams::MIL_INIT);
        let MilShape {
            embed_dim: d,
            attn_dim: a,
            hidden_dim: h,
            n_classes: n,
        } = shape;
        let v1 = glorot(&mut rng, d, a);
        let v2 = glorot(&mut rng, d, a);
        let w = glorot(&mut rng, a, 1).into_vec();
        let hidden_w = glorot(&mut rng, d, h);
        let out_w = glorot(&mut rng, h, n);
        Self {
            v1,
            v2,
            w,
            hidden_w,
            hidden_b: vec![0.0; h],
            out_w,
            out_b: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> MilShape {
        MilShape {
            embed_dim: self.v1.rows(),
            attn_dim: self.v1.cols(),
            hidden_dim: self.hidden_w.cols(),
            n_classes: self.out_w.cols(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.out_w.cols()
    }

    fn check_input(&self, embeddings: &Matrix) -> Result<()> {
        if embeddings.rows() == 0 {
            return Err(Error::Argument("bag has no instances".into()));
        }
        if embeddings.cols() != self.v1.rows() {
            return Err(Error::dim("mil input", embeddings.shape(), self.v1.shape()));
        }
        Ok(())
    }

    fn gated(&self, embeddings: &Matrix) -> Result<(Matrix, Matrix, Matrix, Matrix, Matrix)> {
        let zero_bias = vec![0.0; self.v1.cols()];
        let pre1 = affine(embeddings, &self.v1, &zero_bias)?;
        let pre2 = affine(embeddings, &self.v2, &zero_bias)?;
        let gate_tanh = activate(&pre1, Activation::Tanh);
        let gate_sig = activate(&pre2, Activation::Sigmoid);
        let gated = gate_tanh.hadamard(&gate_sig)?;
        Ok((pre1, gate_tanh, pre2, gate_sig, gated))
    }

    /// Softmax-normalised gated attention over the rows of `embeddings`.
    pub fn attention_scores(&self, embeddings: &Matrix) -> Result<Vec<f64>> {
        self.check_input(embeddings)?;
        let (_, _, _, _, gated) = self.gated(embeddings)?;
        Ok(softmax(&gated.mul_vec(&self.w)?))
    }

    /// Classifier logits for each row of `x`.
    pub fn head_logits(&self, x: &Matrix) -> Result<Matrix> {
        let hidden = activate(&affine(x, &self.hidden_w, &self.hidden_b)?, Activation::Relu);
        affine(&hidden, &self.out_w, &self.out_b)
    }

    fn trace(&self, embeddings: &Matrix) -> Result<Trace> {
        self.check_input(embeddings)?;
        let (pre1, gate_tanh, pre2, gate_sig, gated) = self.gated(embeddings)?;
        let attention = softmax(&gated.mul_vec(&self.w)?);
        let bag = Matrix::from_vec(1, embeddings.cols(), embeddings.vec_mul(&attention)?)?;
        let hidden_pre = affine(&bag, &self.hidden_w, &self.hidden_b)?;
        let hidden = activate(&hidden_pre, Activation::Relu);
        let logits = affine(&hidden, &self.out_w, &self.out_b)?;
        Ok(Trace {
            pre1,
            gate_tanh,
            pre2,
            gate_sig,
            gated,
            attention,
            bag,
            hidden_pre,
            hidden,
            logits,
        })
    }

    pub fn forward(&self, embeddings: &Matrix) -> Result<BagForward> {
        let t = self.trace(embeddings)?;
        let inst_logits = self.head_logits(embeddings)?;
        Ok(BagForward {
            attention: t.attention,
            bag_embedding: t.bag.into_vec(),
            bag_logits: t.logits.into_vec(),
            instance_probs: activate(&inst_logits, Activation::SoftmaxRows),
        })
    }

    pub fn bag_forward(&self, bag: &Bag) -> Result<BagForward> {
        self.forward(&bag.embedding_matrix()?)
    }

    /// Bag-level cross-entropy only.
    pub fn bag_loss(&self, embeddings: &Matrix, label: usize) -> Result<f64> {
        let t = self.trace(embeddings)?;
        Ok(cross_entropy(&t.logits, &[label])?.0)
    }

    /// Bag-level cross-entropy and its gradient w.r.t. every parameter.
    pub fn loss_and_grad(&self, embeddings: &Matrix, label: usize) -> Result<(f64, MilGrads)> {
        let t = self.trace(embeddings)?;
        let (loss, d_logits) = cross_entropy(&t.logits, &[label])?;

        let out = affine_backward(&t.hidden, &self.out_w, &d_logits)?;
        let d_hidden_pre = activation_backward(Activation::Relu, &t.hidden_pre, &t.hidden, &out.input)?;
        let hid = affine_backward(&t.bag, &self.hidden_w, &d_hidden_pre)?;
        let d_bag = hid.input.as_slice();

        // H = Σ a_k h_k
        let d_attention: Vec<f64> = embeddings.row_iter().map(|h| dot(h, d_bag)).collect();
        let inner = dot(&t.attention, &d_attention);
        let d_scores: Vec<f64> = t
            .attention
            .iter()
            .zip(&d_attention)
            .map(|(a, g)| a * (g - inner))
            .collect();

        // scores = gated · w
        let d_w = t.gated.vec_mul(&d_scores)?;
        let mut d_gated = Matrix::zeros(t.gated.rows(), t.gated.cols());
        for (k, &ds) in d_scores.iter().enumerate() {
            for (g, w) in d_gated.row_mut(k).iter_mut().zip(&self.w) {
                *g = ds * w;
            }
        }
        let d_tanh = d_gated.hadamard(&t.gate_sig)?;
        let d_sig = d_gated.hadamard(&t.gate_tanh)?;
        let d_pre1 = activation_backward(Activation::Tanh, &t.pre1, &t.gate_tanh, &d_tanh)?;
        let d_pre2 = activation_backward(Activation::Sigmoid, &t.pre2, &t.gate_sig, &d_sig)?;

        let grads = MilModel {
            v1: embeddings.t_matmul(&d_pre1)?,
            v2: embeddings.t_matmul(&d_pre2)?,
            w: d_w,
            hidden_w: hid.weight,
            hidden_b: hid.bias,
            out_w: out.weight,
            out_b: out.bias,
        };
        Ok((loss, grads))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = self.shape();
        write_tensors(
            path,
            MIL_MAGIC,
            &[
                (s.embed_dim, s.attn_dim, self.v1.as_slice()),
                (s.embed_dim, s.attn_dim, self.v2.as_slice()),
                (1, s.attn_dim, &self.w),
                (s.embed_dim, s.hidden_dim, self.hidden_w.as_slice()),
                (1, s.hidden_dim, &self.hidden_b),
                (s.hidden_dim, s.n_classes, self.out_w.as_slice()),
                (1, s.n_classes, &self.out_b),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t = read_tensors(path, MIL_MAGIC)?;
        if t.len() != 7 {
            return Err(Error::format(12, format!("expected 7 tensors, found {}", t.len())));
        }
        let mut it = t.into_iter();
        let mut next = || {
            let (r, c, d) = it.next().unwrap();
            Matrix::from_vec(r, c, d)
        };
        let model = MilModel {
            v1: next()?,
            v2: next()?,
            w: next()?.into_vec(),
            hidden_w: next()?,
            hidden_b: next()?.into_vec(),
            out_w: next()?,
            out_b: next()?.into_vec(),
        };
        let s = model.shape();
        let consistent = model.v2.shape() == (s.embed_dim, s.attn_dim)
            && model.w.len() == s.attn_dim
            && model.hidden_w.rows() == s.embed_dim
            && model.hidden_b.len() == s.hidden_dim
            && model.out_w.rows() == s.hidden_dim
            && model.out_b.len() == s.n_classes;
        if !consistent {
            return Err(Error::format(12, "inconsistent MIL tensor shapes"));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilHyper {
    pub lr_initial: f64,
    pub lr_min: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for MilHyper {
    fn default() -> Self {
        Self {
            lr_initial: 1e-3,
            lr_min: 1e-4,
            max_epochs: 200,
            patience: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn mean_bag_loss(model: &MilModel, data: &[(Matrix, usize)]) -> Result<f64> {
    let mut total = 0.0;
    for (emb, label) in data {
        total += model.bag_loss(emb, *label)?;
    }
    Ok(total / data.len() as f64)
}

fn prepare(bags: &[Bag], n_classes: usize) -> Result<Vec<(Matrix, usize)>> {
    bags.iter()
        .map(|b| {
            if b.label >= n_classes {
                return Err(Error::Contract(format!(
                    "bag {} label {} exceeds {} classes",
                    b.slide_id, b.label, n_classes
                )));
            }
            Ok((b.embedding_matrix()?, b.label))
        })
        .collect()
}

/// Trains on one bag per step with Adam and a cosine learning-rate decay,
/// early-stopping on validation loss. Returns the best-validation snapshot.
pub fn train_mil(
    model: &MilModel,
    train: &[Bag],
    val: &[Bag],
    hyper: &MilHyper,
    seed: u64,
) -> Result<(MilModel, TrainHistory)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Argument("MIL training needs non-empty train and val bags".into()));
    }
    let n = model.n_classes();
    let train = prepare(train, n)?;
    let val = prepare(val, n)?;

    let mut current = model.clone();
    let mut best = model.clone();
    let mut adam = Adam::new(current.param_count(), hyper.beta1, hyper.beta2, hyper.eps);
    let mut stopper = EarlyStopping::new(hyper.patience);
    let mut rng = rng::stream(seed, rng::streams::MIL_SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory {
        best_val_loss: f64::INFINITY,
        ..TrainHistory::default()
    };

    for epoch in 0..hyper.max_epochs {
        let lr = cosine_lr(hyper.lr_initial, hyper.lr_min, epoch, hyper.max_epochs);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let (emb, label) = &train[i];
            let (loss, grads) = current.loss_and_grad(emb, *label)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Training {
                    epoch,
                    message: "non-finite MIL loss or gradient".into(),
                });
            }
            epoch_loss += loss;
            adam.step(&mut current, &grads, lr);
        }
        let val_loss = mean_bag_loss(&current, &val)?;
        if !val_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                message: "non-finite MIL validation loss".into(),
            });
        }
        history.train_loss.push(epoch_loss / train.len() as f64);
        history.val_loss.push(val_loss);
        match stopper.observe(val_loss) {
            Progress::Improved => {
                best = current.clone();
                history.best_epoch = epoch;
                history.best_val_loss = val_loss;
            }
            Progress::Stalled => {}
            Progress::Stop => {
                debug!("MIL early stop at epoch {epoch}, best {}", history.best_epoch);
                break;
            }
        }
    }
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::databag::{InstanceRecord, Split, UNASSIGNED};
    use crate::ndmath::grad_check;

    fn random_matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut rng = rng::stream(seed, 99);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    fn bag_of(rows: &[Vec<f64>], label: usize, id: &str) -> Bag {
        Bag {
            slide_id: id.into(),
            label,
            split: Split::Train,
            instances: rows
                .iter()
                .enumerate()
                .map(|(k, r)| InstanceRecord {
                    slide_id: id.into(),
                    patch_index: k,
                    raw: r.clone(),
                    embedding: r.clone(),
                    pseudo_label: UNASSIGNED,
                    truth_label: None,
                    origin: None,
                })
                .collect(),
        }
    }

    #[test]
    fn singleton_bag_has_full_attention() {
        let model = MilModel::new(MilShape::new(4, 2), 1);
        let a = model.attention_scores(&random_matrix(1, 1, 4)).unwrap();
        assert_eq!(a, vec![1.0]);
    }

    #[test]
    fn identical_instances_share_attention_and_bag_embedding() {
        let model = MilModel::new(MilShape::new(3, 2), 2);
        let row = vec![0.3, -0.7, 1.1];
        let m = Matrix::from_rows(&[row.clone(), row.clone()]).unwrap();
        let f = model.forward(&m).unwrap();
        assert_eq!(f.attention, vec![0.5, 0.5]);
        for (h, r) in f.bag_embedding.iter().zip(&row) {
            assert!((h - r).abs() < 1e-15);
        }
    }

    #[test]
    fn permutation_moves_attention_and_keeps_logits() {
        let model = MilModel::new(MilShape::new(5, 3), 3);
        let m = random_matrix(4, 7, 5);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let permuted = Matrix::from_rows(&perm.iter().map(|&i| m.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let a = model.forward(&m).unwrap();
        let b = model.forward(&permuted).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert!((a.attention[i] - b.attention[j]).abs() < 1e-12);
        }
        for (x, y) in a.bag_logits.iter().zip(&b.bag_logits) {
            assert!((x - y).abs() < 1e-9);
        }
        for (x, y) in a.bag_embedding.iter().zip(&b.bag_embedding) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_and_instance_probs_are_normalised() {
        let model = MilModel::new(MilShape::new(6, 3), 5);
        let f = model.forward(&random_matrix(6, 20, 6)).unwrap();
        assert!((f.attention.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(f.attention.iter().all(|&a| a > 0.0 && a < 1.0));
        for row in f.instance_probs.row_iter() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn hand_computed_two_instance_forward() {
        // D = 2, attention width 1, hidden width 1, two classes.
        let model = MilModel {
            v1: Matrix::from_rows(&[[0.5], [-1.0]]).unwrap(),
            v2: Matrix::from_rows(&[[1.0], [0.25]]).unwrap(),
            w: vec![2.0],
            hidden_w: Matrix::from_rows(&[[1.0], [1.0]]).unwrap(),
            hidden_b: vec![0.1],
            out_w: Matrix::from_rows(&[[1.0, -1.0]]).unwrap(),
            out_b: vec![0.0, 0.5],
        };
        let h = [[1.0, 0.0], [0.0, 2.0]];
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let s0 = 2.0 * (0.5f64).tanh() * sig(1.0);
        let s1 = 2.0 * (-2.0f64).tanh() * sig(0.5);
        let a0 = s0.exp() / (s0.exp() + s1.exp());
        let a1 = 1.0 - a0;
        let bag = [a0 * 1.0, a1 * 2.0];
        let hidden = (bag[0] + bag[1] + 0.1).max(0.0);
        let logits = [hidden, -hidden + 0.5];

        let f = model.forward(&Matrix::from_rows(&h).unwrap()).unwrap();
        assert!((f.attention[0] - a0).abs() < 1e-12);
        assert!((f.attention[1] - a1).abs() < 1e-12);
        assert!((f.bag_embedding[0] - bag[0]).abs() < 1e-12);
        assert!((f.bag_embedding[1] - bag[1]).abs() < 1e-12);
        assert!((f.bag_logits[0] - logits[0]).abs() < 1e-12);
        assert!((f.bag_logits[1] - logits[1]).abs() < 1e-12);
    }

    #[test]
    fn bag_gradient_passes_grad_check() {
        for seed in 0..5 {
            let model = MilModel::new(MilShape::new(4, 3), seed);
            let emb = random_matrix(seed + 100, 5, 4);
            let label = (seed % 3) as usize;
            let theta = model.flatten();
            let err = grad_check(
                |t| {
                    let mut m = model.clone();
                    m.load_flat(t).unwrap();
                    let (l, g) = m.loss_and_grad(&emb, label).unwrap();
                    (l, g.flatten())
                },
                &theta,
                1e-5,
            );
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn rejects_empty_and_mismatched_bags() {
        let model = MilModel::new(MilShape::new(4, 2), 1);
        assert!(model.forward(&Matrix::zeros(0, 4)).is_err());
        assert!(matches!(model.forward(&Matrix::zeros(2, 3)), Err(Error::Dimension { .. })));
    }

    fn separable(seed: u64, count: usize) -> Vec<Bag> {
        let mut rng = rng::stream(seed, 5);
        (0..count)
            .map(|i| {
                let label = i % 2;
                let rows: Vec<Vec<f64>> = (0..6)
                    .map(|k| {
                        let mut r: Vec<f64> = (0..4).map(|_| rng.random_range(-0.3..0.3)).collect();
                        if label == 1 && k < 2 {
                            r[0] += 2.0;
                        }
                        r
                    })
                    .collect();
                bag_of(&rows, label, &format!("b{i}"))
            })
            .collect()
    }

    #[test]
    fn learns_a_separable_cohort() {
        let train = separable(1, 20);
        let val = separable(2, 6);
        let model = MilModel::new(MilShape::new(4, 2), 3);
        let (trained, history) = train_mil(&model, &train, &val, &MilHyper::default(), 4).unwrap();
        let final_train = history.train_loss.last().copied().unwrap();
        assert!(final_train < 0.1, "train loss {final_train}");
        for bag in &val {
            assert_eq!(trained.bag_forward(bag).unwrap().prediction(), bag.label);
        }
    }

    #[test]
    fn zero_patience_and_determinism() {
        let train = separable(3, 10);
        let mut val = separable(4, 4);
        // a mislabeled validation bag makes the validation loss turn upwards
        val[0].label = 1 - val[0].label;
        let model = MilModel::new(MilShape::new(4, 2), 1);
        let hyper = MilHyper {
            patience: 0,
            ..MilHyper::default()
        };
        let (a, ha) = train_mil(&model, &train, &val, &hyper, 9).unwrap();
        let (b, hb) = train_mil(&model, &train, &val, &hyper, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        let epochs = ha.val_loss.len();
        assert!(epochs < hyper.max_epochs);
        // the last recorded epoch is the first that failed to improve
        let last = ha.val_loss[epochs - 1];
        assert!(ha.val_loss[..epochs - 1].iter().any(|&v| v <= last));
        for w in ha.val_loss[..epochs - 1].windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mil.ckpt");
        let model = MilModel::new(MilShape::new(5, 3), 8);
        model.save(&path).unwrap();
        assert_eq!(MilModel::load(&path).unwrap(), model);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(MilModel::load(&path), Err(Error::Format { .. })));
    }
}
