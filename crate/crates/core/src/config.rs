//! Run configuration: a flat set of `key = value` settings.
//!
//! Files are UTF-8, one setting per line; blank lines and lines starting
//! with `#` are skipped. Later settings override earlier ones, so command-line
//! overrides are applied by calling [`RunConfig::set`] after loading.

use std::path::{Path, PathBuf};

use crate::abmil::MilHyper;
use crate::databag::CohortSpec;
use crate::error::{Error, Result};
use crate::finetune::EncoderHyper;
use crate::refine::RefineConfig;

/// Every recognised key with a one-line description, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("name", "run name; outputs go to <out_dir>/<name>"),
    ("out_dir", "directory holding run outputs"),
    ("cohort", "stem of a saved cohort to load (empty: generate one)"),
    ("seed", "master seed for generation, splits, initialisation and clustering"),
    ("n_classes", "number of bag classes n (class 0 is negative)"),
    ("bags_per_class", "generated training+validation bags per class, comma separated"),
    ("test_bags_per_class", "generated held-out test bags per class"),
    ("bag_size_min", "smallest generated bag"),
    ("bag_size_max", "largest generated bag"),
    ("positive_fraction_min", "lowest tumor fraction in a positive bag"),
    ("positive_fraction_max", "highest tumor fraction in a positive bag"),
    ("mimic_fraction", "fraction of every bag drawn as tumor-mimicking negatives"),
    ("raw_dim", "dimension of raw instance vectors"),
    ("separation", "distance of class prototypes from the normal prototype"),
    ("noise_sigma", "isotropic noise around every prototype"),
    ("val_fraction", "share of generated bags held out for validation"),
    ("embed_dim", "encoder output dimension"),
    ("k0", "base selection budget K0 of the confidence schedule"),
    ("clusters", "number of K-means clusters C"),
    ("theta", "cluster classification threshold"),
    ("kmeans_restarts", "K-means restarts, best inertia kept"),
    ("rounds", "refinement rounds T after the round-0 baseline"),
    ("round_patience", "stop after this many rounds without a better validation AUC"),
    ("mil_lr", "initial MIL learning rate"),
    ("mil_lr_min", "final MIL learning rate of the cosine schedule"),
    ("mil_epochs", "maximum MIL epochs"),
    ("mil_patience", "MIL early-stopping patience in epochs"),
    ("mil_warm_start", "continue MIL training from the previous round's weights"),
    ("enc_lr", "encoder learning rate"),
    ("enc_batch", "encoder mini-batch size"),
    ("enc_epochs", "maximum encoder epochs"),
    ("enc_patience", "encoder early-stopping patience in epochs"),
    ("enc_val_fraction", "share of the refined dataset used to validate the encoder"),
    ("reset_encoder", "fine-tune from the initial encoder every round"),
    ("resume", "continue after the last completed round in the output directory"),
    ("sweep_k0", "K0 values for sweeps, comma separated"),
    ("sweep_clusters", "cluster counts for sweeps, comma separated"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub out_dir: PathBuf,
    pub cohort: Option<PathBuf>,
    pub seed: u64,
    pub n_classes: usize,
    pub bags_per_class: Vec<usize>,
    pub test_bags_per_class: usize,
    pub bag_size_min: usize,
    pub bag_size_max: usize,
    pub positive_fraction_min: f64,
    pub positive_fraction_max: f64,
    pub mimic_fraction: f64,
    pub raw_dim: usize,
    pub separation: f64,
    pub noise_sigma: f64,
    pub val_fraction: f64,
    pub embed_dim: usize,
    pub k0: usize,
    pub clusters: usize,
    pub theta: f64,
    pub kmeans_restarts: usize,
    pub rounds: usize,
    pub round_patience: usize,
    pub mil_lr: f64,
    pub mil_lr_min: f64,
    pub mil_epochs: usize,
    pub mil_patience: usize,
    pub mil_warm_start: bool,
    pub enc_lr: f64,
    pub enc_batch: usize,
    pub enc_epochs: usize,
    pub enc_patience: usize,
    pub enc_val_fraction: f64,
    pub reset_encoder: bool,
    pub resume: bool,
    pub sweep_k0: Vec<usize>,
    pub sweep_clusters: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mil = MilHyper::default();
        let enc = EncoderHyper::default();
        Self {
            name: "default".into(),
            out_dir: PathBuf::from("runs"),
            cohort: None,
            seed: 1,
            n_classes: 2,
            bags_per_class: vec![50, 50],
            test_bags_per_class: 50,
            bag_size_min: 50,
            bag_size_max: 150,
            positive_fraction_min: 0.05,
            positive_fraction_max: 0.3,
            mimic_fraction: 0.2,
            raw_dim: 32,
            separation: 4.0,
            noise_sigma: 1.25,
            val_fraction: 0.2,
            embed_dim: 16,
            k0: 10,
            clusters: 5,
            theta: 0.5,
            kmeans_restarts: crate::hcluster::DEFAULT_RESTARTS,
            rounds: 3,
            round_patience: 2,
            mil_lr: mil.lr_initial,
            mil_lr_min: mil.lr_min,
            mil_epochs: mil.max_epochs,
            mil_patience: mil.patience,
            mil_warm_start: false,
            enc_lr: enc.lr,
            enc_batch: enc.batch_size,
            enc_epochs: enc.max_epochs,
            enc_patience: enc.patience,
            enc_val_fraction: enc.val_fraction,
            reset_encoder: false,
            resume: false,
            sweep_k0: vec![5, 10, 20],
            sweep_clusters: vec![3, 5, 10],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let items: Vec<usize> = value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("`{key}` needs at least one value")));
    }
    Ok(items)
}

fn join(items: &[usize]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "name" => {
                if v.is_empty() || v.contains(['\\', '\n']) || v.split('/').any(|p| p == "..") {
                    return Err(Error::Config(format!("invalid run name {v:?}")));
                }
                self.name = v.into()
            }
            "out_dir" => self.out_dir = PathBuf::from(v),
            "cohort" => self.cohort = (!v.is_empty()).then(|| PathBuf::from(v)),
            "seed" => self.seed = parse(key, v)?,
            "n_classes" => self.n_classes = parse(key, v)?,
            "bags_per_class" => self.bags_per_class = parse_list(key, v)?,
            "test_bags_per_class" => self.test_bags_per_class = parse(key, v)?,
            "bag_size_min" => self.bag_size_min = parse(key, v)?,
            "bag_size_max" => self.bag_size_max = parse(key, v)?,
            "positive_fraction_min" => self.positive_fraction_min = parse(key, v)?,
            "positive_fraction_max" => self.positive_fraction_max = parse(key, v)?,
            "mimic_fraction" => self.mimic_fraction = parse(key, v)?,
            "raw_dim" => self.raw_dim = parse(key, v)?,
            "separation" => self.separation = parse(key, v)?,
            "noise_sigma" => self.noise_sigma = parse(key, v)?,
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "k0" => self.k0 = parse(key, v)?,
            "clusters" => self.clusters = parse(key, v)?,
            "theta" => self.theta = parse(key, v)?,
            "kmeans_restarts" => self.kmeans_restarts = parse(key, v)?,
            "rounds" => self.rounds = parse(key, v)?,
            "round_patience" => self.round_patience = parse(key, v)?,
            "mil_lr" => self.mil_lr = parse(key, v)?,
            "mil_lr_min" => self.mil_lr_min = parse(key, v)?,
            "mil_epochs" => self.mil_epochs = parse(key, v)?,
            "mil_patience" => self.mil_patience = parse(key, v)?,
            "mil_warm_start" => self.mil_warm_start = parse(key, v)?,
            "enc_lr" => self.enc_lr = parse(key, v)?,
            "enc_batch" => self.enc_batch = parse(key, v)?,
            "enc_epochs" => self.enc_epochs = parse(key, v)?,
            "enc_patience" => self.enc_patience = parse(key, v)?,
            "enc_val_fraction" => self.enc_val_fraction = parse(key, v)?,
            "reset_encoder" => self.reset_encoder = parse(key, v)?,
            "resume" => self.resume = parse(key, v)?,
            "sweep_k0" => self.sweep_k0 = parse_list(key, v)?,
            "sweep_clusters" => self.sweep_clusters = parse_list(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "name" => self.name.clone(),
            "out_dir" => self.out_dir.display().to_string(),
            "cohort" => self.cohort.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "seed" => self.seed.to_string(),
            "n_classes" => self.n_classes.to_string(),
            "bags_per_class" => join(&self.bags_per_class),
            "test_bags_per_class" => self.test_bags_per_class.to_string(),
            "bag_size_min" => self.bag_size_min.to_string(),
            "bag_size_max" => self.bag_size_max.to_string(),
            "positive_fraction_min" => self.positive_fraction_min.to_string(),
            "positive_fraction_max" => self.positive_fraction_max.to_string(),
            "mimic_fraction" => self.mimic_fraction.to_string(),
            "raw_dim" => self.raw_dim.to_string(),
            "separation" => self.separation.to_string(),
            "noise_sigma" => self.noise_sigma.to_string(),
            "val_fraction" => self.val_fraction.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "k0" => self.k0.to_string(),
            "clusters" => self.clusters.to_string(),
            "theta" => self.theta.to_string(),
            "kmeans_restarts" => self.kmeans_restarts.to_string(),
            "rounds" => self.rounds.to_string(),
            "round_patience" => self.round_patience.to_string(),
            "mil_lr" => self.mil_lr.to_string(),
            "mil_lr_min" => self.mil_lr_min.to_string(),
            "mil_epochs" => self.mil_epochs.to_string(),
            "mil_patience" => self.mil_patience.to_string(),
            "mil_warm_start" => self.mil_warm_start.to_string(),
            "enc_lr" => self.enc_lr.to_string(),
            "enc_batch" => self.enc_batch.to_string(),
            "enc_epochs" => self.enc_epochs.to_string(),
            "enc_patience" => self.enc_patience.to_string(),
            "enc_val_fraction" => self.enc_val_fraction.to_string(),
            "reset_encoder" => self.reset_encoder.to_string(),
            "resume" => self.resume.to_string(),
            "sweep_k0" => join(&self.sweep_k0),
            "sweep_clusters" => join(&self.sweep_clusters),
            _ => return None,
        })
    }

    /// Applies the settings in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// All settings as `key = value` lines; parses back to the same config.
    pub fn echo(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("every key has a getter")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if self.cohort.is_none() && self.bags_per_class.len() != self.n_classes {
            return bad("bags_per_class needs one entry per class");
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return bad("theta must lie in (0, 1]");
        }
        if self.clusters == 0 || self.k0 == 0 || self.kmeans_restarts == 0 {
            return bad("clusters, k0 and kmeans_restarts must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if !(self.enc_val_fraction >= 0.0 && self.enc_val_fraction < 1.0) {
            return bad("enc_val_fraction must lie in [0, 1)");
        }
        if self.enc_batch == 0 || self.embed_dim == 0 {
            return bad("enc_batch and embed_dim must be positive");
        }
        if !(self.mil_lr > 0.0 && self.enc_lr > 0.0 && self.mil_lr_min >= 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }

    pub fn cohort_spec(&self) -> CohortSpec {
        CohortSpec {
            n_classes: self.n_classes,
            bags_per_class: self.bags_per_class.clone(),
            bag_size_range: (self.bag_size_min, self.bag_size_max),
            positive_fraction_range: (self.positive_fraction_min, self.positive_fraction_max),
            mimic_fraction_range: (self.mimic_fraction, self.mimic_fraction),
            raw_dim: self.raw_dim,
            class_prototype_separation: self.separation,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn mil_hyper(&self) -> MilHyper {
        MilHyper {
            lr_initial: self.mil_lr,
            lr_min: self.mil_lr_min,
            max_epochs: self.mil_epochs,
            patience: self.mil_patience,
            ..MilHyper::default()
        }
    }

    pub fn encoder_hyper(&self) -> EncoderHyper {
        EncoderHyper {
            lr: self.enc_lr,
            batch_size: self.enc_batch,
            max_epochs: self.enc_epochs,
            patience: self.enc_patience,
            val_fraction: self.enc_val_fraction,
            ..EncoderHyper::default()
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            n_classes: self.n_classes,
            clusters: self.clusters,
            theta: self.theta,
            restarts: self.kmeans_restarts,
        }
    }
}

/// `key  description` lines for command-line help.
pub fn keys_help() -> String {
    let d = RunConfig::default();
    KEYS.iter()
        .map(|(k, doc)| format!("  {k:<22} {doc} [default: {}]\n", d.get(k).unwrap_or_default()))
        .collect()
}
