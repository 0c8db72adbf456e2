//! The iterative loop: train MIL, select confident instances, refine them by
//! clustering, fine-tune the encoder, re-extract embeddings, repeat.
//!
//! Output layout under `<out_dir>/<name>`:
//!
//! ```text
//! config.echo
//! round_<t>/mil.ckpt
//! round_<t>/encoder.ckpt
//! round_<t>/dstar.csv
//! round_<t>/report.csv
//! round_<t>/timing.csv
//! ```
//!
//! `report.csv` holds `metric,value` rows and is written last, so a round
//! counts as complete once it exists. Wall-clock time goes to `timing.csv`
//! to keep reports reproducible byte for byte.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;

use crate::abmil::{train_mil, MilModel, MilShape};
use crate::confidence::init_pseudo_labels;
use crate::config::RunConfig;
use crate::databag::{generate_cohort, load_cohort, split_cohort, Bag, Origin, Split};
use crate::error::{Error, Result};
use crate::finetune::{collapse_hard_negatives, reextract, train_encoder, tumor_score, EncoderModel};
use crate::metrics::{auc_ovr, classification_metrics, cpm, froc};
use crate::ndmath::{softmax, Matrix};
use crate::refine::{build_patch_dataset, check_invariants, refine, PatchDataset, RefinementState};
use crate::rng::{self, derive};

/// Evaluation-only labels lifted out of the bags before training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TruthTable {
    pub labels: Vec<Vec<Option<usize>>>,
    pub origins: Vec<Vec<Option<Origin>>>,
}

impl TruthTable {
    /// Moves truth labels and origins out of `bags`.
    pub fn take(bags: &mut [Bag]) -> Self {
        let mut t = TruthTable::default();
        for bag in bags {
            t.labels.push(bag.instances.iter_mut().map(|i| i.truth_label.take()).collect());
            t.origins.push(bag.instances.iter_mut().map(|i| i.origin.take()).collect());
        }
        t
    }

    pub fn is_complete(&self) -> bool {
        self.labels.iter().flatten().all(Option::is_some)
    }
}

/// Bags of the three splits with their truth held separately.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub train: Vec<Bag>,
    pub val: Vec<Bag>,
    pub test: Vec<Bag>,
    pub train_truth: TruthTable,
    pub test_truth: TruthTable,
}

impl Cohort {
    pub fn from_bags(bags: Vec<Bag>) -> Result<Self> {
        let mut parts: HashMap<Split, Vec<Bag>> = HashMap::new();
        for b in bags {
            parts.entry(b.split).or_default().push(b);
        }
        let mut take = |s: Split| {
            parts
                .remove(&s)
                .filter(|v| !v.is_empty())
                .ok_or_else(|| Error::Config(format!("cohort has no {s} bags")))
        };
        let mut train = take(Split::Train)?;
        let mut val = take(Split::Val)?;
        let mut test = take(Split::Test)?;
        let train_truth = TruthTable::take(&mut train);
        TruthTable::take(&mut val);
        let test_truth = TruthTable::take(&mut test);
        Ok(Cohort {
            train,
            val,
            test,
            train_truth,
            test_truth,
        })
    }

    pub fn all_bags_mut(&mut self) -> impl Iterator<Item = &mut Bag> {
        self.train.iter_mut().chain(self.val.iter_mut()).chain(self.test.iter_mut())
    }
}

/// Generates the configured cohort: per class, `test_bags_per_class` bags are
/// held out for testing and the rest are split into train and validation.
pub fn generate_split_cohort(cfg: &RunConfig) -> Result<Vec<Bag>> {
    let mut spec = cfg.cohort_spec();
    spec.bags_per_class = cfg.bags_per_class.iter().map(|b| b + cfg.test_bags_per_class).collect();
    let mut bags = generate_cohort(&spec)?;

    let mut rng = rng::stream(cfg.seed, rng::streams::TEST_COHORT);
    for label in 0..cfg.n_classes {
        let mut members: Vec<usize> = (0..bags.len()).filter(|&i| bags[i].label == label).collect();
        members.shuffle(&mut rng);
        for &i in members.iter().take(cfg.test_bags_per_class) {
            bags[i].split = Split::Test;
        }
    }
    let (mut dev, test): (Vec<Bag>, Vec<Bag>) = bags.into_iter().partition(|b| b.split != Split::Test);
    split_cohort(&mut dev, &[1.0 - cfg.val_fraction, cfg.val_fraction], derive(cfg.seed, rng::streams::SPLIT))?;
    dev.extend(test);
    Ok(dev)
}

pub fn prepare_cohort(cfg: &RunConfig) -> Result<Cohort> {
    let bags = match &cfg.cohort {
        Some(stem) => load_cohort(stem)?,
        None => generate_split_cohort(cfg)?,
    };
    if let Some(b) = bags.iter().find(|b| b.label >= cfg.n_classes) {
        return Err(Error::Config(format!(
            "bag {} has label {} but n_classes is {}",
            b.slide_id, b.label, cfg.n_classes
        )));
    }
    Cohort::from_bags(bags)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BagScores {
    pub auc: f64,
    pub acc: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchScores {
    pub acc: f64,
    pub f1: f64,
    pub auc: f64,
    pub cpm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineStats {
    pub t_high: usize,
    pub t_low: usize,
    pub n_original: usize,
    pub n_middle_low: usize,
    pub n_middle_high: usize,
    pub n_final: usize,
    pub cleaned_high: usize,
    pub histogram: Vec<usize>,
    pub purity_initial: Option<f64>,
    pub purity_cleaned: Option<f64>,
    pub mimic_precision: Option<f64>,
    pub mimic_base_rate: Option<f64>,
}

impl RefineStats {
    /// How much richer in planted mimics the final hard negatives are than
    /// the truth-negative instances overall.
    pub fn mimic_enrichment(&self) -> Option<f64> {
        match (self.mimic_precision, self.mimic_base_rate) {
            (Some(p), Some(b)) if b > 0.0 => Some(p / b),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub val: BagScores,
    pub test: BagScores,
    /// Encoder head on test instances.
    pub patch: Option<PatchScores>,
    /// MIL instance probabilities on test instances.
    pub patch_mil: Option<PatchScores>,
    pub refinement: Option<RefineStats>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

impl RoundReport {
    pub fn to_csv(&self) -> String {
        let rows: Vec<(&str, String)> = vec![
            ("round", self.round.to_string()),
            ("val_auc", self.val.auc.to_string()),
            ("val_acc", self.val.acc.to_string()),
            ("val_f1", self.val.f1.to_string()),
            ("test_auc", self.test.auc.to_string()),
            ("test_acc", self.test.acc.to_string()),
            ("test_f1", self.test.f1.to_string()),
        ];
        let mut extra: Vec<(String, String)> = Vec::new();
        for (prefix, p) in [("patch", &self.patch), ("patch_mil", &self.patch_mil)] {
            for (k, v) in [
                ("acc", p.map(|p| p.acc)),
                ("f1", p.map(|p| p.f1)),
                ("auc", p.map(|p| p.auc)),
                ("cpm", p.map(|p| p.cpm)),
            ] {
                extra.push((format!("{prefix}_{k}"), opt(v)));
            }
        }
        if let Some(r) = &self.refinement {
            extra.extend([
                ("t_high".to_string(), r.t_high.to_string()),
                ("t_low".to_string(), r.t_low.to_string()),
                ("n_original".to_string(), r.n_original.to_string()),
                ("n_middle_low".to_string(), r.n_middle_low.to_string()),
                ("n_middle_high".to_string(), r.n_middle_high.to_string()),
                ("n_final".to_string(), r.n_final.to_string()),
                ("cleaned_high".to_string(), r.cleaned_high.to_string()),
                (
                    "dstar_histogram".to_string(),
                    r.histogram.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";"),
                ),
                ("purity_initial".to_string(), opt(r.purity_initial)),
                ("purity_cleaned".to_string(), opt(r.purity_cleaned)),
                ("mimic_precision".to_string(), opt(r.mimic_precision)),
                ("mimic_base_rate".to_string(), opt(r.mimic_base_rate)),
            ]);
        }
        let mut out = String::from("metric,value\n");
        for (k, v) in rows.into_iter().map(|(k, v)| (k.to_string(), v)).chain(extra) {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let map: HashMap<&str, &str> = text.lines().skip(1).filter_map(|l| l.split_once(',')).collect();
        let bad = |k: &str| Error::format(0, format!("report field `{k}` missing or malformed"));
        let f = |k: &str| -> Result<f64> { map.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(k)) };
        let o = |k: &str| -> Result<Option<f64>> {
            match map.get(k) {
                Some(&"NA") => Ok(None),
                Some(v) => v.parse().map(Some).map_err(|_| bad(k)),
                None => Err(bad(k)),
            }
        };
        let u = |k: &str| -> Result<usize> { map.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(k)) };
        let patch = |prefix: &str| -> Result<Option<PatchScores>> {
            let (a, f1, auc, c) = (
                o(&format!("{prefix}_acc"))?,
                o(&format!("{prefix}_f1"))?,
                o(&format!("{prefix}_auc"))?,
                o(&format!("{prefix}_cpm"))?,
            );
            Ok(match (a, f1, auc, c) {
                (Some(acc), Some(f1), Some(auc), Some(cpm)) => Some(PatchScores { acc, f1, auc, cpm }),
                _ => None,
            })
        };
        let refinement = if map.contains_key("t_high") {
            let histogram = map
                .get("dstar_histogram")
                .ok_or_else(|| bad("dstar_histogram"))?
                .split(';')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| bad("dstar_histogram")))
                .collect::<Result<_>>()?;
            Some(RefineStats {
                t_high: u("t_high")?,
                t_low: u("t_low")?,
                n_original: u("n_original")?,
                n_middle_low: u("n_middle_low")?,
                n_middle_high: u("n_middle_high")?,
                n_final: u("n_final")?,
                cleaned_high: u("cleaned_high")?,
                histogram,
                purity_initial: o("purity_initial")?,
                purity_cleaned: o("purity_cleaned")?,
                mimic_precision: o("mimic_precision")?,
                mimic_base_rate: o("mimic_base_rate")?,
            })
        } else {
            None
        };
        Ok(RoundReport {
            round: u("round")?,
            val: BagScores {
                auc: f("val_auc")?,
                acc: f("val_acc")?,
                f1: f("val_f1")?,
            },
            test: BagScores {
                auc: f("test_auc")?,
                acc: f("test_acc")?,
                f1: f("test_f1")?,
            },
            patch: patch("patch")?,
            patch_mil: patch("patch_mil")?,
            refinement,
        })
    }
}

pub fn evaluate_bags(mil: &MilModel, bags: &[Bag]) -> Result<BagScores> {
    let n = mil.n_classes();
    let mut probs = Vec::with_capacity(bags.len());
    let mut pred = Vec::with_capacity(bags.len());
    for b in bags {
        let f = mil.bag_forward(b)?;
        pred.push(f.prediction());
        probs.push(softmax(&f.bag_logits));
    }
    let truth: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let cls = classification_metrics(&pred, &truth, n)?;
    Ok(BagScores {
        auc: auc_ovr(&probs, &truth, n)?,
        acc: cls.accuracy,
        f1: cls.f1,
    })
}

/// Patch-level scores from per-instance class probabilities over `n`
/// classes. `None` when truth is incomplete or has no tumor instance.
fn patch_scores(probs: &[Vec<f64>], bags: &[Bag], truth: &TruthTable, n: usize) -> Result<Option<PatchScores>> {
    if !truth.is_complete() {
        return Ok(None);
    }
    let labels: Vec<usize> = truth.labels.iter().flatten().map(|t| t.unwrap()).collect();
    if !labels.iter().any(|&l| l > 0) || !labels.contains(&0) {
        return Ok(None);
    }
    let pred: Vec<usize> = probs.iter().map(|p| crate::abmil::argmax(p)).collect();
    let cls = classification_metrics(&pred, &labels, n)?;
    let scores: Vec<f64> = probs.iter().map(|p| p[1..].iter().sum()).collect();
    let tumor: Vec<bool> = labels.iter().map(|&l| l > 0).collect();
    let slides: Vec<&str> = bags
        .iter()
        .flat_map(|b| b.instances.iter().map(|i| i.slide_id.as_str()))
        .collect();
    Ok(Some(PatchScores {
        acc: cls.accuracy,
        f1: cls.f1,
        auc: auc_ovr(probs, &labels, n)?,
        cpm: cpm(&froc(&scores, &tumor, &slides)?),
    }))
}

pub fn evaluate_patches_encoder(
    encoder: &EncoderModel,
    bags: &[Bag],
    truth: &TruthTable,
    n: usize,
) -> Result<Option<PatchScores>> {
    let mut probs = Vec::new();
    for b in bags {
        let p = encoder.predict_proba(&b.raw_matrix()?)?;
        probs.extend(p.row_iter().map(|row| collapse_hard_negatives(row, n)));
    }
    debug_assert!(probs.iter().all(|p| (tumor_score(p, n) - p[1..].iter().sum::<f64>()).abs() < 1e-12));
    patch_scores(&probs, bags, truth, n)
}

pub fn evaluate_patches_mil(mil: &MilModel, bags: &[Bag], truth: &TruthTable, n: usize) -> Result<Option<PatchScores>> {
    let mut probs = Vec::new();
    for b in bags {
        let f = mil.bag_forward(b)?;
        probs.extend(f.instance_probs.row_iter().map(|r| r.to_vec()));
    }
    patch_scores(&probs, bags, truth, n)
}

/// Truth audit of one refinement: label purity before and after cleaning and
/// the mimic content of the final hard negatives.
pub fn refine_stats(state: &RefinementState, dataset: &PatchDataset, truth: &TruthTable) -> RefineStats {
    let label_of = |r: &crate::databag::InstanceRef| truth.labels.get(r.bag).and_then(|b| b[r.instance]);
    let origin_of = |r: &crate::databag::InstanceRef| truth.origins.get(r.bag).and_then(|b| b[r.instance]);
    let purity = |set: &[(crate::databag::InstanceRef, usize)]| -> Option<f64> {
        if set.is_empty() {
            return None;
        }
        let mut hits = 0usize;
        for (r, l) in set {
            hits += (label_of(r)? == *l) as usize;
        }
        Some(hits as f64 / set.len() as f64)
    };
    let finals = state.final_negatives();
    let has_origins = truth.origins.iter().flatten().all(Option::is_some) && !truth.origins.is_empty();
    let (mimic_precision, mimic_base_rate) = if has_origins {
        let is_mimic = |o: Option<Origin>| matches!(o, Some(Origin::Mimic(_)));
        let precision = (!finals.is_empty()).then(|| {
            finals.iter().filter(|(c, _)| is_mimic(origin_of(&c.instance))).count() as f64 / finals.len() as f64
        });
        let negatives: Vec<Option<Origin>> = truth
            .labels
            .iter()
            .zip(&truth.origins)
            .flat_map(|(l, o)| l.iter().zip(o))
            .filter(|(l, _)| **l == Some(0))
            .map(|(_, o)| *o)
            .collect();
        let base = (!negatives.is_empty())
            .then(|| negatives.iter().filter(|o| is_mimic(**o)).count() as f64 / negatives.len() as f64);
        (precision.or(Some(0.0)), base)
    } else {
        (None, None)
    };
    RefineStats {
        t_high: state.high.len(),
        t_low: state.low.len(),
        n_original: state.original.len(),
        n_middle_low: state.middle_low.len(),
        n_middle_high: state.middle_high.len(),
        n_final: finals.len(),
        cleaned_high: state.cleaned_high.len(),
        histogram: dataset.histogram(),
        purity_initial: purity(&state.high),
        purity_cleaned: purity(&state.cleaned_high),
        mimic_precision,
        mimic_base_rate,
    }
}

fn round_dir(run_dir: &Path, round: usize) -> PathBuf {
    run_dir.join(format!("round_{round}"))
}

/// Per-round seed for a stage.
pub fn round_seed(seed: u64, stage: u64, round: usize) -> u64 {
    derive(seed, stage * 1_000_003 + round as u64)
}

/// Seeded orthogonal projection calibrated on the training instances.
pub fn initial_encoder(cfg: &RunConfig, train: &[Bag]) -> Result<EncoderModel> {
    let raw_dim = train.iter().find_map(|b| b.instances.first()).map_or(0, |i| i.raw.len());
    let mut encoder = EncoderModel::orthogonal(
        raw_dim,
        cfg.embed_dim,
        2 * cfg.n_classes - 1,
        derive(cfg.seed, rng::streams::ENCODER_INIT),
    );
    let rows: Vec<&[f64]> = train.iter().flat_map(|b| b.instances.iter().map(|i| i.raw.as_slice())).collect();
    encoder.calibrate(&Matrix::from_rows(&rows)?, 1.0)?;
    Ok(encoder)
}

pub fn fit_mil(cfg: &RunConfig, cohort: &Cohort, previous: Option<&MilModel>, round: usize) -> Result<MilModel> {
    let embed_dim = cohort.train[0].instances[0].embedding.len();
    let init = match previous {
        Some(m) if cfg.mil_warm_start => m.clone(),
        _ => MilModel::new(
            MilShape::new(embed_dim, cfg.n_classes),
            round_seed(cfg.seed, rng::streams::MIL_INIT, round),
        ),
    };
    let (mil, hist) = train_mil(
        &init,
        &cohort.train,
        &cohort.val,
        &cfg.mil_hyper(),
        round_seed(cfg.seed, rng::streams::MIL_SHUFFLE, round),
    )?;
    info!(
        "round {round}: MIL best epoch {} val loss {:.4}",
        hist.best_epoch, hist.best_val_loss
    );
    Ok(mil)
}

struct RoundOutput<'a> {
    mil: &'a MilModel,
    encoder: &'a EncoderModel,
    dataset_csv: String,
    report: &'a RoundReport,
    seconds: f64,
}

fn write_round(run_dir: &Path, out: &RoundOutput) -> Result<()> {
    let dir = round_dir(run_dir, out.report.round);
    fs::create_dir_all(&dir)?;
    out.mil.save(&dir.join("mil.ckpt"))?;
    out.encoder.save(&dir.join("encoder.ckpt"))?;
    fs::write(dir.join("dstar.csv"), &out.dataset_csv)?;
    fs::write(dir.join("timing.csv"), format!("stage,seconds\nround,{}\n", out.seconds))?;
    fs::write(dir.join("report.csv"), out.report.to_csv())?;
    Ok(())
}

fn evaluate_round(
    cfg: &RunConfig,
    cohort: &Cohort,
    mil: &MilModel,
    encoder: &EncoderModel,
    round: usize,
    refinement: Option<RefineStats>,
) -> Result<RoundReport> {
    let n = cfg.n_classes;
    Ok(RoundReport {
        round,
        val: evaluate_bags(mil, &cohort.val)?,
        test: evaluate_bags(mil, &cohort.test)?,
        patch: evaluate_patches_encoder(encoder, &cohort.test, &cohort.test_truth, n)?,
        patch_mil: evaluate_patches_mil(mil, &cohort.test, &cohort.test_truth, n)?,
        refinement,
    })
}

/// Completed rounds found on disk, in order, stopping at the first gap.
fn completed_rounds(run_dir: &Path, max_round: usize) -> Result<Vec<RoundReport>> {
    let mut reports = Vec::new();
    for r in 0..=max_round {
        let path = round_dir(run_dir, r).join("report.csv");
        if !path.exists() {
            break;
        }
        reports.push(RoundReport::from_csv(&fs::read_to_string(path)?)?);
    }
    Ok(reports)
}

/// Round-level early stopping on validation AUC: `true` once `patience`
/// consecutive rounds failed to improve on the best so far. Zero disables.
fn should_stop(reports: &[RoundReport], patience: usize) -> bool {
    if patience == 0 {
        return false;
    }
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    for r in reports {
        if r.val.auc > best {
            best = r.val.auc;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    stale >= patience
}

/// Runs the loop on the configured cohort.
pub fn run(cfg: &RunConfig) -> Result<Vec<RoundReport>> {
    cfg.validate()?;
    let cohort = prepare_cohort(cfg).map_err(|e| e.at_stage("cohort", 0))?;
    run_with_cohort(cfg, cohort)
}

pub fn run_with_cohort(cfg: &RunConfig, mut cohort: Cohort) -> Result<Vec<RoundReport>> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    fs::create_dir_all(&run_dir)?;
    fs::write(run_dir.join("config.echo"), cfg.echo())?;

    let base_encoder = initial_encoder(cfg, &cohort.train).map_err(|e| e.at_stage("encoder", 0))?;
    let mut reports = if cfg.resume {
        completed_rounds(&run_dir, cfg.rounds)?
    } else {
        Vec::new()
    };

    let (mut encoder, mut mil) = if let Some(last) = reports.last() {
        let dir = round_dir(&run_dir, last.round);
        info!("resuming after round {}", last.round);
        let encoder = EncoderModel::load(&dir.join("encoder.ckpt")).map_err(|e| e.at_stage("resume", last.round))?;
        let mil = MilModel::load(&dir.join("mil.ckpt")).map_err(|e| e.at_stage("resume", last.round))?;
        for bag in cohort.all_bags_mut() {
            reextract(&encoder, std::slice::from_mut(bag)).map_err(|e| e.at_stage("reextract", last.round))?;
        }
        (encoder, mil)
    } else {
        let start = Instant::now();
        let encoder = base_encoder.clone();
        for bag in cohort.all_bags_mut() {
            reextract(&encoder, std::slice::from_mut(bag)).map_err(|e| e.at_stage("reextract", 0))?;
        }
        let mil = fit_mil(cfg, &cohort, None, 0).map_err(|e| e.at_stage("train-mil", 0))?;
        let report = evaluate_round(cfg, &cohort, &mil, &encoder, 0, None).map_err(|e| e.at_stage("eval", 0))?;
        write_round(
            &run_dir,
            &RoundOutput {
                mil: &mil,
                encoder: &encoder,
                dataset_csv: "slide_id,patch_index,label,source\n".into(),
                report: &report,
                seconds: start.elapsed().as_secs_f64(),
            },
        )
        .map_err(|e| e.at_stage("checkpoint", 0))?;
        reports.push(report);
        (encoder, mil)
    };

    let refine_cfg = cfg.refine_config();
    while reports.len() <= cfg.rounds && !should_stop(&reports, cfg.round_patience) {
        let round = reports.len();
        let start = Instant::now();

        let (split, _) = init_pseudo_labels(&mil, &cohort.train, round - 1, cfg.k0)
            .map_err(|e| e.at_stage("confidence", round))?;
        let seeds = (
            round_seed(cfg.seed, rng::streams::KMEANS_FIRST, round),
            round_seed(cfg.seed, rng::streams::KMEANS_SECOND, round),
        );
        let state = refine(&cohort.train, &split, &refine_cfg, seeds).map_err(|e| e.at_stage("refine", round))?;
        for w in &state.warnings {
            warn!("round {round}: {w}");
        }
        check_invariants(&state, &cohort.train).map_err(|e| e.at_stage("audit", round))?;
        let dataset = build_patch_dataset(&cohort.train, &state.cleaned_high, &state.final_negatives(), cfg.n_classes)
            .map_err(|e| e.at_stage("refine", round))?;
        let stats = refine_stats(&state, &dataset, &cohort.train_truth);

        let start_encoder = if cfg.reset_encoder { &base_encoder } else { &encoder };
        let (trained, hist) = train_encoder(
            start_encoder,
            &cohort.train,
            &dataset,
            &cfg.encoder_hyper(),
            round_seed(cfg.seed, rng::streams::ENCODER_TRAIN, round),
        )
        .map_err(|e| e.at_stage("finetune", round))?;
        info!(
            "round {round}: |D*| = {}, encoder best epoch {}",
            dataset.len(),
            hist.best_epoch
        );
        encoder = trained;
        for bag in cohort.all_bags_mut() {
            reextract(&encoder, std::slice::from_mut(bag)).map_err(|e| e.at_stage("reextract", round))?;
        }
        mil = fit_mil(cfg, &cohort, Some(&mil), round).map_err(|e| e.at_stage("train-mil", round))?;
        let report =
            evaluate_round(cfg, &cohort, &mil, &encoder, round, Some(stats)).map_err(|e| e.at_stage("eval", round))?;
        write_round(
            &run_dir,
            &RoundOutput {
                mil: &mil,
                encoder: &encoder,
                dataset_csv: dataset.to_csv(&cohort.train),
                report: &report,
                seconds: start.elapsed().as_secs_f64(),
            },
        )
        .map_err(|e| e.at_stage("checkpoint", round))?;
        reports.push(report);
    }
    Ok(reports)
}

/// One row per `(k0, clusters)` cell with the final-round metrics, or the
/// error that stopped the cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k0: usize,
    pub clusters: usize,
    pub outcome: std::result::Result<RoundReport, String>,
}

pub fn sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let cohort = prepare_cohort(cfg).map_err(|e| e.at_stage("cohort", 0))?;
    let mut rows = Vec::new();
    for &k0 in &cfg.sweep_k0 {
        for &clusters in &cfg.sweep_clusters {
            let mut cell = cfg.clone();
            cell.k0 = k0;
            cell.clusters = clusters;
            cell.name = format!("{}/k0_{k0}_c_{clusters}", cfg.name);
            let outcome = run_with_cohort(&cell, cohort.clone())
                .map(|r| r.last().cloned().expect("a run reports at least round 0"))
                .map_err(|e| {
                    warn!("sweep cell k0={k0} C={clusters} failed: {e}");
                    e.to_string()
                });
            rows.push(SweepRow { k0, clusters, outcome });
        }
    }
    fs::write(cfg.run_dir().join("sweep.csv"), sweep_csv(&rows))?;
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k0,clusters,final_round,test_auc,test_acc,test_f1,patch_f1,patch_cpm,error\n");
    for r in rows {
        match &r.outcome {
            Ok(rep) => out.push_str(&format!(
                "{},{},{},{},{},{},{},{},\n",
                r.k0,
                r.clusters,
                rep.round,
                rep.test.auc,
                rep.test.acc,
                rep.test.f1,
                opt(rep.patch.map(|p| p.f1)),
                opt(rep.patch.map(|p| p.cpm)),
            )),
            Err(e) => out.push_str(&format!(
                "{},{},NA,NA,NA,NA,NA,NA,{}\n",
                r.k0,
                r.clusters,
                e.replace([',', '\n'], ";")
            )),
        }
    }
    out
}
