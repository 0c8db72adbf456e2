use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use log::{info, warn};

use hcft::confidence::init_pseudo_labels;
use hcft::config::{keys_help, RunConfig};
use hcft::databag::{load_cohort, save_cohort, split_cohort, Bag};
use hcft::finetune::{reextract, train_encoder, tumor_score, EncoderModel};
use hcft::metrics::{cpm, froc, FrocCurve};
use hcft::pipeline::{
    evaluate_bags, evaluate_patches_encoder, evaluate_patches_mil, fit_mil, generate_split_cohort, initial_encoder,
    prepare_cohort, round_seed, run, sweep, sweep_csv, Cohort, PatchScores,
};
use hcft::refine::{build_patch_dataset, check_invariants, first_clustering, refine, PatchDataset};
use hcft::rng::streams;
use hcft::{abmil::MilModel, Error, Result};

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("PATH").value_parser(value_parser!(PathBuf)).help(help)
}

fn encoder_arg() -> Arg {
    path_arg("encoder", "Encoder checkpoint used to embed the cohort [default: seeded initial encoder]")
}

fn mil_arg() -> Arg {
    path_arg("mil", "MIL checkpoint").required(true)
}

fn round_arg() -> Arg {
    Arg::new("round")
        .long("round")
        .value_name("T")
        .value_parser(value_parser!(usize))
        .default_value("0")
        .help("Iteration index used for the K_t schedule")
}

fn out_arg(help: &'static str) -> Arg {
    path_arg("out", help).short('o')
}

fn cli() -> Command {
    Command::new("hcft")
        .about("Heuristic clustering-driven feature fine-tuning for multiple instance learning")
        .after_long_help(format!("Configuration keys (file lines `key = value`, or --set key=value):\n{}", keys_help()))
        .subcommand_required(true)
        .arg(
            path_arg("config", "Config file of `key = value` lines")
                .short('c')
                .global(true),
        )
        .arg(
            Arg::new("set")
                .long("set")
                .short('s')
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .global(true)
                .help("Override one config key; repeatable, applied after the file"),
        )
        .arg(path_arg("cohort", "Cohort file stem (same as --set cohort=STEM)").global(true))
        .arg(
            Arg::new("verbose")
                .long("verbose")
                .short('v')
                .action(ArgAction::Count)
                .global(true)
                .help("More log output (-v info, -vv debug)"),
        )
        .subcommand(
            Command::new("gen-data")
                .about("Generate a synthetic cohort with train/val/test splits")
                .arg(out_arg("Output file stem").required(true)),
        )
        .subcommand(
            Command::new("split")
                .about("Re-split a stored cohort into train/val/test, stratified by bag label")
                .arg(out_arg("Output file stem").required(true))
                .arg(
                    Arg::new("ratios")
                        .long("ratios")
                        .value_name("TRAIN,VAL,TEST")
                        .default_value("0.6,0.2,0.2")
                        .help("Split ratios"),
                ),
        )
        .subcommand(
            Command::new("train-mil")
                .about("Train the attention MIL model on the embedded cohort")
                .arg(encoder_arg())
                .arg(round_arg())
                .arg(out_arg("Checkpoint path").required(true)),
        )
        .subcommand(
            Command::new("dump-confidence")
                .about("Per-instance attention, label probability, confidence score and rank of training bags")
                .arg(mil_arg())
                .arg(encoder_arg())
                .arg(round_arg())
                .arg(out_arg("Write to a file instead of stdout")),
        )
        .subcommand(
            Command::new("cluster")
                .about("First clustering of the high-confidence set and each cluster's class")
                .arg(mil_arg())
                .arg(encoder_arg())
                .arg(round_arg())
                .arg(out_arg("Write to a file instead of stdout")),
        )
        .subcommand(
            Command::new("refine")
                .about("Run the clustering refinement and emit the refined patch dataset")
                .arg(mil_arg())
                .arg(encoder_arg())
                .arg(round_arg())
                .arg(out_arg("Write to a file instead of stdout")),
        )
        .subcommand(
            Command::new("finetune")
                .about("Fine-tune the encoder on a refined patch dataset")
                .arg(path_arg("dstar", "Refined dataset CSV from `refine`").required(true))
                .arg(encoder_arg())
                .arg(round_arg())
                .arg(out_arg("Checkpoint path").required(true)),
        )
        .subcommand(
            Command::new("eval")
                .about("Bag- and patch-level metrics on the test split")
                .arg(mil_arg())
                .arg(encoder_arg())
                .arg(out_arg("Write the report to a file instead of stdout"))
                .arg(path_arg("froc", "Write the patch-head FROC curve here"))
                .arg(path_arg("froc-mil", "Write the MIL instance-score FROC curve here")),
        )
        .subcommand(
            Command::new("froc")
                .about("FROC curve from `slide_id,score,tumor` rows; CPM goes to stderr")
                .arg(path_arg("scores", "Scores CSV").required(true))
                .arg(out_arg("Write to a file instead of stdout")),
        )
        .subcommand(
            Command::new("run")
                .about("The full iterative loop with per-round checkpoints and reports")
                .arg(Arg::new("resume").long("resume").action(ArgAction::SetTrue).help("Continue after the last completed round"))
                .arg(
                    Arg::new("reset-encoder")
                        .long("reset-encoder")
                        .action(ArgAction::SetTrue)
                        .help("Fine-tune from the initial encoder every round"),
                ),
        )
        .subcommand(Command::new("sweep").about("One run per (k0, clusters) grid cell on a shared cohort"))
}

fn load_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in m.get_many::<String>("set").into_iter().flatten() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(stem) = m.get_one::<PathBuf>("cohort") {
        cfg.cohort = Some(stem.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Loads the configured cohort and embeds every bag with the given encoder.
fn embedded_cohort(cfg: &RunConfig, m: &ArgMatches) -> Result<(Cohort, EncoderModel)> {
    let mut cohort = prepare_cohort(cfg)?;
    let encoder = match m.get_one::<PathBuf>("encoder") {
        Some(p) => EncoderModel::load(p)?,
        None => initial_encoder(cfg, &cohort.train)?,
    };
    for bag in cohort.all_bags_mut() {
        reextract(&encoder, std::slice::from_mut(bag))?;
    }
    Ok((cohort, encoder))
}

fn round(m: &ArgMatches) -> usize {
    m.get_one::<usize>("round").copied().unwrap_or(0)
}

fn cmd_split(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let stem = cfg
        .cohort
        .as_ref()
        .ok_or_else(|| Error::Config("split needs --cohort".into()))?;
    let ratios: Vec<f64> = m
        .get_one::<String>("ratios")
        .unwrap()
        .split(',')
        .map(|r| r.trim().parse().map_err(|_| Error::Config(format!("bad ratio `{r}`"))))
        .collect::<Result<_>>()?;
    let mut bags = load_cohort(stem)?;
    split_cohort(&mut bags, &ratios, cfg.seed)?;
    save_cohort(&bags, m.get_one::<PathBuf>("out").unwrap())
}

fn cmd_dump_confidence(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let (cohort, _) = embedded_cohort(cfg, m)?;
    let mil = MilModel::load(m.get_one::<PathBuf>("mil").unwrap())?;
    let (_, table) = init_pseudo_labels(&mil, &cohort.train, round(m), cfg.k0)?;
    let mut out = String::from("slide_id,patch_index,attention,p_Y,score,rank\n");
    for (bag, conf) in cohort.train.iter().zip(&table.bags) {
        let ranks = conf.ranks();
        for (k, inst) in bag.instances.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                inst.slide_id, inst.patch_index, conf.attention[k], conf.label_probs[k], conf.scores[k], ranks[k]
            ));
        }
    }
    emit(m.get_one("out"), &out)
}

fn cmd_cluster(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let (cohort, _) = embedded_cohort(cfg, m)?;
    let mil = MilModel::load(m.get_one::<PathBuf>("mil").unwrap())?;
    let t = round(m);
    let (split, _) = init_pseudo_labels(&mil, &cohort.train, t, cfg.k0)?;
    let seed = round_seed(cfg.seed, streams::KMEANS_FIRST, t + 1);
    let (clusters, sets, warnings) = first_clustering(&cohort.train, &split.high, &cfg.refine_config(), seed)?;
    for w in warnings {
        warn!("{w}");
    }
    let mut out = String::from("cluster_id,class,assigned_count,fraction\n");
    for (j, size) in clusters.sizes().into_iter().enumerate() {
        let (class, fraction) = match sets.owner[j] {
            Some(a) => (a.to_string(), sets.fractions[j][a]),
            None => ("none".to_string(), sets.fractions[j].iter().copied().fold(0.0, f64::max)),
        };
        out.push_str(&format!("{j},{class},{size},{fraction}\n"));
    }
    emit(m.get_one("out"), &out)
}

fn cmd_refine(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let (cohort, _) = embedded_cohort(cfg, m)?;
    let mil = MilModel::load(m.get_one::<PathBuf>("mil").unwrap())?;
    let t = round(m);
    let (split, _) = init_pseudo_labels(&mil, &cohort.train, t, cfg.k0)?;
    let seeds = (
        round_seed(cfg.seed, streams::KMEANS_FIRST, t + 1),
        round_seed(cfg.seed, streams::KMEANS_SECOND, t + 1),
    );
    let state = refine(&cohort.train, &split, &cfg.refine_config(), seeds)?;
    for w in &state.warnings {
        warn!("{w}");
    }
    check_invariants(&state, &cohort.train)?;
    let dataset = build_patch_dataset(&cohort.train, &state.cleaned_high, &state.final_negatives(), cfg.n_classes)?;
    for w in &dataset.warnings {
        warn!("{w}");
    }
    info!("refined dataset class histogram {:?}", dataset.histogram());
    emit(m.get_one("out"), &dataset.to_csv(&cohort.train))
}

fn cmd_finetune(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let (cohort, encoder) = embedded_cohort(cfg, m)?;
    let text = fs::read_to_string(m.get_one::<PathBuf>("dstar").unwrap())?;
    let dataset = PatchDataset::from_csv(&text, &cohort.train, cfg.n_classes)?;
    let seed = round_seed(cfg.seed, streams::ENCODER_TRAIN, round(m) + 1);
    let (trained, hist) = train_encoder(&encoder, &cohort.train, &dataset, &cfg.encoder_hyper(), seed)?;
    for w in &hist.warnings {
        warn!("{w}");
    }
    info!("encoder best epoch {}", hist.best_epoch);
    trained.save(m.get_one::<PathBuf>("out").unwrap())
}

fn patch_rows(report: &mut String, prefix: &str, scores: Option<PatchScores>) {
    if let Some(p) = scores {
        for (k, v) in [("acc", p.acc), ("f1", p.f1), ("auc", p.auc), ("cpm", p.cpm)] {
            report.push_str(&format!("{prefix}_{k},{v}\n"));
        }
    }
}

fn curve_for<F: Fn(&[f64]) -> f64>(bags: &[Bag], cohort: &Cohort, probs: Vec<Vec<f64>>, score: F) -> Result<FrocCurve> {
    let tumor: Vec<bool> = cohort.test_truth.labels.iter().flatten().map(|t| t.is_some_and(|l| l > 0)).collect();
    let slides: Vec<&str> = bags.iter().flat_map(|b| b.instances.iter().map(|i| i.slide_id.as_str())).collect();
    let scores: Vec<f64> = probs.iter().map(|p| score(p)).collect();
    froc(&scores, &tumor, &slides)
}

fn cmd_eval(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let (cohort, encoder) = embedded_cohort(cfg, m)?;
    let mil = MilModel::load(m.get_one::<PathBuf>("mil").unwrap())?;
    let n = cfg.n_classes;
    let bags = evaluate_bags(&mil, &cohort.test)?;
    let mut report = format!(
        "metric,value\ntest_auc,{}\ntest_acc,{}\ntest_f1,{}\n",
        bags.auc, bags.acc, bags.f1
    );
    patch_rows(&mut report, "patch", evaluate_patches_encoder(&encoder, &cohort.test, &cohort.test_truth, n)?);
    patch_rows(&mut report, "patch_mil", evaluate_patches_mil(&mil, &cohort.test, &cohort.test_truth, n)?);
    emit(m.get_one("out"), &report)?;

    let froc_paths = (m.get_one::<PathBuf>("froc"), m.get_one::<PathBuf>("froc-mil"));
    if froc_paths.0.is_none() && froc_paths.1.is_none() {
        return Ok(());
    }
    if !cohort.test_truth.is_complete() {
        return Err(Error::Metric("FROC needs instance truth labels for the test split".into()));
    }
    if let Some(p) = froc_paths.0 {
        let mut probs = Vec::new();
        for b in &cohort.test {
            probs.extend(encoder.predict_proba(&b.raw_matrix()?)?.row_iter().map(|r| r.to_vec()));
        }
        fs::write(p, curve_for(&cohort.test, &cohort, probs, |p| tumor_score(p, n))?.to_csv())?;
    }
    if let Some(p) = froc_paths.1 {
        let mut probs = Vec::new();
        for b in &cohort.test {
            probs.extend(mil.bag_forward(b)?.instance_probs.row_iter().map(|r| r.to_vec()));
        }
        fs::write(p, curve_for(&cohort.test, &cohort, probs, |p| p[1..].iter().sum())?.to_csv())?;
    }
    Ok(())
}

fn read_scores(path: &Path) -> Result<(Vec<String>, Vec<f64>, Vec<bool>)> {
    let text = fs::read_to_string(path)?;
    let (mut slides, mut scores, mut tumor) = (Vec::new(), Vec::new(), Vec::new());
    let mut offset = 0u64;
    for (i, line) in text.lines().enumerate() {
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() || (i == 0 && line.starts_with("slide_id")) {
            continue;
        }
        let bad = || Error::Format {
            offset: line_offset,
            message: format!("expected `slide_id,score,tumor`, got `{line}`"),
        };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(bad());
        }
        slides.push(f[0].to_string());
        scores.push(f[1].parse().map_err(|_| bad())?);
        tumor.push(match f[2] {
            "0" | "false" => false,
            "1" | "true" => true,
            _ => return Err(bad()),
        });
    }
    Ok((slides, scores, tumor))
}

fn cmd_froc(m: &ArgMatches) -> Result<()> {
    let (slides, scores, tumor) = read_scores(m.get_one::<PathBuf>("scores").unwrap())?;
    let curve = froc(&scores, &tumor, &slides)?;
    eprintln!("cpm,{}", cpm(&curve));
    emit(m.get_one("out"), &curve.to_csv())
}

fn cmd_run(mut cfg: RunConfig, m: &ArgMatches) -> Result<()> {
    cfg.resume |= m.get_flag("resume");
    cfg.reset_encoder |= m.get_flag("reset-encoder");
    let reports = run(&cfg)?;
    let last = reports.last().expect("round 0 always reports");
    println!("rounds,{}", reports.len());
    print!("{}", last.to_csv());
    info!("outputs in {}", cfg.run_dir().display());
    Ok(())
}

fn dispatch(m: &ArgMatches) -> Result<()> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    if name == "froc" {
        return cmd_froc(sub);
    }
    let cfg = load_config(sub)?;
    match name {
        "gen-data" => save_cohort(&generate_split_cohort(&cfg)?, sub.get_one::<PathBuf>("out").unwrap()),
        "split" => cmd_split(&cfg, sub),
        "train-mil" => {
            let (cohort, _) = embedded_cohort(&cfg, sub)?;
            let mil = fit_mil(&cfg, &cohort, None, round(sub))?;
            mil.save(sub.get_one::<PathBuf>("out").unwrap())
        }
        "dump-confidence" => cmd_dump_confidence(&cfg, sub),
        "cluster" => cmd_cluster(&cfg, sub),
        "refine" => cmd_refine(&cfg, sub),
        "finetune" => cmd_finetune(&cfg, sub),
        "eval" => cmd_eval(&cfg, sub),
        "run" => cmd_run(cfg, sub),
        "sweep" => {
            print!("{}", sweep_csv(&sweep(&cfg)?));
            Ok(())
        }
        other => unreachable!("unknown subcommand {other}"),
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let level = match matches.subcommand().map_or(0, |(_, s)| s.get_count("verbose")) {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
