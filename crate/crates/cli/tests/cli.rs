use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn hcft(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hcft"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// A cohort small enough for every stage to finish in well under a second.
fn tiny(dir: &TempDir) -> &Path {
    let cfg = "\
name = tiny
out_dir = runs
seed = 4
bags_per_class = 8,8
test_bags_per_class = 4
bag_size_min = 20
bag_size_max = 30
positive_fraction_min = 0.2
positive_fraction_max = 0.4
raw_dim = 6
embed_dim = 4
k0 = 3
clusters = 3
mil_epochs = 6
enc_epochs = 4
rounds = 1
";
    fs::write(dir.path().join("tiny.conf"), cfg).unwrap();
    dir.path()
}

#[test]
fn help_documents_every_config_key() {
    let dir = TempDir::new().unwrap();
    let help = ok(&hcft(dir.path(), &["--help"]));
    for (key, _) in hcft::config::KEYS {
        assert!(help.contains(key), "--help misses `{key}`");
    }
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = TempDir::new().unwrap();
    let out = hcft(dir.path(), &["run", "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = hcft(dir.path(), &["run", "--set", "k0=ten"]);
    assert_eq!(out.status.code(), Some(2));
    let out = hcft(dir.path(), &["eval", "--cohort", "missing", "--mil", "missing.ckpt"]);
    assert_eq!(out.status.code(), Some(3));
    fs::write(dir.path().join("bad.csv"), "slide_id,score,tumor\ns1,high,1\n").unwrap();
    let out = hcft(dir.path(), &["froc", "--scores", "bad.csv"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn staged_commands_chain() {
    let tmp = TempDir::new().unwrap();
    let dir = tiny(&tmp);
    let base = ["-c", "tiny.conf", "--cohort", "data/c"];
    let with = |extra: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };
    let run = |args: Vec<String>| ok(&hcft(dir, &args.iter().map(String::as_str).collect::<Vec<_>>()));

    fs::create_dir(dir.join("data")).unwrap();
    ok(&hcft(dir, &["-c", "tiny.conf", "gen-data", "-o", "data/c"]));
    for ext in ["emb", "manifest", "truth"] {
        assert!(dir.join(format!("data/c.{ext}")).exists());
    }
    run(with(&["train-mil", "-o", "mil.ckpt"]));

    let conf = run(with(&["dump-confidence", "--mil", "mil.ckpt"]));
    let mut lines = conf.lines();
    assert_eq!(lines.next(), Some("slide_id,patch_index,attention,p_Y,score,rank"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(rows.iter().all(|r| r.len() == 6));
    assert!(rows.iter().any(|r| r[5] == "1"));

    let clusters = run(with(&["cluster", "--mil", "mil.ckpt"]));
    let mut lines = clusters.lines();
    assert_eq!(lines.next(), Some("cluster_id,class,assigned_count,fraction"));
    assert_eq!(lines.count(), 3);

    run(with(&["refine", "--mil", "mil.ckpt", "-o", "dstar.csv"]));
    let dstar = fs::read_to_string(dir.join("dstar.csv")).unwrap();
    let mut lines = dstar.lines();
    assert_eq!(lines.next(), Some("slide_id,patch_index,label,source"));
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        assert!(["0", "1", "2"].contains(&f[2]), "{line}");
        assert!(["pos", "hardneg_from_Tl", "hardneg_from_Th"].contains(&f[3]), "{line}");
    }

    run(with(&["finetune", "--dstar", "dstar.csv", "-o", "enc.ckpt"]));
    let report = run(with(&["eval", "--mil", "mil.ckpt", "--encoder", "enc.ckpt", "--froc", "froc.csv"]));
    assert!(report.starts_with("metric,value\ntest_auc,"));
    assert!(report.contains("\npatch_cpm,"));
    let curve = fs::read_to_string(dir.join("froc.csv")).unwrap();
    assert!(curve.starts_with("fpi,sensitivity\n"));
    assert!(curve.lines().count() > 1);
}

#[test]
fn froc_reads_score_rows() {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("s.csv"),
        "slide_id,score,tumor\na,0.9,1\na,0.8,0\nb,0.7,1\nb,0.1,0\n",
    )
    .unwrap();
    let out = hcft(dir.path(), &["froc", "--scores", "s.csv"]);
    let curve = ok(&out);
    assert_eq!(curve, "fpi,sensitivity\n0,0.5\n0.5,0.5\n0.5,1\n1,1\n");
    assert!(String::from_utf8_lossy(&out.stderr).contains("cpm,"));
}

#[test]
fn split_restratifies_a_stored_cohort() {
    let tmp = TempDir::new().unwrap();
    let dir = tiny(&tmp);
    ok(&hcft(dir, &["-c", "tiny.conf", "gen-data", "-o", "c"]));
    ok(&hcft(dir, &["-c", "tiny.conf", "--cohort", "c", "split", "-o", "c2", "--ratios", "0.5,0.25,0.25"]));
    let manifest = fs::read_to_string(dir.join("c2.manifest")).unwrap();
    let count = |s: &str| manifest.lines().filter(|l| l.split('\t').nth(2) == Some(s)).count();
    assert_eq!(count("train") + count("val") + count("test"), 24);
    assert_eq!(count("train"), 12);
}

#[test]
fn run_and_sweep_write_their_layout() {
    let tmp = TempDir::new().unwrap();
    let dir = tiny(&tmp);
    let out = ok(&hcft(dir, &["-c", "tiny.conf", "run", "--reset-encoder"]));
    assert!(out.starts_with("rounds,2\n"));
    let run_dir = dir.join("runs/tiny");
    let echo = fs::read_to_string(run_dir.join("config.echo")).unwrap();
    assert!(echo.contains("reset_encoder = true"));
    for r in 0..2 {
        for f in ["mil.ckpt", "encoder.ckpt", "dstar.csv", "report.csv"] {
            assert!(run_dir.join(format!("round_{r}/{f}")).exists(), "round {r} lacks {f}");
        }
    }

    let out = ok(&hcft(
        dir,
        &["-c", "tiny.conf", "-s", "rounds=0", "-s", "sweep_k0=2", "-s", "sweep_clusters=2,3", "sweep"],
    ));
    let mut lines = out.lines();
    assert!(lines.next().unwrap().starts_with("k0,clusters,"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("2,2,0,") && rows[1].starts_with("2,3,0,"));
    assert!(run_dir.join("sweep.csv").exists());
}
