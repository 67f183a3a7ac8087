use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fmuda::config::RunConfig;
use fmuda::manifest::Manifest;
use fmuda::report;
use sha2::{Digest, Sha256};

fn fmuda(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmuda")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn hashes(root: &Path) -> BTreeMap<PathBuf, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, String>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let h = format!("{:x}", Sha256::digest(std::fs::read(&p).unwrap()));
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), h);
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// A run small enough to finish in a second or two.
fn tiny_config(dir: &Path, data: &str, out: &str) -> PathBuf {
    let mut cfg = RunConfig { manifest: dir.join(data).join("manifest.toml"), output: dir.join(out), ..RunConfig::default() };
    cfg.net.depth = 1;
    cfg.net.base_width = 4;
    cfg.net.latent_dim = 4;
    cfg.train.epochs_pretrain = 2;
    cfg.train.epochs_adapt = 2;
    cfg.train.swd_projections = 4;
    let path = dir.join(format!("{out}.toml"));
    cfg.save(&path).unwrap();
    path
}

#[test]
fn gen_default_layout_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = fmuda(d, &["gen", "--out", "a", "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("d2: 12 images"));
    assert_eq!(code(&fmuda(d, &["gen", "--out", "b", "--seed", "5"])), 0);
    let m = Manifest::load(&d.join("a/manifest.toml")).unwrap();
    assert_eq!(m.domains.len(), 3);
    assert_eq!(m.domains.iter().map(|e| e.images.len() + e.masks.len()).sum::<usize>(), 72);
    let (ha, hb) = (hashes(&d.join("a")), hashes(&d.join("b")));
    assert_eq!(ha.len(), 73);
    assert_eq!(ha, hb);

    assert_eq!(code(&fmuda(d, &["gen", "--out", "c", "--seed", "6"])), 0);
    assert_ne!(ha, hashes(&d.join("c")));
}

#[test]
fn gen_refuses_non_empty_directory_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::create_dir(d.join("x")).unwrap();
    std::fs::write(d.join("x/keep"), "1").unwrap();
    let o = fmuda(d, &["gen", "--out", "x", "--images", "2"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).starts_with("error: ["), "{}", stderr(&o));
    assert_eq!(code(&fmuda(d, &["gen", "--out", "x", "--images", "2", "--force"])), 0);
}

#[test]
fn single_domain_dataset_has_no_sources() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&fmuda(d, &["gen", "--out", "one", "--domains", "1", "--images", "2"])), 0);
    let m = Manifest::load(&d.join("one/manifest.toml")).unwrap();
    assert_eq!(m.domain_ids(), ["d0"]);
    let cfg = tiny_config(d, "one", "out");
    let o = fmuda(d, &["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("[fednode]"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&fmuda(d, &["frobnicate"])), 1);
    assert_eq!(code(&fmuda(d, &["run", "--bogus"])), 1);
    assert_eq!(code(&fmuda(d, &["run", "--aggregation", "median"])), 1);
    assert_eq!(code(&fmuda(d, &["sweep", "--param", "lambda", "--values"])), 1);
    assert_eq!(code(&fmuda(d, &["sweep", "--param", "lambda", "--values", "0.5,1.5"])), 1);
    assert_eq!(code(&fmuda(d, &["sweep", "--param", "L", "--values", "0"])), 1);
    assert_eq!(code(&fmuda(d, &["sweep", "--param", "gamma", "--values", "1"])), 1);
    assert_eq!(code(&fmuda(d, &["--help"])), 0);
}

#[test]
fn missing_manifest_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = fmuda(dir.path(), &["run", "--manifest", "nowhere/manifest.toml"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
}

#[test]
fn run_eval_sweep_audit_and_add_source() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&fmuda(d, &["gen", "--out", "data", "--domains", "4", "--images", "4"])), 0);
    let cfg = tiny_config(d, "data", "out");
    let cfg = cfg.to_str().unwrap();

    let o = fmuda(d, &["run", "--config", cfg, "--sources", "d1,d2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("target mask files read: 0"), "{stdout}");
    let out = d.join("out");
    for f in [
        "report.txt",
        "audit.log",
        "run.toml",
        "checkpoints/d1.adapted.ckpt",
        "checkpoints/d2.pretrained.ckpt",
        "curves/d1.steps.csv",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let r = report::read_report(&out.join("report.txt")).unwrap();
    assert_eq!(r.source_ids, ["d1", "d2"]);
    assert!(!r.oracle_mode);
    assert_eq!(r.target_label_reads_during_training, 0);
    assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let audit = fmuda(d, &["audit", "out/audit.log"]);
    assert_eq!(code(&audit), 0);
    assert!(String::from_utf8_lossy(&audit.stdout).contains("audit: pass"));

    let before: BTreeMap<_, _> = hashes(&out.join("checkpoints"));
    let o = fmuda(d, &["run", "--out", "out", "--add-source", "d3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let after = hashes(&out.join("checkpoints"));
    assert_eq!(after.len(), before.len() + 2);
    for (k, v) in &before {
        assert_eq!(after.get(k), Some(v), "{} changed", k.display());
    }
    let r = report::read_report(&out.join("report.txt")).unwrap();
    assert_eq!(r.source_ids, ["d1", "d2", "d3"]);
    assert_eq!(code(&fmuda(d, &["run", "--out", "out", "--add-source", "d3"])), 2);
    assert_eq!(code(&fmuda(d, &["run", "--out", "out", "--add-source", "d0"])), 2);

    let o = fmuda(d, &["eval", "--out", "out", "--aggregation", "suda"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("eval_suda.txt")).unwrap();
    assert!(text.contains("dice_suda:") && !text.contains("dice_fmuda:"), "{text}");

    let o = fmuda(d, &["sweep", "--out", "out", "--param", "lambda", "--values", "0.1,0.3,0.5,0.7,0.9"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep_lambda.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert_eq!(csv.lines().next(), Some("lambda,dice_d0"));

    let mut log = std::fs::read_to_string(out.join("audit.log")).unwrap();
    log.push_str("d1:source\td2:source\tunlabeled_images\t16\n");
    std::fs::write(d.join("tampered.log"), log).unwrap();
    let o = fmuda(d, &["audit", "tampered.log"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("FAIL"), "{}", stderr(&o));
}

#[test]
fn oracle_run_reports_bound_and_ensemble_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&fmuda(d, &["gen", "--out", "data", "--images", "4"])), 0);
    let cfg = tiny_config(d, "data", "out");
    let o = fmuda(d, &["run", "--config", cfg.to_str().unwrap(), "--oracle", "--export-embeddings"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(d.join("out/report.txt")).unwrap();
    let r = report::parse(&text).unwrap();
    assert!(r.oracle_mode);
    let e = r.ensemble;
    for v in [e.fmuda, e.popular_vote, e.average_vote] {
        let v = v.expect("oracle runs score every aggregation");
        assert!((0.0..=1.0).contains(&v));
    }
    let bound = r.bound.as_ref().expect("bound table");
    assert!(bound.right_hand_side().is_some());
    assert!(bound.rows.iter().all(|row| row.source_error >= 0.0 && row.swd >= 0.0 && row.complexity >= 0.0));
    assert!(d.join("out/embeddings.csv").is_file());
    assert_eq!(report::without_timestamp(&text), report::without_timestamp(&report::render(&r)));
}
