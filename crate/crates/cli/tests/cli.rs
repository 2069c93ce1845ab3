use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use glyphshot::config::config_reference;
use glyphshot::harness::parse_grid_csv;
use glyphshot::synthetic;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_glyphshot"))
}

fn run(args: &[&str], config: &Path) -> Output {
    bin().args(args).arg("--config").arg(config).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn workspace(extra: &str) -> Workspace {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let config = root.join("run.toml");
    let text = format!(
        r#"
seed = 3
output_dir = "{out}"

[corpus]
pages_dir = "{pages}"
labeled_manifest = "{glyphs}/manifest.csv"

[encoder]
expander_dims = [32, 32]

[training]
epochs = 1
batch_size = 16

[evaluation]
classifiers = ["knn"]
samples_per_class = [1]
augmentations = [0]
n_bootstraps = 1
mode = "table"
{extra}
"#,
        out = root.join("out").display(),
        pages = root.join("pages").display(),
        glyphs = root.join("glyphs").display(),
    );
    fs::write(&config, text).unwrap();
    Workspace {
        _tmp: tmp,
        root,
        config,
    }
}

#[test]
fn help_lists_every_config_key() {
    let o = bin().arg("--help").output().unwrap();
    assert!(o.status.success());
    let help = stdout(&o);
    for line in config_reference().lines() {
        let key = line.split('=').next().unwrap().trim();
        assert!(help.contains(key), "{key} missing from --help");
    }
    let o = bin().args(["evaluate", "--help"]).output().unwrap();
    assert!(stdout(&o).contains("evaluation.n_bootstraps"));
}

#[test]
fn missing_page_directory_exits_with_io_code() {
    let ws = workspace("");
    let o = run(&["extract-crops"], &ws.config);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(&ws.root.join("pages").display().to_string()), "{}", stderr(&o));
}

#[test]
fn blank_page_keeps_no_crops() {
    let ws = workspace("");
    fs::create_dir_all(ws.root.join("pages")).unwrap();
    image::RgbImage::from_pixel(200, 150, image::Rgb([250, 250, 250]))
        .save(ws.root.join("pages/blank.png"))
        .unwrap();
    let o = run(&["extract-crops"], &ws.config);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("0 crops kept"), "{}", stdout(&o));
}

#[test]
fn unknown_keys_and_bad_overrides_are_validation_errors() {
    let ws = workspace("");
    let o = bin()
        .args(["show-config", "--config"])
        .arg(&ws.config)
        .args(["--set", "training.epoch=3"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
    let o = bin().args(["show-config", "--set", "training.epochs=4"]).output().unwrap();
    assert!(o.status.success());
    assert!(stdout(&o).contains("epochs = 4"));
}

#[test]
fn report_without_results_fails() {
    let ws = workspace("");
    let o = run(&["report"], &ws.config);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("results"), "{}", stderr(&o));
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn stages_chain_and_rerun_identically() {
    let ws = workspace("");
    synthetic::write_pages(&ws.root.join("pages"), 1, 320, 224, 8, 5).unwrap();
    synthetic::write_labeled_corpus(&ws.root.join("glyphs"), 3, 6, 6).unwrap();
    let out = ws.root.join("out");

    let o = run(&["extract-crops"], &ws.config);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("windows scanned"));

    let o = run(&["train-encoder"], &ws.config);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("λ=10 μ=10 φ=1"), "{}", stdout(&o));
    assert!(out.join("encoder.gsck").exists());
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert!(loss.lines().filter(|l| !l.starts_with('#')).count() >= 2);

    let o = run(&["encode"], &ws.config);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("18 feature records"), "{}", stdout(&o));
    let store = read(&out.join("features.gsfs"));

    let o = run(&["evaluate"], &ws.config);
    assert!(o.status.success(), "{}", stderr(&o));
    let grid = fs::read_to_string(out.join("results/table_knn.csv")).unwrap();
    assert_eq!(parse_grid_csv(&grid).unwrap().len(), 1);

    let o = run(&["report"], &ws.config);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("82.0"));

    let artifacts = ["crops/manifest.csv", "loss.csv", "features.gsfs", "results/table_knn.csv", "report.md"];
    let before: Vec<Vec<u8>> = artifacts.iter().map(|a| read(&out.join(a))).collect();
    for stage in ["extract-crops", "train-encoder", "encode", "evaluate", "report"] {
        let o = run(&[stage], &ws.config);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    for (a, b) in artifacts.iter().zip(&before) {
        assert_eq!(&read(&out.join(a)), b, "{a} changed on rerun");
    }
    assert_eq!(read(&out.join("features.gsfs")), store);
    let hash_line = fs::read_to_string(out.join("results/table_knn.csv")).unwrap();
    assert!(hash_line.starts_with("# config_hash="));

    let o = bin()
        .args(["train-encoder", "--resume", "--config"])
        .arg(&ws.config)
        .args(["--set", "training.epochs=2"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("resumed at step"), "{}", stdout(&o));
}

#[test]
fn infeasible_cells_fail_the_run_but_write_results() {
    let ws = workspace("");
    synthetic::write_labeled_corpus(&ws.root.join("glyphs"), 3, 6, 6).unwrap();
    let out = ws.root.join("out");
    fs::create_dir_all(&out).unwrap();
    // A freshly initialised encoder is enough when no augmentation is requested.
    let o = bin()
        .args(["train-encoder", "--config"])
        .arg(&ws.config)
        .args(["--set", &format!("corpus.ssl_manifest={}", ws.root.join("glyphs/manifest.csv").display())])
        .args(["--set", "training.batch_size=4"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let o = bin()
        .args(["encode", "--config"])
        .arg(&ws.config)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let o = bin()
        .args(["evaluate", "--jobs", "2", "--config"])
        .arg(&ws.config)
        .args(["--set", "evaluation.samples_per_class=[1, 50]"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("1 grid cells failed"), "{}", stderr(&o));
    let rows = parse_grid_csv(&fs::read_to_string(out.join("results/table_knn.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].mean.is_some());
    assert!(rows[1].mean.is_none());
}
