//! The five pipeline stages behind the command-line subcommands. Each stage
//! reads its inputs from the run configuration, writes its artifacts under
//! `output_dir` tagged with the configuration hash, and returns a summary.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::classifiers::ClassifierKind;
use crate::config::{EvaluationMode, RunConfig};
use crate::corpus::{
    load_corpus, read_feature_store, stratified_split, write_feature_store, write_manifest, ManifestRow, FEATURE_DIM,
};
use crate::encoder::{read_loss_history, train_encoder_with, write_loss_history, Encoder, TrainOptions, VicRegConfig};
use crate::error::{Error, Result};
use crate::harness::{
    confusion_report, grid_csv, parse_grid_csv, reference, results_grid, run_records, CellOutcome, EvalContext,
    FeatureTable, GridCsvRow, ResultsGrid, RowKey,
};
use crate::nn::Checkpoint;
use crate::preprocess::{extract_crops, window_origins, ManuscriptPage};
use crate::seed::{self, stream};

/// Label written for crops that have not been annotated.
pub const UNLABELED: &str = "unlabeled";

fn hash_comment(hash: &str) -> String {
    format!("config_hash={hash}")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable");
    text.push('\n');
    write_text(path, &text)
}

/// `λ=10 μ=10 φ=1`.
pub fn vicreg_weights(v: &VicRegConfig) -> String {
    format!("λ={} μ={} φ={}", v.lambda_inv, v.mu_var, v.phi_cov)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub config_hash: String,
    pub pages: usize,
    pub windows: usize,
    pub kept: usize,
    pub rejection_rate: f64,
    pub manifest: PathBuf,
}

impl ExtractSummary {
    pub fn lines(&self) -> Vec<String> {
        vec![
            format!("{} pages, {} windows scanned", self.pages, self.windows),
            format!(
                "{} crops kept, rejection rate {:.2}%",
                self.kept,
                100.0 * self.rejection_rate
            ),
            format!("manifest: {}", self.manifest.display()),
        ]
    }
}

fn page_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "page directory does not exist"),
        ));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Scans every PNG page and writes kept windows plus a manifest.
pub fn extract_crops_stage(config: &RunConfig) -> Result<ExtractSummary> {
    let hash = config.hash();
    let files = page_files(&config.corpus.pages_dir)?;
    let out_dir = config.crops_dir();
    create_dir(&out_dir)?;
    let scan = &config.preprocess.scan;

    let per_page: Vec<(usize, Vec<ManifestRow>)> = files
        .par_iter()
        .map(|path| {
            let img = image::open(path)
                .map_err(|e| Error::Image {
                    path: path.clone(),
                    message: e.to_string(),
                })?
                .to_rgb8();
            let page_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let page = ManuscriptPage::new(page_id.clone(), img, path.display().to_string())
                .map_err(|e| e.context(path.display().to_string()))?;
            let windows = window_origins(page.image.width(), page.image.height(), scan).len();
            let crops = extract_crops(&page, &config.preprocess.binarization, scan)?;
            let mut rows = Vec::with_capacity(crops.len());
            for c in crops {
                let id = format!("{page_id}_{}_{}", c.origin.0, c.origin.1);
                let file = format!("{id}.png");
                let target = out_dir.join(&file);
                c.crop.save(&target).map_err(|e| Error::Image {
                    path: target.clone(),
                    message: e.to_string(),
                })?;
                rows.push(ManifestRow {
                    glyph_id: id,
                    image_path: file,
                    label: UNLABELED.into(),
                    page_id: page_id.clone(),
                    x: c.origin.0,
                    y: c.origin.1,
                    w: scan.window,
                    h: scan.window,
                });
            }
            Ok((windows, rows))
        })
        .collect::<Result<_>>()?;

    let windows: usize = per_page.iter().map(|(w, _)| w).sum();
    let rows: Vec<ManifestRow> = per_page.into_iter().flat_map(|(_, r)| r).collect();
    let manifest = config.ssl_manifest_target();
    write_manifest(&manifest, &rows, Some(&hash_comment(&hash)))?;
    let summary = ExtractSummary {
        config_hash: hash,
        pages: files.len(),
        windows,
        kept: rows.len(),
        rejection_rate: if windows == 0 { 0.0 } else { 1.0 - rows.len() as f64 / windows as f64 },
        manifest,
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

impl RunConfig {
    fn ssl_manifest_target(&self) -> PathBuf {
        self.crops_dir().join("manifest.csv")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub vicreg: String,
    pub crops: usize,
    pub epochs_completed: usize,
    pub resumed_from_step: Option<u64>,
    pub last_step: u64,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
    pub loss_history: PathBuf,
}

impl TrainSummary {
    pub fn lines(&self) -> Vec<String> {
        let mut out = vec![format!("VICReg weights {}", self.vicreg)];
        if let Some(s) = self.resumed_from_step {
            out.push(format!("resumed at step {s}"));
        }
        out.push(format!(
            "{} crops, {} epochs, {} steps",
            self.crops, self.epochs_completed, self.last_step
        ));
        if let Some(l) = self.final_loss {
            out.push(format!("final loss {l:.6}"));
        }
        out.push(format!("checkpoint: {}", self.checkpoint.display()));
        out.push(format!("loss history: {}", self.loss_history.display()));
        out
    }
}

/// Self-supervised training on the crop manifest. With `resume`, training
/// continues from the existing checkpoint and the loss history is extended.
pub fn train_encoder_stage(config: &RunConfig, resume: bool) -> Result<TrainSummary> {
    let hash = config.hash();
    let manifest = config.ssl_manifest();
    let (_, glyphs) = load_corpus(&manifest).map_err(|e| e.context("loading training crops"))?;
    if glyphs.is_empty() {
        return Err(Error::validation(format!("{} lists no crops", manifest.display())));
    }
    let crops: Vec<_> = glyphs.into_iter().map(|g| g.crop).collect();
    create_dir(&config.output_dir)?;
    let ck_path = config.encoder_checkpoint();
    let loss_path = config.loss_history();

    let resume_ck = if resume {
        Some(Checkpoint::load(&ck_path)?)
    } else {
        None
    };
    let resumed_from_step = resume_ck
        .as_ref()
        .map(|ck| ck.meta.get("step").and_then(serde_json::Value::as_u64).unwrap_or(0));
    let mut history = match resumed_from_step {
        Some(step) if loss_path.exists() => read_loss_history(&loss_path)?
            .into_iter()
            .filter(|r| r.step <= step)
            .collect(),
        _ => Vec::new(),
    };

    info!("training encoder with VICReg weights {}", vicreg_weights(&config.vicreg));
    let pipeline = config.ssl_pipeline()?;
    let train = config.train_config(Some(ck_path.clone()));
    let outcome = train_encoder_with(
        &crops,
        &config.encoder,
        &config.vicreg,
        &train,
        &pipeline,
        TrainOptions {
            resume: resume_ck.as_ref(),
            extra_meta: Some(json!({ "config_hash": hash })),
        },
    )?;
    history.extend(outcome.history.iter().copied());
    write_loss_history(&loss_path, &history, Some(&hash_comment(&hash)))?;

    let summary = TrainSummary {
        config_hash: hash,
        vicreg: vicreg_weights(&config.vicreg),
        crops: crops.len(),
        epochs_completed: outcome.epochs_completed,
        resumed_from_step,
        last_step: history.last().map_or(resumed_from_step.unwrap_or(0), |r| r.step),
        final_loss: history.last().map(|r| r.total),
        checkpoint: ck_path,
        loss_history: loss_path,
    };
    let log: String = summary.lines().iter().map(|l| format!("{l}\n")).collect();
    write_text(&config.output_dir.join("train.log"), &log)?;
    Ok(summary)
}

fn load_encoder(config: &RunConfig) -> Result<Encoder> {
    let ck = Checkpoint::load(config.encoder_checkpoint())?;
    Encoder::from_checkpoint(&ck)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeSummary {
    pub config_hash: String,
    pub records: usize,
    pub dim: usize,
    pub store: PathBuf,
}

impl EncodeSummary {
    pub fn lines(&self) -> Vec<String> {
        vec![format!(
            "{} feature records of dimension {} written to {}",
            self.records,
            self.dim,
            self.store.display()
        )]
    }
}

/// Encodes every labelled glyph with the trained backbone.
pub fn encode_stage(config: &RunConfig) -> Result<EncodeSummary> {
    let hash = config.hash();
    let encoder = load_encoder(config)?;
    if !encoder.is_trained() {
        log::warn!("encoder checkpoint has not completed an epoch of training");
    }
    let (_, glyphs) = load_corpus(&config.corpus.labeled_manifest)?;
    let records = encoder.encode_corpus(&glyphs)?;
    create_dir(&config.output_dir)?;
    let store = config.feature_store();
    write_feature_store(&records, &store)?;
    let summary = EncodeSummary {
        config_hash: hash,
        records: records.len(),
        dim: FEATURE_DIM,
        store: store.clone(),
    };
    write_json(&sidecar(&store), &summary)?;
    Ok(summary)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateSummary {
    pub config_hash: String,
    pub tables: Vec<ResultsGrid>,
    pub series: Vec<ResultsGrid>,
    pub failed_cells: usize,
    pub files: Vec<PathBuf>,
}

impl EvaluateSummary {
    pub fn lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for g in &self.tables {
            out.push(crate::harness::render_table(g, false));
        }
        for g in &self.series {
            out.push(format!("series {}", crate::harness::render_table(g, false)));
        }
        out.push(format!("{} files written, {} failed cells", self.files.len(), self.failed_cells));
        out
    }
}

fn row_slug(row: RowKey) -> String {
    match row {
        RowKey::Shots(k) => format!("K{k}"),
        RowKey::Split { support, query } => format!("S{support}Q{query}"),
    }
}

/// Writes CSV, JSON-lines and confusion files for one grid.
fn write_grid(
    config: &RunConfig,
    grid: &ResultsGrid,
    stem: &str,
    class_names: &[String],
    files: &mut Vec<PathBuf>,
) -> Result<()> {
    let hash = config.hash();
    let dir = config.results_dir();
    let csv_path = dir.join(format!("{stem}_{}.csv", grid.classifier));
    write_text(&csv_path, &format!("# {}\n{}", hash_comment(&hash), grid_csv(grid)))?;
    files.push(csv_path);

    let jsonl_path = dir.join(format!("{stem}_{}.jsonl", grid.classifier));
    let mut jsonl = String::new();
    for rec in run_records(grid, &hash) {
        jsonl.push_str(&serde_json::to_string(&rec).expect("serialisable"));
        jsonl.push('\n');
    }
    write_text(&jsonl_path, &jsonl)?;
    files.push(jsonl_path);

    let conf_dir = dir.join("confusion");
    create_dir(&conf_dir)?;
    let subset = (!config.evaluation.confusion_subset.is_empty()).then_some(&config.evaluation.confusion_subset[..]);
    for (r, &row) in grid.rows.iter().enumerate() {
        for (c, &a) in grid.columns.iter().enumerate() {
            let CellOutcome::Ok(result) = &grid.cells[r][c] else {
                continue;
            };
            let report = confusion_report(result, class_names, subset)?;
            let base = format!("{}_{}_A{a}", grid.classifier, row_slug(row));
            let path = conf_dir.join(format!("{base}.csv"));
            write_text(&path, &format!("# {}\n{}", hash_comment(&hash), report.full))?;
            files.push(path);
            if let Some(sub) = report.subset {
                let path = conf_dir.join(format!("{base}_subset.csv"));
                write_text(&path, &format!("# {}\n{sub}", hash_comment(&hash)))?;
                files.push(path);
            }
        }
    }
    Ok(())
}

/// Runs the configured accuracy tables and augmentation series.
pub fn evaluate_stage(config: &RunConfig) -> Result<EvaluateSummary> {
    let hash = config.hash();
    let ev = &config.evaluation;
    let (vocab, glyphs) = load_corpus(&config.corpus.labeled_manifest)?;
    let records = read_feature_store(config.feature_store())?;
    let labels: HashMap<String, usize> = glyphs.iter().map(|g| (g.glyph_id.clone(), g.label)).collect();
    let table = FeatureTable::from_records(&records, &labels)?;
    if let Some(g) = glyphs.iter().find(|g| table.label(&g.glyph_id).is_none()) {
        return Err(Error::validation(format!(
            "glyph {:?} has no feature record; re-run encode",
            g.glyph_id
        )));
    }
    let split = stratified_split(
        &glyphs,
        config.corpus.test_fraction,
        seed::derive(config.seed, &[stream::SPLIT]),
    )?;
    let crops: HashMap<String, _> = glyphs.into_iter().map(|g| (g.glyph_id, g.crop)).collect();
    let pipeline = config.classify_pipeline()?;
    let encoder = if ev.augmentations.iter().any(|&a| a > 0) {
        Some(load_encoder(config)?)
    } else {
        None
    };
    let names = vocab.names().to_vec();
    let ctx = EvalContext::new(
        &names,
        &split,
        &table,
        &crops,
        encoder.as_ref(),
        &pipeline,
        &config.classifiers,
    );
    create_dir(&config.results_dir())?;

    let mut tables = Vec::new();
    let mut series = Vec::new();
    let mut files = Vec::new();
    let seed = seed::derive(config.seed, &[stream::CELL]);
    for &kind in &ev.classifiers {
        if ev.mode != EvaluationMode::Series {
            info!("evaluating {kind} table");
            let grid = results_grid(kind, &ev.table_rows(kind), &ev.augmentations, &ctx, ev.n_bootstraps, seed)?;
            write_grid(config, &grid, "table", &names, &mut files)?;
            tables.push(grid);
        }
        if ev.mode != EvaluationMode::Table {
            let row = ev.series_row(kind);
            let from_table = tables.last().filter(|g| g.classifier == kind && g.rows.contains(&row)).map(|g| {
                let r = g.rows.iter().position(|&x| x == row).expect("row present");
                ResultsGrid {
                    rows: vec![row],
                    cells: vec![g.cells[r].clone()],
                    ..g.clone()
                }
            });
            let grid = match from_table {
                Some(g) => g,
                None => {
                    info!("evaluating {kind} series");
                    crate::harness::augmentation_effect_series(kind, row, &ev.augmentations, &ctx, ev.n_bootstraps, seed)?
                }
            };
            write_grid(config, &grid, "series", &names, &mut files)?;
            series.push(grid);
        }
    }
    let failed_cells = tables.iter().chain(&series).map(ResultsGrid::failures).sum();
    Ok(EvaluateSummary {
        config_hash: hash,
        tables,
        series,
        failed_cells,
        files,
    })
}

fn read_grid(path: &Path) -> Result<Option<Vec<GridCsvRow>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_grid_csv(&text).map(Some).map_err(|e| e.context(path.display().to_string()))
}

fn ordered<T: Copy + PartialEq>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out = Vec::new();
    for i in items {
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

fn render_comparison(title: &str, rows: &[GridCsvRow], tolerance: f64, counts: &mut (usize, usize)) -> String {
    let kind = rows[0].classifier;
    let row_keys = ordered(rows.iter().map(|r| r.row));
    let cols = ordered(rows.iter().map(|r| r.a));
    let label = if kind == ClassifierKind::Proto { "S/Q" } else { "K" };
    let mut out = format!("## {title}: {kind}\n\n| {label} \\ A |");
    for a in &cols {
        let _ = write!(out, " {a} |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(cols.len()));
    out.push('\n');
    for rk in &row_keys {
        let _ = write!(out, "| {rk} |");
        for &a in &cols {
            let cell = rows.iter().find(|r| r.row == *rk && r.a == a);
            let ours = cell.and_then(|c| c.mean.map(|m| 100.0 * m));
            let paper = reference::published(kind, rk.as_pair(), a);
            let text = match (ours, paper) {
                (None, _) => "failed".to_string(),
                (Some(o), None) => format!("{o:.2}"),
                (Some(o), Some(p)) => {
                    let d = o - p;
                    let ok = d.abs() <= tolerance;
                    counts.1 += 1;
                    if ok {
                        counts.0 += 1;
                    }
                    format!("{o:.2} (ref {p:.2}, {d:+.2} {})", if ok { "OK" } else { "DIFF" })
                }
            };
            let _ = write!(out, " {text} |");
        }
        out.push('\n');
    }
    if kind == ClassifierKind::Knn {
        let baseline: Vec<String> = reference::SAMPLES_PER_CLASS
            .iter()
            .filter_map(|&k| reference::knn_baseline(k).map(|b| format!("K={k}: {b:.1}")))
            .collect();
        let _ = write!(out, "\nPrior-work kNN baseline (A=0): {}\n", baseline.join(", "));
    }
    out.push('\n');
    out
}

/// Renders produced accuracies next to the published reference values.
pub fn report_stage(config: &RunConfig) -> Result<String> {
    let dir = config.results_dir();
    if !dir.is_dir() {
        return Err(Error::io(
            &dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "results directory does not exist"),
        ));
    }
    let mut out = format!(
        "# glyphshot report\n\nconfig_hash: {}\nVICReg weights: {}\nReference values: published mean accuracies on the Capitan corpus (percent). \
         Cells within ±{:.2} points are flagged OK.\n\n",
        config.hash(),
        vicreg_weights(&config.vicreg),
        config.report.tolerance
    );
    let mut counts = (0usize, 0usize);
    let mut found = 0;
    for (stem, title) in [("table", "Accuracy table"), ("series", "Augmentation series")] {
        for kind in ClassifierKind::ALL {
            if let Some(rows) = read_grid(&dir.join(format!("{stem}_{kind}.csv")))? {
                if rows.is_empty() {
                    continue;
                }
                found += 1;
                out.push_str(&render_comparison(title, &rows, config.report.tolerance, &mut counts));
            }
        }
    }
    if found == 0 {
        return Err(Error::validation(format!("no evaluation results in {}", dir.display())));
    }
    let _ = writeln!(out, "{} of {} referenced cells within tolerance.", counts.0, counts.1);
    write_text(&config.output_dir.join("report.md"), &out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    fn config(dir: &Path) -> RunConfig {
        let mut c = RunConfig::default();
        c.output_dir = dir.join("out");
        c.corpus.pages_dir = dir.join("pages");
        c.corpus.labeled_manifest = dir.join("glyphs/manifest.csv");
        c.encoder.expander_dims = vec![16, 16];
        c.training.epochs = 1;
        c.training.batch_size = 16;
        c.evaluation.classifiers = vec![ClassifierKind::Knn, ClassifierKind::Proto];
        c.evaluation.samples_per_class = vec![1, 10];
        c.evaluation.support_query = vec![RowKey::Split { support: 1, query: 2 }];
        c.evaluation.augmentations = vec![0, 1];
        c.evaluation.n_bootstraps = 2;
        c.classifiers.proto.episodes = 20;
        c.classifiers.proto.adapt_widths = vec![16, 8];
        c.evaluation.confusion_subset = vec!["shape0".into(), "shape2".into()];
        c
    }

    #[test]
    fn full_pipeline_on_a_toy_corpus() {
        let tmp = tempfile::tempdir().unwrap();
        let c = config(tmp.path());
        synthetic::write_pages(&c.corpus.pages_dir, 1, 256, 192, 8, 1).unwrap();
        synthetic::write_labeled_corpus(&tmp.path().join("glyphs"), 3, 8, 2).unwrap();

        let ex = extract_crops_stage(&c).unwrap();
        assert_eq!(ex.windows, 7 * 5);
        assert!(ex.kept >= 16, "{ex:?}");
        let text = fs::read_to_string(&ex.manifest).unwrap();
        assert_eq!(text.lines().count(), ex.kept + 2);

        let tr = train_encoder_stage(&c, false).unwrap();
        assert!(tr.lines()[0].contains("λ=10 μ=10 φ=1"));
        let steps = read_loss_history(c.loss_history()).unwrap();
        assert_eq!(steps.len() as u64, tr.last_step);

        let mut more = c.clone();
        more.training.epochs = 2;
        let resumed = train_encoder_stage(&more, true).unwrap();
        assert_eq!(resumed.resumed_from_step, Some(tr.last_step));
        let hist = read_loss_history(c.loss_history()).unwrap();
        assert_eq!(hist.len() as u64, resumed.last_step);
        assert!(hist.windows(2).all(|w| w[1].step == w[0].step + 1));

        let en = encode_stage(&c).unwrap();
        assert_eq!(en.records, 24);

        let ev = evaluate_stage(&c).unwrap();
        assert_eq!(ev.tables.len(), 2);
        assert_eq!(ev.series.len(), 2);
        assert_eq!(ev.failed_cells, 2, "knn K=10 has too few training glyphs");
        let rows = parse_grid_csv(&fs::read_to_string(c.results_dir().join("table_knn.csv")).unwrap()).unwrap();
        assert_eq!(rows.len(), 4);
        let series = parse_grid_csv(&fs::read_to_string(c.results_dir().join("series_proto.csv")).unwrap()).unwrap();
        assert_eq!(series.len(), 2);
        assert!(c.results_dir().join("confusion/knn_K1_A0_subset.csv").exists());

        let report = report_stage(&c).unwrap();
        assert!(report.contains("K=5: 82.0"), "{report}");
        assert!(report.contains("75.96"));
    }

    #[test]
    fn missing_inputs_name_the_path() {
        let tmp = tempfile::tempdir().unwrap();
        let c = config(tmp.path());
        let err = extract_crops_stage(&c).unwrap_err();
        assert!(err.to_string().contains("pages"), "{err}");
        assert_eq!(err.class(), crate::ErrorClass::Io);
        let err = report_stage(&c).unwrap_err();
        assert!(err.to_string().contains("results"), "{err}");
        create_dir(&c.results_dir()).unwrap();
        assert!(report_stage(&c).unwrap_err().to_string().contains("results"));
    }

    #[test]
    fn blank_page_keeps_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let c = config(tmp.path());
        create_dir(&c.corpus.pages_dir).unwrap();
        image::RgbImage::from_pixel(128, 128, image::Rgb([255, 255, 255]))
            .save(c.corpus.pages_dir.join("blank.png"))
            .unwrap();
        let ex = extract_crops_stage(&c).unwrap();
        assert_eq!((ex.pages, ex.windows, ex.kept), (1, 9, 0));
    }
}
