use std::fmt::Write as _;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bootstrap_evaluate, reference, EpisodeSpec, EvalContext, EvalResult, RowKey};
use crate::classifiers::ClassifierKind;
use crate::error::{Error, Result};

pub const GRID_CSV_HEADER: &str = "classifier,K_or_SQ,A,mean,std";

#[derive(Debug, Clone, PartialEq)]
pub enum CellOutcome {
    Ok(EvalResult),
    Failed(String),
}

impl CellOutcome {
    pub fn result(&self) -> Option<&EvalResult> {
        match self {
            CellOutcome::Ok(r) => Some(r),
            CellOutcome::Failed(_) => None,
        }
    }
}

/// Accuracy over rows (K or S/Q) × columns (A) for one classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsGrid {
    pub classifier: ClassifierKind,
    pub rows: Vec<RowKey>,
    pub columns: Vec<usize>,
    /// `cells[row][column]`.
    pub cells: Vec<Vec<CellOutcome>>,
    pub n_bootstraps: usize,
    pub seed: u64,
}

impl ResultsGrid {
    pub fn cell(&self, row: RowKey, a: usize) -> Option<&CellOutcome> {
        let r = self.rows.iter().position(|&x| x == row)?;
        let c = self.columns.iter().position(|&x| x == a)?;
        Some(&self.cells[r][c])
    }

    pub fn failures(&self) -> usize {
        self.cells
            .iter()
            .flatten()
            .filter(|c| matches!(c, CellOutcome::Failed(_)))
            .count()
    }
}

/// Evaluates every (row, A) cell. Infeasible cells are recorded as failed
/// and the rest continue.
pub fn results_grid(
    classifier: ClassifierKind,
    rows: &[RowKey],
    columns: &[usize],
    ctx: &EvalContext<'_>,
    n_bootstraps: usize,
    seed: u64,
) -> Result<ResultsGrid> {
    if rows.is_empty() || columns.is_empty() {
        return Err(Error::validation("a results grid needs at least one row and one column"));
    }
    for &row in rows {
        EpisodeSpec::new(row, 0, classifier, n_bootstraps, seed).validate()?;
    }
    let cells: Vec<Vec<CellOutcome>> = rows
        .par_iter()
        .map(|&row| {
            columns
                .par_iter()
                .map(|&a| {
                    let spec = EpisodeSpec::new(row, a, classifier, n_bootstraps, seed);
                    match bootstrap_evaluate(&spec, ctx) {
                        Ok(r) => CellOutcome::Ok(r),
                        Err(e) => {
                            warn!("{classifier} cell {row}, A={a} failed: {e}");
                            CellOutcome::Failed(e.to_string())
                        }
                    }
                })
                .collect()
        })
        .collect();
    Ok(ResultsGrid {
        classifier,
        rows: rows.to_vec(),
        columns: columns.to_vec(),
        cells,
        n_bootstraps,
        seed,
    })
}

/// Accuracy as a function of A at a single row.
pub fn augmentation_effect_series(
    classifier: ClassifierKind,
    row: RowKey,
    a_values: &[usize],
    ctx: &EvalContext<'_>,
    n_bootstraps: usize,
    seed: u64,
) -> Result<ResultsGrid> {
    results_grid(classifier, &[row], a_values, ctx, n_bootstraps, seed)
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Plain-text table, accuracies in percent as `mean ± std`. With
/// `with_reference`, published values follow in brackets where they exist.
pub fn render_table(grid: &ResultsGrid, with_reference: bool) -> String {
    let label = if grid.classifier == ClassifierKind::Proto { "S/Q" } else { "K" };
    let mut header = vec![format!("{label} \\ A")];
    header.extend(grid.columns.iter().map(|a| a.to_string()));
    let mut body: Vec<Vec<String>> = Vec::new();
    for (r, &row) in grid.rows.iter().enumerate() {
        let mut line = vec![row.to_string()];
        for (c, &a) in grid.columns.iter().enumerate() {
            let mut text = match &grid.cells[r][c] {
                CellOutcome::Ok(res) => format!("{} ± {}", pct(res.mean), pct(res.std)),
                CellOutcome::Failed(_) => "failed".to_string(),
            };
            if with_reference {
                if let Some(p) = reference::published(grid.classifier, row.as_pair(), a) {
                    let _ = write!(text, " [{:.2}]", p);
                }
            }
            line.push(text);
        }
        body.push(line);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            body.iter()
                .map(|l| l[i].chars().count())
                .chain([header[i].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let fmt_line = |cols: &[String]| {
        cols.iter()
            .zip(&widths)
            .map(|(s, &w)| format!("{s:>w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
    };
    let mut out = format!("{}\n", grid.classifier);
    out.push_str(&fmt_line(&header));
    out.push('\n');
    out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("-+-"));
    out.push('\n');
    for line in &body {
        out.push_str(&fmt_line(line));
        out.push('\n');
    }
    out
}

/// CSV with fractions at full precision; failed cells carry `failed`.
pub fn grid_csv(grid: &ResultsGrid) -> String {
    let mut out = format!("{GRID_CSV_HEADER}\n");
    for (r, row) in grid.rows.iter().enumerate() {
        for (c, a) in grid.columns.iter().enumerate() {
            let (mean, std) = match &grid.cells[r][c] {
                CellOutcome::Ok(res) => (res.mean.to_string(), res.std.to_string()),
                CellOutcome::Failed(_) => ("failed".into(), "failed".into()),
            };
            let _ = writeln!(out, "{},{row},{a},{mean},{std}", grid.classifier);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCsvRow {
    pub classifier: ClassifierKind,
    pub row: RowKey,
    pub a: usize,
    /// `None` for failed cells.
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

pub fn parse_grid_csv(text: &str) -> Result<Vec<GridCsvRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some(h) if h.trim() == GRID_CSV_HEADER => {}
        other => return Err(Error::format("grid csv", format!("unexpected header {other:?}"))),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| Error::format("grid csv", format!("line {}: bad {what}", i + 2));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(bad("field count"));
            }
            let num = |s: &str, what: &str| -> Result<Option<f64>> {
                if s == "failed" {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(what))
                }
            };
            Ok(GridCsvRow {
                classifier: f[0].parse().map_err(|_| bad("classifier"))?,
                row: f[1].parse().map_err(|_| bad("row key"))?,
                a: f[2].parse().map_err(|_| bad("A"))?,
                mean: num(f[3], "mean")?,
                std: num(f[4], "std")?,
            })
        })
        .collect()
}

/// One JSON line per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub spec: EpisodeSpec,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub result: Option<EvalResult>,
}

pub fn run_records(grid: &ResultsGrid, config_hash: &str) -> Vec<RunRecord> {
    let mut out = Vec::new();
    for (r, &row) in grid.rows.iter().enumerate() {
        for (c, &a) in grid.columns.iter().enumerate() {
            let spec = EpisodeSpec::new(row, a, grid.classifier, grid.n_bootstraps, grid.seed);
            let (status, error, result) = match &grid.cells[r][c] {
                CellOutcome::Ok(res) => ("ok", None, Some(res.clone())),
                CellOutcome::Failed(e) => ("failed", Some(e.clone()), None),
            };
            out.push(RunRecord {
                config_hash: config_hash.to_string(),
                spec,
                status: status.to_string(),
                error,
                result,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ok(mean: f64, std: f64) -> CellOutcome {
        CellOutcome::Ok(EvalResult {
            accuracy: mean,
            confusion: vec![vec![1]],
            per_bootstrap_accuracies: vec![mean],
            mean,
            std,
        })
    }

    fn sample() -> ResultsGrid {
        ResultsGrid {
            classifier: ClassifierKind::Knn,
            rows: vec![RowKey::Shots(1), RowKey::Shots(5)],
            columns: vec![0, 20],
            cells: vec![
                vec![ok(0.123456789012345, 0.01), CellOutcome::Failed("too few".into())],
                vec![ok(1.0 / 3.0, 0.0), ok(0.9, 0.05)],
            ],
            n_bootstraps: 5,
            seed: 0,
        }
    }

    #[test]
    fn csv_round_trips_at_full_precision() {
        let g = sample();
        let rows = parse_grid_csv(&grid_csv(&g)).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].mean, Some(0.123456789012345));
        assert_eq!(rows[1].mean, None);
        assert_eq!(rows[2].mean, Some(1.0 / 3.0));
        assert_eq!(rows[3].row, RowKey::Shots(5));
        assert_eq!(rows[3].a, 20);
    }

    #[test]
    fn table_shows_percentages_and_failures() {
        let t = render_table(&sample(), true);
        assert!(t.contains("12.35 ± 1.00"), "{t}");
        assert!(t.contains("failed"));
        assert!(t.contains("[81.90]"), "{t}");
    }

    #[test]
    fn run_records_serialise_status() {
        let recs = run_records(&sample(), "abc");
        assert_eq!(recs.len(), 4);
        assert_eq!(recs[1].status, "failed");
        let line = serde_json::to_string(&recs[0]).unwrap();
        let back: RunRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, recs[0]);
    }
}
