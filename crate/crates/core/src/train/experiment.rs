use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{baseline_mean, evaluate, train, Metrics, TrainConfig, TrainOutcome};
use crate::data::{split_by_year, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const SEED_SPLIT: u64 = 1;
pub const SEED_INIT: u64 = 2;
pub const SEED_SHUFFLE: u64 = 3;

/// Mixes the base seed with a cell and a purpose tag (splitmix64 finalizer).
pub fn derive_seed(base: u64, year: i32, run: usize, purpose: u64) -> u64 {
    let mut z = base
        ^ (year as u32 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (run as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ purpose.wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Outcome of one (test year, run) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub year: i32,
    pub run: usize,
    pub split_seed: u64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub metrics: Metrics,
    pub baseline: Metrics,
}

/// A finished cell together with its trained model, handed to the caller
/// before the parameters are dropped.
pub struct CellOutcome<'a> {
    pub result: &'a CellResult,
    pub training: &'a TrainOutcome,
}

/// Mean metrics over the runs of one year, or over all years for the
/// average row (`year == None`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YearSummary {
    pub year: Option<i32>,
    pub runs: usize,
    pub mse: f64,
    pub rmse: f64,
    pub r2: f64,
    pub baseline_mse: f64,
    pub baseline_rmse: f64,
    pub baseline_r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub label: String,
    pub cells: Vec<CellResult>,
    pub years: Vec<YearSummary>,
    pub average: YearSummary,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn summarize(year: Option<i32>, rows: &[YearSummary]) -> YearSummary {
    YearSummary {
        year,
        runs: rows.iter().map(|r| r.runs).sum(),
        mse: mean(rows.iter().map(|r| r.mse)),
        rmse: mean(rows.iter().map(|r| r.rmse)),
        r2: mean(rows.iter().map(|r| r.r2)),
        baseline_mse: mean(rows.iter().map(|r| r.baseline_mse)),
        baseline_rmse: mean(rows.iter().map(|r| r.baseline_rmse)),
        baseline_r2: mean(rows.iter().map(|r| r.baseline_r2)),
    }
}

const CSV_HEADER: &str = "year,runs,mse,rmse,r2,baseline_mse,baseline_rmse,baseline_r2";
const RUNS_HEADER: &str = "year,run,split_seed,init_seed,shuffle_seed,train_size,val_size,test_size,best_epoch,best_val_mse,mse,rmse,r2,baseline_mse,baseline_rmse,baseline_r2";

impl ExperimentReport {
    /// Per-year means over runs (years in first-appearance order) and the
    /// mean of those as the average row.
    pub fn from_cells(label: impl Into<String>, cells: Vec<CellResult>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::InvalidArgument("a report needs at least one cell".into()));
        }
        let mut order: Vec<i32> = Vec::new();
        for c in &cells {
            if !order.contains(&c.year) {
                order.push(c.year);
            }
        }
        let years: Vec<YearSummary> = order
            .iter()
            .map(|&y| {
                let runs: Vec<YearSummary> = cells
                    .iter()
                    .filter(|c| c.year == y)
                    .map(|c| YearSummary {
                        year: Some(y),
                        runs: 1,
                        mse: c.metrics.mse,
                        rmse: c.metrics.rmse,
                        r2: c.metrics.r2,
                        baseline_mse: c.baseline.mse,
                        baseline_rmse: c.baseline.rmse,
                        baseline_r2: c.baseline.r2,
                    })
                    .collect();
                summarize(Some(y), &runs)
            })
            .collect();
        let average = summarize(None, &years);
        Ok(Self {
            label: label.into(),
            cells,
            years,
            average,
        })
    }

    /// Year rows followed by the average row.
    pub fn rows(&self) -> Vec<YearSummary> {
        let mut rows = self.years.clone();
        rows.push(self.average);
        rows
    }

    /// Summary table; floats use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in self.rows() {
            let year = r.year.map_or("AVG".to_string(), |y| y.to_string());
            writeln!(
                s,
                "{year},{},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.runs, r.mse, r.rmse, r.r2, r.baseline_mse, r.baseline_rmse, r.baseline_r2
            )
            .unwrap();
        }
        s
    }

    /// Parses the output of [`ExperimentReport::to_csv`].
    pub fn rows_from_csv(text: &str) -> Result<Vec<YearSummary>> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::InvalidArgument("report CSV header does not match".into()));
        }
        lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 8 {
                    return Err(Error::InvalidArgument(format!("report CSV row has {} fields: {line}", f.len())));
                }
                let num = |i: usize| {
                    f[i].parse::<f64>()
                        .map_err(|_| Error::InvalidArgument(format!("bad number {:?} in report CSV", f[i])))
                };
                let year = match f[0] {
                    "AVG" => None,
                    y => Some(y.parse().map_err(|_| Error::InvalidArgument(format!("bad year {y:?}")))?),
                };
                Ok(YearSummary {
                    year,
                    runs: f[1].parse().map_err(|_| Error::InvalidArgument(format!("bad run count {:?}", f[1])))?,
                    mse: num(2)?,
                    rmse: num(3)?,
                    r2: num(4)?,
                    baseline_mse: num(5)?,
                    baseline_rmse: num(6)?,
                    baseline_r2: num(7)?,
                })
            })
            .collect()
    }

    /// One line per (year, run) cell.
    pub fn runs_csv(&self) -> String {
        let mut s = String::from(RUNS_HEADER);
        s.push('\n');
        for c in &self.cells {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
                c.year,
                c.run,
                c.split_seed,
                c.init_seed,
                c.shuffle_seed,
                c.train_size,
                c.val_size,
                c.test_size,
                c.best_epoch,
                c.best_val_mse,
                c.metrics.mse,
                c.metrics.rmse,
                c.metrics.r2,
                c.baseline.mse,
                c.baseline.rmse,
                c.baseline.r2
            )
            .unwrap();
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        render_markdown(&[(self.label.as_str(), self)], true)
    }
}

/// RMSE / R² columns per configuration, one row per year plus `AVG`, in the
/// layout of a results table. Year rows are taken from the first report.
pub fn render_markdown(columns: &[(&str, &ExperimentReport)], with_baseline: bool) -> String {
    let mut header = vec!["Year".to_string()];
    for (name, _) in columns {
        header.push(format!("{name} RMSE"));
        header.push(format!("{name} R²"));
    }
    if with_baseline {
        header.push("Mean RMSE".into());
        header.push("Mean R²".into());
    }
    let Some((_, first)) = columns.first() else {
        return String::new();
    };
    let mut body: Vec<Vec<String>> = Vec::new();
    for (i, row) in first.rows().iter().enumerate() {
        let mut cells = vec![row.year.map_or("AVG".to_string(), |y| y.to_string())];
        for (_, rep) in columns {
            match rep.rows().get(i) {
                Some(r) => {
                    cells.push(format!("{:.2}", r.rmse));
                    cells.push(format!("{:.3}", r.r2));
                }
                None => cells.extend(["".into(), "".into()]),
            }
        }
        if with_baseline {
            cells.push(format!("{:.2}", row.baseline_rmse));
            cells.push(format!("{:.3}", row.baseline_r2));
        }
        body.push(cells);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            body.iter()
                .map(|r| r[c].chars().count())
                .chain([header[c].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut s = line(&header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    s.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    for r in &body {
        s.push_str(&line(r));
    }
    s
}

/// Trains and evaluates one model per (test year, run) cell. Cells run in
/// parallel, each with seeds derived from `train_cfg.seed`, and are reported
/// in (year, run) order. `on_cell` sees every trained model (for
/// checkpointing) before its parameters are dropped.
pub fn run_experiment<F>(
    label: &str,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    ds: &Dataset,
    test_years: &[i32],
    on_cell: F,
) -> Result<ExperimentReport>
where
    F: Fn(CellOutcome<'_>) -> Result<()> + Sync,
{
    train_cfg.validate()?;
    model_cfg.validate()?;
    if test_years.is_empty() {
        return Err(Error::InvalidArgument("at least one test year is required".into()));
    }
    let available = ds.years();
    for y in test_years {
        if !available.contains(y) {
            return Err(Error::Split(format!(
                "test year {y} is not in the dataset; available years: {available:?}"
            )));
        }
    }
    let cells: Vec<(i32, usize)> = test_years
        .iter()
        .flat_map(|&y| (0..train_cfg.runs).map(move |r| (y, r)))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(year, run)| {
            let base = train_cfg.seed;
            let split_seed = derive_seed(base, year, run, SEED_SPLIT);
            let init_seed = derive_seed(base, year, run, SEED_INIT);
            let shuffle_seed = derive_seed(base, year, run, SEED_SHUFFLE);
            let spec = SplitSpec {
                test_year: year,
                val_fraction: train_cfg.val_fraction,
                seed: split_seed,
            };
            let split = split_by_year(ds, &spec)?;
            let cfg = TrainConfig {
                seed: init_seed,
                ..train_cfg.clone()
            };
            let training = train(model_cfg, &cfg, &split.train, &split.val, shuffle_seed)?;
            let result = CellResult {
                year,
                run,
                split_seed,
                init_seed,
                shuffle_seed,
                train_size: split.train.len(),
                val_size: split.val.len(),
                test_size: split.test.len(),
                best_epoch: training.history.best_epoch,
                best_val_mse: training.history.best_val_mse(),
                metrics: evaluate(&training.best, model_cfg, &split.test, &training.scaler)?,
                baseline: baseline_mean(&split.train, &split.test)?,
            };
            on_cell(CellOutcome {
                result: &result,
                training: &training,
            })?;
            Ok(result)
        })
        .collect::<Result<Vec<_>>>()?;
    ExperimentReport::from_cells(label, results)
}
