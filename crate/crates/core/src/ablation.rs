//! Ablation grids: named sets of configuration overrides run over shared seeds.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::Config;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::TriadReport;
use crate::trainer::{pretrain_2d, train_with_optional_pl};

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub grid: String,
    pub row: String,
    pub overrides: Vec<(String, String)>,
}

impl AblationCell {
    fn new(grid: &str, row: &str, overrides: &[(&str, &str)]) -> Self {
        AblationCell {
            grid: grid.into(),
            row: row.into(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn config(&self, base: &Config, seed: u64) -> Result<Config> {
        let mut config = base.clone();
        for (k, v) in &self.overrides {
            config.set(k, v)?;
        }
        config.train.seed = seed;
        config.validate()?;
        Ok(config)
    }
}

pub const GRID_NAMES: [&str; 5] = ["table2", "table3", "table5", "pixels", "masks"];

/// Rows of a named grid; `all` concatenates every grid.
pub fn grid_cells(name: &str) -> Result<Vec<AblationCell>> {
    let cells = match name {
        "table2" => vec![
            AblationCell::new(name, "online-pl", &[("use_hybrid_pl", "false"), ("use_icd", "false"), ("use_icg", "false")]),
            AblationCell::new(name, "basic", &[("use_icd", "false"), ("use_icg", "false")]),
            AblationCell::new(name, "basic+icd", &[("use_icg", "false")]),
            AblationCell::new(name, "basic+icd+icg", &[]),
        ],
        "table3" => vec![
            AblationCell::new(name, "mix-only", &[("icd_variant", "mix-only"), ("use_icg", "false")]),
            AblationCell::new(name, "prototype-only", &[("icd_variant", "prototype-only"), ("use_icg", "false")]),
            AblationCell::new(name, "mix+prototype", &[("use_icg", "false")]),
        ],
        "table5" => vec![
            AblationCell::new(name, "2d-labels-only", &[("use_teacher_labels", "false")]),
            AblationCell::new(name, "teacher-only", &[("use_2d_labels_in_icg", "false")]),
            AblationCell::new(name, "both", &[]),
        ],
        "pixels" => vec![
            AblationCell::new(name, "all", &[("icd_pixel_select", "all")]),
            AblationCell::new(name, "random", &[("icd_pixel_select", "random")]),
            AblationCell::new(name, "projection", &[("icd_pixel_select", "projection")]),
        ],
        "masks" => vec![
            AblationCell::new(name, "class", &[("mask_kind", "class")]),
            AblationCell::new(name, "region", &[("mask_kind", "region")]),
        ],
        "all" => {
            let mut all = Vec::new();
            for g in GRID_NAMES {
                all.extend(grid_cells(g)?);
            }
            return Ok(all);
        }
        other => {
            return Err(Error::Config(format!(
                "unknown ablation grid {other:?}; expected one of {} or all",
                GRID_NAMES.join(", ")
            )))
        }
    };
    Ok(cells)
}

/// Outcome of one (cell, seed) run; failures are kept as messages.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: AblationCell,
    pub seed: u64,
    pub outcome: std::result::Result<TriadReport, String>,
}

/// Runs every cell for every seed. Each seed's pretrained network is shared by its cells.
pub fn run_ablation_matrix(
    dataset: &Dataset,
    base: &Config,
    cells: &[AblationCell],
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<CellResult>> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one cell and one seed".into()));
    }
    let jobs = jobs.max(1);
    let pretrained: Vec<std::result::Result<crate::nets::SegNet<f32>, String>> = parallel_map(seeds.len(), jobs, |i| {
        let mut config = base.clone();
        config.train.seed = seeds[i];
        pretrain_2d(dataset, &config).map(|p| p.net).map_err(|e| e.to_string())
    });
    let tasks: Vec<(usize, usize)> = (0..seeds.len()).flat_map(|s| (0..cells.len()).map(move |c| (s, c))).collect();
    let outcomes = parallel_map(tasks.len(), jobs, |k| {
        let (s, c) = tasks[k];
        let pre = pretrained[s].as_ref().map_err(|e| format!("pretraining failed: {e}"))?;
        let config = cells[c].config(base, seeds[s]).map_err(|e| e.to_string())?;
        train_with_optional_pl(dataset, Some(pre), &config)
            .map(|o| o.report)
            .map_err(|e| e.to_string())
    });
    Ok(tasks
        .into_iter()
        .zip(outcomes)
        .map(|((s, c), outcome)| CellResult {
            cell: cells[c].clone(),
            seed: seeds[s],
            outcome,
        })
        .collect())
}

fn parallel_map<T: Send, F: Fn(usize) -> T + Sync>(n: usize, jobs: usize, f: F) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let value = f(i);
                slots.lock().expect("result slots")[i] = Some(value);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|v| v.expect("every task ran"))
        .collect()
}

pub const ABLATION_HEADER: &str = "grid,row,seed,status,miou_2d,miou_3d,miou_avg,miou_teacher,error";

/// Per-run rows followed by one `mean` row per cell over its successful seeds.
pub fn ablation_csv(results: &[CellResult]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in results {
        match &r.outcome {
            Ok(rep) => {
                let _ = writeln!(
                    out,
                    "{},{},{},ok,{:.6},{:.6},{:.6},{},",
                    r.cell.grid,
                    r.cell.row,
                    r.seed,
                    rep.miou_2d.mean,
                    rep.miou_3d.mean,
                    rep.miou_avg.mean,
                    rep.miou_teacher.as_ref().map_or(String::new(), |t| format!("{:.6}", t.mean)),
                );
            }
            Err(e) => {
                let _ = writeln!(out, "{},{},{},failed,,,,,{}", r.cell.grid, r.cell.row, r.seed, csv_field(e));
            }
        }
    }
    let mut order: Vec<(&str, &str)> = Vec::new();
    for r in results {
        let key = (r.cell.grid.as_str(), r.cell.row.as_str());
        if !order.contains(&key) {
            order.push(key);
        }
    }
    for (grid, row) in order {
        let reports: Vec<&TriadReport> = results
            .iter()
            .filter(|r| r.cell.grid == grid && r.cell.row == row)
            .filter_map(|r| r.outcome.as_ref().ok())
            .collect();
        if reports.is_empty() {
            let _ = writeln!(out, "{grid},{row},mean,failed,,,,,no successful seeds");
            continue;
        }
        let mean = |f: &dyn Fn(&TriadReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / reports.len() as f64;
        let teacher = if reports.iter().all(|r| r.miou_teacher.is_some()) {
            format!("{:.6}", mean(&|r| r.miou_teacher.as_ref().map_or(0.0, |t| t.mean)))
        } else {
            String::new()
        };
        let _ = writeln!(
            out,
            "{grid},{row},mean,ok,{:.6},{:.6},{:.6},{teacher},",
            mean(&|r| r.miou_2d.mean),
            mean(&|r| r.miou_3d.mean),
            mean(&|r| r.miou_avg.mean),
        );
    }
    out
}

fn csv_field(s: &str) -> String {
    let flat = s.replace(['\n', '\r'], " ");
    if flat.contains([',', '"']) {
        format!("\"{}\"", flat.replace('"', "\"\""))
    } else {
        flat
    }
}
