use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{average_accuracy, run_experiment};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

/// One grid cell: overrides applied to the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub name: String,
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub name: String,
    /// Base config file, relative to the grid file. Mutually exclusive with `base`.
    #[serde(default)]
    pub base_config: Option<PathBuf>,
    /// Inline base config.
    #[serde(default)]
    pub base: Option<ExperimentConfig>,
    /// Seeds per cell; defaults to the base config's seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
}

impl AblationGrid {
    /// The four loss-term cells: base only, +ALR, +ALI, both.
    pub fn loss_terms(name: &str, base: ExperimentConfig, seeds: Vec<u64>) -> Self {
        let cell = |n: &str, lambda: f64, beta: f64| AblationCell {
            name: n.into(),
            lambda: Some(lambda),
            beta: Some(beta),
            threshold: None,
        };
        Self {
            name: name.into(),
            base_config: None,
            base: Some(base),
            seeds,
            cells: vec![
                cell("base", 0.0, 0.0),
                cell("alr", 1.0, 0.0),
                cell("ali", 0.0, 1.0),
                cell("full", 1.0, 1.0),
            ],
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut grid: Self = toml::from_str(&text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        if let Some(rel) = grid.base_config.take() {
            if grid.base.is_some() {
                return Err(Error::config("base_config", "give either base_config or [base], not both"));
            }
            let dir = path.parent().unwrap_or(Path::new("."));
            grid.base = Some(ExperimentConfig::load(&dir.join(rel))?);
        }
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::config("cells", "grid has no cells"));
        }
        for c in &self.cells {
            if c.name.is_empty() || c.name.contains(['/', '\\']) {
                return Err(Error::config("cells.name", "must be a non-empty file-name-safe string"));
            }
        }
        for cfg in self.cell_configs()? {
            cfg.validate()?;
        }
        Ok(())
    }

    fn base(&self) -> Result<ExperimentConfig> {
        self.base
            .clone()
            .ok_or_else(|| Error::config("base", "grid needs base_config or a [base] table"))
    }

    /// Resolved config of every (cell, seed) run, cell-major.
    pub fn cell_configs(&self) -> Result<Vec<ExperimentConfig>> {
        let base = self.base()?;
        let seeds = if self.seeds.is_empty() { vec![base.seed] } else { self.seeds.clone() };
        let mut out = Vec::new();
        for cell in &self.cells {
            for &seed in &seeds {
                let mut cfg = base.clone();
                cfg.name = format!("{}-{}", self.name, cell.name);
                cfg.seed = seed;
                if let Some(v) = cell.lambda {
                    cfg.rdi.lambda = v;
                }
                if let Some(v) = cell.beta {
                    cfg.rdi.beta = v;
                }
                if let Some(v) = cell.threshold {
                    cfg.rdi.threshold = v;
                }
                out.push(cfg);
            }
        }
        Ok(out)
    }
}

/// One row of the comparison table, averaged over the cell's seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub lambda: f64,
    pub beta: f64,
    pub threshold: f64,
    /// Seeds that completed.
    pub runs: usize,
    /// Final-session accuracy on novel-class samples (full label space).
    pub novel: Option<f64>,
    /// Mean over sessions of the all-seen-class accuracy.
    pub average: Option<f64>,
    /// Final-session confusion gap.
    pub gap: Option<f64>,
    /// Messages of the runs that failed.
    pub errors: Vec<String>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs every cell over every seed under `<run_root>/<grid name>/`. A failing
/// run is recorded in its row and the remaining runs continue.
pub fn run_ablation(grid: &AblationGrid, run_root: &Path) -> Result<Vec<AblationRow>> {
    grid.validate()?;
    let root = run_root.join(&grid.name);
    let configs = grid.cell_configs()?;
    let per_cell = configs.len() / grid.cells.len();
    let mut rows = Vec::with_capacity(grid.cells.len());
    for (cell, cfgs) in grid.cells.iter().zip(configs.chunks(per_cell)) {
        let (mut novel, mut average, mut gap, mut errors) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for cfg in cfgs {
            log::info!("ablation cell {} seed {}", cell.name, cfg.seed);
            match run_experiment(cfg, &root) {
                Ok(out) => {
                    let reports = out.experiment.reports();
                    let last = reports.last().expect("at least one session");
                    if let Some(na) = last.na_acc {
                        novel.push(na);
                    }
                    if let Some(g) = last.confusion_gap {
                        gap.push(g);
                    }
                    average.push(average_accuracy(reports));
                }
                Err(e) => {
                    log::error!("ablation cell {} seed {} failed: {e}", cell.name, cfg.seed);
                    errors.push(format!("seed {}: {e}", cfg.seed));
                }
            }
        }
        rows.push(AblationRow {
            cell: cell.name.clone(),
            lambda: cfgs[0].rdi.lambda,
            beta: cfgs[0].rdi.beta,
            threshold: cfgs[0].rdi.threshold,
            runs: average.len(),
            novel: mean(&novel),
            average: mean(&average),
            gap: mean(&gap),
            errors,
        });
    }
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    write_ablation_csv(&root.join("ablation.csv"), &rows)?;
    Ok(rows)
}

/// Columns: `cell,lambda,beta,threshold,runs,novel,average,gap`.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["cell", "lambda", "beta", "threshold", "runs", "novel", "average", "gap"])
        .map_err(io)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.cell.clone(),
            r.lambda.to_string(),
            r.beta.to_string(),
            r.threshold.to_string(),
            r.runs.to_string(),
            opt(r.novel),
            opt(r.average),
            opt(r.gap),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
