//! End-to-end runs: dataset, base training, incremental sessions and
//! diagnostics, written to a run directory.
//!
//! ```text
//! <run root>/<run id>/
//!   config.json           resolved config, every default materialized
//!   trajectory.json       per-epoch training losses
//!   checkpoints/base.ckpt trained backbone + classifier (with dummy column)
//!   reports/session_<t>.json
//!   masks/sample_<i>.{png,json}
//!   analysis/*.csv        distance CDFs and patch statistics
//!   metrics.csv           session,top1,ba,na,aa,nn,gap
//! ```

use std::collections::BTreeMap;
use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    class_distance_cdfs, mask_overlay, patch_similarity_stats, planted_redundancy_alignment,
    write_cdf_csv, write_mask_export, write_patch_stats_csv, MaskRecord,
};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{build_schedule, generate_synthetic, DatasetAdapter, FolderDataset, Image};
use crate::error::{Error, Result};
use crate::model::checkpoint::save_checkpoint;
use crate::model::{global_pool, Backbone};
use crate::protocol::{run_incremental, train_base, IncrementalOptions, IncrementalOutcome, Trajectory};
use crate::rdi::sample_masks;
use crate::seed::SeedPlan;
use crate::types::{ClassId, CosineClassifier, Diagnostics, EvalReport, FeatureMap, SessionSchedule};

/// Overrides the default run root (`runs`).
pub const RUN_ROOT_ENV: &str = "RDI_RUN_ROOT";

pub fn default_run_root() -> PathBuf {
    env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

pub fn open_dataset(cfg: &ExperimentConfig) -> Result<Box<dyn DatasetAdapter>> {
    Ok(match cfg.data.source {
        DataSource::Synthetic => Box::new(generate_synthetic(&cfg.data.synthetic)?),
        DataSource::Folder => {
            let root = cfg
                .data
                .root
                .as_ref()
                .ok_or_else(|| Error::config("data.root", "required when source = \"folder\""))?;
            Box::new(FolderDataset::open(root)?)
        }
    })
}

pub fn experiment_schedule(cfg: &ExperimentConfig, dataset: &dyn DatasetAdapter) -> Result<SessionSchedule> {
    let d = &cfg.data;
    let seeds = SeedPlan::from_master(cfg.seed);
    build_schedule(dataset, d.base_classes, d.sessions, d.way, d.shot, seeds.data)
}

/// An exported mask: its JSON record and overlay image.
#[derive(Debug, Clone)]
pub struct MaskExport {
    pub record: MaskRecord,
    pub overlay: Image,
}

/// Everything a completed run holds in memory.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dataset: Box<dyn DatasetAdapter>,
    pub schedule: SessionSchedule,
    pub trajectory: Trajectory,
    pub backbone: Backbone,
    /// Trained base classifier, dummy column included.
    pub classifier: CosineClassifier,
    pub outcome: IncrementalOutcome,
    pub masks: Vec<MaskExport>,
}

impl Experiment {
    pub fn reports(&self) -> &[EvalReport] {
        &self.outcome.reports
    }
}

/// Runs the pipeline in memory. On failure the trajectory recorded so far is
/// left in `trajectory` for the divergence dump.
pub fn execute(cfg: &ExperimentConfig, trajectory: &mut Trajectory) -> Result<Experiment> {
    cfg.validate()?;
    let dataset = open_dataset(cfg)?;
    let schedule = experiment_schedule(cfg, dataset.as_ref())?;
    let seeds = SeedPlan::from_master(cfg.seed);
    let mut backbone = Backbone::new(cfg.model.clone(), seeds.init)?;
    let classifier = train_base(dataset.as_ref(), &schedule, &mut backbone, &cfg.rdi, &cfg.protocol, &seeds, trajectory)?;
    let options = IncrementalOptions {
        prototype_pooling: cfg.protocol.prototype_pooling,
        threshold: cfg.rdi.threshold,
    };
    let mut outcome = run_incremental(&backbone, &classifier, dataset.as_ref(), &schedule, &options)?;
    let mut masks = Vec::new();
    if cfg.analysis.enabled {
        let (diagnostics, exported) = diagnose(cfg, &backbone, &classifier, dataset.as_ref(), &schedule)?;
        outcome.reports[0].diagnostics = Some(diagnostics);
        masks = exported;
    }
    Ok(Experiment {
        config: cfg.clone(),
        dataset,
        schedule,
        trajectory: trajectory.clone(),
        backbone,
        classifier,
        outcome,
        masks,
    })
}

/// Session-0 diagnostics over the base-class test set: patch similarity
/// statistics, intra/inter-class distance CDFs, and (with ground-truth
/// regions) the alignment of masks with planted regions.
pub fn diagnose(
    cfg: &ExperimentConfig,
    backbone: &Backbone,
    classifier: &CosineClassifier,
    dataset: &dyn DatasetAdapter,
    schedule: &SessionSchedule,
) -> Result<(Diagnostics, Vec<MaskExport>)> {
    let base = classifier.without_dummy();
    let threshold = cfg.rdi.threshold;
    let samples: Vec<(usize, ClassId)> = schedule.test_manifest[0]
        .iter()
        .flat_map(|(&c, idx)| idx.iter().map(move |&i| (i, c)))
        .collect();
    let mut maps: Vec<(FeatureMap, ClassId)> = Vec::with_capacity(samples.len());
    for &(i, c) in &samples {
        maps.push((backbone.forward_feature_map(&*dataset.image(i)?)?, c));
    }

    let patch_similarity = patch_similarity_stats(&maps, &base, threshold)?;
    let mut by_class: BTreeMap<ClassId, Vec<Vec<f64>>> = BTreeMap::new();
    for (map, c) in &maps {
        by_class.entry(*c).or_default().push(global_pool(map).vector);
    }
    let distance_cdfs = class_distance_cdfs(&by_class, cfg.analysis.inter_class_mode)?;

    let stride = backbone.architecture().cumulative_stride();
    let mut alr = Vec::with_capacity(maps.len());
    let mut scores = Vec::with_capacity(maps.len());
    for (map, _) in &maps {
        let m = sample_masks(map, &base, threshold)?;
        scores.push((m.predicted, m.scores));
        alr.push(m.alr);
    }
    let redundancy_alignment = if dataset.has_regions() {
        let regions: Vec<_> = samples.iter().map(|&(i, _)| dataset.regions(i)).collect();
        Some(planted_redundancy_alignment(&alr, &regions, stride)?)
    } else {
        None
    };

    let n = cfg.analysis.mask_exports.min(samples.len());
    let mut exports = Vec::with_capacity(n);
    for k in 0..n {
        let j = k * samples.len() / n;
        let (i, label) = samples[j];
        let (predicted, s) = &scores[j];
        let mask = &alr[j];
        exports.push(MaskExport {
            record: MaskRecord {
                sample: i,
                label,
                predicted: *predicted,
                threshold,
                height: mask.height(),
                width: mask.width(),
                bits: mask.bits().iter().map(|&b| u8::from(b)).collect(),
                scores: s.clone(),
            },
            overlay: mask_overlay(&*dataset.image(i)?, mask, stride),
        });
    }
    Ok((
        Diagnostics {
            patch_similarity: Some(patch_similarity),
            distance_cdfs: Some(distance_cdfs),
            redundancy_alignment,
        },
        exports,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(["session", "top1", "ba", "na", "aa", "nn", "gap"]).map_err(io)?;
    for r in reports {
        w.write_record([
            r.session.to_string(),
            r.session_top1.to_string(),
            r.ba_acc.to_string(),
            fmt_opt(r.na_acc),
            r.aa_acc.to_string(),
            fmt_opt(r.nn_acc),
            fmt_opt(r.confusion_gap),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Training state at the moment a run diverged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivergenceDump {
    pub error: String,
    pub trajectory: Trajectory,
}

/// Result of [`run_experiment`].
pub struct RunOutput {
    pub dir: PathBuf,
    pub experiment: Experiment,
}

/// Executes `cfg` and writes the run directory under `run_root`.
///
/// A divergence leaves `divergence.json` (error and loss trajectory) in the
/// run directory before the error is returned.
pub fn run_experiment(cfg: &ExperimentConfig, run_root: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let dir = run_root.join(cfg.run_id());
    create_dir(&dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    let mut trajectory = Trajectory::default();
    let experiment = match execute(cfg, &mut trajectory) {
        Ok(e) => e,
        Err(e) => {
            if matches!(e, Error::Divergence { .. }) {
                let dump = DivergenceDump {
                    error: e.to_string(),
                    trajectory,
                };
                write_json(&dir.join("divergence.json"), &dump)?;
            }
            return Err(e);
        }
    };
    write_json(&dir.join("trajectory.json"), &experiment.trajectory)?;
    save_checkpoint(&dir.join("checkpoints").join("base.ckpt"), &experiment.backbone, &experiment.classifier)?;
    let reports_dir = dir.join("reports");
    create_dir(&reports_dir)?;
    for r in experiment.reports() {
        write_json(&reports_dir.join(format!("session_{}.json", r.session)), r)?;
    }
    write_metrics_csv(&dir.join("metrics.csv"), experiment.reports())?;
    for m in &experiment.masks {
        write_mask_export(&dir.join("masks"), &m.record, &m.overlay)?;
    }
    if let Some(d) = &experiment.reports()[0].diagnostics {
        let analysis = dir.join("analysis");
        create_dir(&analysis)?;
        if let Some(c) = &d.distance_cdfs {
            write_cdf_csv(&analysis.join("intra_cdf.csv"), &c.intra)?;
            write_cdf_csv(&analysis.join("inter_cdf.csv"), &c.inter)?;
        }
        if let Some(s) = &d.patch_similarity {
            write_patch_stats_csv(&analysis.join("patch_stats.csv"), s)?;
        }
    }
    log::info!("run written to {}", dir.display());
    Ok(RunOutput { dir, experiment })
}

/// Mean session accuracy over all sessions (the "Average Acc." column).
pub fn average_accuracy(reports: &[EvalReport]) -> f64 {
    reports.iter().map(|r| r.session_top1).sum::<f64>() / reports.len().max(1) as f64
}

/// Reads `reports/session_<t>.json` for `t = 0, 1, ...` until one is missing.
pub fn read_reports(run_dir: &Path) -> Result<Vec<EvalReport>> {
    let mut out = Vec::new();
    loop {
        let path = run_dir.join("reports").join(format!("session_{}.json", out.len()));
        if !path.exists() {
            return Ok(out);
        }
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        out.push(serde_json::from_slice(&raw)?);
    }
}

mod ablation;
mod report;

pub use ablation::{run_ablation, write_ablation_csv, AblationCell, AblationGrid, AblationRow};
pub use report::{render_comparison, render_report};
