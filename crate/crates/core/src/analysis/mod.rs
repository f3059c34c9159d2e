//! Diagnostics: accuracy decomposition, patch-similarity statistics,
//! embedding distance distributions, and mask/region alignment.

mod alignment;
mod distance;
pub mod export;
pub mod plot;

use serde::{Deserialize, Serialize};

pub use alignment::{patch_window, planted_redundancy_alignment, RedundancyAlignment};
pub use export::{mask_overlay, write_cdf_csv, write_mask_export, write_patch_stats_csv, MaskRecord};
pub use distance::{class_distance_cdfs, cosine_distance, CdfPoint, DistanceCdfs, InterClassMode};

use crate::error::{Error, Result};
use crate::model::{dot, normalize};
use crate::types::{ClassId, CosineClassifier, FeatureMap, SessionSchedule};

/// One evaluated test sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub truth: ClassId,
    /// Argmax over every class seen so far.
    pub full: ClassId,
    /// Argmax restricted to novel classes; present for novel-class samples.
    pub novel_only: Option<ClassId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyDecomposition {
    pub ba: f64,
    pub na: Option<f64>,
    pub aa: f64,
    pub nn: Option<f64>,
    pub base_samples: usize,
    pub novel_samples: usize,
}

impl AccuracyDecomposition {
    pub fn gap(&self) -> Option<f64> {
        Some(self.nn? - self.na?)
    }
}

fn fraction(hits: usize, total: usize) -> f64 {
    hits as f64 / total as f64
}

/// BA / NA / AA / NN accuracies of session `t` predictions.
pub fn accuracy_decomposition(
    records: &[PredictionRecord],
    schedule: &SessionSchedule,
    session: usize,
) -> Result<AccuracyDecomposition> {
    if records.is_empty() {
        return Err(Error::Analysis("no predictions to score".into()));
    }
    let seen = schedule.classes_seen(session).len();
    let (mut base_n, mut base_hit, mut novel_n, mut novel_hit, mut nn_hit) = (0, 0, 0, 0, 0);
    for r in records {
        if r.truth >= seen {
            return Err(Error::Analysis(format!(
                "class {} not seen by session {session}",
                r.truth
            )));
        }
        let hit = usize::from(r.truth == r.full);
        if schedule.is_base(r.truth) {
            base_n += 1;
            base_hit += hit;
        } else {
            novel_n += 1;
            novel_hit += hit;
            let restricted = r.novel_only.ok_or_else(|| {
                Error::Analysis("novel-class sample lacks a novel-only prediction".into())
            })?;
            nn_hit += usize::from(restricted == r.truth);
        }
    }
    if session >= 1 && novel_n == 0 {
        return Err(Error::Analysis(format!("session {session} has an empty novel test set")));
    }
    let ba = if base_n > 0 { fraction(base_hit, base_n) } else { 0.0 };
    Ok(AccuracyDecomposition {
        ba,
        na: (session >= 1).then(|| fraction(novel_hit, novel_n)),
        aa: fraction(base_hit + novel_hit, base_n + novel_n),
        nn: (session >= 1).then(|| fraction(nn_hit, novel_n)),
        base_samples: base_n,
        novel_samples: novel_n,
    })
}

/// Means over one patch category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub patches: usize,
    /// Mean `exp(τ·cos(f, w_c))` for the ground-truth class `c`.
    pub own_class: f64,
    /// Mean `Σ_{m≠c} exp(τ·cos(f, w_m))`.
    pub other_classes: f64,
}

/// Patch similarities split into central (cosine to the true class `>= threshold`)
/// and redundant patches. An empty category is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSimilarityStats {
    pub threshold: f64,
    pub temperature: f64,
    pub central: Option<CategoryStats>,
    pub redundant: Option<CategoryStats>,
}

impl PatchSimilarityStats {
    /// Both orderings hold: redundant < central for own class and for other classes.
    pub fn ordering_holds(&self) -> bool {
        match (self.central, self.redundant) {
            (Some(c), Some(r)) => r.own_class < c.own_class && r.other_classes < c.other_classes,
            _ => false,
        }
    }
}

pub fn patch_similarity_stats(
    samples: &[(FeatureMap, ClassId)],
    classifier: &CosineClassifier,
    threshold: f64,
) -> Result<PatchSimilarityStats> {
    let real = classifier.real_classes();
    let tau = classifier.temperature();
    let columns: Vec<Vec<f64>> = classifier.columns().take(real).map(|w| normalize(w).0).collect();
    // (count, own sum, other sum) for central and redundant
    let mut acc = [(0usize, 0.0, 0.0); 2];
    for (map, label) in samples {
        if *label >= real {
            return Err(Error::LabelOutOfRange {
                label: *label,
                classes: real,
            });
        }
        if map.channels() != classifier.dim() {
            return Err(Error::Shape("map channels do not match the classifier".into()));
        }
        for patch in map.patches() {
            let (u, _) = normalize(patch);
            let cos: Vec<f64> = columns.iter().map(|w| dot(&u, w)).collect();
            let own = (tau * cos[*label]).exp();
            let other: f64 = cos
                .iter()
                .enumerate()
                .filter(|&(m, _)| m != *label)
                .map(|(_, c)| (tau * c).exp())
                .sum();
            let slot = &mut acc[usize::from(cos[*label] < threshold)];
            slot.0 += 1;
            slot.1 += own;
            slot.2 += other;
        }
    }
    let finish = |(n, own, other): (usize, f64, f64)| {
        (n > 0).then(|| CategoryStats {
            patches: n,
            own_class: own / n as f64,
            other_classes: other / n as f64,
        })
    };
    Ok(PatchSimilarityStats {
        threshold,
        temperature: tau,
        central: finish(acc[0]),
        redundant: finish(acc[1]),
    })
}
