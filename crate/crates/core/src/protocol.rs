//! The session engine: two-stage base training, prototype classifiers, and
//! frozen-backbone incremental sessions with per-session evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::{accuracy_decomposition, PredictionRecord};
use crate::data::{DatasetAdapter, Image};
use crate::error::{Error, Result};
use crate::model::{global_pool, predict_in_range, Backbone};
use crate::optim::{cosine_lr, OptimizerConfig, Sgd};
use crate::rdi::{self, extend_with_dummy, masked_pool, MaskSource, PoolingMode, RdiConfig};
use crate::seed::{mix_seed, SeedPlan};
use crate::types::{ClassId, CosineClassifier, EvalReport, PatchMask, PooledFeature, PrototypeStore, SessionSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip: bool,
    /// Zero-pad by this many pixels and take a random crop of the original size.
    pub crop_padding: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: false,
            crop_padding: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypePooling {
    Global,
    /// ALR-masked mean pooling, masks from the trained base classifier.
    Alr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    /// Stage 1: epochs of plain cross-entropy on the base classifier.
    pub base_epochs: usize,
    /// Stage 2: epochs of the full loss with the dummy column.
    pub rdi_epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    pub prototype_pooling: PrototypePooling,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            base_epochs: 20,
            rdi_epochs: 30,
            batch_size: 32,
            temperature: 16.0,
            optimizer: OptimizerConfig::default(),
            augment: AugmentConfig::default(),
            prototype_pooling: PrototypePooling::Global,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("protocol.batch_size", "must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("protocol.temperature", "must be positive"));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub base: f64,
    pub alr: f64,
    pub ali: f64,
}

/// Training history; survives a failed run for the divergence dump.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub epochs: Vec<EpochRecord>,
    /// Batch losses of the epoch in progress.
    pub current_steps: Vec<f64>,
}

impl Trajectory {
    pub fn stage(&self, stage: u8) -> impl Iterator<Item = &EpochRecord> {
        self.epochs.iter().filter(move |e| e.stage == stage)
    }
}

/// Random unit-variance columns, one per class.
pub fn init_classifier(dim: usize, classes: usize, temperature: f64, seed: u64) -> Result<CosineClassifier> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = (0..dim * classes).map(|_| StandardNormal.sample(&mut rng)).collect();
    CosineClassifier::from_columns_flat(dim, classes, weights, temperature)
}

fn augment(image: &Image, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Image {
    let mut out = if cfg.crop_padding > 0 {
        let span = 2 * cfg.crop_padding + 1;
        image.padded_crop(cfg.crop_padding, rng.random_range(0..span), rng.random_range(0..span))
    } else {
        image.clone()
    };
    if cfg.flip && rng.random::<bool>() {
        out = out.flipped_horizontal();
    }
    out
}

fn base_samples(schedule: &SessionSchedule) -> Vec<(usize, ClassId)> {
    schedule.train_manifest[0]
        .iter()
        .flat_map(|(&c, idx)| idx.iter().map(move |&i| (i, c)))
        .collect()
}

struct Stage<'a> {
    id: u8,
    epochs: usize,
    rdi: RdiConfig,
    /// Snapshot model whose masks stay fixed during this stage.
    frozen: Option<(&'a Backbone, &'a CosineClassifier)>,
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    stage: &Stage<'_>,
    dataset: &dyn DatasetAdapter,
    samples: &[(usize, ClassId)],
    backbone: &mut Backbone,
    classifier: &mut CosineClassifier,
    cfg: &ProtocolConfig,
    seeds: &SeedPlan,
    trajectory: &mut Trajectory,
) -> Result<()> {
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * stage.epochs;
    let warmup = steps_per_epoch * cfg.optimizer.warmup_epochs;
    let mut opt_b = Sgd::new(backbone.param_count(), cfg.optimizer.momentum, cfg.optimizer.weight_decay);
    let mut opt_c = Sgd::new(classifier.weights().len(), cfg.optimizer.momentum, 0.0);
    let mut step = 0;
    for epoch in 0..stage.epochs {
        let mut order = samples.to_vec();
        let stream = (u64::from(stage.id) << 32) | epoch as u64;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seeds.batch_order, stream)));
        let mut aug_rng = ChaCha8Rng::seed_from_u64(mix_seed(seeds.batch_order, stream ^ 0xa0a0_0000_0000_0000));
        trajectory.current_steps.clear();
        let (mut sum, mut base, mut alr, mut ali) = (0.0, 0.0, 0.0, 0.0);
        let lr_start = cosine_lr(&cfg.optimizer, step, total, warmup);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let images = chunk
                .iter()
                .map(|&(i, _)| Ok(augment(&*dataset.image(i)?, &cfg.augment, &mut aug_rng)))
                .collect::<Result<Vec<Image>>>()?;
            let batch: Vec<(&Image, ClassId)> = images.iter().zip(chunk).map(|(img, &(_, c))| (img, c)).collect();
            let masks = match stage.frozen {
                Some((bb, clf)) => Some(
                    images
                        .iter()
                        .map(|img| Ok(rdi::sample_masks(&bb.forward_feature_map(img)?, clf, stage.rdi.threshold)?.alr))
                        .collect::<Result<Vec<PatchMask>>>()?,
                ),
                None => None,
            };
            let g = rdi::total_loss_and_grad(backbone, classifier, &batch, &stage.rdi, masks.as_deref())?;
            trajectory.current_steps.push(g.loss);
            let finite = g.loss.is_finite()
                && g.grad_backbone.iter().chain(&g.grad_classifier).all(|v| v.is_finite());
            if !finite {
                return Err(Error::Divergence {
                    stage: stage.id,
                    epoch,
                    step: b,
                    loss: g.loss,
                });
            }
            let lr = cosine_lr(&cfg.optimizer, step, total, warmup);
            opt_b.step(backbone.params_mut(), &g.grad_backbone, lr);
            opt_c.step(classifier.weights_mut(), &g.grad_classifier, lr);
            let w = chunk.len() as f64;
            sum += w * g.loss;
            base += w * g.base;
            alr += w * g.alr;
            ali += w * g.ali;
            step += 1;
        }
        let n = samples.len() as f64;
        let record = EpochRecord {
            stage: stage.id,
            epoch,
            learning_rate: lr_start,
            loss: sum / n,
            base: base / n,
            alr: alr / n,
            ali: ali / n,
        };
        log::debug!("stage {} epoch {epoch}: loss {:.4}", stage.id, record.loss);
        trajectory.epochs.push(record);
    }
    trajectory.current_steps.clear();
    Ok(())
}

/// Two-stage base-session training.
///
/// Stage 1 trains the backbone and a fresh base classifier with plain
/// cross-entropy for `base_epochs`. The classifier then gains a dummy column
/// and stage 2 minimizes the full loss for `rdi_epochs` with a re-initialized
/// optimizer. Returns the classifier with its dummy column.
pub fn train_base(
    dataset: &dyn DatasetAdapter,
    schedule: &SessionSchedule,
    backbone: &mut Backbone,
    rdi_cfg: &RdiConfig,
    cfg: &ProtocolConfig,
    seeds: &SeedPlan,
    trajectory: &mut Trajectory,
) -> Result<CosineClassifier> {
    rdi_cfg.validate()?;
    cfg.validate()?;
    let samples = base_samples(schedule);
    if samples.is_empty() {
        return Err(Error::Schedule("base session has no training samples".into()));
    }
    check_labels(dataset, schedule, &schedule.train_manifest[0])?;
    let mut classifier = init_classifier(
        backbone.feature_dim(),
        schedule.base_count(),
        cfg.temperature,
        mix_seed(seeds.init, 0xc1a5),
    )?;
    let pretrain = Stage {
        id: 1,
        epochs: cfg.base_epochs,
        rdi: RdiConfig::baseline(),
        frozen: None,
    };
    run_stage(&pretrain, dataset, &samples, backbone, &mut classifier, cfg, seeds, trajectory)?;

    let mut classifier = extend_with_dummy(&classifier, seeds.dummy)?;
    let snapshot = match rdi_cfg.mask_source {
        MaskSource::FrozenPretrain => Some((backbone.clone(), classifier.clone())),
        MaskSource::Online => None,
    };
    let stage2 = Stage {
        id: 2,
        epochs: cfg.rdi_epochs,
        rdi: rdi_cfg.clone(),
        frozen: snapshot.as_ref().map(|(b, c)| (b, c)),
    };
    run_stage(&stage2, dataset, &samples, backbone, &mut classifier, cfg, seeds, trajectory)?;
    Ok(classifier)
}

fn check_labels(
    dataset: &dyn DatasetAdapter,
    schedule: &SessionSchedule,
    manifest: &BTreeMap<ClassId, Vec<usize>>,
) -> Result<()> {
    let samples = dataset.samples();
    for (&class, idx) in manifest {
        let src = *schedule
            .source_classes
            .get(class)
            .ok_or_else(|| Error::Schedule(format!("class id {class} has no source class")))?;
        for &i in idx {
            let s = samples
                .get(i)
                .ok_or_else(|| Error::Schedule(format!("sample {i} not in dataset `{}`", dataset.name())))?;
            if s.label != src {
                return Err(Error::Schedule(format!(
                    "sample {i} has label {} but the schedule lists it under class {src}",
                    s.label
                )));
            }
        }
    }
    Ok(())
}

/// Pooled embedding of every listed sample, keyed by sample index.
pub fn extract_features(
    backbone: &Backbone,
    dataset: &dyn DatasetAdapter,
    indices: impl IntoIterator<Item = usize>,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for i in indices {
        if let std::collections::btree_map::Entry::Vacant(e) = out.entry(i) {
            let map = backbone.forward_feature_map(&*dataset.image(i)?)?;
            e.insert(global_pool(&map).vector);
        }
    }
    Ok(out)
}

/// Class-mean pooled embeddings over the training samples of `session`.
pub fn compute_prototypes(
    backbone: &Backbone,
    dataset: &dyn DatasetAdapter,
    schedule: &SessionSchedule,
    session: usize,
) -> Result<PrototypeStore> {
    let manifest = schedule
        .train_manifest
        .get(session)
        .ok_or_else(|| Error::Schedule(format!("no session {session}")))?;
    let mut store = PrototypeStore::new();
    for (&class, idx) in manifest {
        let feats = extract_features(backbone, dataset, idx.iter().copied())?;
        let vectors: Vec<Vec<f64>> = idx.iter().map(|i| feats[i].clone()).collect();
        store.insert(class, mean_feature(&vectors, class)?, vectors.len())?;
    }
    Ok(store)
}

/// Arithmetic mean of equal-length vectors.
pub fn mean_feature(vectors: &[Vec<f64>], class: ClassId) -> Result<PooledFeature> {
    let first = vectors.first().ok_or(Error::EmptyClass(class))?;
    let mut m = vec![0.0; first.len()];
    for v in vectors {
        for (a, x) in m.iter_mut().zip(v) {
            *a += x;
        }
    }
    m.iter_mut().for_each(|a| *a /= vectors.len() as f64);
    Ok(PooledFeature::raw(m))
}

/// ALR-masked variant of [`compute_prototypes`] (masks from `classifier`).
pub fn compute_prototypes_alr(
    backbone: &Backbone,
    dataset: &dyn DatasetAdapter,
    schedule: &SessionSchedule,
    session: usize,
    classifier: &CosineClassifier,
    threshold: f64,
) -> Result<PrototypeStore> {
    let manifest = schedule
        .train_manifest
        .get(session)
        .ok_or_else(|| Error::Schedule(format!("no session {session}")))?;
    let mut store = PrototypeStore::new();
    for (&class, idx) in manifest {
        let mut vectors = Vec::with_capacity(idx.len());
        for &i in idx {
            let map = backbone.forward_feature_map(&*dataset.image(i)?)?;
            let m = rdi::sample_masks(&map, classifier, threshold)?;
            let f = if m.alr.support() > 0 {
                masked_pool(&map, &m.alr, PoolingMode::MaskedMean)?
            } else {
                global_pool(&map)
            };
            vectors.push(f.vector);
        }
        store.insert(class, mean_feature(&vectors, class)?, vectors.len())?;
    }
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session: usize,
    pub classifier_width: usize,
    pub backbone_hash: String,
}

#[derive(Debug, Clone)]
pub struct IncrementalOutcome {
    pub reports: Vec<EvalReport>,
    pub states: Vec<SessionState>,
    pub predictions: Vec<Vec<PredictionRecord>>,
    /// Prototype classifier after the last session.
    pub final_classifier: CosineClassifier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalOptions {
    pub prototype_pooling: PrototypePooling,
    pub threshold: f64,
}

fn evaluate(
    classifier: &CosineClassifier,
    schedule: &SessionSchedule,
    session: usize,
    features: &BTreeMap<usize, Vec<f64>>,
) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    let seen = schedule.classes_seen(session).len();
    let base = schedule.base_count();
    let mut records = Vec::new();
    for (&class, idx) in &schedule.test_manifest[session] {
        for i in idx {
            let f = &features[i];
            let full = predict_in_range(classifier, f, 0..seen)?;
            let novel_only = if class >= base {
                Some(predict_in_range(classifier, f, base..seen)?)
            } else {
                None
            };
            records.push(PredictionRecord {
                truth: class,
                full,
                novel_only,
            });
        }
    }
    let acc = accuracy_decomposition(&records, schedule, session)?;
    let report = match (acc.na, acc.nn) {
        (Some(na), Some(nn)) => EvalReport::incremental(session, acc.ba, na, acc.aa, nn)?,
        _ => EvalReport::base_session(acc.ba, acc.aa)?,
    };
    Ok((report, records))
}

/// Runs sessions `0..T` on a frozen backbone.
///
/// Session 0 is scored with the trained base classifier (dummy dropped).
/// Before session 1 the base columns are replaced by base prototypes, and
/// every later session appends the prototypes of its novel classes.
pub fn run_incremental(
    backbone: &Backbone,
    trained: &CosineClassifier,
    dataset: &dyn DatasetAdapter,
    schedule: &SessionSchedule,
    options: &IncrementalOptions,
) -> Result<IncrementalOutcome> {
    let last = schedule.session_count() - 1;
    for t in 0..=last {
        check_labels(dataset, schedule, &schedule.train_manifest[t])?;
    }
    check_labels(dataset, schedule, &schedule.test_manifest[last])?;
    let features = extract_features(
        backbone,
        dataset,
        schedule.test_manifest[last].values().flatten().copied(),
    )?;

    let base_classifier = trained.without_dummy();
    if base_classifier.classes() != schedule.base_count() {
        return Err(Error::Classifier(format!(
            "trained classifier has {} real classes, schedule has {} base classes",
            base_classifier.classes(),
            schedule.base_count()
        )));
    }
    let mut reports = Vec::with_capacity(last + 1);
    let mut predictions = Vec::with_capacity(last + 1);
    let mut states = Vec::with_capacity(last + 1);
    let (report, records) = evaluate(&base_classifier, schedule, 0, &features)?;
    reports.push(report);
    predictions.push(records);
    states.push(SessionState {
        session: 0,
        classifier_width: base_classifier.classes(),
        backbone_hash: backbone.param_hash(),
    });

    let prototypes_for = |t: usize| match options.prototype_pooling {
        PrototypePooling::Global => compute_prototypes(backbone, dataset, schedule, t),
        PrototypePooling::Alr => {
            compute_prototypes_alr(backbone, dataset, schedule, t, &base_classifier, options.threshold)
        }
    };
    let mut store = PrototypeStore::new();
    let mut classifier = base_classifier.clone();
    for t in 1..=last {
        if t == 1 {
            store = prototypes_for(0)?;
        }
        store.extend(prototypes_for(t)?)?;
        classifier = store.to_classifier(&schedule.classes_seen(t), trained.temperature())?;
        let (report, records) = evaluate(&classifier, schedule, t, &features)?;
        reports.push(report);
        predictions.push(records);
        states.push(SessionState {
            session: t,
            classifier_width: classifier.classes(),
            backbone_hash: backbone.param_hash(),
        });
    }
    Ok(IncrementalOutcome {
        reports,
        states,
        predictions,
        final_classifier: classifier,
    })
}

/// One row of a schedule-only dry run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPlanRow {
    pub session: usize,
    pub new_classes: usize,
    pub cumulative_classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
}

/// Session layout of a schedule, without touching any pixels.
pub fn session_plan(schedule: &SessionSchedule) -> Vec<SessionPlanRow> {
    let counts = schedule.cumulative_class_counts();
    (0..schedule.session_count())
        .map(|t| SessionPlanRow {
            session: t,
            new_classes: schedule.session_classes(t).len(),
            cumulative_classes: counts[t],
            train_samples: schedule.train_manifest[t].values().map(Vec::len).sum(),
            test_samples: schedule.test_manifest[t].values().map(Vec::len).sum(),
        })
        .collect()
}
