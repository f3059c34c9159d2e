//! Redundancy decoupling and integration: ALR/ALI patch masks, masked
//! pooling, the dummy classifier column, and the three-term training loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::model::{
    cosine_ce_with_grad, dot, global_pool, normalize, predict, Backbone, HeadGrad,
};
use crate::types::{ClassId, CosineClassifier, FeatureMap, FeatureSource, MaskKind, PatchMask, PooledFeature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PoolingMode {
    /// Divide by the number of selected patches.
    MaskedMean,
    /// Divide by `h·w` regardless of the mask.
    GlobalMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MaskSource {
    /// Recompute masks from the current model at every step.
    Online,
    /// Compute masks once, from the model at the end of the pretrain stage.
    FrozenPretrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EmptyMaskPolicy {
    /// Use the globally pooled feature in place of the empty masked one.
    FallbackGlobal,
    /// Drop the term for this sample.
    SkipTerm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RdiConfig {
    /// Cosine threshold ϱ: a patch is label-relevant iff its cosine to the
    /// predicted class column is at least this value.
    pub threshold: f64,
    pub lambda: f64,
    pub beta: f64,
    pub pooling_mode: PoolingMode,
    pub mask_source: MaskSource,
    pub alr_empty_policy: EmptyMaskPolicy,
    pub ali_empty_policy: EmptyMaskPolicy,
    /// Score the base term over the dummy column too.
    pub base_loss_includes_dummy: bool,
}

impl Default for RdiConfig {
    fn default() -> Self {
        Self {
            threshold: 0.0,
            lambda: 1.0,
            beta: 1.0,
            pooling_mode: PoolingMode::MaskedMean,
            mask_source: MaskSource::Online,
            alr_empty_policy: EmptyMaskPolicy::FallbackGlobal,
            ali_empty_policy: EmptyMaskPolicy::SkipTerm,
            base_loss_includes_dummy: false,
        }
    }
}

impl RdiConfig {
    /// The plain cross-entropy baseline: both extra terms switched off.
    pub fn baseline() -> Self {
        Self {
            lambda: 0.0,
            beta: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("rdi.lambda", "must be a finite value >= 0"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("rdi.beta", "must be a finite value >= 0"));
        }
        if self.threshold.is_nan() {
            return Err(Error::config("rdi.threshold", "must be a number"));
        }
        Ok(())
    }

    fn uses_masks(&self) -> bool {
        self.lambda > 0.0 || self.beta > 0.0
    }
}

/// Base-class label predicted from the globally pooled map.
pub fn predicted_label(classifier: &CosineClassifier, map: &FeatureMap) -> Result<ClassId> {
    predict(classifier, &global_pool(map))
}

/// Cosine of every patch (row-major) against column `class`.
pub fn patch_scores(map: &FeatureMap, classifier: &CosineClassifier, class: ClassId) -> Result<Vec<f64>> {
    if class >= classifier.real_classes() {
        return Err(Error::LabelOutOfRange {
            label: class,
            classes: classifier.real_classes(),
        });
    }
    if map.channels() != classifier.dim() {
        return Err(Error::Shape(format!(
            "map has {} channels, classifier expects {}",
            map.channels(),
            classifier.dim()
        )));
    }
    let (w, _) = normalize(classifier.column(class));
    Ok(map
        .patches()
        .map(|p| {
            let (u, _) = normalize(p);
            dot(&u, &w)
        })
        .collect())
}

/// ALR mask: patches whose cosine to the predicted class column is `>= threshold`.
pub fn alr_mask(
    map: &FeatureMap,
    classifier: &CosineClassifier,
    predicted: ClassId,
    threshold: f64,
) -> Result<PatchMask> {
    let scores = patch_scores(map, classifier, predicted)?;
    mask_from_scores(map.height(), map.width(), &scores, threshold)
}

pub fn mask_from_scores(height: usize, width: usize, scores: &[f64], threshold: f64) -> Result<PatchMask> {
    PatchMask::new(
        height,
        width,
        scores.iter().map(|&s| s >= threshold).collect(),
        MaskKind::Alr,
    )
}

/// Complement of an ALR mask.
pub fn ali_mask(alr: &PatchMask) -> Result<PatchMask> {
    if alr.kind() != MaskKind::Alr {
        return Err(Error::Shape("ali_mask expects an ALR mask".into()));
    }
    Ok(alr.complement())
}

fn pool_divisor(mask: &PatchMask, mode: PoolingMode) -> f64 {
    match mode {
        PoolingMode::MaskedMean => mask.support().max(1) as f64,
        PoolingMode::GlobalMean => mask.bits().len() as f64,
    }
}

pub fn masked_pool(map: &FeatureMap, mask: &PatchMask, mode: PoolingMode) -> Result<PooledFeature> {
    if (map.height(), map.width()) != (mask.height(), mask.width()) {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match map {}x{}",
            mask.height(),
            mask.width(),
            map.height(),
            map.width()
        )));
    }
    let mut v = vec![0.0; map.channels()];
    for (patch, &bit) in map.patches().zip(mask.bits()) {
        if bit {
            for (acc, x) in v.iter_mut().zip(patch) {
                *acc += x;
            }
        }
    }
    let div = pool_divisor(mask, mode);
    v.iter_mut().for_each(|x| *x /= div);
    Ok(PooledFeature {
        vector: v,
        source_mask_kind: FeatureSource::from(mask.kind()),
        support_count: mask.support(),
    })
}

/// Spreads `∂L/∂pooled` back over the selected patches.
fn masked_pool_backward(mask: &PatchMask, mode: PoolingMode, grad: &[f64], scale: f64, out: &mut [f64]) {
    let d = grad.len();
    let s = scale / pool_divisor(mask, mode);
    for (i, &bit) in mask.bits().iter().enumerate() {
        if bit {
            for (o, g) in out[i * d..(i + 1) * d].iter_mut().zip(grad) {
                *o += s * g;
            }
        }
    }
}

fn global_pool_backward(patches: usize, grad: &[f64], scale: f64, out: &mut [f64]) {
    let d = grad.len();
    let s = scale / patches as f64;
    for i in 0..patches {
        for (o, g) in out[i * d..(i + 1) * d].iter_mut().zip(grad) {
            *o += s * g;
        }
    }
}

/// Appends a seeded, unit-norm random dummy column.
pub fn extend_with_dummy(classifier: &CosineClassifier, seed: u64) -> Result<CosineClassifier> {
    if classifier.dummy_index().is_some() {
        return Err(Error::DummyAlreadyPresent);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut col: Vec<f64> = (0..classifier.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let (unit, n) = normalize(&col);
    if n > 0.0 {
        col = unit;
    } else {
        col[0] = 1.0;
    }
    classifier.with_dummy_column(col)
}

fn require_dummy(classifier: &CosineClassifier) -> Result<usize> {
    classifier.dummy_index().ok_or(Error::DummyMissing)
}

/// Cross-entropy of the ALR feature against the real label over all `n + 1` columns.
pub fn loss_alr_dummy(classifier: &CosineClassifier, f_alr: &PooledFeature, label: ClassId) -> Result<f64> {
    let dummy = require_dummy(classifier)?;
    if label >= dummy {
        return Err(Error::LabelOutOfRange {
            label,
            classes: dummy,
        });
    }
    Ok(cosine_ce_with_grad(classifier, &f_alr.vector, label, classifier.classes())?.loss)
}

/// Cross-entropy of the ALI feature against the dummy column.
pub fn loss_ali_dummy(classifier: &CosineClassifier, f_ali: &PooledFeature) -> Result<f64> {
    let dummy = require_dummy(classifier)?;
    Ok(cosine_ce_with_grad(classifier, &f_ali.vector, dummy, classifier.classes())?.loss)
}

/// Per-sample loss terms. A term that was not evaluated (zero weight, no
/// dummy column, or skipped by the empty-mask policy) is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub base: f64,
    pub alr: Option<f64>,
    pub ali: Option<f64>,
    pub total: f64,
}

/// Masks and scores used for one sample, kept for export and analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMasks {
    pub predicted: ClassId,
    pub scores: Vec<f64>,
    pub alr: PatchMask,
}

#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub terms: LossTerms,
    /// `∂loss/∂F`, channel-last, same layout as the map.
    pub grad_map: Vec<f64>,
    /// `∂loss/∂W`, same layout as the classifier weights.
    pub grad_weights: Vec<f64>,
    pub masks: Option<SampleMasks>,
}

/// Computes the ALR mask for one map from the real-class columns of `classifier`.
pub fn sample_masks(map: &FeatureMap, classifier: &CosineClassifier, threshold: f64) -> Result<SampleMasks> {
    let predicted = predicted_label(classifier, map)?;
    let scores = patch_scores(map, classifier, predicted)?;
    let alr = mask_from_scores(map.height(), map.width(), &scores, threshold)?;
    Ok(SampleMasks {
        predicted,
        scores,
        alr,
    })
}

fn accumulate(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Loss and gradients for one feature map.
///
/// Without a dummy column only the base term is evaluated. With one, the ALR
/// and ALI terms are added with weights λ and β; masks come from `fixed_mask`
/// when given and are otherwise computed from the current classifier. Masks
/// are constants: no gradient flows through the thresholding.
pub fn sample_loss_and_grad(
    map: &FeatureMap,
    label: ClassId,
    classifier: &CosineClassifier,
    cfg: &RdiConfig,
    fixed_mask: Option<&PatchMask>,
) -> Result<SampleGrad> {
    let d = classifier.dim();
    if map.channels() != d {
        return Err(Error::Shape(format!(
            "map has {} channels, classifier expects {d}",
            map.channels()
        )));
    }
    let base_cols = match classifier.dummy_index() {
        Some(_) if cfg.base_loss_includes_dummy => classifier.classes(),
        Some(i) => i,
        None => classifier.classes(),
    };
    if label >= classifier.real_classes() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: classifier.real_classes(),
        });
    }
    let patches = map.patch_count();
    let mut grad_map = vec![0.0; patches * d];
    let mut grad_weights = vec![0.0; classifier.weights().len()];

    let pooled = global_pool(map);
    let base = cosine_ce_with_grad(classifier, &pooled.vector, label, base_cols)?;
    global_pool_backward(patches, &base.grad_feature, 1.0, &mut grad_map);
    accumulate(&mut grad_weights, &base.grad_weights, 1.0);
    let mut terms = LossTerms {
        base: base.loss,
        alr: None,
        ali: None,
        total: base.loss,
    };

    let dummy = match classifier.dummy_index() {
        Some(i) if cfg.uses_masks() => i,
        _ => {
            return Ok(SampleGrad {
                terms,
                grad_map,
                grad_weights,
                masks: None,
            })
        }
    };

    let masks = match fixed_mask {
        Some(m) => {
            if (m.height(), m.width()) != (map.height(), map.width()) {
                return Err(Error::Shape("fixed mask does not match the map".into()));
            }
            SampleMasks {
                predicted: predicted_label(classifier, map)?,
                scores: Vec::new(),
                alr: m.clone(),
            }
        }
        None => sample_masks(map, classifier, cfg.threshold)?,
    };
    let ali = masks.alr.complement();
    let all = classifier.classes();

    // Evaluates one dummy-aware term, honouring the empty-mask policy.
    let mut term = |mask: &PatchMask, target: usize, policy: EmptyMaskPolicy, weight: f64| -> Result<Option<f64>> {
        if weight == 0.0 {
            return Ok(None);
        }
        let f = masked_pool(map, mask, cfg.pooling_mode)?;
        let empty = mask.support() == 0 || f.is_zero();
        let g: HeadGrad = if !empty {
            let g = cosine_ce_with_grad(classifier, &f.vector, target, all)?;
            masked_pool_backward(mask, cfg.pooling_mode, &g.grad_feature, weight, &mut grad_map);
            g
        } else {
            match policy {
                EmptyMaskPolicy::SkipTerm => return Ok(None),
                EmptyMaskPolicy::FallbackGlobal => {
                    let g = cosine_ce_with_grad(classifier, &pooled.vector, target, all)?;
                    global_pool_backward(patches, &g.grad_feature, weight, &mut grad_map);
                    g
                }
            }
        };
        accumulate(&mut grad_weights, &g.grad_weights, weight);
        Ok(Some(g.loss))
    };

    terms.alr = term(&masks.alr, label, cfg.alr_empty_policy, cfg.lambda)?;
    terms.ali = term(&ali, dummy, cfg.ali_empty_policy, cfg.beta)?;
    terms.total = terms.base + cfg.lambda * terms.alr.unwrap_or(0.0) + cfg.beta * terms.ali.unwrap_or(0.0);
    Ok(SampleGrad {
        terms,
        grad_map,
        grad_weights,
        masks: Some(masks),
    })
}

/// Batch mean of the per-sample total loss over precomputed feature maps.
pub fn total_loss_from_maps(
    maps: &[FeatureMap],
    labels: &[ClassId],
    classifier: &CosineClassifier,
    cfg: &RdiConfig,
) -> Result<f64> {
    if maps.len() != labels.len() {
        return Err(Error::Shape("maps and labels differ in length".into()));
    }
    if maps.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (m, &y) in maps.iter().zip(labels) {
        sum += sample_loss_and_grad(m, y, classifier, cfg, None)?.terms.total;
    }
    Ok(sum / maps.len() as f64)
}

/// Mean loss and parameter gradients of one batch.
#[derive(Debug, Clone)]
pub struct BatchGrad {
    pub loss: f64,
    pub base: f64,
    pub alr: f64,
    pub ali: f64,
    pub grad_backbone: Vec<f64>,
    pub grad_classifier: Vec<f64>,
    /// Smallest distance of the batch's forward passes from a ReLU or max-pool kink.
    pub kink_margin: f64,
}

/// End-to-end batch loss and gradients. `masks`, when given, holds one fixed
/// ALR mask per sample.
pub fn total_loss_and_grad(
    backbone: &Backbone,
    classifier: &CosineClassifier,
    batch: &[(&Image, ClassId)],
    cfg: &RdiConfig,
    masks: Option<&[PatchMask]>,
) -> Result<BatchGrad> {
    if let Some(m) = masks {
        if m.len() != batch.len() {
            return Err(Error::Shape("one mask per sample expected".into()));
        }
    }
    let mut out = BatchGrad {
        loss: 0.0,
        base: 0.0,
        alr: 0.0,
        ali: 0.0,
        grad_backbone: vec![0.0; backbone.param_count()],
        grad_classifier: vec![0.0; classifier.weights().len()],
        kink_margin: f64::INFINITY,
    };
    if batch.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / batch.len() as f64;
    for (i, &(image, label)) in batch.iter().enumerate() {
        let (map, trace) = backbone.forward_train(image)?;
        let fixed = masks.map(|m| &m[i]);
        let mut g = sample_loss_and_grad(&map, label, classifier, cfg, fixed)?;
        out.loss += scale * g.terms.total;
        out.base += scale * g.terms.base;
        out.alr += scale * g.terms.alr.unwrap_or(0.0);
        out.ali += scale * g.terms.ali.unwrap_or(0.0);
        accumulate(&mut out.grad_classifier, &g.grad_weights, scale);
        g.grad_map.iter_mut().for_each(|v| *v *= scale);
        backbone.backward(&trace, &g.grad_map, &mut out.grad_backbone);
        out.kink_margin = out.kink_margin.min(trace.kink_margin());
    }
    Ok(out)
}

/// Batch-mean total loss through the backbone (no gradients).
pub fn total_loss(
    backbone: &Backbone,
    classifier: &CosineClassifier,
    batch: &[(&Image, ClassId)],
    cfg: &RdiConfig,
) -> Result<f64> {
    let maps = batch
        .iter()
        .map(|(img, _)| backbone.forward_feature_map(img))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<ClassId> = batch.iter().map(|(_, y)| *y).collect();
    total_loss_from_maps(&maps, &labels, classifier, cfg)
}
