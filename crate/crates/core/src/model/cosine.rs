//! Cosine-classifier head: temperature-scaled logits, cross-entropy, and the
//! argmax inference rule, with hand-derived gradients.

use crate::error::{Error, Result};
use crate::types::{ClassId, CosineClassifier, PooledFeature};

/// Added to every L2 norm before dividing.
pub const NORM_EPS: f64 = 1e-12;

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x / (‖x‖ + eps)` together with `‖x‖`.
pub fn normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let n = l2_norm(x);
    let s = n + NORM_EPS;
    (x.iter().map(|v| v / s).collect(), n)
}

/// Cosine similarity with the epsilon-guarded norms used everywhere else.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / ((l2_norm(a) + NORM_EPS) * (l2_norm(b) + NORM_EPS))
}

/// Pulls a gradient w.r.t. `u = x / (‖x‖ + eps)` back to `x`.
fn normalize_backward(x: &[f64], norm: f64, grad_u: &[f64], out: &mut [f64]) {
    let s = norm + NORM_EPS;
    if norm == 0.0 {
        for (o, g) in out.iter_mut().zip(grad_u) {
            *o += g / s;
        }
        return;
    }
    let proj = dot(x, grad_u) / (norm * s * s);
    for ((o, g), xi) in out.iter_mut().zip(grad_u).zip(x) {
        *o += g / s - xi * proj;
    }
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_feature(classifier: &CosineClassifier, feature: &[f64]) -> Result<()> {
    if feature.len() != classifier.dim() {
        return Err(Error::Shape(format!(
            "feature length {} does not match classifier dimension {}",
            feature.len(),
            classifier.dim()
        )));
    }
    if feature.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateFeature);
    }
    Ok(())
}

/// `τ · cos(feature, w_k)` for every column, dummy included.
pub fn cosine_logits(classifier: &CosineClassifier, feature: &PooledFeature) -> Result<Vec<f64>> {
    check_feature(classifier, &feature.vector)?;
    Ok(logits_for_columns(classifier, &feature.vector, classifier.classes()))
}

fn logits_for_columns(classifier: &CosineClassifier, feature: &[f64], columns: usize) -> Vec<f64> {
    let (u, _) = normalize(feature);
    let tau = classifier.temperature();
    classifier
        .columns()
        .take(columns)
        .map(|w| {
            let (v, _) = normalize(w);
            tau * dot(&u, &v)
        })
        .collect()
}

/// Loss and gradients of cosine cross-entropy restricted to the first
/// `columns` classifier columns.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub loss: f64,
    pub grad_feature: Vec<f64>,
    /// Same layout as the classifier weights (all columns; untouched columns stay zero).
    pub grad_weights: Vec<f64>,
}

/// Cross-entropy of `softmax(τ·cos)` over columns `0..columns` with the given target.
///
/// This is the shared kernel behind the base, ALR, and ALI loss terms; it does
/// not reject the dummy column as a target.
pub fn cosine_ce_with_grad(
    classifier: &CosineClassifier,
    feature: &[f64],
    target: usize,
    columns: usize,
) -> Result<HeadGrad> {
    check_feature(classifier, feature)?;
    if columns == 0 || columns > classifier.classes() {
        return Err(Error::Shape(format!(
            "cannot score {columns} of {} columns",
            classifier.classes()
        )));
    }
    if target >= columns {
        return Err(Error::LabelOutOfRange {
            label: target,
            classes: columns,
        });
    }
    let d = classifier.dim();
    let tau = classifier.temperature();
    let (u, fnorm) = normalize(feature);
    let normed: Vec<(Vec<f64>, f64)> = classifier.columns().take(columns).map(normalize).collect();
    let logits: Vec<f64> = normed.iter().map(|(v, _)| tau * dot(&u, v)).collect();
    let lse = log_sum_exp(&logits);
    let loss = lse - logits[target];

    let mut grad_u = vec![0.0; d];
    let mut grad_weights = vec![0.0; classifier.weights().len()];
    for (k, (v, wnorm)) in normed.iter().enumerate() {
        let p = (logits[k] - lse).exp();
        let dz = p - if k == target { 1.0 } else { 0.0 };
        for (g, vi) in grad_u.iter_mut().zip(v) {
            *g += tau * dz * vi;
        }
        let grad_v: Vec<f64> = u.iter().map(|ui| tau * dz * ui).collect();
        normalize_backward(
            classifier.column(k),
            *wnorm,
            &grad_v,
            &mut grad_weights[k * d..(k + 1) * d],
        );
    }
    let mut grad_feature = vec![0.0; d];
    normalize_backward(feature, fnorm, &grad_u, &mut grad_feature);

    Ok(HeadGrad {
        loss,
        grad_feature,
        grad_weights,
    })
}

/// `−log softmax(τ·cos)[label]` over every column of `classifier`.
///
/// `label` must name a real class; use the dummy-aware losses in
/// [`crate::rdi`] to target the dummy column.
pub fn cross_entropy_cosine(
    classifier: &CosineClassifier,
    feature: &PooledFeature,
    label: ClassId,
) -> Result<f64> {
    if Some(label) == classifier.dummy_index() || label >= classifier.classes() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: classifier.real_classes(),
        });
    }
    let logits = cosine_logits(classifier, feature)?;
    Ok(log_sum_exp(&logits) - logits[label])
}

/// Batch mean of [`cross_entropy_cosine`].
pub fn mean_cross_entropy_cosine(
    classifier: &CosineClassifier,
    batch: &[(PooledFeature, ClassId)],
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let total = batch
        .iter()
        .map(|(f, y)| cross_entropy_cosine(classifier, f, *y))
        .sum::<Result<f64>>()?;
    Ok(total / batch.len() as f64)
}

/// Argmax of cosine similarity over real classes only; ties go to the
/// smallest class id.
pub fn predict(classifier: &CosineClassifier, feature: &PooledFeature) -> Result<ClassId> {
    predict_in_range(classifier, &feature.vector, 0..classifier.real_classes())
}

/// Argmax restricted to the column range `allowed` (e.g. novel classes only).
pub fn predict_in_range(
    classifier: &CosineClassifier,
    feature: &[f64],
    allowed: std::ops::Range<usize>,
) -> Result<ClassId> {
    check_feature(classifier, feature)?;
    let end = allowed.end.min(classifier.real_classes());
    if allowed.start >= end {
        return Err(Error::Classifier(format!(
            "empty prediction range {}..{}",
            allowed.start, allowed.end
        )));
    }
    // Exact norms here, so positive rescaling never changes the argmax.
    let fnorm = l2_norm(feature);
    let mut best = allowed.start;
    let mut best_score = f64::NEG_INFINITY;
    for k in allowed.start..end {
        let w = classifier.column(k);
        let score = dot(feature, w) / (fnorm * l2_norm(w));
        if score > best_score {
            best = k;
            best_score = score;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clf(cols: &[Vec<f64>], tau: f64) -> CosineClassifier {
        CosineClassifier::from_columns(cols, tau).unwrap()
    }

    #[test]
    fn orthogonal_logits() {
        let c = clf(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0);
        let l = cosine_logits(&c, &PooledFeature::raw(vec![1.0, 0.0])).unwrap();
        assert!((l[0] - 1.0).abs() < 1e-9 && l[1].abs() < 1e-12);
        let scaled = cosine_logits(&c, &PooledFeature::raw(vec![5.0, 0.0])).unwrap();
        assert!((l[0] - scaled[0]).abs() < 1e-9);
    }

    #[test]
    fn zero_feature_is_degenerate() {
        let c = clf(&[vec![1.0, 0.0]], 1.0);
        assert!(matches!(
            cosine_logits(&c, &PooledFeature::raw(vec![0.0, 0.0])),
            Err(Error::DegenerateFeature)
        ));
        assert!(predict(&c, &PooledFeature::raw(vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn single_class_loss_is_zero() {
        let c = clf(&[vec![0.3, -2.0, 1.0]], 16.0);
        let l = cross_entropy_cosine(&c, &PooledFeature::raw(vec![1.0, 2.0, 3.0]), 0).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn two_class_reference_value() {
        // logits (1, 0): -ln(e / (e + 1))
        let c = clf(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0);
        let l = cross_entropy_cosine(&c, &PooledFeature::raw(vec![2.0, 0.0]), 0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn label_range_checked() {
        let c = clf(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0);
        assert!(cross_entropy_cosine(&c, &PooledFeature::raw(vec![1.0, 0.0]), 2).is_err());
        let with_dummy = c.with_dummy_column(vec![1.0, 1.0]).unwrap();
        assert!(cross_entropy_cosine(&with_dummy, &PooledFeature::raw(vec![1.0, 0.0]), 2).is_err());
    }

    #[test]
    fn ties_go_to_smallest_id() {
        let c = clf(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]], 1.0);
        assert_eq!(predict(&c, &PooledFeature::raw(vec![1.0, 0.0])).unwrap(), 0);
        let c = clf(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 0.0]], 1.0);
        assert_eq!(predict(&c, &PooledFeature::raw(vec![1.0, 0.0])).unwrap(), 1);
    }

    #[test]
    fn dummy_never_predicted() {
        let c = clf(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0)
            .with_dummy_column(vec![1.0, 1.0])
            .unwrap();
        assert_eq!(predict(&c, &PooledFeature::raw(vec![1.0, 1.0])).unwrap(), 0);
    }

    #[test]
    fn batch_mean_is_mean_of_samples() {
        let c = clf(&[vec![1.0, 0.2], vec![-0.3, 1.0]], 4.0);
        let batch = vec![
            (PooledFeature::raw(vec![1.0, 0.5]), 0),
            (PooledFeature::raw(vec![0.1, 0.9]), 1),
            (PooledFeature::raw(vec![-1.0, 0.2]), 0),
        ];
        let mean = mean_cross_entropy_cosine(&c, &batch).unwrap();
        let manual: f64 = batch
            .iter()
            .map(|(f, y)| cross_entropy_cosine(&c, f, *y).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((mean - manual).abs() < 1e-12);
    }
}
