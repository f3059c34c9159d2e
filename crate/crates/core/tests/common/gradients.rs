//! Analytic gradients against central finite differences (step 1e-4).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdi_core::data::Image;
use rdi_core::model::{cosine_ce_with_grad, Architecture, Backbone, BackboneConfig};
use rdi_core::rdi::{
    extend_with_dummy, sample_loss_and_grad, sample_masks, total_loss_and_grad, EmptyMaskPolicy, RdiConfig,
};
use rdi_core::types::{CosineClassifier, FeatureMap, PatchMask};


pub const STEP: f64 = 1e-4;
pub const TOL: f64 = 1e-3;
/// Below this magnitude both gradients count as zero.
const FLOOR: f64 = 1e-6;
/// Instances closer than this to a ReLU or max-pool kink are skipped.
const MIN_MARGIN: f64 = 5e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn classifier(rng: &mut ChaCha8Rng, d: usize, n: usize, tau: f64) -> CosineClassifier {
    CosineClassifier::from_columns_flat(d, n, random_vec(rng, d * n), tau).unwrap()
}

fn central<F: FnMut(&[f64]) -> f64>(x: &[f64], i: usize, mut f: F) -> f64 {
    let mut p = x.to_vec();
    p[i] += STEP;
    let up = f(&p);
    p[i] -= 2.0 * STEP;
    let down = f(&p);
    (up - down) / (2.0 * STEP)
}

/// Worst relative error of the base, ALR and ALI terms w.r.t. the pooled
/// feature and every classifier weight.
pub fn head_terms() -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = [0.0f64; 3];
    for case in 0..60 {
        let d = rng.random_range(2..=8);
        let n = rng.random_range(2..=5);
        let tau = [1.0, 4.0, 16.0][case % 3];
        let base = classifier(&mut rng, d, n, tau);
        let with_dummy = extend_with_dummy(&base, case as u64).unwrap();
        let f = random_vec(&mut rng, d);
        let y = rng.random_range(0..n);
        // (classifier, target, columns): base term, ALR term, ALI term
        let cases = [(&base, y, n), (&with_dummy, y, n + 1), (&with_dummy, n, n + 1)];
        for (term, (clf, target, cols)) in cases.into_iter().enumerate() {
            let g = cosine_ce_with_grad(clf, &f, target, cols).unwrap();
            for i in 0..d {
                let num = central(&f, i, |x| cosine_ce_with_grad(clf, x, target, cols).unwrap().loss);
                worst[term] = worst[term].max(rel_err(g.grad_feature[i], num));
            }
            let w = clf.weights().to_vec();
            for i in 0..w.len() {
                let num = central(&w, i, |x| {
                    let c = CosineClassifier::from_columns_flat(d, clf.classes(), x.to_vec(), tau).unwrap();
                    cosine_ce_with_grad(&c, &f, target, cols).unwrap().loss
                });
                worst[term] = worst[term].max(rel_err(g.grad_weights[i], num));
            }
        }
    }
    worst
}

fn rebuild(like: &CosineClassifier, weights: &[f64]) -> CosineClassifier {
    let (d, tau) = (like.dim(), like.temperature());
    match like.dummy_index() {
        Some(k) => CosineClassifier::from_columns_flat(d, k, weights[..k * d].to_vec(), tau)
            .unwrap()
            .with_dummy_column(weights[k * d..].to_vec())
            .unwrap(),
        None => CosineClassifier::from_columns_flat(d, like.classes(), weights.to_vec(), tau).unwrap(),
    }
}

/// Worst relative error of the map-level total loss with fixed masks, w.r.t.
/// the feature map and all classifier weights.
pub fn map_level_total() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for case in 0..40 {
        let d = rng.random_range(2..=6);
        let n = rng.random_range(2..=4);
        let h = rng.random_range(1..=3);
        let w = rng.random_range(1..=3);
        let clf = extend_with_dummy(&classifier(&mut rng, d, n, 4.0), case).unwrap();
        let map = FeatureMap::new(h, w, d, random_vec(&mut rng, h * w * d)).unwrap();
        let y = rng.random_range(0..n);
        let bits: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.5)).collect();
        let mask = PatchMask::new(h, w, bits, rdi_core::types::MaskKind::Alr).unwrap();
        let cfg = RdiConfig {
            lambda: rng.random_range(0.0..2.0),
            beta: rng.random_range(0.0..2.0),
            alr_empty_policy: EmptyMaskPolicy::FallbackGlobal,
            ali_empty_policy: EmptyMaskPolicy::FallbackGlobal,
            ..RdiConfig::default()
        };
        let g = sample_loss_and_grad(&map, y, &clf, &cfg, Some(&mask)).unwrap();
        let values = map.values().to_vec();
        for i in 0..values.len() {
            let num = central(&values, i, |x| {
                let m = FeatureMap::new(h, w, d, x.to_vec()).unwrap();
                sample_loss_and_grad(&m, y, &clf, &cfg, Some(&mask)).unwrap().terms.total
            });
            worst = worst.max(rel_err(g.grad_map[i], num));
        }
        let weights = clf.weights().to_vec();
        for i in 0..weights.len() {
            let num = central(&weights, i, |x| {
                let c = rebuild(&clf, x);
                sample_loss_and_grad(&map, y, &c, &cfg, Some(&mask)).unwrap().terms.total
            });
            worst = worst.max(rel_err(g.grad_weights[i], num));
        }
    }
    worst
}

fn tiny_backbone(arch: Architecture, size: usize, widths: Vec<usize>, seed: u64) -> Backbone {
    let mut cfg = BackboneConfig::new(arch, size).with_widths(widths);
    cfg.norm_groups = 2;
    Backbone::new(cfg, seed).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let v: Vec<f64> = (0..size * size * 3).map(|_| rng.random::<f64>()).collect();
    Image::from_unit_floats(size, size, &v).unwrap()
}

/// End-to-end: total loss through the backbone, w.r.t. every backbone and
/// classifier parameter, masks held at their values for the unperturbed model.
/// Returns `None` when the instance sits too close to a kink for finite
/// differences to be meaningful.
fn end_to_end(arch: Architecture, size: usize, widths: &[usize], seed: u64) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut backbone = tiny_backbone(arch, size, widths.to_vec(), seed);
    let d = backbone.feature_dim();
    let clf = extend_with_dummy(&classifier(&mut rng, d, 3, 2.0), seed).unwrap();
    let images: Vec<Image> = (0..2).map(|_| random_image(&mut rng, size)).collect();
    let batch: Vec<(&Image, usize)> = vec![(&images[0], 0), (&images[1], 2)];
    let cfg = RdiConfig {
        alr_empty_policy: EmptyMaskPolicy::FallbackGlobal,
        ali_empty_policy: EmptyMaskPolicy::FallbackGlobal,
        ..RdiConfig::default()
    };
    let masks: Vec<PatchMask> = images
        .iter()
        .map(|img| sample_masks(&backbone.forward_feature_map(img).unwrap(), &clf, 0.0).unwrap().alr)
        .collect();
    let g = total_loss_and_grad(&backbone, &clf, &batch, &cfg, Some(&masks)).unwrap();
    if g.kink_margin < MIN_MARGIN {
        return None;
    }

    let mut worst: f64 = 0.0;
    let params = backbone.params().to_vec();
    for i in 0..params.len() {
        let num = central(&params, i, |x| {
            backbone.params_mut().copy_from_slice(x);
            total_loss_and_grad(&backbone, &clf, &batch, &cfg, Some(&masks)).unwrap().loss
        });
        worst = worst.max(rel_err(g.grad_backbone[i], num));
    }
    backbone.params_mut().copy_from_slice(&params);
    let weights = clf.weights().to_vec();
    for i in 0..weights.len() {
        let num = central(&weights, i, |x| {
            let c = rebuild(&clf, x);
            total_loss_and_grad(&backbone, &c, &batch, &cfg, Some(&masks)).unwrap().loss
        });
        worst = worst.max(rel_err(g.grad_classifier[i], num));
    }
    Some(worst)
}

/// Worst error over the first `want` kink-free instances among seeds `0..200`,
/// or `None` if fewer were found.
pub fn end_to_end_worst(arch: Architecture, size: usize, widths: &[usize], want: usize) -> Option<f64> {
    let results: Vec<f64> = (0..200).filter_map(|s| end_to_end(arch, size, widths, s)).take(want).collect();
    (results.len() == want).then(|| results.iter().copied().fold(0.0, f64::max))
}

pub fn small_conv_end_to_end() -> Option<f64> {
    end_to_end_worst(Architecture::SmallConv4, 16, &[3, 4, 4, 4], 3)
}

pub fn resnet12_end_to_end() -> Option<f64> {
    end_to_end_worst(Architecture::ResNet12, 16, &[2, 2, 4, 4], 3)
}
