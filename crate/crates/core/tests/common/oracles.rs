//! Brute-force oracles for the math kernels, written from the definitions
//! without calling into the library.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdi_core::model::{cosine_logits, cross_entropy_cosine};
use rdi_core::protocol::mean_feature;
use rdi_core::rdi::{
    ali_mask, alr_mask, extend_with_dummy, masked_pool, sample_masks, total_loss_from_maps, EmptyMaskPolicy,
    PoolingMode, RdiConfig,
};
use rdi_core::types::{CosineClassifier, FeatureMap, MaskKind, PatchMask, PooledFeature};

pub const CASES: usize = 250;
pub const TOL: f64 = 1e-6;

/// Worst error of one kernel over its randomized cases.
#[derive(Debug, Clone)]
pub struct KernelResult {
    pub kernel: &'static str,
    pub cases: usize,
    pub max_err: f64,
}

impl KernelResult {
    pub fn passed(&self) -> bool {
        self.cases >= 200 && self.max_err <= TOL
    }
}

/// Absolute error below 1, relative above.
fn err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn vec_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| err(*x, *y)).fold(0.0, f64::max)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

struct Micro {
    d: usize,
    n: usize,
    h: usize,
    w: usize,
    tau: f64,
    cols: Vec<Vec<f64>>,
}

fn micro(rng: &mut ChaCha8Rng) -> Micro {
    let d = rng.random_range(1..=8);
    let n = rng.random_range(1..=5);
    let cols = (0..n).map(|_| rand_vec(rng, d)).collect();
    Micro {
        d,
        n,
        h: rng.random_range(1..=3),
        w: rng.random_range(1..=3),
        tau: [1.0, 10.0, 16.0][rng.random_range(0..3)],
        cols,
    }
}

fn o_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn o_cos(a: &[f64], b: &[f64]) -> f64 {
    o_dot(a, b) / (o_dot(a, a).sqrt() * o_dot(b, b).sqrt())
}

fn o_logits(cols: &[Vec<f64>], tau: f64, f: &[f64]) -> Vec<f64> {
    cols.iter().map(|c| tau * o_cos(f, c)).collect()
}

fn o_ce(cols: &[Vec<f64>], tau: f64, f: &[f64], y: usize) -> f64 {
    let z = o_logits(cols, tau, f);
    let denom: f64 = z.iter().map(|v| v.exp()).sum();
    -(z[y].exp() / denom).ln()
}

/// Patch `(a, b)` of a row-major, channel-last map.
fn o_patch(values: &[f64], w: usize, d: usize, a: usize, b: usize) -> &[f64] {
    let start = (a * w + b) * d;
    &values[start..start + d]
}

fn o_pool(values: &[f64], h: usize, w: usize, d: usize, bits: &[bool], divide_by_all: bool) -> Vec<f64> {
    let mut sum = vec![0.0; d];
    let mut count = 0;
    for a in 0..h {
        for b in 0..w {
            if bits[a * w + b] {
                count += 1;
                for (s, x) in sum.iter_mut().zip(o_patch(values, w, d, a, b)) {
                    *s += x;
                }
            }
        }
    }
    let div = if divide_by_all { (h * w) as f64 } else { count.max(1) as f64 };
    sum.iter().map(|s| s / div).collect()
}

fn o_predict(cols: &[Vec<f64>], f: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..cols.len() {
        if o_cos(f, &cols[k]) > o_cos(f, &cols[best]) {
            best = k;
        }
    }
    best
}

fn o_alr(values: &[f64], h: usize, w: usize, d: usize, col: &[f64], rho: f64) -> Vec<bool> {
    let mut out = Vec::new();
    for a in 0..h {
        for b in 0..w {
            out.push(o_cos(o_patch(values, w, d, a, b), col) >= rho);
        }
    }
    out
}

fn classifier(m: &Micro) -> CosineClassifier {
    CosineClassifier::from_columns(&m.cols, m.tau).unwrap()
}

pub fn cosine_logits_suite() -> KernelResult {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let m = micro(&mut rng);
        let f = rand_vec(&mut rng, m.d);
        let got = cosine_logits(&classifier(&m), &PooledFeature::raw(f.clone())).unwrap();
        worst = worst.max(vec_err(&got, &o_logits(&m.cols, m.tau, &f)));
    }
    KernelResult {
        kernel: "cosine logits",
        cases: CASES,
        max_err: worst,
    }
}

pub fn cross_entropy_suite() -> KernelResult {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let m = micro(&mut rng);
        let f = rand_vec(&mut rng, m.d);
        let y = rng.random_range(0..m.n);
        let got = cross_entropy_cosine(&classifier(&m), &PooledFeature::raw(f.clone()), y).unwrap();
        worst = worst.max(err(got, o_ce(&m.cols, m.tau, &f, y)));
    }
    KernelResult {
        kernel: "cross-entropy",
        cases: CASES,
        max_err: worst,
    }
}

pub fn prototype_suite() -> KernelResult {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let d = rng.random_range(1..=8);
        let k = rng.random_range(1..=5);
        let shots: Vec<Vec<f64>> = (0..k).map(|_| rand_vec(&mut rng, d)).collect();
        let got = mean_feature(&shots, 0).unwrap();
        let oracle: Vec<f64> = (0..d).map(|j| shots.iter().map(|s| s[j]).sum::<f64>() / k as f64).collect();
        worst = worst.max(vec_err(&got.vector, &oracle));
    }
    KernelResult {
        kernel: "prototypes",
        cases: CASES,
        max_err: worst,
    }
}

pub fn masked_pool_suite() -> KernelResult {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst: f64 = 0.0;
    for case in 0..CASES {
        let m = micro(&mut rng);
        let values = rand_vec(&mut rng, m.h * m.w * m.d);
        let map = FeatureMap::new(m.h, m.w, m.d, values.clone()).unwrap();
        let bits: Vec<bool> = (0..m.h * m.w).map(|_| rng.random_bool(0.5)).collect();
        let mask = PatchMask::new(m.h, m.w, bits.clone(), MaskKind::Alr).unwrap();
        let (mode, all) = if case % 2 == 0 {
            (PoolingMode::MaskedMean, false)
        } else {
            (PoolingMode::GlobalMean, true)
        };
        let got = masked_pool(&map, &mask, mode).unwrap();
        worst = worst.max(vec_err(&got.vector, &o_pool(&values, m.h, m.w, m.d, &bits, all)));
        if got.support_count != bits.iter().filter(|&&b| b).count() {
            worst = f64::INFINITY;
        }
    }
    KernelResult {
        kernel: "masked pooling",
        cases: CASES,
        max_err: worst,
    }
}

/// ALR bits against the threshold rule and ALI as their complement; a bit
/// mismatch counts as an error of 1.
pub fn mask_suite() -> KernelResult {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let m = micro(&mut rng);
        let values = rand_vec(&mut rng, m.h * m.w * m.d);
        let map = FeatureMap::new(m.h, m.w, m.d, values.clone()).unwrap();
        let rho = rng.random_range(-1.0..1.0);
        let clf = classifier(&m);
        let global = o_pool(&values, m.h, m.w, m.d, &vec![true; m.h * m.w], true);
        let yp = o_predict(&m.cols, &global);
        let oracle = o_alr(&values, m.h, m.w, m.d, &m.cols[yp], rho);

        let direct = alr_mask(&map, &clf, yp, rho).unwrap();
        let via_sample = sample_masks(&map, &clf, rho).unwrap();
        let ali = ali_mask(&direct).unwrap();
        let ok = direct.bits() == oracle.as_slice()
            && via_sample.predicted == yp
            && via_sample.alr.bits() == oracle.as_slice()
            && ali.kind() == MaskKind::Ali
            && ali.bits().iter().zip(&oracle).all(|(a, o)| *a != *o);
        if !ok {
            worst = 1.0;
        }
    }
    KernelResult {
        kernel: "ALR/ALI masks",
        cases: CASES,
        max_err: worst,
    }
}

fn o_sample_total(values: &[f64], m: &Micro, dummy: &[f64], y: usize, cfg: &RdiConfig) -> f64 {
    let (h, w, d) = (m.h, m.w, m.d);
    let global = o_pool(values, h, w, d, &vec![true; h * w], true);
    let base = o_ce(&m.cols, m.tau, &global, y);
    let mut all = m.cols.clone();
    all.push(dummy.to_vec());
    let yp = o_predict(&m.cols, &global);
    let alr = o_alr(values, h, w, d, &m.cols[yp], cfg.threshold);
    let ali: Vec<bool> = alr.iter().map(|b| !b).collect();
    let divide_by_all = cfg.pooling_mode == PoolingMode::GlobalMean;
    let term = |bits: &[bool], target: usize, policy: EmptyMaskPolicy| -> f64 {
        if bits.iter().any(|&b| b) {
            o_ce(&all, m.tau, &o_pool(values, h, w, d, bits, divide_by_all), target)
        } else {
            match policy {
                EmptyMaskPolicy::SkipTerm => 0.0,
                EmptyMaskPolicy::FallbackGlobal => o_ce(&all, m.tau, &global, target),
            }
        }
    };
    let mut total = base;
    if cfg.lambda > 0.0 {
        total += cfg.lambda * term(&alr, y, cfg.alr_empty_policy);
    }
    if cfg.beta > 0.0 {
        total += cfg.beta * term(&ali, m.n, cfg.ali_empty_policy);
    }
    total
}

/// Batch-mean total loss, including thresholds that empty one of the masks.
pub fn total_loss_suite() -> KernelResult {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut worst: f64 = 0.0;
    let policies = [EmptyMaskPolicy::FallbackGlobal, EmptyMaskPolicy::SkipTerm];
    for case in 0..CASES {
        let m = micro(&mut rng);
        let clf = extend_with_dummy(&classifier(&m), case as u64).unwrap();
        let dummy = clf.column(m.n).to_vec();
        let cfg = RdiConfig {
            threshold: [-1.5, -0.3, 0.0, 0.4, 1.5][case % 5],
            lambda: [0.0, 0.5, 1.0][rng.random_range(0..3)],
            beta: [0.0, 1.0, 2.0][rng.random_range(0..3)],
            pooling_mode: if rng.random_bool(0.8) {
                PoolingMode::MaskedMean
            } else {
                PoolingMode::GlobalMean
            },
            alr_empty_policy: policies[rng.random_range(0..2)],
            ali_empty_policy: policies[rng.random_range(0..2)],
            ..RdiConfig::default()
        };
        let batch = rng.random_range(1..=4);
        let mut maps = Vec::new();
        let mut labels = Vec::new();
        let mut oracle = 0.0;
        for _ in 0..batch {
            let values = rand_vec(&mut rng, m.h * m.w * m.d);
            let y = rng.random_range(0..m.n);
            oracle += o_sample_total(&values, &m, &dummy, y, &cfg) / batch as f64;
            maps.push(FeatureMap::new(m.h, m.w, m.d, values).unwrap());
            labels.push(y);
        }
        let got = total_loss_from_maps(&maps, &labels, &clf, &cfg).unwrap();
        worst = worst.max(err(got, oracle));
    }
    KernelResult {
        kernel: "total loss",
        cases: CASES,
        max_err: worst,
    }
}

pub fn all_suites() -> Vec<KernelResult> {
    vec![
        cosine_logits_suite(),
        cross_entropy_suite(),
        prototype_suite(),
        masked_pool_suite(),
        mask_suite(),
        total_loss_suite(),
    ]
}
