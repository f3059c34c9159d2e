//! Feature extractor and cosine classifier head.

mod backbone;
pub mod checkpoint;
mod cosine;
pub mod layers;

pub use backbone::{Architecture, Backbone, BackboneConfig, ForwardTrace, ParamEntry};
pub use cosine::{
    cosine, cosine_ce_with_grad, cosine_logits, cross_entropy_cosine, dot, l2_norm, log_sum_exp,
    mean_cross_entropy_cosine, normalize, predict, predict_in_range, HeadGrad, NORM_EPS,
};

use crate::types::{FeatureMap, FeatureSource, PooledFeature};

/// Mean of all patches: `vector[k] = mean_{a,b} F[a, b, k]`.
pub fn global_pool(map: &FeatureMap) -> PooledFeature {
    let d = map.channels();
    let mut v = vec![0.0; d];
    for patch in map.patches() {
        for (acc, x) in v.iter_mut().zip(patch) {
            *acc += x;
        }
    }
    let n = map.patch_count() as f64;
    v.iter_mut().for_each(|x| *x /= n);
    PooledFeature {
        vector: v,
        source_mask_kind: FeatureSource::None,
        support_count: map.patch_count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_pool_constant_and_single_patch() {
        let m = FeatureMap::new(2, 3, 2, vec![1.5; 12]).unwrap();
        let p = global_pool(&m);
        assert_eq!(p.vector, vec![1.5, 1.5]);
        assert_eq!(p.support_count, 6);
        let one = FeatureMap::new(1, 1, 3, vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(global_pool(&one).vector, vec![1.0, -2.0, 3.0]);
    }
}
