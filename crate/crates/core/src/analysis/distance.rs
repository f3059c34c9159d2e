use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::cosine;
use crate::types::ClassId;

/// `1 − cos(a, b)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - cosine(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub distance: f64,
    pub cumulative: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InterClassMode {
    /// Distances between class-mean embeddings.
    ClassMeans,
    /// Distances between every cross-class sample pair.
    AllPairs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceCdfs {
    pub intra: Vec<CdfPoint>,
    pub inter: Vec<CdfPoint>,
    pub intra_mean: f64,
    pub inter_mean: f64,
    pub inter_mode: InterClassMode,
    /// Classes with a single sample, left out of the intra-class distances.
    #[serde(default)]
    pub singleton_classes: Vec<ClassId>,
}

fn cdf(mut values: Vec<f64>) -> Vec<CdfPoint> {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    values
        .into_iter()
        .enumerate()
        .map(|(i, distance)| CdfPoint {
            distance,
            cumulative: (i + 1) as f64 / n,
        })
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn class_mean(features: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; features[0].len()];
    for f in features {
        for (a, x) in m.iter_mut().zip(f) {
            *a += x;
        }
    }
    m.iter_mut().for_each(|a| *a /= features.len() as f64);
    m
}

/// Pairwise cosine distances within and between classes, as sorted CDFs.
pub fn class_distance_cdfs(
    features: &BTreeMap<ClassId, Vec<Vec<f64>>>,
    mode: InterClassMode,
) -> Result<DistanceCdfs> {
    let classes: Vec<(&ClassId, &Vec<Vec<f64>>)> = features.iter().filter(|(_, v)| !v.is_empty()).collect();
    if classes.len() < 2 {
        return Err(Error::Analysis("distance CDFs need at least two classes".into()));
    }
    let mut intra = Vec::new();
    let mut singleton_classes = Vec::new();
    for (&class, feats) in &classes {
        if feats.len() < 2 {
            log::warn!("class {class} has a single sample; excluded from intra-class distances");
            singleton_classes.push(class);
            continue;
        }
        for i in 0..feats.len() {
            for j in i + 1..feats.len() {
                intra.push(cosine_distance(&feats[i], &feats[j]));
            }
        }
    }
    if intra.is_empty() {
        return Err(Error::Analysis("every class is a singleton".into()));
    }
    let mut inter = Vec::new();
    match mode {
        InterClassMode::ClassMeans => {
            let means: Vec<Vec<f64>> = classes.iter().map(|(_, f)| class_mean(f)).collect();
            for i in 0..means.len() {
                for j in i + 1..means.len() {
                    inter.push(cosine_distance(&means[i], &means[j]));
                }
            }
        }
        InterClassMode::AllPairs => {
            for i in 0..classes.len() {
                for j in i + 1..classes.len() {
                    for a in classes[i].1 {
                        for b in classes[j].1 {
                            inter.push(cosine_distance(a, b));
                        }
                    }
                }
            }
        }
    }
    Ok(DistanceCdfs {
        intra_mean: mean(&intra),
        inter_mean: mean(&inter),
        intra: cdf(intra),
        inter: cdf(inter),
        inter_mode: mode,
        singleton_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_features_and_orthogonal_means() {
        let mut f = BTreeMap::new();
        f.insert(0, vec![vec![1.0, 0.0]; 3]);
        f.insert(1, vec![vec![0.0, 2.0]; 2]);
        let d = class_distance_cdfs(&f, InterClassMode::ClassMeans).unwrap();
        assert!(d.intra_mean.abs() < 1e-9);
        assert!((d.inter_mean - 1.0).abs() < 1e-9);
        assert_eq!(d.intra.len(), 4);
        assert_eq!(d.intra.last().unwrap().cumulative, 1.0);
    }

    #[test]
    fn singleton_excluded() {
        let mut f = BTreeMap::new();
        f.insert(0, vec![vec![1.0, 0.0], vec![1.0, 1.0]]);
        f.insert(1, vec![vec![0.0, 1.0]]);
        let d = class_distance_cdfs(&f, InterClassMode::AllPairs).unwrap();
        assert_eq!(d.singleton_classes, vec![1]);
        assert_eq!(d.intra.len(), 1);
        assert_eq!(d.inter.len(), 2);
        f.remove(&0);
        assert!(class_distance_cdfs(&f, InterClassMode::ClassMeans).is_err());
    }
}
