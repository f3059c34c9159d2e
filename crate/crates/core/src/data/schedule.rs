use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetAdapter, Partition};
use crate::error::{Error, Result};
use crate::seed::mix_seed;
use crate::types::{IncrementalSession, SessionManifest, SessionSchedule, SCHEMA_VERSION};

/// Explicit class split, e.g. the published split files of a benchmark.
///
/// Class numbers are dataset class indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleSplit {
    pub base_classes: Vec<usize>,
    pub sessions: Vec<Vec<usize>>,
    pub shot: usize,
    /// Optional fixed K-shot sample indices, one list per session and class
    /// (same order as `sessions`). Drawn with `seed` when absent.
    #[serde(default)]
    pub session_samples: Option<Vec<Vec<Vec<usize>>>>,
}

/// Builds an FSCIL schedule: base classes are the first `base_count` dataset
/// classes; the remaining classes are shuffled with `seed` and dealt into
/// `sessions` groups of `way`. Each novel class contributes `shot` training
/// samples drawn with `seed`.
pub fn build_schedule(
    adapter: &dyn DatasetAdapter,
    base_count: usize,
    sessions: usize,
    way: usize,
    shot: usize,
    seed: u64,
) -> Result<SessionSchedule> {
    let total = adapter.class_count();
    if base_count == 0 {
        return Err(Error::Schedule("base session needs at least one class".into()));
    }
    if sessions > 0 && (way == 0 || shot == 0) {
        return Err(Error::Schedule("way and shot must be positive".into()));
    }
    let needed = base_count + sessions * way;
    if needed > total {
        return Err(Error::Schedule(format!(
            "{base_count} base + {sessions}x{way} novel classes need {needed}, dataset `{}` has {total}",
            adapter.name()
        )));
    }
    let mut novel: Vec<usize> = (base_count..total).collect();
    novel.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6e6f_7665)));
    let split = ScheduleSplit {
        base_classes: (0..base_count).collect(),
        sessions: novel[..sessions * way].chunks(way.max(1)).map(<[usize]>::to_vec).collect(),
        shot,
        session_samples: None,
    };
    build_schedule_from_split(adapter, &split, seed)
}

pub fn build_schedule_from_split(
    adapter: &dyn DatasetAdapter,
    split: &ScheduleSplit,
    seed: u64,
) -> Result<SessionSchedule> {
    let total = adapter.class_count();
    let mut source_classes: Vec<usize> = split.base_classes.clone();
    source_classes.extend(split.sessions.iter().flatten().copied());
    if let Some(&c) = source_classes.iter().find(|&&c| c >= total) {
        return Err(Error::Schedule(format!("class {c} outside dataset of {total} classes")));
    }

    let mut train_manifest = Vec::with_capacity(split.sessions.len() + 1);
    let mut test_manifest = Vec::with_capacity(split.sessions.len() + 1);

    let mut base_train = SessionManifest::new();
    for (id, &src) in split.base_classes.iter().enumerate() {
        let samples = adapter.class_samples(src, Partition::Train);
        if samples.is_empty() {
            return Err(Error::Schedule(format!("base class {src} has no training samples")));
        }
        base_train.insert(id, samples);
    }
    train_manifest.push(base_train);

    let mut incremental = Vec::with_capacity(split.sessions.len());
    let mut next_id = split.base_classes.len();
    for (t, classes) in split.sessions.iter().enumerate() {
        let mut manifest = SessionManifest::new();
        let mut ids = Vec::with_capacity(classes.len());
        for (j, &src) in classes.iter().enumerate() {
            let pool = adapter.class_samples(src, Partition::Train);
            let chosen = match &split.session_samples {
                Some(fixed) => fixed
                    .get(t)
                    .and_then(|s| s.get(j))
                    .cloned()
                    .ok_or_else(|| Error::Schedule(format!("no fixed samples for class {src} in session {}", t + 1)))?,
                None => {
                    if pool.len() < split.shot {
                        return Err(Error::Schedule(format!(
                            "class {src} has {} training samples, {}-shot needs {}",
                            pool.len(),
                            split.shot,
                            split.shot
                        )));
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5348_0000 + src as u64));
                    let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), split.shot)
                        .into_iter()
                        .map(|i| pool[i])
                        .collect();
                    picked.sort_unstable();
                    picked
                }
            };
            manifest.insert(next_id, chosen);
            ids.push(next_id);
            next_id += 1;
        }
        train_manifest.push(manifest);
        incremental.push(IncrementalSession {
            way: classes.len(),
            shot: split.shot,
            classes: ids,
        });
    }

    let mut cumulative = SessionManifest::new();
    let mut offset = 0;
    for t in 0..=split.sessions.len() {
        let count = if t == 0 {
            split.base_classes.len()
        } else {
            split.sessions[t - 1].len()
        };
        for id in offset..offset + count {
            let src = source_classes[id];
            let samples = adapter.class_samples(src, Partition::Test);
            if samples.is_empty() {
                return Err(Error::Schedule(format!("class {src} has no test samples")));
            }
            cumulative.insert(id, samples);
        }
        offset += count;
        test_manifest.push(cumulative.clone());
    }

    Ok(SessionSchedule {
        schema_version: SCHEMA_VERSION,
        dataset: adapter.name().to_string(),
        base_classes: (0..split.base_classes.len()).collect(),
        incremental_sessions: incremental,
        source_classes,
        train_manifest,
        test_manifest,
    })
}
