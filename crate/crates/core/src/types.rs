//! Domain types shared by every stage of the pipeline.
//!
//! Everything here is plain data: construction validates invariants, and the
//! serde representations are the on-disk JSON schema. No training or masking
//! math lives in this module.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::analysis::{DistanceCdfs, PatchSimilarityStats, RedundancyAlignment};
use crate::error::{Error, Result};

/// Version tag written into every serialized schedule and report.
pub const SCHEMA_VERSION: u32 = 1;

/// Dense class id. Base classes come first, then novel classes session by
/// session; the id doubles as the classifier column index.
pub type ClassId = usize;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

// ---------------------------------------------------------------------------
// FeatureMap
// ---------------------------------------------------------------------------

/// Output of the last convolutional stage, stored channel-last `(h, w, d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FeatureMapRepr")]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct FeatureMapRepr {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl TryFrom<FeatureMapRepr> for FeatureMap {
    type Error = Error;
    fn try_from(r: FeatureMapRepr) -> Result<Self> {
        FeatureMap::new(r.height, r.width, r.channels, r.values)
    }
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "feature map dimensions must be positive, got ({height}, {width}, {channels})"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "expected {} values for ({height}, {width}, {channels}), got {}",
                height * width * channels,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map"));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn patch_count(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Channel vector of patch `(a, b)`.
    pub fn patch(&self, a: usize, b: usize) -> &[f64] {
        let start = (a * self.width + b) * self.channels;
        &self.values[start..start + self.channels]
    }

    /// Iterates patches in row-major order.
    pub fn patches(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.channels)
    }
}

// ---------------------------------------------------------------------------
// PatchMask
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskKind {
    #[serde(rename = "ALR")]
    Alr,
    #[serde(rename = "ALI")]
    Ali,
}

impl MaskKind {
    pub fn opposite(self) -> Self {
        match self {
            MaskKind::Alr => MaskKind::Ali,
            MaskKind::Ali => MaskKind::Alr,
        }
    }
}

/// Binary `(h, w)` patch selector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PatchMaskRepr", into = "PatchMaskRepr")]
pub struct PatchMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    kind: MaskKind,
}

#[derive(Serialize, Deserialize)]
struct PatchMaskRepr {
    height: usize,
    width: usize,
    bits: Vec<u8>,
    kind: MaskKind,
}

impl TryFrom<PatchMaskRepr> for PatchMask {
    type Error = Error;
    fn try_from(r: PatchMaskRepr) -> Result<Self> {
        if let Some(bad) = r.bits.iter().find(|&&b| b > 1) {
            return Err(Error::Shape(format!("mask entry {bad} is not 0 or 1")));
        }
        PatchMask::new(r.height, r.width, r.bits.iter().map(|&b| b == 1).collect(), r.kind)
    }
}

impl From<PatchMask> for PatchMaskRepr {
    fn from(m: PatchMask) -> Self {
        PatchMaskRepr {
            height: m.height,
            width: m.width,
            bits: m.bits.iter().map(|&b| u8::from(b)).collect(),
            kind: m.kind,
        }
    }
}

impl PatchMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>, kind: MaskKind) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::Shape(format!(
                "mask of ({height}, {width}) needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
            kind,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool, kind: MaskKind) -> Self {
        Self {
            height,
            width,
            bits: vec![value; height * width],
            kind,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, a: usize, b: usize) -> bool {
        self.bits[a * self.width + b]
    }

    pub fn support(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Elementwise `1 - bits`, with the kind flipped.
    pub fn complement(&self) -> PatchMask {
        PatchMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|&b| !b).collect(),
            kind: self.kind.opposite(),
        }
    }
}

// ---------------------------------------------------------------------------
// PooledFeature
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FeatureSource {
    None,
    Alr,
    Ali,
}

impl From<MaskKind> for FeatureSource {
    fn from(kind: MaskKind) -> Self {
        match kind {
            MaskKind::Alr => FeatureSource::Alr,
            MaskKind::Ali => FeatureSource::Ali,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledFeature {
    pub vector: Vec<f64>,
    pub source_mask_kind: FeatureSource,
    pub support_count: usize,
}

impl PooledFeature {
    /// A feature not produced by pooling (e.g. a raw embedding or a prototype).
    pub fn raw(vector: Vec<f64>) -> Self {
        Self {
            vector,
            source_mask_kind: FeatureSource::None,
            support_count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn is_zero(&self) -> bool {
        self.vector.iter().all(|&v| v == 0.0)
    }
}

// ---------------------------------------------------------------------------
// CosineClassifier
// ---------------------------------------------------------------------------

/// `d × m` weight matrix scored through temperature-scaled cosine similarity.
///
/// Columns are stored contiguously: column `k` occupies
/// `weights[k * d .. (k + 1) * d]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CosineClassifierRepr")]
pub struct CosineClassifier {
    dim: usize,
    classes: usize,
    weights: Vec<f64>,
    temperature: f64,
    dummy_index: Option<usize>,
}

#[derive(Deserialize)]
struct CosineClassifierRepr {
    dim: usize,
    classes: usize,
    weights: Vec<f64>,
    temperature: f64,
    dummy_index: Option<usize>,
}

impl TryFrom<CosineClassifierRepr> for CosineClassifier {
    type Error = Error;
    fn try_from(r: CosineClassifierRepr) -> Result<Self> {
        let c = CosineClassifier::from_columns_flat(r.dim, r.classes, r.weights, r.temperature)?;
        match r.dummy_index {
            None => Ok(c),
            Some(i) if r.classes >= 2 && i == r.classes - 1 => Ok(CosineClassifier {
                dummy_index: Some(i),
                ..c
            }),
            Some(i) => Err(Error::Classifier(format!(
                "dummy index {i} must equal the last column {}",
                r.classes.saturating_sub(1)
            ))),
        }
    }
}

impl CosineClassifier {
    /// Builds a classifier from per-class columns of equal length.
    pub fn from_columns(columns: &[Vec<f64>], temperature: f64) -> Result<Self> {
        let dim = columns.first().map(Vec::len).unwrap_or(0);
        if columns.iter().any(|c| c.len() != dim) {
            return Err(Error::Classifier("columns have unequal lengths".into()));
        }
        let flat = columns.iter().flatten().copied().collect();
        Self::from_columns_flat(dim, columns.len(), flat, temperature)
    }

    pub fn from_columns_flat(
        dim: usize,
        classes: usize,
        weights: Vec<f64>,
        temperature: f64,
    ) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(Error::Classifier(format!(
                "need at least one row and one column, got ({dim}, {classes})"
            )));
        }
        if weights.len() != dim * classes {
            return Err(Error::Classifier(format!(
                "expected {} weights, got {}",
                dim * classes,
                weights.len()
            )));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Classifier(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("classifier weights"));
        }
        let c = Self {
            dim,
            classes,
            weights,
            temperature,
            dummy_index: None,
        };
        if let Some(k) = (0..classes).find(|&k| c.column(k).iter().all(|&v| v == 0.0)) {
            return Err(Error::Classifier(format!("column {k} is the zero vector")));
        }
        Ok(c)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Total number of columns `m`, including the dummy column if present.
    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Number of columns that correspond to real classes.
    pub fn real_classes(&self) -> usize {
        self.classes - usize::from(self.dummy_index.is_some())
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn dummy_index(&self) -> Option<usize> {
        self.dummy_index
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn column(&self, k: usize) -> &[f64] {
        &self.weights[k * self.dim..(k + 1) * self.dim]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.weights.chunks_exact(self.dim)
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Appends `column` as the dummy class.
    pub fn with_dummy_column(&self, column: Vec<f64>) -> Result<Self> {
        if self.dummy_index.is_some() {
            return Err(Error::DummyAlreadyPresent);
        }
        if column.len() != self.dim || column.iter().all(|&v| v == 0.0) {
            return Err(Error::Classifier("invalid dummy column".into()));
        }
        let mut weights = self.weights.clone();
        weights.extend(column);
        Ok(Self {
            dim: self.dim,
            classes: self.classes + 1,
            weights,
            temperature: self.temperature,
            dummy_index: Some(self.classes),
        })
    }

    /// Drops the last column regardless of its role.
    pub(crate) fn without_last(&self) -> Self {
        Self {
            dim: self.dim,
            classes: self.classes - 1,
            weights: self.weights[..(self.classes - 1) * self.dim].to_vec(),
            temperature: self.temperature,
            dummy_index: None,
        }
    }

    /// Classifier restricted to the real-class columns (drops the dummy).
    pub fn without_dummy(&self) -> Self {
        match self.dummy_index {
            None => self.clone(),
            Some(i) => Self {
                dim: self.dim,
                classes: i,
                weights: self.weights[..i * self.dim].to_vec(),
                temperature: self.temperature,
                dummy_index: None,
            },
        }
    }
}

// ---------------------------------------------------------------------------
// SessionSchedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncrementalSession {
    pub way: usize,
    pub shot: usize,
    pub classes: Vec<ClassId>,
}

/// Per-class sample indices (into the dataset adapter) for one session.
pub type SessionManifest = BTreeMap<ClassId, Vec<usize>>;

/// Full curriculum: base label space, incremental N-way K-shot sessions, and
/// per-session train/test manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSchedule {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub dataset: String,
    pub base_classes: Vec<ClassId>,
    pub incremental_sessions: Vec<IncrementalSession>,
    /// Dataset class index behind each dense class id.
    pub source_classes: Vec<usize>,
    pub train_manifest: Vec<SessionManifest>,
    pub test_manifest: Vec<SessionManifest>,
}

impl SessionSchedule {
    /// Number of sessions including the base session.
    pub fn session_count(&self) -> usize {
        1 + self.incremental_sessions.len()
    }

    pub fn total_classes(&self) -> usize {
        self.base_classes.len()
            + self
                .incremental_sessions
                .iter()
                .map(|s| s.classes.len())
                .sum::<usize>()
    }

    pub fn base_count(&self) -> usize {
        self.base_classes.len()
    }

    /// Label space introduced in `session`.
    pub fn session_classes(&self, session: usize) -> &[ClassId] {
        if session == 0 {
            &self.base_classes
        } else {
            &self.incremental_sessions[session - 1].classes
        }
    }

    /// Union of label spaces `0..=session`, in schedule order.
    pub fn classes_seen(&self, session: usize) -> Vec<ClassId> {
        (0..=session)
            .flat_map(|t| self.session_classes(t).iter().copied())
            .collect()
    }

    /// Novel classes seen through `session`, in schedule order.
    pub fn novel_classes_seen(&self, session: usize) -> Vec<ClassId> {
        (1..=session)
            .flat_map(|t| self.session_classes(t).iter().copied())
            .collect()
    }

    pub fn cumulative_class_counts(&self) -> Vec<usize> {
        (0..self.session_count())
            .scan(0, |acc, t| {
                *acc += self.session_classes(t).len();
                Some(*acc)
            })
            .collect()
    }

    pub fn is_base(&self, class: ClassId) -> bool {
        self.base_classes.contains(&class)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum ScheduleViolation {
    OverlappingLabelSpaces {
        class: ClassId,
        first_session: usize,
        second_session: usize,
    },
    WrongWay {
        session: usize,
        expected: usize,
        actual: usize,
    },
    WrongShot {
        session: usize,
        class: ClassId,
        expected: usize,
        actual: usize,
    },
    MissingTrainData {
        session: usize,
        class: ClassId,
    },
    MissingTestCoverage {
        session: usize,
        class: ClassId,
    },
    UnexpectedTestClass {
        session: usize,
        class: ClassId,
    },
    ManifestLength {
        which: String,
        expected: usize,
        actual: usize,
    },
}

impl fmt::Display for ScheduleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleViolation::OverlappingLabelSpaces {
                class,
                first_session,
                second_session,
            } => write!(
                f,
                "overlapping label spaces: class {class} in sessions {first_session} and {second_session}"
            ),
            ScheduleViolation::WrongWay {
                session,
                expected,
                actual,
            } => write!(f, "session {session}: expected {expected}-way, found {actual} classes"),
            ScheduleViolation::WrongShot {
                session,
                class,
                expected,
                actual,
            } => write!(
                f,
                "session {session}: class {class} has {actual} training samples, expected {expected}-shot"
            ),
            ScheduleViolation::MissingTrainData { session, class } => {
                write!(f, "session {session}: class {class} has no training manifest")
            }
            ScheduleViolation::MissingTestCoverage { session, class } => {
                write!(f, "missing test coverage: session {session} lacks class {class}")
            }
            ScheduleViolation::UnexpectedTestClass { session, class } => {
                write!(f, "session {session}: test manifest includes unseen class {class}")
            }
            ScheduleViolation::ManifestLength {
                which,
                expected,
                actual,
            } => write!(f, "{which} manifest has {actual} sessions, expected {expected}"),
        }
    }
}

/// Result of [`validate_schedule`]; empty means valid.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleVerdict {
    pub violations: Vec<ScheduleViolation>,
}

impl ScheduleVerdict {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_schedule(schedule: &SessionSchedule) -> ScheduleVerdict {
    let mut violations = Vec::new();
    let sessions = schedule.session_count();

    let mut owner: BTreeMap<ClassId, usize> = BTreeMap::new();
    for t in 0..sessions {
        for &c in schedule.session_classes(t) {
            if let Some(&first) = owner.get(&c) {
                violations.push(ScheduleViolation::OverlappingLabelSpaces {
                    class: c,
                    first_session: first,
                    second_session: t,
                });
            } else {
                owner.insert(c, t);
            }
        }
    }

    for (i, s) in schedule.incremental_sessions.iter().enumerate() {
        if s.classes.len() != s.way {
            violations.push(ScheduleViolation::WrongWay {
                session: i + 1,
                expected: s.way,
                actual: s.classes.len(),
            });
        }
    }

    for (which, manifest) in [
        ("train", &schedule.train_manifest),
        ("test", &schedule.test_manifest),
    ] {
        if manifest.len() != sessions {
            violations.push(ScheduleViolation::ManifestLength {
                which: which.to_string(),
                expected: sessions,
                actual: manifest.len(),
            });
        }
    }
    if !violations.is_empty() {
        return ScheduleVerdict { violations };
    }

    for t in 0..sessions {
        let train = &schedule.train_manifest[t];
        for &c in schedule.session_classes(t) {
            match train.get(&c) {
                None => violations.push(ScheduleViolation::MissingTrainData { session: t, class: c }),
                Some(samples) if t > 0 => {
                    let shot = schedule.incremental_sessions[t - 1].shot;
                    if samples.len() != shot {
                        violations.push(ScheduleViolation::WrongShot {
                            session: t,
                            class: c,
                            expected: shot,
                            actual: samples.len(),
                        });
                    }
                }
                Some(samples) if samples.is_empty() => {
                    violations.push(ScheduleViolation::MissingTrainData { session: t, class: c })
                }
                Some(_) => {}
            }
        }

        let seen: BTreeSet<ClassId> = schedule.classes_seen(t).into_iter().collect();
        let test = &schedule.test_manifest[t];
        for &c in &seen {
            if test.get(&c).is_none_or(|s| s.is_empty()) {
                violations.push(ScheduleViolation::MissingTestCoverage { session: t, class: c });
            }
        }
        for &c in test.keys() {
            if !seen.contains(&c) {
                violations.push(ScheduleViolation::UnexpectedTestClass { session: t, class: c });
            }
        }
    }

    ScheduleVerdict { violations }
}

// ---------------------------------------------------------------------------
// PrototypeStore
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub feature: PooledFeature,
    pub sample_count: usize,
}

/// Class-mean embeddings keyed by class id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStore {
    dim: Option<usize>,
    entries: BTreeMap<ClassId, Prototype>,
}

impl PrototypeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, class: ClassId, feature: PooledFeature, sample_count: usize) -> Result<()> {
        if sample_count == 0 {
            return Err(Error::EmptyClass(class));
        }
        match self.dim {
            Some(d) if d != feature.dim() => {
                return Err(Error::Shape(format!(
                    "prototype for class {class} has length {}, store holds {d}",
                    feature.dim()
                )))
            }
            _ => self.dim = Some(feature.dim()),
        }
        self.entries.insert(
            class,
            Prototype {
                feature,
                sample_count,
            },
        );
        Ok(())
    }

    pub fn get(&self, class: ClassId) -> Option<&Prototype> {
        self.entries.get(&class)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.entries.keys().copied()
    }

    pub fn extend(&mut self, other: PrototypeStore) -> Result<()> {
        for (c, p) in other.entries {
            self.insert(c, p.feature, p.sample_count)?;
        }
        Ok(())
    }

    /// Stacks the prototypes of `classes` (in order) into classifier columns.
    pub fn to_classifier(&self, classes: &[ClassId], temperature: f64) -> Result<CosineClassifier> {
        let columns = classes
            .iter()
            .map(|c| {
                self.entries
                    .get(c)
                    .map(|p| p.feature.vector.clone())
                    .ok_or(Error::EmptyClass(*c))
            })
            .collect::<Result<Vec<_>>>()?;
        CosineClassifier::from_columns(&columns, temperature)
    }
}

// ---------------------------------------------------------------------------
// EvalReport
// ---------------------------------------------------------------------------

/// Optional diagnostic payloads attached to a session report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub patch_similarity: Option<PatchSimilarityStats>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub distance_cdfs: Option<DistanceCdfs>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub redundancy_alignment: Option<RedundancyAlignment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub session: usize,
    pub session_top1: f64,
    pub ba_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub na_acc: Option<f64>,
    pub aa_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nn_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub confusion_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diagnostics: Option<Diagnostics>,
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Analysis(format!("{name} = {v} outside [0, 1]")))
    }
}

impl EvalReport {
    /// Base-session report: no novel-class metrics.
    pub fn base_session(ba: f64, aa: f64) -> Result<Self> {
        check_fraction("ba_acc", ba)?;
        check_fraction("aa_acc", aa)?;
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            session: 0,
            session_top1: aa,
            ba_acc: ba,
            na_acc: None,
            aa_acc: aa,
            nn_acc: None,
            confusion_gap: None,
            diagnostics: None,
        })
    }

    pub fn incremental(session: usize, ba: f64, na: f64, aa: f64, nn: f64) -> Result<Self> {
        if session == 0 {
            return Err(Error::Analysis("session 0 has no novel classes".into()));
        }
        for (name, v) in [("ba_acc", ba), ("na_acc", na), ("aa_acc", aa), ("nn_acc", nn)] {
            check_fraction(name, v)?;
        }
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            session,
            session_top1: aa,
            ba_acc: ba,
            na_acc: Some(na),
            aa_acc: aa,
            nn_acc: Some(nn),
            confusion_gap: Some(nn - na),
            diagnostics: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_schedule() -> SessionSchedule {
        let mut train0 = SessionManifest::new();
        let mut test0 = SessionManifest::new();
        for c in 0..3 {
            train0.insert(c, vec![c * 10, c * 10 + 1]);
            test0.insert(c, vec![100 + c]);
        }
        let mut train1 = SessionManifest::new();
        let mut test1 = test0.clone();
        for c in 3..5 {
            train1.insert(c, vec![c * 10]);
            test1.insert(c, vec![100 + c]);
        }
        SessionSchedule {
            schema_version: SCHEMA_VERSION,
            dataset: "toy".into(),
            base_classes: vec![0, 1, 2],
            incremental_sessions: vec![IncrementalSession {
                way: 2,
                shot: 1,
                classes: vec![3, 4],
            }],
            source_classes: (0..5).collect(),
            train_manifest: vec![train0, train1],
            test_manifest: vec![test0, test1],
        }
    }

    #[test]
    fn toy_schedule_is_valid() {
        let s = toy_schedule();
        assert!(validate_schedule(&s).is_valid());
        assert_eq!(s.cumulative_class_counts(), vec![3, 5]);
        assert_eq!(s.novel_classes_seen(1), vec![3, 4]);
    }

    #[test]
    fn overlap_is_reported() {
        let mut s = toy_schedule();
        s.incremental_sessions[0].classes = vec![2, 4];
        let verdict = validate_schedule(&s);
        assert!(verdict
            .violations
            .iter()
            .any(|v| v.to_string().starts_with("overlapping label spaces")));
    }

    #[test]
    fn wrong_shot_and_missing_coverage() {
        let mut s = toy_schedule();
        s.train_manifest[1].insert(3, vec![1, 2]);
        s.test_manifest[1].remove(&0);
        let v = validate_schedule(&s).violations;
        assert!(v.contains(&ScheduleViolation::WrongShot {
            session: 1,
            class: 3,
            expected: 1,
            actual: 2
        }));
        assert!(v.contains(&ScheduleViolation::MissingTestCoverage { session: 1, class: 0 }));
    }

    #[test]
    fn zero_incremental_sessions() {
        let mut s = toy_schedule();
        s.incremental_sessions.clear();
        s.train_manifest.truncate(1);
        s.test_manifest.truncate(1);
        assert!(validate_schedule(&s).is_valid());
        assert_eq!(s.classes_seen(0), vec![0, 1, 2]);
    }

    #[test]
    fn feature_map_rejects_nan_and_bad_shape() {
        assert!(FeatureMap::new(1, 1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(FeatureMap::new(2, 1, 2, vec![0.0; 3]).is_err());
        let m = FeatureMap::new(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.patch(1, 0), &[3.0, 4.0]);
    }

    #[test]
    fn classifier_invariants() {
        assert!(CosineClassifier::from_columns(&[vec![0.0, 0.0]], 1.0).is_err());
        assert!(CosineClassifier::from_columns(&[vec![1.0, 0.0]], 0.0).is_err());
        let json = r#"{"dim":1,"classes":2,"weights":[1.0,2.0],"temperature":1.0,"dummy_index":0}"#;
        assert!(serde_json::from_str::<CosineClassifier>(json).is_err());
    }

    #[test]
    fn report_gap_is_exact() {
        let r = EvalReport::incremental(2, 0.9, 0.3, 0.7, 0.8).unwrap();
        assert_eq!(r.confusion_gap, Some(0.8 - 0.3));
        assert!(EvalReport::incremental(1, 1.2, 0.3, 0.7, 0.8).is_err());
        let json = serde_json::to_value(EvalReport::base_session(0.9, 0.9).unwrap()).unwrap();
        assert!(json.get("na_acc").is_none());
        assert!(json.get("confusion_gap").is_none());
    }

    #[test]
    fn mask_serde_rejects_non_binary() {
        let json = r#"{"height":1,"width":2,"bits":[1,2],"kind":"ALR"}"#;
        assert!(serde_json::from_str::<PatchMask>(json).is_err());
    }
}
