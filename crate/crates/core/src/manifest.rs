//! Dataset manifests: a JSON description of which subjects, images, and
//! trials make up a dataset tier, an exhaustive validator, and the
//! subject-level train/test split.
//!
//! `sample_index` keys have the form `<subject_id>/<image_id>/<trial_index>`;
//! ids therefore must not contain `/`.

use crate::error::{Error, Result};
use crate::sample::FmriSample;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityTier {
    Low,
    High,
    Enhanced,
}

impl fmt::Display for QualityTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QualityTier::Low => write!(f, "low"),
            QualityTier::High => write!(f, "high"),
            QualityTier::Enhanced => write!(f, "enhanced"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub subject_id: String,
    pub trials_per_image: u32,
}

/// Identity of one indexed trial.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SampleKey {
    pub subject_id: String,
    pub image_id: String,
    pub trial_index: u32,
}

impl SampleKey {
    pub fn new(subject_id: impl Into<String>, image_id: impl Into<String>, trial_index: u32) -> Self {
        SampleKey {
            subject_id: subject_id.into(),
            image_id: image_id.into(),
            trial_index,
        }
    }

    pub fn parse(raw: &str) -> Result<Self> {
        let parts: Vec<&str> = raw.split('/').collect();
        if parts.len() != 3 || parts[0].is_empty() || parts[1].is_empty() {
            return Err(Error::invalid(
                "sample key",
                format!("expected <subject>/<image>/<trial>, got {raw:?}"),
            ));
        }
        let trial_index: u32 = parts[2]
            .parse()
            .map_err(|_| Error::invalid("sample key", format!("bad trial index in {raw:?}")))?;
        Ok(SampleKey::new(parts[0], parts[1], trial_index))
    }
}

impl fmt::Display for SampleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.subject_id, self.image_id, self.trial_index)
    }
}

/// Declarative description of one dataset tier on disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub quality_tier: QualityTier,
    pub vertex_count: u64,
    pub subjects: Vec<SubjectEntry>,
    pub shared_image_ids: Vec<String>,
    /// `<subject>/<image>/<trial>` -> file path relative to the manifest root.
    pub sample_index: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Number of samples the declaration implies:
    /// `sum over subjects of trials_per_image * |shared_image_ids|`.
    pub fn expected_sample_count(&self) -> u64 {
        let images = self.shared_image_ids.len() as u64;
        self.subjects
            .iter()
            .map(|s| s.trials_per_image as u64 * images)
            .sum()
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectEntry> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    DuplicateImageId {
        image_id: String,
    },
    DuplicateSubjectId {
        subject_id: String,
    },
    BadKey {
        raw: String,
        reason: String,
    },
    UnknownSubject {
        key: SampleKey,
    },
    UnknownImage {
        key: SampleKey,
    },
    MissingFile {
        key: SampleKey,
        path: PathBuf,
    },
    DecodeFailed {
        key: SampleKey,
        path: PathBuf,
        reason: String,
    },
    VertexCountMismatch {
        key: SampleKey,
        expected: u64,
        actual: u64,
    },
    IdentityMismatch {
        key: SampleKey,
        found: SampleKey,
    },
    TrialCountMismatch {
        subject_id: String,
        image_id: String,
        expected: u32,
        actual: u32,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateImageId { image_id } => {
                write!(f, "duplicate shared image id {image_id:?}")
            }
            Violation::DuplicateSubjectId { subject_id } => {
                write!(f, "duplicate subject id {subject_id:?}")
            }
            Violation::BadKey { raw, reason } => write!(f, "bad sample key {raw:?}: {reason}"),
            Violation::UnknownSubject { key } => {
                write!(f, "{key}: subject not declared in manifest")
            }
            Violation::UnknownImage { key } => write!(f, "{key}: image not in shared_image_ids"),
            Violation::MissingFile { key, path } => {
                write!(f, "{key}: missing file {}", path.display())
            }
            Violation::DecodeFailed { key, path, reason } => {
                write!(f, "{key}: failed to decode {}: {reason}", path.display())
            }
            Violation::VertexCountMismatch {
                key,
                expected,
                actual,
            } => write!(f, "{key}: vertex count {actual}, manifest says {expected}"),
            Violation::IdentityMismatch { key, found } => {
                write!(f, "{key}: file metadata says {found}")
            }
            Violation::TrialCountMismatch {
                subject_id,
                image_id,
                expected,
                actual,
            } => write!(
                f,
                "{subject_id}/{image_id}: {actual} trials indexed, expected {expected}"
            ),
        }
    }
}

/// All violations found by [`validate_manifest`]; empty iff the manifest and
/// the files it indexes are consistent.
#[derive(Debug, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            writeln!(f, "manifest valid")
        } else {
            for v in &self.violations {
                writeln!(f, "{v}")?;
            }
            Ok(())
        }
    }
}

/// Check every declared invariant of `manifest` against the files under
/// `root`. Returns the full list of violations rather than stopping at the
/// first; errs only if `root` is not a readable directory.
pub fn validate_manifest(manifest: &DatasetManifest, root: impl AsRef<Path>) -> Result<ValidationReport> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "root is not a directory"),
        ));
    }

    let mut report = ValidationReport::default();

    let mut seen_images = BTreeSet::new();
    for img in &manifest.shared_image_ids {
        if !seen_images.insert(img.clone()) {
            report.violations.push(Violation::DuplicateImageId {
                image_id: img.clone(),
            });
        }
    }
    let mut seen_subjects = BTreeSet::new();
    for s in &manifest.subjects {
        if !seen_subjects.insert(s.subject_id.clone()) {
            report.violations.push(Violation::DuplicateSubjectId {
                subject_id: s.subject_id.clone(),
            });
        }
    }

    // per (subject, image) trial counts seen in the index
    let mut counts: BTreeMap<(String, String), u32> = BTreeMap::new();

    for (raw, rel_path) in &manifest.sample_index {
        let key = match SampleKey::parse(raw) {
            Ok(k) => k,
            Err(e) => {
                report.violations.push(Violation::BadKey {
                    raw: raw.clone(),
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if manifest.subject(&key.subject_id).is_none() {
            report.violations.push(Violation::UnknownSubject { key: key.clone() });
        }
        if !seen_images.contains(&key.image_id) {
            report.violations.push(Violation::UnknownImage { key: key.clone() });
        }
        *counts
            .entry((key.subject_id.clone(), key.image_id.clone()))
            .or_insert(0) += 1;

        let path = root.join(rel_path);
        if !path.is_file() {
            report.violations.push(Violation::MissingFile { key, path });
            continue;
        }
        match FmriSample::load(&path) {
            Err(e) => {
                report.violations.push(Violation::DecodeFailed {
                    key,
                    path,
                    reason: e.to_string(),
                });
            }
            Ok(sample) => {
                if sample.vertex_count() as u64 != manifest.vertex_count {
                    report.violations.push(Violation::VertexCountMismatch {
                        key: key.clone(),
                        expected: manifest.vertex_count,
                        actual: sample.vertex_count() as u64,
                    });
                }
                let found = SampleKey::new(
                    sample.subject_id.clone(),
                    sample.image_id.clone(),
                    sample.trial_index,
                );
                if found != key {
                    report.violations.push(Violation::IdentityMismatch { key, found });
                }
            }
        }
    }

    for s in &manifest.subjects {
        for img in &manifest.shared_image_ids {
            let actual = counts
                .get(&(s.subject_id.clone(), img.clone()))
                .copied()
                .unwrap_or(0);
            if actual != s.trials_per_image {
                report.violations.push(Violation::TrialCountMismatch {
                    subject_id: s.subject_id.clone(),
                    image_id: img.clone(),
                    expected: s.trials_per_image,
                    actual,
                });
            }
        }
    }

    Ok(report)
}

/// Subject-level train/test assignment.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_subjects_low: Vec<String>,
    pub train_subjects_high: Vec<String>,
    pub test_subjects_low: Vec<String>,
}

/// One indexed trial inside a split, with its tier and file location
/// (relative to that tier's manifest root).
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRef {
    pub key: SampleKey,
    pub rel_path: String,
    pub tier: QualityTier,
}

/// The materialized split: `train_high` is the high-quality side of the
/// unpaired objective, `train_low` the low-quality side, `test_low` the
/// held-out subject's trials. Orderings are deterministic (sorted by
/// subject, image, trial).
#[derive(Clone, Debug)]
pub struct SplitPlan {
    pub train_high: Vec<SampleRef>,
    pub train_low: Vec<SampleRef>,
    pub test_low: Vec<SampleRef>,
    /// Image ids common to both manifests, sorted.
    pub shared_image_ids: Vec<String>,
}

/// Build the training pools and test set from the two tier manifests.
pub fn make_split(
    low: &DatasetManifest,
    high: &DatasetManifest,
    spec: &SplitSpec,
) -> Result<SplitPlan> {
    for id in spec
        .train_subjects_low
        .iter()
        .chain(spec.test_subjects_low.iter())
    {
        if low.subject(id).is_none() {
            return Err(Error::SplitRejected(format!(
                "subject {id:?} not in low-tier manifest"
            )));
        }
    }
    for id in &spec.train_subjects_high {
        if high.subject(id).is_none() {
            return Err(Error::SplitRejected(format!(
                "subject {id:?} not in high-tier manifest"
            )));
        }
    }
    for id in &spec.test_subjects_low {
        if spec.train_subjects_low.contains(id) || spec.train_subjects_high.contains(id) {
            return Err(Error::SplitRejected(format!(
                "test subject {id:?} also appears in a training role"
            )));
        }
    }

    let low_images: BTreeSet<&String> = low.shared_image_ids.iter().collect();
    let shared: Vec<String> = high
        .shared_image_ids
        .iter()
        .filter(|i| low_images.contains(i))
        .cloned()
        .collect();
    let mut shared = shared;
    shared.sort();
    shared.dedup();
    if shared.is_empty() {
        return Err(Error::SplitRejected(
            "manifests share no image ids".to_string(),
        ));
    }
    let shared_set: BTreeSet<&String> = shared.iter().collect();

    let collect = |manifest: &DatasetManifest, subjects: &[String]| -> Result<Vec<SampleRef>> {
        let mut out = Vec::new();
        for (raw, rel_path) in &manifest.sample_index {
            let key = SampleKey::parse(raw)?;
            if subjects.contains(&key.subject_id) && shared_set.contains(&key.image_id) {
                out.push(SampleRef {
                    key,
                    rel_path: rel_path.clone(),
                    tier: manifest.quality_tier,
                });
            }
        }
        out.sort_by(|a, b| a.key.cmp(&b.key));
        Ok(out)
    };

    Ok(SplitPlan {
        train_high: collect(high, &spec.train_subjects_high)?,
        train_low: collect(low, &spec.train_subjects_low)?,
        test_low: collect(low, &spec.test_subjects_low)?,
        shared_image_ids: shared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::FmriSample;

    /// Write a dataset matching `subjects x trials x images` on disk and
    /// return its manifest.
    fn build_dataset(
        root: &Path,
        name: &str,
        tier: QualityTier,
        v: usize,
        subjects: &[(&str, u32)],
        images: &[&str],
    ) -> DatasetManifest {
        let mut sample_index = BTreeMap::new();
        for (sid, trials) in subjects {
            for img in images {
                for t in 0..*trials {
                    let key = SampleKey::new(*sid, *img, t);
                    let rel = format!("{name}/{sid}_{img}_{t}.otf");
                    let path = root.join(&rel);
                    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
                    let val = t as f32;
                    FmriSample::new(*sid, *img, t, vec![val; v], vec![val + 0.5; v])
                        .unwrap()
                        .save(&path)
                        .unwrap();
                    sample_index.insert(key.to_string(), rel);
                }
            }
        }
        DatasetManifest {
            name: name.to_string(),
            quality_tier: tier,
            vertex_count: v as u64,
            subjects: subjects
                .iter()
                .map(|(id, trials)| SubjectEntry {
                    subject_id: id.to_string(),
                    trials_per_image: *trials,
                })
                .collect(),
            shared_image_ids: images.iter().map(|s| s.to_string()).collect(),
            sample_index,
        }
    }

    fn image_ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i:03}")).collect()
    }

    #[test]
    fn paper_shaped_counts() {
        // 9 low subjects x 10 trials x 70 images = 6300;
        // 8 high subjects x 3 trials x 70 images = 1680.
        let images = image_ids(70);
        let image_refs: Vec<&str> = images.iter().map(|s| s.as_str()).collect();
        let low_subjects: Vec<(String, u32)> =
            (1..=9).map(|i| (format!("nod-{i:02}"), 10)).collect();
        let low_manifest = DatasetManifest {
            name: "low".into(),
            quality_tier: QualityTier::Low,
            vertex_count: 64,
            subjects: low_subjects
                .iter()
                .map(|(id, t)| SubjectEntry {
                    subject_id: id.clone(),
                    trials_per_image: *t,
                })
                .collect(),
            shared_image_ids: image_refs.iter().map(|s| s.to_string()).collect(),
            sample_index: BTreeMap::new(),
        };
        assert_eq!(low_manifest.expected_sample_count(), 6300);

        let high_manifest = DatasetManifest {
            name: "high".into(),
            quality_tier: QualityTier::High,
            vertex_count: 64,
            subjects: (1..=8)
                .map(|i| SubjectEntry {
                    subject_id: format!("nsd-{i:02}"),
                    trials_per_image: 3,
                })
                .collect(),
            shared_image_ids: image_refs.iter().map(|s| s.to_string()).collect(),
            sample_index: BTreeMap::new(),
        };
        assert_eq!(high_manifest.expected_sample_count(), 1680);
    }

    #[test]
    fn valid_dataset_yields_empty_report() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(
            dir.path(),
            "low",
            QualityTier::Low,
            16,
            &[("sub-1", 2), ("sub-2", 2)],
            &["a", "b", "c"],
        );
        let report = validate_manifest(&m, dir.path()).unwrap();
        assert!(report.is_empty(), "{report}");
    }

    #[test]
    fn one_deleted_file_yields_exactly_one_missing_entry() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(
            dir.path(),
            "low",
            QualityTier::Low,
            16,
            &[("sub-1", 2)],
            &["a", "b"],
        );
        let victim = m.sample_index.values().next().unwrap();
        std::fs::remove_file(dir.path().join(victim)).unwrap();
        let report = validate_manifest(&m, dir.path()).unwrap();
        let missing: Vec<_> = report
            .violations
            .iter()
            .filter(|v| matches!(v, Violation::MissingFile { .. }))
            .collect();
        assert_eq!(missing.len(), 1);
    }

    #[test]
    fn duplicate_image_ids_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build_dataset(dir.path(), "low", QualityTier::Low, 8, &[("s", 1)], &["a"]);
        m.shared_image_ids.push("a".to_string());
        let report = validate_manifest(&m, dir.path()).unwrap();
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::DuplicateImageId { .. })));
    }

    #[test]
    fn vertex_count_mismatch_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build_dataset(dir.path(), "low", QualityTier::Low, 8, &[("s", 1)], &["a"]);
        m.vertex_count = 9;
        let report = validate_manifest(&m, dir.path()).unwrap();
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::VertexCountMismatch { .. })));
    }

    #[test]
    fn trial_count_mismatch_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build_dataset(dir.path(), "low", QualityTier::Low, 8, &[("s", 2)], &["a"]);
        let key = SampleKey::new("s", "a", 1).to_string();
        m.sample_index.remove(&key);
        let report = validate_manifest(&m, dir.path()).unwrap();
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::TrialCountMismatch { actual: 1, .. })));
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = r#"{"name":"x","quality_tier":"low","vertex_count":4,
            "subjects":[],"shared_image_ids":[],"sample_index":{},"extra":1}"#;
        let err = serde_json::from_str::<DatasetManifest>(text).unwrap_err();
        assert!(err.to_string().contains("extra"));
    }

    fn split_fixture(dir: &Path) -> (DatasetManifest, DatasetManifest) {
        let images = image_ids(70);
        let image_refs: Vec<&str> = images.iter().map(|s| s.as_str()).collect();
        let low_subjects: Vec<(String, u32)> =
            (1..=9).map(|i| (format!("low-{i}"), 10)).collect();
        let low_pairs: Vec<(&str, u32)> =
            low_subjects.iter().map(|(s, t)| (s.as_str(), *t)).collect();
        let high_subjects: Vec<(String, u32)> =
            (1..=8).map(|i| (format!("high-{i}"), 3)).collect();
        let high_pairs: Vec<(&str, u32)> =
            high_subjects.iter().map(|(s, t)| (s.as_str(), *t)).collect();
        let low = build_dataset(dir, "low", QualityTier::Low, 4, &low_pairs, &image_refs);
        let high = build_dataset(dir, "high", QualityTier::High, 4, &high_pairs, &image_refs);
        (low, high)
    }

    #[test]
    fn paper_shaped_split_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let (low, high) = split_fixture(dir.path());
        let spec = SplitSpec {
            train_subjects_low: (1..=8).map(|i| format!("low-{i}")).collect(),
            train_subjects_high: (1..=8).map(|i| format!("high-{i}")).collect(),
            test_subjects_low: vec!["low-9".to_string()],
        };
        let plan = make_split(&low, &high, &spec).unwrap();
        assert_eq!(plan.train_low.len(), 8 * 10 * 70);
        assert_eq!(plan.train_high.len(), 8 * 3 * 70);
        assert_eq!(plan.test_low.len(), 10 * 70);
    }

    #[test]
    fn split_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (low, high) = split_fixture(dir.path());
        let spec = SplitSpec {
            train_subjects_low: vec!["low-1".into(), "low-2".into()],
            train_subjects_high: vec!["high-1".into()],
            test_subjects_low: vec!["low-9".into()],
        };
        let a = make_split(&low, &high, &spec).unwrap();
        let b = make_split(&low, &high, &spec).unwrap();
        assert_eq!(a.train_low, b.train_low);
        assert_eq!(a.train_high, b.train_high);
        assert_eq!(a.test_low, b.test_low);
        // sorted ordering
        let keys: Vec<_> = a.train_low.iter().map(|r| r.key.clone()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn overlapping_test_subject_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (low, high) = split_fixture(dir.path());
        let spec = SplitSpec {
            train_subjects_low: vec!["low-1".into()],
            train_subjects_high: vec!["high-1".into()],
            test_subjects_low: vec!["low-1".into()],
        };
        assert!(matches!(
            make_split(&low, &high, &spec),
            Err(Error::SplitRejected(_))
        ));
    }

    #[test]
    fn empty_shared_image_intersection_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let low = build_dataset(dir.path(), "low", QualityTier::Low, 4, &[("s1", 1)], &["a"]);
        let high = build_dataset(dir.path(), "high", QualityTier::High, 4, &[("h1", 1)], &["b"]);
        let spec = SplitSpec {
            train_subjects_low: vec!["s1".into()],
            train_subjects_high: vec!["h1".into()],
            test_subjects_low: vec![],
        };
        assert!(matches!(
            make_split(&low, &high, &spec),
            Err(Error::SplitRejected(_))
        ));
    }
}
