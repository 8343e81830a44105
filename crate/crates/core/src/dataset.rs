//! Dataset ingestion, merging and deterministic k-fold partitioning.
//!
//! A dataset root holds one subdirectory per class (`normal`, `benign`,
//! `malignant`) with PNG, BMP or PGM files inside. Manifests are ordered
//! lexicographically by path so fold plans do not depend on directory
//! iteration order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

/// Diagnostic class. The ordinal encoding `normal = 0`, `benign = 1`,
/// `malignant = 2` is fixed and used for every tensor and matrix index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Normal = 0,
    Benign = 1,
    Malignant = 2,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Normal, ClassLabel::Benign, ClassLabel::Malignant];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Normal => "normal",
            ClassLabel::Benign => "benign",
            ClassLabel::Malignant => "malignant",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "normal" => Ok(ClassLabel::Normal),
            "benign" => Ok(ClassLabel::Benign),
            "malignant" => Ok(ClassLabel::Malignant),
            other => Err(format!("unknown class {other:?}")),
        }
    }
}

/// A decoded image together with its label and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Image,
    pub label: ClassLabel,
    pub sample_id: String,
    pub origin: String,
}

impl LabeledImage {
    /// Resize and convert channels, keeping label and identity.
    pub fn resize(&self, height: usize, width: usize, channels: usize) -> Result<LabeledImage> {
        Ok(LabeledImage {
            pixels: self.pixels.resize(height, width, channels)?,
            label: self.label,
            sample_id: self.sample_id.clone(),
            origin: self.origin.clone(),
        })
    }
}

/// Free-function form of [`LabeledImage::resize`].
pub fn resize(img: &LabeledImage, height: usize, width: usize, channels: usize) -> Result<LabeledImage> {
    img.resize(height, width, channels)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub path: PathBuf,
    pub label: ClassLabel,
    pub origin: String,
}

/// A file that was found during ingestion but could not be used.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skipped {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
    class_counts: BTreeMap<ClassLabel, usize>,
    skipped: Vec<Skipped>,
}

impl DatasetManifest {
    /// Build from entries, checking id uniqueness and ordering by path.
    pub fn from_entries(mut entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.sample_id.as_str()) {
                return Err(Error::DuplicateSample(e.sample_id.clone()));
            }
        }
        entries.sort_by(|a, b| a.path.cmp(&b.path).then_with(|| a.sample_id.cmp(&b.sample_id)));
        let mut class_counts: BTreeMap<ClassLabel, usize> =
            ClassLabel::ALL.iter().map(|&c| (c, 0)).collect();
        for e in &entries {
            *class_counts.entry(e.label).or_default() += 1;
        }
        Ok(Self {
            entries,
            class_counts,
            skipped: Vec::new(),
        })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Counts for all three classes (zero-filled).
    pub fn class_counts(&self) -> &BTreeMap<ClassLabel, usize> {
        &self.class_counts
    }

    pub fn count(&self, class: ClassLabel) -> usize {
        self.class_counts.get(&class).copied().unwrap_or(0)
    }

    /// Files that were present but skipped during ingestion.
    pub fn skipped(&self) -> &[Skipped] {
        &self.skipped
    }

    /// Per-origin class counts, in origin order of first appearance.
    pub fn origin_counts(&self) -> Vec<(String, BTreeMap<ClassLabel, usize>)> {
        let mut out: Vec<(String, BTreeMap<ClassLabel, usize>)> = Vec::new();
        for e in &self.entries {
            let idx = match out.iter().position(|(o, _)| *o == e.origin) {
                Some(i) => i,
                None => {
                    out.push((
                        e.origin.clone(),
                        ClassLabel::ALL.iter().map(|&c| (c, 0)).collect(),
                    ));
                    out.len() - 1
                }
            };
            *out[idx].1.entry(e.label).or_default() += 1;
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample_id", "path", "label", "origin"])?;
        for e in &self.entries {
            w.write_record([
                e.sample_id.as_str(),
                &e.path.to_string_lossy(),
                e.label.name(),
                e.origin.as_str(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut entries = Vec::new();
        for row in r.records() {
            let row = row?;
            if row.len() != 4 {
                return Err(Error::Invalid(format!(
                    "{}: manifest rows need 4 fields, got {}",
                    path.display(),
                    row.len()
                )));
            }
            let label = row[2].parse::<ClassLabel>().map_err(Error::Invalid)?;
            entries.push(ManifestEntry {
                sample_id: row[0].to_string(),
                path: PathBuf::from(&row[1]),
                label,
                origin: row[3].to_string(),
            });
        }
        Self::from_entries(entries)
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "bmp" | "pgm"))
        .unwrap_or(false)
}

/// Scan `<root>/<class>/<file>` and build a manifest tagged with `origin`.
///
/// Unreadable files are skipped with a warning and listed in
/// [`DatasetManifest::skipped`]. Unknown class directories and empty
/// datasets are hard errors.
pub fn ingest(root: &Path, origin: &str) -> Result<DatasetManifest> {
    let mut candidates: Vec<(PathBuf, ClassLabel)> = Vec::new();
    let dir = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut class_dirs = Vec::new();
    for entry in dir {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let label = name.parse::<ClassLabel>().map_err(|_| Error::UnknownClass {
            root: root.to_path_buf(),
            name: name.clone(),
        })?;
        class_dirs.push((path, label));
    }
    for (dir_path, label) in class_dirs {
        for f in fs::read_dir(&dir_path).map_err(|e| Error::io(&dir_path, e))? {
            let f = f.map_err(|e| Error::io(&dir_path, e))?;
            let p = f.path();
            if p.is_file() {
                candidates.push((p, label));
            }
        }
    }
    candidates.sort();

    let checked: Vec<std::result::Result<ManifestEntry, Skipped>> = candidates
        .par_iter()
        .map(|(path, label)| {
            if !is_image_file(path) {
                return Err(Skipped {
                    path: path.clone(),
                    reason: "unsupported file extension".into(),
                });
            }
            image::image_dimensions(path).map_err(|e| Skipped {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            let file = path.file_name().unwrap_or_default().to_string_lossy();
            Ok(ManifestEntry {
                sample_id: format!("{origin}/{}/{file}", label.name()),
                path: path.clone(),
                label: *label,
                origin: origin.to_string(),
            })
        })
        .collect();

    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for c in checked {
        match c {
            Ok(e) => entries.push(e),
            Err(s) => {
                log::warn!("skipping {}: {}", s.path.display(), s.reason);
                skipped.push(s);
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::NoSamples(root.to_path_buf()));
    }
    let mut m = DatasetManifest::from_entries(entries)?;
    m.skipped = skipped;
    Ok(m)
}

/// Concatenate two manifests. Sample ids already carry the origin tag, so a
/// collision means the same source was merged twice.
pub fn merge(a: &DatasetManifest, b: &DatasetManifest) -> Result<DatasetManifest> {
    let entries = a.entries.iter().chain(&b.entries).cloned().collect();
    let mut m = DatasetManifest::from_entries(entries)?;
    m.skipped = a.skipped.iter().chain(&b.skipped).cloned().collect();
    Ok(m)
}

/// Assignment of every sample to exactly one test fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub stratified: bool,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, sample_id: &str) -> Option<usize> {
        self.assignment.get(sample_id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: FoldPlan = serde_json::from_str(s)?;
        if let Some((id, &f)) = plan.assignment.iter().find(|(_, &f)| f >= plan.k) {
            return Err(Error::InvalidFolds(format!(
                "sample {id} assigned to fold {f}, but k={}",
                plan.k
            )));
        }
        Ok(plan)
    }
}

/// Deterministic k-fold assignment.
///
/// Samples are shuffled with a seeded ChaCha stream and dealt round-robin.
/// When `stratified`, each class is shuffled and dealt in turn, continuing the
/// round-robin position across classes, so both overall and per-class fold
/// sizes differ by at most one.
pub fn make_folds(m: &DatasetManifest, k: usize, seed: u64, stratified: bool) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidFolds(format!("k must be at least 2, got {k}")));
    }
    if m.len() < k {
        return Err(Error::InvalidFolds(format!(
            "{} samples cannot fill {k} folds",
            m.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<&ManifestEntry>> = if stratified {
        let present: Vec<ClassLabel> = ClassLabel::ALL
            .iter()
            .copied()
            .filter(|&c| m.count(c) > 0)
            .collect();
        if present.len() < 2 {
            let missing = ClassLabel::ALL
                .iter()
                .find(|&&c| m.count(c) == 0)
                .expect("fewer than two classes present");
            return Err(Error::ClassTooSmall {
                class: missing.name().into(),
                count: 0,
                k,
            });
        }
        for &c in &present {
            if m.count(c) < k {
                return Err(Error::ClassTooSmall {
                    class: c.name().into(),
                    count: m.count(c),
                    k,
                });
            }
        }
        present
            .iter()
            .map(|&c| m.entries.iter().filter(|e| e.label == c).collect())
            .collect()
    } else {
        vec![m.entries.iter().collect()]
    };

    let mut assignment = BTreeMap::new();
    let mut slot = 0usize;
    for mut group in groups {
        group.shuffle(&mut rng);
        for e in group {
            assignment.insert(e.sample_id.clone(), slot % k);
            slot += 1;
        }
    }
    Ok(FoldPlan {
        k,
        seed,
        stratified,
        assignment,
    })
}

/// Decode an image file into `[0, 1]` floats. Grayscale stays single-channel,
/// everything else becomes RGB (alpha dropped).
pub fn decode(path: &Path) -> Result<Image> {
    let dyn_img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let gray = matches!(
        dyn_img.color(),
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
    );
    let (w, h) = (dyn_img.width() as usize, dyn_img.height() as usize);
    let wide = matches!(
        dyn_img.color(),
        image::ColorType::L16 | image::ColorType::La16 | image::ColorType::Rgb16 | image::ColorType::Rgba16
    );
    let data: Vec<f64> = match (gray, wide) {
        (true, false) => dyn_img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        (true, true) => dyn_img.to_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        (false, false) => dyn_img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        (false, true) => dyn_img.to_rgb16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
    };
    Image::new(h, w, if gray { 1 } else { 3 }, data).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn load_entry(e: &ManifestEntry) -> Result<LabeledImage> {
    Ok(LabeledImage {
        pixels: decode(&e.path)?,
        label: e.label,
        sample_id: e.sample_id.clone(),
        origin: e.origin.clone(),
    })
}

/// Decode the train and test halves of one fold, in manifest order.
pub fn load_split(
    m: &DatasetManifest,
    plan: &FoldPlan,
    fold: usize,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    if fold >= plan.k {
        return Err(Error::FoldOutOfRange { fold, k: plan.k });
    }
    let decoded: Vec<(bool, LabeledImage)> = m
        .entries
        .par_iter()
        .map(|e| {
            let f = plan.fold_of(&e.sample_id).ok_or_else(|| {
                Error::InvalidFolds(format!("sample {} missing from fold plan", e.sample_id))
            })?;
            Ok((f == fold, load_entry(e)?))
        })
        .collect::<Result<_>>()?;
    let (test, train): (Vec<_>, Vec<_>) = decoded.into_iter().partition(|(is_test, _)| *is_test);
    Ok((
        train.into_iter().map(|(_, img)| img).collect(),
        test.into_iter().map(|(_, img)| img).collect(),
    ))
}
