//! Dataset vocabulary: labels, generator ids, manifest records and JSONL
//! manifest files.
//!
//! A manifest is one JSON object per line with keys exactly
//! `{id, path, label, generator, epsilon_k, split, seed}`; paths are relative
//! to the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::rng::tags;
use crate::tensor::Tensor;

/// Binary class label; the positive class is "generated".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Real,
    Generated,
}

impl Label {
    pub fn flip(self) -> Self {
        match self {
            Label::Real => Label::Generated,
            Label::Generated => Label::Real,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Real => 0,
            Label::Generated => 1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.as_u8())
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.as_u8()
    }
}

impl TryFrom<u8> for Label {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Real),
            1 => Ok(Label::Generated),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

/// Image source: one of four generators, or a real photo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GeneratorId {
    #[serde(rename = "REAL")]
    Real,
    G1,
    G2,
    G3,
    G4,
}

impl GeneratorId {
    pub const GENERATORS: [GeneratorId; 4] =
        [GeneratorId::G1, GeneratorId::G2, GeneratorId::G3, GeneratorId::G4];

    pub fn label(self) -> Label {
        match self {
            GeneratorId::Real => Label::Real,
            _ => Label::Generated,
        }
    }

    pub fn rng_tag(self) -> u64 {
        match self {
            GeneratorId::Real => tags::REAL,
            GeneratorId::G1 => tags::GEN_G1,
            GeneratorId::G2 => tags::GEN_G2,
            GeneratorId::G3 => tags::GEN_G3,
            GeneratorId::G4 => tags::GEN_G4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GeneratorId::Real => "REAL",
            GeneratorId::G1 => "g1",
            GeneratorId::G2 => "g2",
            GeneratorId::G3 => "g3",
            GeneratorId::G4 => "g4",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One dataset entry. Field order is the manifest wire order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub path: String,
    pub label: Label,
    pub generator: GeneratorId,
    pub epsilon_k: Option<u8>,
    pub split: Split,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    root: PathBuf,
    records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(root: PathBuf, records: Vec<ManifestRecord>) -> Result<Self> {
        let manifest = Self { root, records };
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for rec in &self.records {
            if !seen.insert(rec.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate record id `{}`", rec.id)));
            }
            if rec.path.is_empty() {
                return Err(Error::Manifest(format!("record `{}` has empty path", rec.id)));
            }
            if rec.epsilon_k == Some(0) {
                return Err(Error::Manifest(format!(
                    "record `{}` has epsilon_k 0; clean records use null",
                    rec.id
                )));
            }
            if rec.label != rec.generator.label() {
                return Err(Error::Manifest(format!(
                    "record `{}`: label {} inconsistent with generator {}",
                    rec.id,
                    rec.label.as_u8(),
                    rec.generator.name()
                )));
            }
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Absolute path of a record's image file.
    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn subset(&self, keep: impl Fn(&ManifestRecord) -> bool) -> Result<Self> {
        Self::new(
            self.root.clone(),
            self.records.iter().filter(|r| keep(r)).cloned().collect(),
        )
    }

    pub fn split(&self, split: Split) -> Result<Self> {
        self.subset(|r| r.split == split)
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    pub fn has_both_classes(&self) -> bool {
        self.count_label(Label::Real) > 0 && self.count_label(Label::Generated) > 0
    }

    /// Write `manifest.jsonl` under `dir` with paths relative to `dir`.
    /// Records must live under `dir` for the relative paths to resolve.
    pub fn save_as(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join("manifest.jsonl");
        let mut out = Vec::new();
        for rec in &self.records {
            serde_json::to_writer(&mut out, rec)?;
            out.push(b'\n');
        }
        fs::write(&path, out)?;
        Ok(path)
    }

    /// Write `manifest.jsonl` in the manifest's own root.
    pub fn save(&self) -> Result<PathBuf> {
        self.save_as(&self.root.clone())
    }

    /// Load a JSONL manifest; the parent directory becomes the root.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let root = manifest_path
            .parent()
            .ok_or_else(|| Error::Manifest(format!("no parent dir for {}", manifest_path.display())))?
            .to_path_buf();
        let file = fs::File::open(manifest_path)?;
        let mut records = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Manifest(format!(
                    "{}:{}: {e}",
                    manifest_path.display(),
                    lineno + 1
                ))
            })?;
            records.push(rec);
        }
        Self::new(root, records)
    }
}

/// A manifest's images loaded into memory. Tensors share their buffers, so
/// the dataset can be handed to several training workers at once.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub label: Label,
    pub generator: GeneratorId,
    pub seed: u64,
    pub image: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedDataset {
    pub samples: Vec<LoadedSample>,
}

impl LoadedDataset {
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        use rayon::prelude::*;
        let samples = manifest
            .records()
            .par_iter()
            .map(|rec| {
                let image = imageio::load_image(&manifest.resolve(rec))?;
                Ok(LoadedSample {
                    id: rec.id.clone(),
                    label: rec.label,
                    generator: rec.generator,
                    seed: rec.seed,
                    image,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    pub fn has_both_classes(&self) -> bool {
        self.count_label(Label::Real) > 0 && self.count_label(Label::Generated) > 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, label: Label, generator: GeneratorId) -> ManifestRecord {
        ManifestRecord {
            id: id.into(),
            path: format!("{id}.png"),
            label,
            generator,
            epsilon_k: None,
            split: Split::Test,
            seed: 1,
        }
    }

    #[test]
    fn label_flip_is_an_involution() {
        assert_eq!(Label::Real.flip(), Label::Generated);
        assert_eq!(Label::Generated.flip(), Label::Real);
        assert_eq!(Label::Real.flip().flip(), Label::Real);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let recs = vec![
            record("a", Label::Real, GeneratorId::Real),
            record("a", Label::Generated, GeneratorId::G1),
        ];
        assert!(DatasetManifest::new(PathBuf::from("/tmp"), recs).is_err());
    }

    #[test]
    fn label_generator_consistency_enforced() {
        let recs = vec![record("a", Label::Generated, GeneratorId::Real)];
        assert!(DatasetManifest::new(PathBuf::from("/tmp"), recs).is_err());
    }

    #[test]
    fn jsonl_round_trip_preserves_records_and_key_order() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![
            record("real_0", Label::Real, GeneratorId::Real),
            ManifestRecord {
                epsilon_k: Some(16),
                ..record("g1_0", Label::Generated, GeneratorId::G1)
            },
        ];
        let manifest = DatasetManifest::new(dir.path().to_path_buf(), recs.clone()).unwrap();
        let path = manifest.save().unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with(r#"{"id":"real_0","path":"real_0.png","label":0,"generator":"REAL","epsilon_k":null,"split":"test","seed":1}"#));

        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(loaded.records(), recs.as_slice());
        assert_eq!(loaded.root(), dir.path());
    }
}
