//! Dataset plumbing: manifest ingestion, the labeler score
//! aggregation/filtering pipeline, disjoint-class splitting, and a
//! synthetic dataset generator for desk-scale experiments.
//!
//! On-disk formats (both bit-exact):
//! - Manifest: UTF-8 TSV with header
//!   `item_id  class_id  split  is_query  feature_path`; feature paths are
//!   relative to the manifest's directory.
//! - Feature file: magic `FMV1`, u32-LE height, width, channels, then
//!   H*W*C f32-LE values in (h, w, c) order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::numerics::RngState;
use crate::sampling::LabeledItem;

pub const FEATURE_MAGIC: &[u8; 4] = b"FMV1";
pub const MANIFEST_HEADER: &str = "item_id\tclass_id\tsplit\tis_query\tfeature_path";

/// Number of labelers scoring every image.
pub const LABELER_COUNT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "validation" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub item_id: String,
    pub class_id: u32,
    pub split: Split,
    pub is_query: bool,
    /// Path of the feature file, relative to the manifest location.
    pub feature_path: String,
}

/// The full dataset description. Splits have pairwise disjoint class sets
/// and only validation/test items may be flagged as queries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut classes_of: BTreeMap<Split, BTreeSet<u32>> = BTreeMap::new();
        for e in &self.entries {
            if !ids.insert(e.item_id.as_str()) {
                return Err(Error::BadSpec { context: format!("duplicate item id {}", e.item_id) });
            }
            if e.item_id.contains(['\t', '\n']) || e.feature_path.contains(['\t', '\n']) {
                return Err(Error::BadSpec { context: format!("item {} contains tab/newline", e.item_id) });
            }
            if e.is_query && e.split == Split::Train {
                return Err(Error::BadSpec { context: format!("train item {} flagged as query", e.item_id) });
            }
            classes_of.entry(e.split).or_default().insert(e.class_id);
        }
        let splits: Vec<(&Split, &BTreeSet<u32>)> = classes_of.iter().collect();
        for i in 0..splits.len() {
            for j in (i + 1)..splits.len() {
                if let Some(c) = splits[i].1.intersection(splits[j].1).next() {
                    return Err(Error::BadSpec {
                        context: format!(
                            "class {c} appears in both {} and {} splits",
                            splits[i].0.as_str(),
                            splits[j].0.as_str()
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn split_classes(&self, split: Split) -> BTreeSet<u32> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.class_id)
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.item_id,
                e.class_id,
                e.split.as_str(),
                if e.is_query { 1 } else { 0 },
                e.feature_path
            ));
        }
        out
    }

    pub fn from_tsv(text: &str, path: &str) -> Result<Self> {
        let parse_err = |line: usize, context: String| Error::Parse {
            path: path.to_string(),
            kind: "manifest",
            line,
            context,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == MANIFEST_HEADER => {}
            other => {
                return Err(parse_err(1, format!("expected header {MANIFEST_HEADER:?}, got {:?}", other.map(|o| o.1))));
            }
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(parse_err(i + 1, format!("expected 5 fields, got {}", fields.len())));
            }
            let class_id: u32 = fields[1]
                .parse()
                .map_err(|_| parse_err(i + 1, format!("bad class id {:?}", fields[1])))?;
            let split = Split::parse(fields[2])
                .ok_or_else(|| parse_err(i + 1, format!("bad split {:?}", fields[2])))?;
            let is_query = match fields[3] {
                "0" => false,
                "1" => true,
                other => return Err(parse_err(i + 1, format!("bad is_query {other:?}"))),
            };
            entries.push(ManifestEntry {
                item_id: fields[0].to_string(),
                class_id,
                split,
                is_query,
                feature_path: fields[4].to_string(),
            });
        }
        let manifest = DatasetManifest { entries };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        fs::write(path, self.to_tsv()).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
        Self::from_tsv(&text, &path.display().to_string())
    }
}

/// Serialize a feature map into the FMV1 binary layout.
pub fn feature_map_to_bytes(fm: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * fm.values().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(fm.height() as u32).to_le_bytes());
    out.extend_from_slice(&(fm.width() as u32).to_le_bytes());
    out.extend_from_slice(&(fm.channels() as u32).to_le_bytes());
    for v in fm.values() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn feature_map_from_bytes(bytes: &[u8], path: &str) -> Result<FeatureMap> {
    let parse_err = |context: String| Error::Parse { path: path.to_string(), kind: "feature file", line: 0, context };
    if bytes.len() < 16 || &bytes[0..4] != FEATURE_MAGIC {
        return Err(parse_err("missing FMV1 magic".into()));
    }
    let read_u32 = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (read_u32(4), read_u32(8), read_u32(12));
    let expected = 16 + 4 * h * w * c;
    if bytes.len() != expected {
        return Err(parse_err(format!("expected {expected} bytes for {h}x{w}x{c}, got {}", bytes.len())));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    FeatureMap::new(h, w, c, values)
}

pub fn write_feature_map(path: &Path, fm: &FeatureMap) -> Result<()> {
    let mut file = fs::File::create(path)
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    file.write_all(&feature_map_to_bytes(fm))
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    feature_map_from_bytes(&bytes, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Labeler score pipeline
// ---------------------------------------------------------------------------

/// One labeled image: five similarity scores in [0, 9].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawLabelRecord {
    pub item_id: String,
    pub class_id: u32,
    pub scores: [u8; LABELER_COUNT],
}

impl RawLabelRecord {
    pub fn new(item_id: String, class_id: u32, scores: [u8; LABELER_COUNT]) -> Result<Self> {
        if scores.iter().any(|&s| s > 9) {
            return Err(Error::BadSpec { context: format!("score out of [0,9] for item {item_id}") });
        }
        Ok(Self { item_id, class_id, scores })
    }
}

/// Per-labeler aggregation weights, non-negative with positive sum.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "[f64; LABELER_COUNT]", into = "[f64; LABELER_COUNT]")]
pub struct LabelerWeights([f64; LABELER_COUNT]);

impl LabelerWeights {
    pub fn new(w: [f64; LABELER_COUNT]) -> Result<Self> {
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::BadSpec { context: format!("labeler weights must be >= 0 with positive sum, got {w:?}") });
        }
        Ok(Self(w))
    }

    pub fn values(&self) -> &[f64; LABELER_COUNT] {
        &self.0
    }
}

impl TryFrom<[f64; LABELER_COUNT]> for LabelerWeights {
    type Error = String;
    fn try_from(w: [f64; LABELER_COUNT]) -> std::result::Result<Self, String> {
        LabelerWeights::new(w).map_err(|e| e.to_string())
    }
}

impl From<LabelerWeights> for [f64; LABELER_COUNT] {
    fn from(w: LabelerWeights) -> Self {
        w.0
    }
}

/// Weighted average of the five scores: sum_i w_i * s_i.
pub fn aggregate_score(record: &RawLabelRecord, weights: &LabelerWeights) -> f64 {
    record
        .scores
        .iter()
        .zip(weights.values())
        .map(|(&s, &w)| w * s as f64)
        .sum()
}

/// Item ids whose aggregated score reaches `threshold` (inclusive).
pub fn filter_valid(
    records: &[RawLabelRecord],
    weights: &LabelerWeights,
    threshold: f64,
) -> Vec<String> {
    records
        .iter()
        .filter(|r| aggregate_score(r, weights) >= threshold)
        .map(|r| r.item_id.clone())
        .collect()
}

/// Pearson correlation; a constant side has no defined correlation and is
/// scored 0 against everything.
fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// For each labeler, the number of classes where that labeler has the
/// lowest average score correlation with the other labelers. Ties count
/// for every tied labeler.
pub fn labeler_quality(records: &[RawLabelRecord]) -> Result<[usize; LABELER_COUNT]> {
    let mut by_class: BTreeMap<u32, Vec<&RawLabelRecord>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.class_id).or_default().push(r);
    }
    for (&class, members) in &by_class {
        if members.len() < 2 {
            return Err(Error::SingletonClass { class });
        }
    }

    let mut counts = [0usize; LABELER_COUNT];
    for members in by_class.values() {
        let series: Vec<Vec<f64>> = (0..LABELER_COUNT)
            .map(|l| members.iter().map(|r| r.scores[l] as f64).collect())
            .collect();
        let mut avg = [0.0f64; LABELER_COUNT];
        for i in 0..LABELER_COUNT {
            let mut sum = 0.0;
            for j in 0..LABELER_COUNT {
                if i != j {
                    sum += pearson(&series[i], &series[j]);
                }
            }
            avg[i] = sum / (LABELER_COUNT - 1) as f64;
        }
        let min = avg.iter().copied().fold(f64::INFINITY, f64::min);
        for (i, &a) in avg.iter().enumerate() {
            if a == min {
                counts[i] += 1;
            }
        }
    }
    Ok(counts)
}

/// Parse a raw label TSV with header
/// `item_id  class_id  s0  s1  s2  s3  s4`.
pub fn read_label_records(path: &Path) -> Result<Vec<RawLabelRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    let path_str = path.display().to_string();
    let parse_err = |line: usize, context: String| Error::Parse {
        path: path_str.clone(),
        kind: "label file",
        line,
        context,
    };
    let header = "item_id\tclass_id\ts0\ts1\ts2\ts3\ts4";
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == header => {}
        other => return Err(parse_err(1, format!("expected header {header:?}, got {:?}", other.map(|o| o.1)))),
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 + LABELER_COUNT {
            return Err(parse_err(i + 1, format!("expected {} fields, got {}", 2 + LABELER_COUNT, fields.len())));
        }
        let class_id: u32 = fields[1]
            .parse()
            .map_err(|_| parse_err(i + 1, format!("bad class id {:?}", fields[1])))?;
        let mut scores = [0u8; LABELER_COUNT];
        for (k, slot) in scores.iter_mut().enumerate() {
            *slot = fields[2 + k]
                .parse()
                .map_err(|_| parse_err(i + 1, format!("bad score {:?}", fields[2 + k])))?;
        }
        records.push(
            RawLabelRecord::new(fields[0].to_string(), class_id, scores)
                .map_err(|e| parse_err(i + 1, e.to_string()))?,
        );
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Partition classes into disjoint train/validation/test sets matching
/// `fractions` by class count (validation and test rounded, remainder to
/// train), then flag two seeded query items per validation/test class.
///
/// `items` are (item_id, class_id) pairs; feature paths default to
/// `features/<item_id>.fm` relative to the manifest.
pub fn split_disjoint(
    items: &[(String, u32)],
    fractions: (f64, f64, f64),
    rng: &mut RngState,
) -> Result<DatasetManifest> {
    let (f_train, f_val, f_test) = fractions;
    if (f_train + f_val + f_test - 1.0).abs() > 1e-9 || f_train < 0.0 || f_val < 0.0 || f_test < 0.0 {
        return Err(Error::BadSpec { context: format!("fractions must be >= 0 and sum to 1, got {fractions:?}") });
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, (_, class)) in items.iter().enumerate() {
        by_class.entry(*class).or_default().push(i);
    }
    let k = by_class.len();
    if k < 3 {
        return Err(Error::TooFewClasses { got: k });
    }

    let n_val = (f_val * k as f64).round() as usize;
    let n_test = (f_test * k as f64).round() as usize;
    if n_val + n_test > k {
        return Err(Error::BadSpec { context: "validation + test fractions leave no train classes".into() });
    }

    let mut classes: Vec<u32> = by_class.keys().copied().collect();
    rng.shuffle(&mut classes);
    let mut split_of: BTreeMap<u32, Split> = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        let split = if i < n_val {
            Split::Validation
        } else if i < n_val + n_test {
            Split::Test
        } else {
            Split::Train
        };
        split_of.insert(c, split);
    }

    // Two query items per validation/test class; the class must keep at
    // least one database item.
    let mut is_query = vec![false; items.len()];
    for (&class, members) in &by_class {
        if split_of[&class] == Split::Train {
            continue;
        }
        if members.len() < 3 {
            return Err(Error::ClassTooSmall { class, got: members.len() });
        }
        let mut pool = members.clone();
        rng.shuffle(&mut pool);
        is_query[pool[0]] = true;
        is_query[pool[1]] = true;
    }

    let entries = items
        .iter()
        .enumerate()
        .map(|(i, (id, class))| ManifestEntry {
            item_id: id.clone(),
            class_id: *class,
            split: split_of[class],
            is_query: is_query[i],
            feature_path: format!("features/{id}.fm"),
        })
        .collect();
    let manifest = DatasetManifest { entries };
    manifest.validate()?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Synthetic dataset description: K spherical-Gaussian class centers with
/// isotropic within-class noise, feature grids of varying size, ReLU-style
/// clipping at zero.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    /// Inclusive range of items per class.
    pub items_per_class: (usize, usize),
    pub descriptor_dim: usize,
    /// Inclusive range for both grid dimensions.
    pub grid: (usize, usize),
    /// Scale of the class-center Gaussian.
    pub center_spread: f64,
    /// Scale of the per-location within-class noise.
    pub within_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// The desk-scale benchmark dataset: 20 classes of 30 items in 16
    /// channels on 2..4 grids. The noise level is set so an untrained
    /// network lands mid-range on retrieval metrics, leaving headroom for
    /// training to matter.
    fn default() -> Self {
        Self {
            classes: 20,
            items_per_class: (30, 30),
            descriptor_dim: 16,
            grid: (2, 4),
            center_spread: 1.0,
            within_noise: 1.4,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.classes >= 1
            && self.items_per_class.0 >= 1
            && self.items_per_class.0 <= self.items_per_class.1
            && self.descriptor_dim >= 1
            && self.grid.0 >= 1
            && self.grid.0 <= self.grid.1
            && self.center_spread >= 0.0
            && self.center_spread.is_finite()
            && self.within_noise >= 0.0
            && self.within_noise.is_finite();
        if !ok {
            return Err(Error::BadSpec { context: format!("invalid synthetic spec {self:?}") });
        }
        Ok(())
    }
}

/// In-memory synthetic dataset: ids, classes and feature maps, index-aligned.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub items: Vec<(String, u32)>,
    pub features: Vec<FeatureMap>,
}

/// Generate the dataset described by `spec`; fully determined by its seed.
/// Values are quantized through f32 so the in-memory dataset is identical
/// to one written to disk and read back.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = RngState::new(spec.seed);
    let dim = spec.descriptor_dim;
    let mut items = Vec::new();
    let mut features = Vec::new();

    for class in 0..spec.classes {
        let center: Vec<f64> = (0..dim).map(|_| spec.center_spread * rng.normal()).collect();
        let count = rng.range_inclusive(spec.items_per_class.0, spec.items_per_class.1);
        for item in 0..count {
            let h = rng.range_inclusive(spec.grid.0, spec.grid.1);
            let w = rng.range_inclusive(spec.grid.0, spec.grid.1);
            let mut values = Vec::with_capacity(h * w * dim);
            for _ in 0..h * w {
                for c in &center {
                    let v = (c + spec.within_noise * rng.normal()).max(0.0);
                    values.push((v as f32) as f64);
                }
            }
            items.push((format!("c{class:03}_i{item:03}"), class as u32));
            features.push(FeatureMap::new(h, w, dim, values)?);
        }
    }
    Ok(SyntheticDataset { items, features })
}

// ---------------------------------------------------------------------------
// Loaded dataset
// ---------------------------------------------------------------------------

/// A manifest with every referenced feature map in memory,
/// index-aligned with `manifest.entries`.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub features: Vec<FeatureMap>,
}

impl LoadedDataset {
    pub fn from_parts(manifest: DatasetManifest, features: Vec<FeatureMap>) -> Result<Self> {
        manifest.validate()?;
        if manifest.entries.len() != features.len() {
            return Err(Error::ShapeMismatch {
                context: format!("{} manifest entries, {} feature maps", manifest.entries.len(), features.len()),
            });
        }
        // grids may vary per item, channel counts may not
        if let Some(first) = features.first() {
            let c = first.channels();
            if let Some(bad) = features.iter().position(|f| f.channels() != c) {
                return Err(Error::ShapeMismatch {
                    context: format!(
                        "item {} has {} channels, dataset uses {c}",
                        manifest.entries[bad].item_id,
                        features[bad].channels()
                    ),
                });
            }
        }
        Ok(Self { manifest, features })
    }

    /// Channel count shared by every feature map.
    pub fn channels(&self) -> usize {
        self.features.first().map_or(0, FeatureMap::channels)
    }

    /// Read a manifest and every feature file it references.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let features = manifest
            .entries
            .iter()
            .map(|e| read_feature_map(&base.join(&e.feature_path)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(manifest, features)
    }

    /// Write the manifest and all feature files under `dir`; returns the
    /// manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let mkdir = |p: &Path| {
            fs::create_dir_all(p).map_err(|e| Error::Io { path: p.display().to_string(), source: e })
        };
        mkdir(dir)?;
        for (entry, fm) in self.manifest.entries.iter().zip(&self.features) {
            let path = dir.join(&entry.feature_path);
            if let Some(parent) = path.parent() {
                mkdir(parent)?;
            }
            write_feature_map(&path, fm)?;
        }
        let manifest_path = dir.join("manifest.tsv");
        self.manifest.save(&manifest_path)?;
        Ok(manifest_path)
    }

    /// Items of one split, as the samplers and trainer consume them.
    pub fn items(&self, split: Split) -> Vec<LabeledItem> {
        self.manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, e)| LabeledItem { item_id: e.item_id.clone(), class_id: e.class_id, feature: i })
            .collect()
    }

    /// (query entry indices, database entry indices) of one split.
    pub fn queries_and_database(&self, split: Split) -> (Vec<usize>, Vec<usize>) {
        let mut queries = Vec::new();
        let mut database = Vec::new();
        for (i, e) in self.manifest.entries.iter().enumerate() {
            if e.split != split {
                continue;
            }
            if e.is_query {
                queries.push(i);
            } else {
                database.push(i);
            }
        }
        (queries, database)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_weights() -> LabelerWeights {
        LabelerWeights::new([0.445, 0.0, 0.445, 0.055, 0.055]).unwrap()
    }

    #[test]
    fn aggregate_score_weighted_sum() {
        let r = RawLabelRecord::new("a".into(), 0, [8, 2, 7, 6, 6]).unwrap();
        assert!((aggregate_score(&r, &paper_weights()) - 7.335).abs() < 1e-12);
    }

    #[test]
    fn aggregate_score_constant_and_onehot() {
        let r = RawLabelRecord::new("a".into(), 0, [9, 9, 9, 9, 9]).unwrap();
        let w = LabelerWeights::new([0.2, 0.2, 0.2, 0.2, 0.2]).unwrap();
        assert!((aggregate_score(&r, &w) - 9.0).abs() < 1e-12);
        let r = RawLabelRecord::new("a".into(), 0, [3, 7, 1, 0, 9]).unwrap();
        let w = LabelerWeights::new([1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(aggregate_score(&r, &w), 3.0);
    }

    #[test]
    fn filter_valid_threshold_boundary() {
        let records = vec![
            RawLabelRecord::new("keep".into(), 0, [8, 2, 7, 6, 6]).unwrap(), // 7.335
            RawLabelRecord::new("drop".into(), 0, [5, 5, 5, 5, 5]).unwrap(), // 5.0
            RawLabelRecord::new("edge".into(), 0, [6, 6, 6, 6, 6]).unwrap(), // exactly 6.0
        ];
        let kept = filter_valid(&records, &paper_weights(), 6.0);
        assert_eq!(kept, vec!["keep".to_string(), "edge".to_string()]);
    }

    #[test]
    fn filter_valid_monotone_in_threshold() {
        let records: Vec<RawLabelRecord> = (0..40)
            .map(|i| {
                RawLabelRecord::new(
                    format!("r{i}"),
                    0,
                    [(i % 10) as u8, ((i + 3) % 10) as u8, ((i * 7) % 10) as u8, 4, 9],
                )
                .unwrap()
            })
            .collect();
        let w = paper_weights();
        let mut prev = filter_valid(&records, &w, 0.0).len();
        for t in 1..=10 {
            let now = filter_valid(&records, &w, t as f64).len();
            assert!(now <= prev);
            prev = now;
        }
        assert_eq!(filter_valid(&records, &w, 0.0).len(), records.len());
        assert!(filter_valid(&records, &w, 10.0).is_empty());
    }

    #[test]
    fn aggregate_score_linear_in_scores() {
        let w = paper_weights();
        let a = RawLabelRecord::new("a".into(), 0, [1, 2, 0, 3, 1]).unwrap();
        let b = RawLabelRecord::new("b".into(), 0, [4, 0, 5, 2, 6]).unwrap();
        let sum = RawLabelRecord::new("s".into(), 0, [5, 2, 5, 5, 7]).unwrap();
        assert!(
            (aggregate_score(&a, &w) + aggregate_score(&b, &w) - aggregate_score(&sum, &w)).abs()
                < 1e-12
        );
    }

    #[test]
    fn labeler_quality_flags_anticorrelated() {
        // labelers 0 and 1 agree, labeler 2 is anti-correlated; spec uses a
        // 3-labeler construction, padded here with two more agreeing ones
        let mut records = Vec::new();
        for class in 0..4u32 {
            for i in 0..5 {
                let up = i as u8;
                let down = 9 - i as u8;
                records.push(
                    RawLabelRecord::new(format!("c{class}i{i}"), class, [up, up, down, up, up]).unwrap(),
                );
            }
        }
        let counts = labeler_quality(&records).unwrap();
        assert_eq!(counts[2], 4);
        assert_eq!(counts[0], 0);
    }

    #[test]
    fn labeler_quality_all_tied_counts_everyone() {
        let mut records = Vec::new();
        for i in 0..4 {
            let s = (i * 2) as u8;
            records.push(RawLabelRecord::new(format!("i{i}"), 0, [s, s, s, s, s]).unwrap());
        }
        let counts = labeler_quality(&records).unwrap();
        assert_eq!(counts, [1, 1, 1, 1, 1]);
    }

    #[test]
    fn labeler_quality_needs_two_items_per_class() {
        let records = vec![RawLabelRecord::new("only".into(), 3, [1, 2, 3, 4, 5]).unwrap()];
        assert!(matches!(labeler_quality(&records), Err(Error::SingletonClass { class: 3 })));
    }

    fn flat_items(classes: usize, per_class: usize) -> Vec<(String, u32)> {
        let mut items = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                items.push((format!("c{c:03}_i{i:03}"), c as u32));
            }
        }
        items
    }

    #[test]
    fn split_matches_class_counts() {
        // 167 classes partitioned 107/20/40
        let items = flat_items(167, 3);
        let m = split_disjoint(&items, (0.64, 0.12, 0.24), &mut RngState::new(1)).unwrap();
        assert_eq!(m.split_classes(Split::Train).len(), 107);
        assert_eq!(m.split_classes(Split::Validation).len(), 20);
        assert_eq!(m.split_classes(Split::Test).len(), 40);
    }

    #[test]
    fn split_disjoint_and_complete() {
        let items = flat_items(11, 4);
        let m = split_disjoint(&items, (0.5, 0.25, 0.25), &mut RngState::new(2)).unwrap();
        let train = m.split_classes(Split::Train);
        let val = m.split_classes(Split::Validation);
        let test = m.split_classes(Split::Test);
        assert!(train.is_disjoint(&val));
        assert!(train.is_disjoint(&test));
        assert!(val.is_disjoint(&test));
        let all: BTreeSet<u32> = train.union(&val).cloned().collect::<BTreeSet<_>>().union(&test).cloned().collect();
        assert_eq!(all.len(), 11);
        // two queries per non-train class
        for class in val.iter().chain(test.iter()) {
            let q = m
                .entries
                .iter()
                .filter(|e| e.class_id == *class && e.is_query)
                .count();
            assert_eq!(q, 2);
        }
    }

    #[test]
    fn split_deterministic() {
        let items = flat_items(9, 5);
        let a = split_disjoint(&items, (0.6, 0.2, 0.2), &mut RngState::new(3)).unwrap();
        let b = split_disjoint(&items, (0.6, 0.2, 0.2), &mut RngState::new(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_guards() {
        let items = flat_items(2, 5);
        assert!(matches!(
            split_disjoint(&items, (0.5, 0.25, 0.25), &mut RngState::new(1)),
            Err(Error::TooFewClasses { got: 2 })
        ));
        let items = flat_items(6, 2); // too small to host 2 queries + 1 db item
        assert!(matches!(
            split_disjoint(&items, (0.4, 0.3, 0.3), &mut RngState::new(1)),
            Err(Error::ClassTooSmall { .. })
        ));
        let items = flat_items(6, 5);
        assert!(split_disjoint(&items, (0.5, 0.2, 0.2), &mut RngState::new(1)).is_err());
    }

    #[test]
    fn synthetic_counts_and_nonnegativity() {
        let spec = SyntheticSpec { classes: 5, items_per_class: (3, 6), ..SyntheticSpec::default() };
        let data = generate_synthetic(&spec).unwrap();
        assert_eq!(data.items.len(), data.features.len());
        let mut per_class: BTreeMap<u32, usize> = BTreeMap::new();
        for (_, c) in &data.items {
            *per_class.entry(*c).or_default() += 1;
        }
        assert_eq!(per_class.len(), 5);
        for count in per_class.values() {
            assert!((3..=6).contains(count));
        }
        for fm in &data.features {
            assert!(fm.values().iter().all(|v| *v >= 0.0));
            let h = fm.height();
            let w = fm.width();
            assert!((2..=4).contains(&h) && (2..=4).contains(&w));
        }
    }

    #[test]
    fn synthetic_zero_noise_single_cell_items_identical() {
        let spec = SyntheticSpec {
            classes: 3,
            items_per_class: (4, 4),
            grid: (1, 1),
            within_noise: 0.0,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        for class in 0..3u32 {
            let maps: Vec<&FeatureMap> = data
                .items
                .iter()
                .zip(&data.features)
                .filter(|((_, c), _)| *c == class)
                .map(|(_, f)| f)
                .collect();
            for m in &maps[1..] {
                assert_eq!(m.values(), maps[0].values());
            }
        }
    }

    #[test]
    fn synthetic_deterministic() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.items, b.items);
        for (x, y) in a.features.iter().zip(&b.features) {
            assert_eq!(x.values(), y.values());
        }
    }

    #[test]
    fn feature_file_roundtrip_bytes() {
        let fm = FeatureMap::new(2, 3, 4, (0..24).map(|i| i as f64 * 0.25).collect()).unwrap();
        let bytes = feature_map_to_bytes(&fm);
        let back = feature_map_from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, fm);
        assert_eq!(feature_map_to_bytes(&back), bytes);
    }

    mod roundtrip_props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn feature_maps_roundtrip(
                h in 1usize..5,
                w in 1usize..5,
                c in 1usize..6,
                seed in 0u64..1000,
            ) {
                let mut rng = RngState::new(seed);
                let values: Vec<f64> = (0..h * w * c)
                    .map(|_| (rng.uniform(0.0, 10.0) as f32) as f64)
                    .collect();
                let fm = FeatureMap::new(h, w, c, values).unwrap();
                let bytes = feature_map_to_bytes(&fm);
                let back = feature_map_from_bytes(&bytes, "mem").unwrap();
                prop_assert_eq!(&back, &fm);
                prop_assert_eq!(feature_map_to_bytes(&back), bytes);
            }

            #[test]
            fn manifests_roundtrip(classes in 3usize..8, per_class in 3usize..6, seed in 0u64..1000) {
                let items = flat_items(classes, per_class);
                let m = split_disjoint(&items, (0.4, 0.3, 0.3), &mut RngState::new(seed)).unwrap();
                let text = m.to_tsv();
                let back = DatasetManifest::from_tsv(&text, "mem").unwrap();
                prop_assert_eq!(&back, &m);
                prop_assert_eq!(back.to_tsv(), text);
            }
        }
    }

    #[test]
    fn feature_file_rejects_corruption() {
        let fm = FeatureMap::new(1, 1, 2, vec![1.0, 2.0]).unwrap();
        let mut bytes = feature_map_to_bytes(&fm);
        bytes[0] = b'X';
        assert!(feature_map_from_bytes(&bytes, "mem").is_err());
        let bytes = feature_map_to_bytes(&fm);
        assert!(feature_map_from_bytes(&bytes[..bytes.len() - 1], "mem").is_err());
    }

    #[test]
    fn manifest_roundtrip_and_validation() {
        let items = flat_items(5, 4);
        let m = split_disjoint(&items, (0.4, 0.3, 0.3), &mut RngState::new(7)).unwrap();
        let text = m.to_tsv();
        let back = DatasetManifest::from_tsv(&text, "mem").unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_tsv(), text);

        let mut broken = m.clone();
        broken.entries[0].class_id = broken
            .entries
            .iter()
            .find(|e| e.split != broken.entries[0].split)
            .unwrap()
            .class_id;
        assert!(broken.validate().is_err());
    }

    #[test]
    fn dataset_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { classes: 4, items_per_class: (3, 5), ..SyntheticSpec::default() };
        let data = generate_synthetic(&spec).unwrap();
        let manifest = split_disjoint(&data.items, (0.5, 0.25, 0.25), &mut RngState::new(5)).unwrap();
        let loaded = LoadedDataset::from_parts(manifest, data.features).unwrap();
        let manifest_path = loaded.save(dir.path()).unwrap();
        let reread = LoadedDataset::load(&manifest_path).unwrap();
        assert_eq!(reread.manifest, loaded.manifest);
        for (a, b) in reread.features.iter().zip(&loaded.features) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn labeled_items_reference_features() {
        let spec = SyntheticSpec { classes: 4, items_per_class: (3, 3), ..SyntheticSpec::default() };
        let data = generate_synthetic(&spec).unwrap();
        let manifest = split_disjoint(&data.items, (0.5, 0.25, 0.25), &mut RngState::new(6)).unwrap();
        let ds = LoadedDataset::from_parts(manifest, data.features).unwrap();
        for split in [Split::Train, Split::Validation, Split::Test] {
            for it in ds.items(split) {
                assert_eq!(ds.manifest.entries[it.feature].item_id, it.item_id);
            }
        }
        let (q, db) = ds.queries_and_database(Split::Test);
        assert_eq!(q.len(), 2 * ds.manifest.split_classes(Split::Test).len());
        assert!(db.iter().all(|&i| !ds.manifest.entries[i].is_query));
    }
}
