//! Ingestion of MSCOCO annotation/result files and the per-image ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{self, ObjectVocabulary};

/// Image identifier as used in the annotation files.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ImageId(pub u64);

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Segmentation-derived object labels for one image; instance counts are dropped.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SegmentationRecord {
    pub image_id: ImageId,
    pub objects: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceSet {
    pub image_id: ImageId,
    pub captions: Vec<String>,
}

/// A generated caption to be evaluated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CaptionRecord {
    pub image_id: ImageId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    pub raw_text: String,
    /// Normalized tokens; empty until the record is tokenized.
    #[serde(skip)]
    pub tokens: Vec<String>,
}

impl CaptionRecord {
    pub fn new(image_id: ImageId, model_id: Option<String>, raw_text: impl Into<String>) -> Self {
        CaptionRecord {
            image_id,
            model_id,
            raw_text: raw_text.into(),
            tokens: Vec::new(),
        }
    }

    pub fn tokenized(mut self) -> Self {
        self.tokens = lexicon::tokenize(&self.raw_text);
        self
    }

    /// Alignment key used when joining captions with per-sentence scores.
    pub fn key(&self) -> (ImageId, Option<String>) {
        (self.image_id, self.model_id.clone())
    }
}

/// Reference captions grouped per image, plus the count of skipped empty captions.
#[derive(Debug, Clone, Default)]
pub struct LoadedCaptions {
    pub references: BTreeMap<ImageId, ReferenceSet>,
    pub skipped_empty: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ImageGroundTruth {
    pub seg_objects: BTreeSet<String>,
    pub caption_objects: BTreeSet<String>,
    pub union: BTreeSet<String>,
    /// Whether the image appears in the instances file.
    pub has_segmentation: bool,
    pub n_references: usize,
}

impl ImageGroundTruth {
    fn new(seg: BTreeSet<String>, caps: BTreeSet<String>, has_seg: bool, n_refs: usize) -> Self {
        let union = seg.union(&caps).cloned().collect();
        ImageGroundTruth {
            seg_objects: seg,
            caption_objects: caps,
            union,
            has_segmentation: has_seg,
            n_references: n_refs,
        }
    }
}

/// Per-image ground-truth objects from segmentations and reference captions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundTruthIndex {
    images: BTreeMap<ImageId, ImageGroundTruth>,
}

/// Which annotation sources feed the set used for hallucination checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruthSource {
    Union,
    SegmentationOnly,
    CaptionsOnly,
}

impl GroundTruthIndex {
    pub fn get(&self, image: ImageId) -> Result<&ImageGroundTruth> {
        self.images.get(&image).ok_or(Error::UnknownImage(image))
    }

    pub fn contains(&self, image: ImageId) -> bool {
        self.images.contains_key(&image)
    }

    pub fn union(&self, image: ImageId) -> Result<&BTreeSet<String>> {
        self.get(image).map(|g| &g.union)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ImageId, &ImageGroundTruth)> {
        self.images.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Copy of the index whose `union` is replaced by a single source.
    pub fn restricted_to(&self, source: GroundTruthSource) -> GroundTruthIndex {
        let images = self
            .images
            .iter()
            .map(|(id, g)| {
                let mut g = g.clone();
                g.union = match source {
                    GroundTruthSource::Union => g.union,
                    GroundTruthSource::SegmentationOnly => g.seg_objects.clone(),
                    GroundTruthSource::CaptionsOnly => g.caption_objects.clone(),
                };
                (*id, g)
            })
            .collect();
        GroundTruthIndex { images }
    }

    /// Builds an index from `(image, seg_objects, caption_objects)` entries.
    /// Every entry counts as having a segmentation and one reference caption.
    pub fn from_entries(
        entries: impl IntoIterator<Item = (ImageId, BTreeSet<String>, BTreeSet<String>)>,
    ) -> Self {
        let images = entries
            .into_iter()
            .map(|(id, seg, caps)| (id, ImageGroundTruth::new(seg, caps, true, 1)))
            .collect();
        GroundTruthIndex { images }
    }
}

#[derive(Deserialize)]
struct InstancesFile {
    #[serde(default)]
    images: Vec<ImageEntry>,
    categories: Vec<CategoryEntry>,
    annotations: Vec<InstanceAnnotation>,
}

#[derive(Deserialize)]
struct ImageEntry {
    id: ImageId,
}

#[derive(Deserialize)]
struct CategoryEntry {
    id: i64,
    name: String,
}

#[derive(Deserialize)]
struct InstanceAnnotation {
    image_id: ImageId,
    category_id: i64,
}

#[derive(Deserialize)]
struct CaptionsFile {
    annotations: Vec<CaptionAnnotation>,
}

#[derive(Deserialize)]
struct CaptionAnnotation {
    image_id: ImageId,
    caption: String,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, &e))
}

/// Reads an MSCOCO `instances_*.json` file into per-image object sets.
pub fn load_instances(
    path: &Path,
    vocab: &ObjectVocabulary,
) -> Result<BTreeMap<ImageId, SegmentationRecord>> {
    let file: InstancesFile = read_json(path)?;

    let mut categories = BTreeMap::new();
    for cat in &file.categories {
        let name = vocab.canonical_name(&cat.name).ok_or_else(|| {
            Error::Validation(format!(
                "{}: category {} ({:?}) is not in the object vocabulary",
                path.display(),
                cat.id,
                cat.name
            ))
        })?;
        categories.insert(cat.id, name.to_owned());
    }

    let mut records: BTreeMap<ImageId, SegmentationRecord> = file
        .images
        .iter()
        .map(|img| {
            (
                img.id,
                SegmentationRecord {
                    image_id: img.id,
                    objects: BTreeSet::new(),
                },
            )
        })
        .collect();

    let mut unknown: BTreeSet<i64> = BTreeSet::new();
    for ann in &file.annotations {
        match categories.get(&ann.category_id) {
            Some(name) => {
                records
                    .entry(ann.image_id)
                    .or_insert_with(|| SegmentationRecord {
                        image_id: ann.image_id,
                        objects: BTreeSet::new(),
                    })
                    .objects
                    .insert(name.clone());
            }
            None => {
                unknown.insert(ann.category_id);
            }
        }
    }
    if !unknown.is_empty() {
        let ids: Vec<String> = unknown.iter().map(i64::to_string).collect();
        return Err(Error::Validation(format!(
            "{}: annotations reference unknown category ids: {}",
            path.display(),
            ids.join(", ")
        )));
    }
    Ok(records)
}

/// Reads an MSCOCO `captions_*.json` file, grouping captions per image in file order.
pub fn load_captions(path: &Path) -> Result<LoadedCaptions> {
    let file: CaptionsFile = read_json(path)?;
    let mut loaded = LoadedCaptions::default();
    for ann in file.annotations {
        if ann.caption.trim().is_empty() {
            loaded.skipped_empty += 1;
            continue;
        }
        loaded
            .references
            .entry(ann.image_id)
            .or_insert_with(|| ReferenceSet {
                image_id: ann.image_id,
                captions: Vec::new(),
            })
            .captions
            .push(ann.caption);
    }
    if loaded.skipped_empty > 0 {
        warn!(
            "{}: skipped {} empty reference captions",
            path.display(),
            loaded.skipped_empty
        );
    }
    Ok(loaded)
}

/// Reads a results file: a JSON array of `{image_id, caption[, model_id]}`.
pub fn load_results(path: &Path) -> Result<Vec<CaptionRecord>> {
    let entries: Vec<serde_json::Value> = read_json(path)?;
    entries
        .iter()
        .enumerate()
        .map(|(i, entry)| parse_result_entry(entry).map_err(|msg| {
            Error::Validation(format!("{}: entry {i}: {msg}", path.display()))
        }))
        .collect()
}

fn parse_result_entry(entry: &serde_json::Value) -> std::result::Result<CaptionRecord, String> {
    let image_id = entry
        .get("image_id")
        .ok_or("missing image_id")?
        .as_u64()
        .ok_or("image_id is not a non-negative integer")?;
    let caption = entry
        .get("caption")
        .ok_or("missing caption")?
        .as_str()
        .ok_or("caption is not a string")?;
    if caption.trim().is_empty() {
        return Err("empty caption".into());
    }
    let model_id = match entry.get("model_id") {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) => Some(s.clone()),
        Some(other) => Some(other.to_string()),
    };
    Ok(CaptionRecord::new(ImageId(image_id), model_id, caption))
}

/// Merges segmentation labels with objects scraped from reference captions.
///
/// Images found in only one source are still indexed with the other set empty.
pub fn build_ground_truth(
    segs: &BTreeMap<ImageId, SegmentationRecord>,
    refs: &BTreeMap<ImageId, ReferenceSet>,
    vocab: &ObjectVocabulary,
) -> GroundTruthIndex {
    let ids: BTreeSet<ImageId> = segs.keys().chain(refs.keys()).copied().collect();
    let mut caption_only = 0usize;
    let mut seg_only = 0usize;
    let images = ids
        .into_iter()
        .map(|id| {
            let seg = segs.get(&id).map(|s| s.objects.clone());
            let caption_objects: BTreeSet<String> = refs
                .get(&id)
                .map(|r| {
                    r.captions
                        .iter()
                        .flat_map(|c| vocab.resolve_text(c).1)
                        .map(|m| m.object)
                        .collect()
                })
                .unwrap_or_default();
            let n_refs = refs.get(&id).map_or(0, |r| r.captions.len());
            if seg.is_none() {
                caption_only += 1;
            }
            if n_refs == 0 {
                seg_only += 1;
            }
            let has_seg = seg.is_some();
            (
                id,
                ImageGroundTruth::new(seg.unwrap_or_default(), caption_objects, has_seg, n_refs),
            )
        })
        .collect();
    if caption_only > 0 {
        warn!("{caption_only} images have reference captions but no segmentation entry");
    }
    if seg_only > 0 {
        warn!("{seg_only} images have segmentations but no reference captions");
    }
    GroundTruthIndex { images }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MissingRecord {
    pub index: usize,
    pub image_id: ImageId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub n_records: usize,
    pub n_images_indexed: usize,
    pub n_images_covered: usize,
    pub missing: Vec<MissingRecord>,
    /// Indexed images whose union is empty.
    pub no_ground_truth_objects: usize,
    pub segmentation_only_images: usize,
    pub caption_only_images: usize,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.missing.is_empty()
    }
}

pub fn validate_corpus(gt: &GroundTruthIndex, records: &[CaptionRecord]) -> ValidationReport {
    let missing = records
        .iter()
        .enumerate()
        .filter(|(_, r)| !gt.contains(r.image_id))
        .map(|(index, r)| MissingRecord {
            index,
            image_id: r.image_id,
            model_id: r.model_id.clone(),
        })
        .collect();
    let covered: BTreeSet<ImageId> = records
        .iter()
        .map(|r| r.image_id)
        .filter(|id| gt.contains(*id))
        .collect();
    ValidationReport {
        n_records: records.len(),
        n_images_indexed: gt.len(),
        n_images_covered: covered.len(),
        missing,
        no_ground_truth_objects: gt.iter().filter(|(_, g)| g.union.is_empty()).count(),
        segmentation_only_images: gt.iter().filter(|(_, g)| g.n_references == 0).count(),
        caption_only_images: gt.iter().filter(|(_, g)| !g.has_segmentation).count(),
    }
}
