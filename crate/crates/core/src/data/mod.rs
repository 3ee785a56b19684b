//! Datasets for both modalities: in-memory types, file formats, the synthetic
//! paired-digit generator, label stripping and splitting.

mod idx;
mod mfca;
mod preprocess;
mod split;
mod synth;

use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};

pub use idx::{load_idx_images, load_idx_labels, load_idx_labelled, write_idx_images, write_idx_labels};
pub use mfca::{decode_feature_archive, encode_feature_archive, load_feature_archive, write_feature_archive};
pub use preprocess::preprocess_background_image;
pub use split::{split, SplitSpec};
pub use synth::{
    digit_glyph, synth_background, synth_paired_digits, BACKGROUND_FRAME_DIM, DIGIT_WORDS,
    SPEECH_FRAME_DIM,
};

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

/// A 28×28 grayscale image, row-major, every pixel in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pixels: Vec<f32>,
}

impl ImageGrid {
    pub fn new(pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != IMAGE_PIXELS {
            return Err(Error::Shape(format!(
                "image has {} pixels, expected {IMAGE_SIDE}x{IMAGE_SIDE}",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Argument(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(ImageGrid { pixels })
    }

    pub fn zeros() -> Self {
        ImageGrid {
            pixels: vec![0.0; IMAGE_PIXELS],
        }
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * IMAGE_SIDE + col]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }
}

/// A non-empty sequence of fixed-dimension feature frames (one spoken word).
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    dim: usize,
    values: Vec<f32>,
}

impl FrameSequence {
    /// Builds a sequence from row-major frame values.
    pub fn new(dim: usize, values: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("frame dimension must be positive".into()));
        }
        if values.is_empty() {
            return Err(Error::EmptyItem("frame sequence has no frames".into()));
        }
        if values.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form whole frames of dimension {dim}",
                values.len()
            )));
        }
        Ok(FrameSequence { dim, values })
    }

    pub fn from_frames(frames: &[Vec<f32>]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::EmptyItem("frame sequence has no frames".into()))?;
        let dim = first.len();
        let mut values = Vec::with_capacity(dim * frames.len());
        for (t, frame) in frames.iter().enumerate() {
            if frame.len() != dim {
                return Err(Error::Shape(format!(
                    "frame {t} has dimension {}, expected {dim}",
                    frame.len()
                )));
            }
            values.extend_from_slice(frame);
        }
        FrameSequence::new(dim, values)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of frames.
    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Per-item payload shape, used to validate datasets on construction.
pub trait Sample: Clone {
    /// Feature dimension (frame dimension for speech, pixel count for images).
    fn feature_dim(&self) -> usize;
}

impl Sample for ImageGrid {
    fn feature_dim(&self) -> usize {
        IMAGE_PIXELS
    }
}

impl Sample for FrameSequence {
    fn feature_dim(&self) -> usize {
        self.dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item<T> {
    pub id: String,
    pub data: T,
    /// Index into the owning dataset's class list.
    pub label: Option<usize>,
}

/// An ordered collection of items of one modality with unique ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    items: Vec<Item<T>>,
    classes: Vec<String>,
    feature_dim: usize,
}

pub type ImageSet = Dataset<ImageGrid>;
pub type SpeechSet = Dataset<FrameSequence>;

impl<T: Sample> Dataset<T> {
    pub fn new(items: Vec<Item<T>>, classes: Vec<String>, feature_dim: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(items.len());
        for item in &items {
            if !seen.insert(item.id.as_str()) {
                return Err(Error::Argument(format!("duplicate item id {:?}", item.id)));
            }
            if item.data.feature_dim() != feature_dim {
                return Err(Error::Shape(format!(
                    "item {:?} has feature dimension {}, expected {feature_dim}",
                    item.id,
                    item.data.feature_dim()
                )));
            }
            if let Some(label) = item.label {
                if label >= classes.len() {
                    return Err(Error::Argument(format!(
                        "item {:?} has label {label} but only {} classes exist",
                        item.id,
                        classes.len()
                    )));
                }
            }
        }
        Ok(Dataset {
            items,
            classes,
            feature_dim,
        })
    }

    /// Keeps the items at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Dataset {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            classes: self.classes.clone(),
            feature_dim: self.feature_dim,
        }
    }
}

impl<T> Dataset<T> {
    pub fn items(&self) -> &[Item<T>] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    /// Frame dimension for speech sets, pixel count for image sets.
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn data(&self, index: usize) -> &T {
        &self.items[index].data
    }

    pub fn id(&self, index: usize) -> &str {
        &self.items[index].id
    }

    pub fn label(&self, index: usize) -> Option<usize> {
        self.items[index].label
    }

    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.id.as_str()).collect()
    }

    pub fn has_labels(&self) -> bool {
        !self.items.is_empty() && self.items.iter().all(|i| i.label.is_some())
    }

    pub fn class_name(&self, class: usize) -> Option<&str> {
        self.classes.get(class).map(String::as_str)
    }

    /// Position of the item with this id.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.items.iter().position(|i| i.id == id)
    }

    pub fn index_by_id(&self) -> BTreeMap<&str, usize> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, item)| (item.id.as_str(), i))
            .collect()
    }

    /// Item positions grouped by label; unlabelled items are skipped.
    pub fn positions_by_label(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.classes.len()];
        for (i, item) in self.items.iter().enumerate() {
            if let Some(l) = item.label {
                groups[l].push(i);
            }
        }
        groups
    }
}

impl<T: Clone> Dataset<T> {
    /// Same items in the same order with every label (and the class list) removed.
    pub fn strip_labels(&self) -> Self {
        Dataset {
            items: self
                .items
                .iter()
                .map(|item| Item {
                    id: item.id.clone(),
                    data: item.data.clone(),
                    label: None,
                })
                .collect(),
            classes: Vec::new(),
            feature_dim: self.feature_dim,
        }
    }
}

/// Free-function form of [`Dataset::strip_labels`].
pub fn strip_labels<T: Clone>(set: &Dataset<T>) -> Dataset<T> {
    set.strip_labels()
}

/// Ground-truth correspondence between spoken classes and visual classes.
///
/// Only used to build oracle pairs, sample episodes and score queries; the
/// trainers never see it.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLabels {
    /// Spoken class names, indexed by speech label.
    pub class_names: Vec<String>,
    /// Visual class names, indexed by image label.
    pub image_class_names: Vec<String>,
    /// Visual class shared by each spoken class.
    pub speech_to_image: Vec<usize>,
    pub speech_to_class: BTreeMap<String, usize>,
    pub image_to_class: BTreeMap<String, usize>,
}

impl PairLabels {
    /// The digit class structure: spoken "zero" and "oh" both name visual class 0.
    pub fn digits() -> Self {
        let class_names: Vec<String> = DIGIT_WORDS.iter().map(|w| w.to_string()).collect();
        let speech_to_image = DIGIT_WORDS.iter().map(|w| digit_value(w)).collect();
        PairLabels {
            class_names,
            image_class_names: (0..10).map(|d| d.to_string()).collect(),
            speech_to_image,
            speech_to_class: BTreeMap::new(),
            image_to_class: BTreeMap::new(),
        }
    }

    /// Attaches per-item class maps taken from labelled sets.
    pub fn with_items(mut self, speech: &SpeechSet, images: &ImageSet) -> Result<Self> {
        for item in speech.items() {
            if let Some(l) = item.label {
                let name = &speech.classes()[l];
                let class = self.speech_class(name)?;
                self.speech_to_class.insert(item.id.clone(), class);
            }
        }
        for item in images.items() {
            if let Some(l) = item.label {
                let name = &images.classes()[l];
                let class = self
                    .image_class_names
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::Argument(format!("unknown visual class {name:?}")))?;
                self.image_to_class.insert(item.id.clone(), class);
            }
        }
        Ok(self)
    }

    pub fn speech_class(&self, name: &str) -> Result<usize> {
        self.class_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Argument(format!("unknown spoken class {name:?}")))
    }

    pub fn visual_class_of(&self, speech_class: usize) -> Result<usize> {
        self.speech_to_image
            .get(speech_class)
            .copied()
            .ok_or_else(|| Error::Argument(format!("unknown spoken class index {speech_class}")))
    }

    pub fn num_visual_classes(&self) -> usize {
        self.image_class_names.len()
    }

    /// Checks that every mapped id exists in its set.
    pub fn validate(&self, speech: &SpeechSet, images: &ImageSet) -> Result<()> {
        let s = speech.index_by_id();
        let v = images.index_by_id();
        if let Some(id) = self.speech_to_class.keys().find(|id| !s.contains_key(id.as_str())) {
            return Err(Error::Argument(format!("labelled speech id {id:?} not in set")));
        }
        if let Some(id) = self.image_to_class.keys().find(|id| !v.contains_key(id.as_str())) {
            return Err(Error::Argument(format!("labelled image id {id:?} not in set")));
        }
        Ok(())
    }
}

fn digit_value(word: &str) -> usize {
    match word {
        "zero" | "oh" => 0,
        "one" => 1,
        "two" => 2,
        "three" => 3,
        "four" => 4,
        "five" => 5,
        "six" => 6,
        "seven" => 7,
        "eight" => 8,
        "nine" => 9,
        _ => unreachable!("not a digit word: {word}"),
    }
}

/// Reads `id<TAB>class` lines into labels for an existing set.
pub fn parse_label_table(text: &str) -> Result<Vec<(String, String)>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, class) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("label table line {} has no tab", n + 1)))?;
        rows.push((id.to_string(), class.to_string()));
    }
    Ok(rows)
}

pub fn format_label_table<T>(set: &Dataset<T>) -> String {
    let mut out = String::new();
    for item in set.items() {
        if let Some(l) = item.label {
            out.push_str(&item.id);
            out.push('\t');
            out.push_str(&set.classes()[l]);
            out.push('\n');
        }
    }
    out
}

/// Attaches labels from an `id<TAB>class` table; class order follows first appearance
/// unless `classes` is given.
pub fn attach_labels<T: Sample>(
    set: &Dataset<T>,
    rows: &[(String, String)],
    classes: Option<Vec<String>>,
) -> Result<Dataset<T>> {
    let mut classes = classes.unwrap_or_default();
    let index = set.index_by_id();
    let mut labels = vec![None; set.len()];
    for (id, class) in rows {
        let pos = *index
            .get(id.as_str())
            .ok_or_else(|| Error::Argument(format!("label for unknown id {id:?}")))?;
        let c = match classes.iter().position(|c| c == class) {
            Some(c) => c,
            None => {
                classes.push(class.clone());
                classes.len() - 1
            }
        };
        labels[pos] = Some(c);
    }
    let items = set
        .items()
        .iter()
        .zip(labels)
        .map(|(item, label)| Item {
            id: item.id.clone(),
            data: item.data.clone(),
            label,
        })
        .collect();
    Dataset::new(items, classes, set.feature_dim())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labelled() -> ImageSet {
        let items = (0..3)
            .map(|i| Item {
                id: format!("v{i}"),
                data: ImageGrid::zeros(),
                label: Some(i % 2),
            })
            .collect();
        Dataset::new(items, vec!["a".into(), "b".into()], IMAGE_PIXELS).unwrap()
    }

    #[test]
    fn strip_removes_labels_and_keeps_order() {
        let set = labelled();
        let stripped = strip_labels(&set);
        assert_eq!(stripped.len(), 3);
        assert_eq!(stripped.ids(), vec!["v0", "v1", "v2"]);
        assert!(stripped.items().iter().all(|i| i.label.is_none()));
    }

    #[test]
    fn strip_is_idempotent() {
        let once = strip_labels(&labelled());
        assert_eq!(strip_labels(&once), once);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let items = vec![
            Item { id: "x".into(), data: ImageGrid::zeros(), label: None },
            Item { id: "x".into(), data: ImageGrid::zeros(), label: None },
        ];
        assert!(matches!(
            Dataset::new(items, vec![], IMAGE_PIXELS),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn frame_sequence_rejects_partial_frames() {
        assert!(matches!(FrameSequence::new(3, vec![0.0; 4]), Err(Error::Shape(_))));
        assert!(matches!(FrameSequence::new(3, vec![]), Err(Error::EmptyItem(_))));
        let seq = FrameSequence::new(2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.frame(1), &[3.0, 4.0]);
    }

    #[test]
    fn image_rejects_out_of_range_pixels() {
        let mut px = vec![0.0; IMAGE_PIXELS];
        px[5] = 1.5;
        assert!(ImageGrid::new(px).is_err());
        assert!(matches!(ImageGrid::new(vec![0.0; 10]), Err(Error::Shape(_))));
    }

    #[test]
    fn digit_labels_collapse_zero_and_oh() {
        let labels = PairLabels::digits();
        let zero = labels.speech_class("zero").unwrap();
        let oh = labels.speech_class("oh").unwrap();
        assert_eq!(labels.visual_class_of(zero).unwrap(), 0);
        assert_eq!(labels.visual_class_of(oh).unwrap(), 0);
        assert_eq!(labels.class_names.len(), 11);
    }

    #[test]
    fn label_table_round_trip() {
        let set = labelled();
        let text = format_label_table(&set);
        let rows = parse_label_table(&text).unwrap();
        let relabelled = attach_labels(&set.strip_labels(), &rows, None).unwrap();
        assert_eq!(relabelled, set);
    }
}
