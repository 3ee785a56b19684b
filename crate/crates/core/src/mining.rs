//! Training pairs from unlabelled data: cross-modal pairs through a support-set
//! pivot, within-modality positives, and hard negatives.
//!
//! Everything here works on item representations (raw inputs or embeddings)
//! together with a [`Metric`] over them, so the same code serves the transfer
//! and raw-feature arms.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ImageSet, PairLabels, SpeechSet};
use crate::error::{Error, Result};
use crate::features::Metric;

/// Ids plus aligned representations of one modality's items.
#[derive(Debug)]
pub struct Pool<'a, R> {
    ids: &'a [String],
    reps: &'a [R],
}

impl<R> Clone for Pool<'_, R> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<R> Copy for Pool<'_, R> {}

impl<'a, R> Pool<'a, R> {
    pub fn new(ids: &'a [String], reps: &'a [R]) -> Result<Self> {
        if ids.len() != reps.len() {
            return Err(Error::Argument(format!(
                "{} ids for {} representations",
                ids.len(),
                reps.len()
            )));
        }
        Ok(Pool { ids, reps })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, i: usize) -> &'a str {
        &self.ids[i]
    }

    pub fn rep(&self, i: usize) -> &'a R {
        &self.reps[i]
    }

    pub fn ids(&self) -> &'a [String] {
        self.ids
    }

    pub fn reps(&self) -> &'a [R] {
        self.reps
    }
}

/// A pool item's nearest support item.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub item_id: String,
    pub item_index: usize,
    pub support_index: usize,
    pub support_class: usize,
    pub distance: f64,
}

/// One speech-image support pair. `class` is the spoken class and
/// `visual_class` the digit shown, so "zero" and "oh" share visual class 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportPair {
    pub speech_id: String,
    pub image_id: String,
    pub class: usize,
    pub visual_class: usize,
}

/// `shots` pairs for each of `classes` spoken classes, grouped by class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportSet {
    pairs: Vec<SupportPair>,
    classes: usize,
    shots: usize,
}

impl SupportSet {
    pub fn new(pairs: Vec<SupportPair>, classes: usize, shots: usize) -> Result<Self> {
        if classes == 0 || shots == 0 {
            return Err(Error::Argument("support set needs at least one class and one shot".into()));
        }
        let mut tally = vec![0usize; classes];
        for p in &pairs {
            if p.class >= classes {
                return Err(Error::Argument(format!("support class {} out of range", p.class)));
            }
            tally[p.class] += 1;
        }
        if tally.iter().any(|&t| t != shots) {
            return Err(Error::Argument(format!("support set must hold exactly {shots} pairs per class")));
        }
        let speech: BTreeSet<&str> = pairs.iter().map(|p| p.speech_id.as_str()).collect();
        let images: BTreeSet<&str> = pairs.iter().map(|p| p.image_id.as_str()).collect();
        if speech.len() != pairs.len() || images.len() != pairs.len() {
            return Err(Error::Argument("support items must be distinct".into()));
        }
        Ok(SupportSet { pairs, classes, shots })
    }

    pub fn pairs(&self) -> &[SupportPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn speech_ids(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.speech_id.as_str()).collect()
    }

    pub fn image_ids(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.image_id.as_str()).collect()
    }

    pub fn visual_classes(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.visual_class).collect()
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.pairs
            .iter()
            .flat_map(|p| [p.speech_id.as_str(), p.image_id.as_str()])
            .collect()
    }
}

/// Draws `shots` pairs per spoken class from labelled sets, skipping any id
/// in `exclude`. Images are never reused across pairs.
pub fn sample_support(
    speech: &SpeechSet,
    images: &ImageSet,
    labels: &PairLabels,
    shots: usize,
    exclude: &BTreeSet<String>,
    rng: &mut impl Rng,
) -> Result<SupportSet> {
    if !speech.has_labels() || !images.has_labels() {
        return Err(Error::Argument("support sampling needs labelled items".into()));
    }
    let speech_by_class = speech.positions_by_label();
    let image_by_class = images.positions_by_label();
    let mut used_images = BTreeSet::new();
    let mut pairs = Vec::new();
    for class in 0..labels.class_names.len() {
        let visual = labels.visual_class_of(class)?;
        let words: Vec<usize> = speech_by_class
            .get(class)
            .map(|v| v.iter().copied().filter(|&i| !exclude.contains(speech.id(i))).collect())
            .unwrap_or_default();
        let pics: Vec<usize> = image_by_class
            .get(visual)
            .map(|v| {
                v.iter()
                    .copied()
                    .filter(|&i| !exclude.contains(images.id(i)) && !used_images.contains(&i))
                    .collect()
            })
            .unwrap_or_default();
        if words.len() < shots || pics.len() < shots {
            return Err(Error::Argument(format!(
                "class {} has too few items for {shots} support pairs",
                labels.class_names[class]
            )));
        }
        let w: Vec<usize> = words.choose_multiple(rng, shots).copied().collect();
        let p: Vec<usize> = pics.choose_multiple(rng, shots).copied().collect();
        for (&wi, &pi) in w.iter().zip(&p) {
            used_images.insert(pi);
            pairs.push(SupportPair {
                speech_id: speech.id(wi).to_string(),
                image_id: images.id(pi).to_string(),
                class,
                visual_class: visual,
            });
        }
    }
    SupportSet::new(pairs, labels.class_names.len(), shots)
}

fn closest<'c, R: 'c, M>(query: &R, candidates: impl Iterator<Item = (usize, &'c R)>, metric: &M) -> Result<Option<(usize, f64)>>
where
    M: Metric<R> + ?Sized,
{
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates {
        let d = metric.distance(query, c)?;
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    Ok(best)
}

/// Assigns each pool item to its nearest support item (ties to the lowest
/// support index). `support_classes[j]` is recorded as the item's class.
pub fn assign_to_support<R, M>(pool: Pool<'_, R>, support: &[R], support_classes: &[usize], metric: &M) -> Result<Vec<Assignment>>
where
    R: Sync,
    M: Metric<R> + Sync + ?Sized,
{
    if support.is_empty() {
        return Err(Error::Argument("cannot assign to an empty support set".into()));
    }
    if support.len() != support_classes.len() {
        return Err(Error::Argument("one class per support item required".into()));
    }
    (0..pool.len())
        .into_par_iter()
        .map(|i| {
            let (j, d) = closest(pool.rep(i), support.iter().enumerate(), metric)?.expect("support is non-empty");
            Ok(Assignment {
                item_id: pool.id(i).to_string(),
                item_index: i,
                support_index: j,
                support_class: support_classes[j],
                distance: d,
            })
        })
        .collect()
}

/// A cross-modal training pair and the support pair that linked it.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MinedPair {
    pub speech_id: String,
    pub image_id: String,
    pub pivot_index: usize,
    pub pivot_class: usize,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Pairs speech and image items that share a nearest support pair.
///
/// Each support pair's two buckets are shuffled independently and zipped to
/// the shorter length. A support pair with an empty bucket contributes itself.
pub fn mine_cross_modal_pairs(
    speech_assign: &[Assignment],
    image_assign: &[Assignment],
    support: &SupportSet,
    seed: u64,
) -> Result<Vec<MinedPair>> {
    let n = support.len();
    let mut speech_buckets: Vec<Vec<&str>> = vec![Vec::new(); n];
    let mut image_buckets: Vec<Vec<&str>> = vec![Vec::new(); n];
    for (assign, buckets) in [(speech_assign, &mut speech_buckets), (image_assign, &mut image_buckets)] {
        let mut ordered: Vec<&Assignment> = assign.iter().collect();
        ordered.sort_by_key(|a| a.item_index);
        for a in ordered {
            if a.support_index >= n {
                return Err(Error::Argument(format!(
                    "assignment to support index {} of {n}",
                    a.support_index
                )));
            }
            buckets[a.support_index].push(&a.item_id);
        }
    }
    let mut pairs = Vec::new();
    for (i, pair) in support.pairs().iter().enumerate() {
        let (mut a, mut v) = (speech_buckets[i].clone(), image_buckets[i].clone());
        if a.is_empty() || v.is_empty() {
            pairs.push(MinedPair {
                speech_id: pair.speech_id.clone(),
                image_id: pair.image_id.clone(),
                pivot_index: i,
                pivot_class: pair.visual_class,
            });
            continue;
        }
        a.shuffle(&mut stream_rng(seed, 2 * i as u64));
        v.shuffle(&mut stream_rng(seed, 2 * i as u64 + 1));
        for (s, img) in a.into_iter().zip(v) {
            pairs.push(MinedPair {
                speech_id: s.to_string(),
                image_id: img.to_string(),
                pivot_index: i,
                pivot_class: pair.visual_class,
            });
        }
    }
    Ok(pairs)
}

/// An item's nearest other item in the same modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Positive {
    pub item: usize,
    pub positive: usize,
    pub distance: f64,
}

/// Pairs every item with its nearest neighbour other than itself (ties to the
/// lowest index).
pub fn mine_within_modality_positives<R, M>(items: &[R], metric: &M) -> Result<Vec<Positive>>
where
    R: Sync,
    M: Metric<R> + Sync + ?Sized,
{
    if items.len() < 2 {
        return Err(Error::Argument("positive mining needs at least 2 items".into()));
    }
    (0..items.len())
        .into_par_iter()
        .map(|i| {
            let others = items.iter().enumerate().filter(|&(j, _)| j != i);
            let (positive, distance) = closest(&items[i], others, metric)?.expect("at least one other item");
            Ok(Positive {
                item: i,
                positive,
                distance,
            })
        })
        .collect()
}

/// How many other-class candidates to consider per anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KSample {
    All,
    Count(usize),
}

impl Default for KSample {
    fn default() -> Self {
        KSample::Count(100)
    }
}

/// Pool items with the pivot class each was assigned.
#[derive(Clone, Debug)]
pub struct ClassedPool<'a, R> {
    pool: Pool<'a, R>,
    classes: Vec<usize>,
    by_id: HashMap<&'a str, usize>,
}

impl<'a, R> ClassedPool<'a, R> {
    pub fn new(pool: Pool<'a, R>, classes: Vec<usize>) -> Result<Self> {
        if classes.len() != pool.len() {
            return Err(Error::Argument("one class per pool item required".into()));
        }
        let by_id = pool.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        Ok(ClassedPool { pool, classes, by_id })
    }

    /// Classes taken from assignments, indexed by `item_index`.
    pub fn from_assignments(pool: Pool<'a, R>, assign: &[Assignment]) -> Result<Self> {
        let mut classes = vec![usize::MAX; pool.len()];
        for a in assign {
            *classes
                .get_mut(a.item_index)
                .ok_or_else(|| Error::Argument("assignment outside the pool".into()))? = a.support_class;
        }
        if classes.contains(&usize::MAX) {
            return Err(Error::Argument("every pool item needs an assignment".into()));
        }
        Self::new(pool, classes)
    }

    pub fn pool(&self) -> Pool<'a, R> {
        self.pool
    }

    pub fn class(&self, i: usize) -> usize {
        self.classes[i]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }
}

/// Index of the closest item whose class differs from `anchor_class`, among
/// `k_sample` candidates drawn without replacement (or all of them).
pub fn hard_negative<R, M>(
    anchor: &R,
    anchor_class: usize,
    pool: &ClassedPool<'_, R>,
    metric: &M,
    k_sample: KSample,
    rng: &mut impl Rng,
) -> Result<usize>
where
    M: Metric<R> + ?Sized,
{
    let others: Vec<usize> = (0..pool.classes.len())
        .filter(|&i| pool.classes[i] != anchor_class)
        .collect();
    if others.is_empty() {
        return Err(Error::NoNegative(format!("no item outside class {anchor_class}")));
    }
    let mut chosen: Vec<usize> = match k_sample {
        KSample::Count(k) if k < others.len() => index::sample(rng, others.len(), k).into_iter().map(|j| others[j]).collect(),
        _ => others,
    };
    chosen.sort_unstable();
    let (i, _) = closest(anchor, chosen.iter().map(|&i| (i, pool.pool.rep(i))), metric)?
        .ok_or_else(|| Error::NoNegative("empty candidate sample".into()))?;
    Ok(i)
}

/// Hard negatives in both modalities for one mined pair. Returns
/// `(speech negative id, image negative id)`.
pub fn mine_hard_negatives<RA, RV, MA, MV>(
    anchor: &MinedPair,
    speech: &ClassedPool<'_, RA>,
    images: &ClassedPool<'_, RV>,
    speech_metric: &MA,
    image_metric: &MV,
    k_sample: KSample,
    seed: u64,
) -> Result<(String, String)>
where
    MA: Metric<RA> + ?Sized,
    MV: Metric<RV> + ?Sized,
{
    let a = speech
        .position(&anchor.speech_id)
        .ok_or_else(|| Error::Argument(format!("anchor {} not in the speech pool", anchor.speech_id)))?;
    let v = images
        .position(&anchor.image_id)
        .ok_or_else(|| Error::Argument(format!("anchor {} not in the image pool", anchor.image_id)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let an = hard_negative(speech.pool.rep(a), anchor.pivot_class, speech, speech_metric, k_sample, &mut rng)?;
    let vn = hard_negative(images.pool.rep(v), anchor.pivot_class, images, image_metric, k_sample, &mut rng)?;
    Ok((speech.pool.id(an).to_string(), images.pool.id(vn).to_string()))
}

/// Hard negatives when both modalities live in one embedding space: the image
/// negative is the candidate closest to the speech anchor and the speech
/// negative the one closest to the anchor image, so each negative is hard for
/// the cross-modal distance it enters.
pub fn mine_shared_space_negatives<R, M>(
    anchor: &MinedPair,
    speech: &ClassedPool<'_, R>,
    images: &ClassedPool<'_, R>,
    metric: &M,
    k_sample: KSample,
    seed: u64,
) -> Result<(String, String)>
where
    M: Metric<R> + ?Sized,
{
    let a = speech
        .position(&anchor.speech_id)
        .ok_or_else(|| Error::Argument(format!("anchor {} not in the speech pool", anchor.speech_id)))?;
    let v = images
        .position(&anchor.image_id)
        .ok_or_else(|| Error::Argument(format!("anchor {} not in the image pool", anchor.image_id)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let an = hard_negative(images.pool.rep(v), anchor.pivot_class, speech, metric, k_sample, &mut rng)?;
    let vn = hard_negative(speech.pool.rep(a), anchor.pivot_class, images, metric, k_sample, &mut rng)?;
    Ok((speech.pool.id(an).to_string(), images.pool.id(vn).to_string()))
}

/// Class-correct pairs from true labels: per spoken class, shuffled speech and
/// image items of the matching visual class zipped to the shorter length.
pub fn mine_oracle_pairs(speech: &SpeechSet, images: &ImageSet, labels: &PairLabels, seed: u64) -> Result<Vec<MinedPair>> {
    if !speech.has_labels() || !images.has_labels() {
        return Err(Error::Argument("oracle pairs need labels".into()));
    }
    let speech_by_class = speech.positions_by_label();
    let image_by_class = images.positions_by_label();
    let mut pairs = Vec::new();
    for class in 0..labels.class_names.len() {
        let visual = labels.visual_class_of(class)?;
        let mut a = speech_by_class.get(class).cloned().unwrap_or_default();
        let mut v = image_by_class.get(visual).cloned().unwrap_or_default();
        if a.is_empty() || v.is_empty() {
            return Err(Error::Argument(format!(
                "class {} has no items in one modality",
                labels.class_names[class]
            )));
        }
        a.shuffle(&mut stream_rng(seed, 2 * class as u64));
        v.shuffle(&mut stream_rng(seed, 2 * class as u64 + 1));
        for (s, i) in a.into_iter().zip(v) {
            pairs.push(MinedPair {
                speech_id: speech.id(s).to_string(),
                image_id: images.id(i).to_string(),
                pivot_index: class,
                pivot_class: visual,
            });
        }
    }
    Ok(pairs)
}

/// Fraction of pairs whose two items share a visual class under the
/// withheld labels. Only used for diagnostics.
pub fn class_correct_fraction(pairs: &[MinedPair], speech: &SpeechSet, images: &ImageSet, labels: &PairLabels) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Argument("no pairs".into()));
    }
    let s_idx = speech.index_by_id();
    let v_idx = images.index_by_id();
    let mut correct = 0;
    for p in pairs {
        let si = *s_idx
            .get(p.speech_id.as_str())
            .ok_or_else(|| Error::Argument(format!("unknown speech id {}", p.speech_id)))?;
        let vi = *v_idx
            .get(p.image_id.as_str())
            .ok_or_else(|| Error::Argument(format!("unknown image id {}", p.image_id)))?;
        let (Some(sc), Some(vc)) = (speech.label(si), images.label(vi)) else {
            return Err(Error::Argument("diagnostics need labelled sets".into()));
        };
        if labels.visual_class_of(sc)? == vc {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

/// Provenance stored next to a pair manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSidecar {
    pub seed: u64,
    pub metric: String,
    pub pairs: usize,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

/// `speech_id TAB image_id TAB pivot_index TAB pivot_class`, one per line.
pub fn format_pair_manifest(pairs: &[MinedPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", p.speech_id, p.image_id, p.pivot_index, p.pivot_class));
    }
    out
}

pub fn parse_pair_manifest(text: &str) -> Result<Vec<MinedPair>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Format(format!("pair manifest line {}: {line:?}", n + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(MinedPair {
                speech_id: f[0].to_string(),
                image_id: f[1].to_string(),
                pivot_index: f[2].parse().map_err(|_| bad())?,
                pivot_class: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_paired_digits;
    use crate::features::{CosineMetric, DtwMetric, PixelMetric};
    use rand::Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("x{i}")).collect()
    }

    fn vecs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(1..5) as f64).collect())
            .collect()
    }

    #[test]
    fn self_assignment_and_empty_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reps = vecs(&mut rng, 20, 3);
        let ids = ids(20);
        let classes: Vec<usize> = (0..20).map(|i| i % 4).collect();
        let a = assign_to_support(Pool::new(&ids, &reps).unwrap(), &reps, &classes, &CosineMetric).unwrap();
        for x in &a {
            assert_eq!(x.distance, 0.0);
            // duplicated vectors go to the lowest index among equals
            let first = reps.iter().position(|r| *r == reps[x.item_index]).unwrap();
            assert_eq!(x.support_index, first);
        }
        let empty: Vec<Vec<f64>> = vec![];
        let none: Vec<String> = vec![];
        assert!(assign_to_support(Pool::new(&none, &empty).unwrap(), &reps, &classes, &CosineMetric)
            .unwrap()
            .is_empty());
        assert!(assign_to_support(Pool::new(&ids, &reps).unwrap(), &empty, &[], &CosineMetric).is_err());
    }

    fn support(n: usize) -> SupportSet {
        let pairs = (0..n)
            .map(|i| SupportPair {
                speech_id: format!("sa{i}"),
                image_id: format!("sv{i}"),
                class: i,
                visual_class: i,
            })
            .collect();
        SupportSet::new(pairs, n, 1).unwrap()
    }

    fn assigned(ids: &[&str], to: &[usize]) -> Vec<Assignment> {
        ids.iter()
            .zip(to)
            .enumerate()
            .map(|(i, (id, &s))| Assignment {
                item_id: id.to_string(),
                item_index: i,
                support_index: s,
                support_class: s,
                distance: 0.1,
            })
            .collect()
    }

    #[test]
    fn zipping_and_fallback() {
        let s = support(3);
        let a = assigned(&["a1", "a2", "a3", "a4"], &[0, 1, 1, 1]);
        let v = assigned(&["v1", "v2", "v3", "v4", "v5", "v6"], &[0, 1, 1, 1, 1, 1]);
        let pairs = mine_cross_modal_pairs(&a, &v, &s, 9).unwrap();
        assert_eq!(pairs[0], MinedPair { speech_id: "a1".into(), image_id: "v1".into(), pivot_index: 0, pivot_class: 0 });
        let p1: Vec<&MinedPair> = pairs.iter().filter(|p| p.pivot_index == 1).collect();
        assert_eq!(p1.len(), 3);
        let imgs: BTreeSet<&str> = p1.iter().map(|p| p.image_id.as_str()).collect();
        assert_eq!(imgs.len(), 3);
        let p2: Vec<&MinedPair> = pairs.iter().filter(|p| p.pivot_index == 2).collect();
        assert_eq!(p2.len(), 1);
        assert_eq!((p2[0].speech_id.as_str(), p2[0].image_id.as_str()), ("sa2", "sv2"));
        assert_eq!(pairs, mine_cross_modal_pairs(&a, &v, &s, 9).unwrap());
    }

    #[test]
    fn positives_and_ties() {
        let items = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let p = mine_within_modality_positives(&items, &CosineMetric).unwrap();
        assert_eq!((p[0].positive, p[1].positive), (1, 0));
        let items = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]];
        let p = mine_within_modality_positives(&items, &CosineMetric).unwrap();
        assert_eq!(p[3].positive, 1);
        assert_eq!(p[1].positive, 2);
        assert!(mine_within_modality_positives(&items[..1], &CosineMetric).is_err());
    }

    #[test]
    fn negatives_contract() {
        let reps = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let ids = vec!["a".to_string(), "b".to_string()];
        let pool = ClassedPool::new(Pool::new(&ids, &reps).unwrap(), vec![0, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(hard_negative(&reps[0], 0, &pool, &CosineMetric, KSample::All, &mut rng).unwrap(), 1);
        let same = ClassedPool::new(Pool::new(&ids, &reps).unwrap(), vec![3, 3]).unwrap();
        assert!(matches!(
            hard_negative(&reps[0], 3, &same, &CosineMetric, KSample::All, &mut rng),
            Err(Error::NoNegative(_))
        ));
        let anchor = MinedPair { speech_id: "a".into(), image_id: "b".into(), pivot_index: 0, pivot_class: 0 };
        let (an, vn) = mine_hard_negatives(&anchor, &pool, &pool, &CosineMetric, &CosineMetric, KSample::All, 1).unwrap();
        assert_eq!((an.as_str(), vn.as_str()), ("b", "b"));
    }

    #[test]
    fn oracle_pairs_are_class_correct() {
        let (speech, images, labels) = synth_paired_digits(3, 0.2, 4).unwrap();
        let pairs = mine_oracle_pairs(&speech, &images, &labels, 1).unwrap();
        assert_eq!(pairs.len(), 33);
        assert_eq!(class_correct_fraction(&pairs, &speech, &images, &labels).unwrap(), 1.0);
        let zero = labels.speech_class("zero").unwrap();
        let oh = labels.speech_class("oh").unwrap();
        assert!(pairs.iter().filter(|p| p.pivot_index == zero || p.pivot_index == oh).all(|p| p.pivot_class == 0));
        let (s1, i1, l1) = synth_paired_digits(1, 0.0, 4).unwrap();
        let one = mine_oracle_pairs(&s1, &i1, &l1, 0).unwrap();
        assert_eq!(one.len(), 11);
    }

    #[test]
    fn noise_free_mining_is_exact() {
        let (speech, images, labels) = synth_paired_digits(8, 0.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let support = sample_support(&speech, &images, &labels, 1, &BTreeSet::new(), &mut rng).unwrap();
        let s_idx = speech.index_by_id();
        let v_idx = images.index_by_id();
        let s_sup: Vec<_> = support.speech_ids().iter().map(|id| speech.data(s_idx[id]).clone()).collect();
        let v_sup: Vec<_> = support.image_ids().iter().map(|id| images.data(v_idx[id]).clone()).collect();
        let classes = support.visual_classes();
        let s_ids: Vec<String> = speech.ids().iter().map(|s| s.to_string()).collect();
        let s_reps: Vec<_> = speech.items().iter().map(|i| i.data.clone()).collect();
        let v_ids: Vec<String> = images.ids().iter().map(|s| s.to_string()).collect();
        let v_reps: Vec<_> = images.items().iter().map(|i| i.data.clone()).collect();
        let sa = assign_to_support(Pool::new(&s_ids, &s_reps).unwrap(), &s_sup, &classes, &DtwMetric).unwrap();
        let va = assign_to_support(Pool::new(&v_ids, &v_reps).unwrap(), &v_sup, &classes, &PixelMetric).unwrap();
        let pairs = mine_cross_modal_pairs(&sa, &va, &support, 5).unwrap();
        assert_eq!(class_correct_fraction(&pairs, &speech, &images, &labels).unwrap(), 1.0);
    }

    #[test]
    fn manifest_round_trip() {
        let pairs = vec![
            MinedPair { speech_id: "a1".into(), image_id: "v9".into(), pivot_index: 3, pivot_class: 2 },
            MinedPair { speech_id: "a2".into(), image_id: "v8".into(), pivot_index: 54, pivot_class: 0 },
        ];
        let text = format_pair_manifest(&pairs);
        assert_eq!(text, "a1\tv9\t3\t2\na2\tv8\t54\t0\n");
        assert_eq!(parse_pair_manifest(&text).unwrap(), pairs);
        assert!(matches!(parse_pair_manifest("a\tb\tc\n"), Err(Error::Format(_))));
    }

    #[test]
    fn support_sampling_contract() {
        let (speech, images, labels) = synth_paired_digits(10, 0.1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_support(&speech, &images, &labels, 5, &BTreeSet::new(), &mut rng).unwrap();
        assert_eq!(s.len(), 55);
        for p in s.pairs() {
            let si = speech.position(&p.speech_id).unwrap();
            let vi = images.position(&p.image_id).unwrap();
            assert_eq!(speech.label(si), Some(p.class));
            assert_eq!(images.label(vi), Some(p.visual_class));
            assert_eq!(labels.visual_class_of(p.class).unwrap(), p.visual_class);
        }
        // zero and oh together need ten distinct 0-images
        let (speech, images, labels) = synth_paired_digits(9, 0.1, 1).unwrap();
        assert!(sample_support(&speech, &images, &labels, 5, &BTreeSet::new(), &mut rng).is_err());
    }
}
