//! Few-shot episodes, direct and indirect speech-to-image matching, and
//! unimodal 1-NN classification.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageSet, PairLabels, SpeechSet};
use crate::error::{Error, Result};
use crate::features::{nearest, Metric};
use crate::mining::{sample_support, SupportSet};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub speech_id: String,
    pub speech_class: usize,
    pub visual_class: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchItem {
    pub image_id: String,
    pub visual_class: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub id: usize,
    pub support: SupportSet,
    pub matching: Vec<MatchItem>,
    pub queries: Vec<Query>,
}

impl Episode {
    pub fn matching_ids(&self) -> Vec<&str> {
        self.matching.iter().map(|m| m.image_id.as_str()).collect()
    }

    pub fn query_ids(&self) -> Vec<&str> {
        self.queries.iter().map(|q| q.speech_id.as_str()).collect()
    }
}

/// Episode shape: `classes` spoken classes with `shots` pairs each, one
/// matching image per visual class, and `queries` spoken queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub classes: usize,
    pub shots: usize,
    pub matching: usize,
    pub queries: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            classes: 11,
            shots: 5,
            matching: 10,
            queries: 10,
        }
    }
}

/// Samples one episode from labelled test sets.
pub fn sample_episode(
    speech: &SpeechSet,
    images: &ImageSet,
    labels: &PairLabels,
    spec: &EpisodeSpec,
    id: usize,
    seed: u64,
) -> Result<Episode> {
    if spec.classes != labels.class_names.len() {
        return Err(Error::Argument(format!(
            "episodes use all {} spoken classes, got L = {}",
            labels.class_names.len(),
            spec.classes
        )));
    }
    if spec.matching != labels.num_visual_classes() {
        return Err(Error::Argument(format!(
            "matching set holds one image per visual class ({}), got N = {}",
            labels.num_visual_classes(),
            spec.matching
        )));
    }
    if spec.queries == 0 {
        return Err(Error::Argument("an episode needs at least one query".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let support = sample_support(speech, images, labels, spec.shots, &BTreeSet::new(), &mut rng)?;
    let used: BTreeSet<String> = support.ids().into_iter().map(String::from).collect();

    let image_by_class = images.positions_by_label();
    let mut matching = Vec::with_capacity(spec.matching);
    for visual in 0..spec.matching {
        let free: Vec<usize> = image_by_class
            .get(visual)
            .map(|v| v.iter().copied().filter(|&i| !used.contains(images.id(i))).collect())
            .unwrap_or_default();
        let &pick = free
            .choose(&mut rng)
            .ok_or_else(|| Error::Argument(format!("no unused image of visual class {visual}")))?;
        matching.push(MatchItem {
            image_id: images.id(pick).to_string(),
            visual_class: visual,
        });
    }

    let mut free_speech: Vec<Vec<usize>> = speech
        .positions_by_label()
        .into_iter()
        .map(|v| v.into_iter().filter(|&i| !used.contains(speech.id(i))).collect())
        .collect();
    free_speech.resize(spec.classes, Vec::new());
    let mut queries = Vec::with_capacity(spec.queries);
    for _ in 0..spec.queries {
        let open: Vec<usize> = (0..spec.classes).filter(|&c| !free_speech[c].is_empty()).collect();
        if open.is_empty() {
            return Err(Error::Argument("not enough unused spoken items for the queries".into()));
        }
        let mut class = rng.gen_range(0..spec.classes);
        if free_speech[class].is_empty() {
            class = open[rng.gen_range(0..open.len())];
        }
        let k = rng.gen_range(0..free_speech[class].len());
        let item = free_speech[class].swap_remove(k);
        queries.push(Query {
            speech_id: speech.id(item).to_string(),
            speech_class: class,
            visual_class: labels.visual_class_of(class)?,
        });
    }
    Ok(Episode {
        id,
        support,
        matching,
        queries,
    })
}

/// `count` episodes whose seeds derive from `seed` and the episode index.
pub fn sample_episodes(
    speech: &SpeechSet,
    images: &ImageSet,
    labels: &PairLabels,
    spec: &EpisodeSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let s = rng.gen::<u64>();
            sample_episode(speech, images, labels, spec, i, s)
        })
        .collect()
}

/// Nearest matching-set item to the query in a shared space.
pub fn match_direct<R, M>(query: &R, matching: &[&R], metric: &M) -> Result<usize>
where
    M: Metric<R> + ?Sized,
{
    Ok(nearest(query, matching.iter().copied(), metric)?.0)
}

/// Two unimodal steps: the nearest support word to the query, then the
/// nearest matching image to that word's paired support image.
pub fn match_indirect<RA, RV, MA, MV>(
    query: &RA,
    support_speech: &[&RA],
    support_images: &[&RV],
    matching: &[&RV],
    speech_metric: &MA,
    image_metric: &MV,
) -> Result<usize>
where
    MA: Metric<RA> + ?Sized,
    MV: Metric<RV> + ?Sized,
{
    if support_speech.len() != support_images.len() {
        return Err(Error::Argument("support modalities differ in length".into()));
    }
    let (pivot, _) = nearest(query, support_speech.iter().copied(), speech_metric)?;
    Ok(nearest(support_images[pivot], matching.iter().copied(), image_metric)?.0)
}

/// Class of the nearest support item.
pub fn classify_unimodal<R, M>(query: &R, support: &[&R], classes: &[usize], metric: &M) -> Result<usize>
where
    M: Metric<R> + ?Sized,
{
    if support.len() != classes.len() {
        return Err(Error::Argument("one class per support item required".into()));
    }
    Ok(classes[nearest(query, support.iter().copied(), metric)?.0])
}

/// Whether a predicted visual class is right for a spoken class; "zero" and
/// "oh" are both right for visual class 0.
pub fn score_query(predicted_visual: usize, speech_class: usize, labels: &PairLabels) -> Result<bool> {
    if predicted_visual >= labels.num_visual_classes() {
        return Err(Error::Argument(format!("unknown visual class {predicted_visual}")));
    }
    Ok(labels.visual_class_of(speech_class)? == predicted_visual)
}

/// One line per episode: `episode TAB role TAB ids` with ids comma-separated.
pub fn format_episode_manifest(episodes: &[Episode]) -> String {
    let mut out = String::new();
    for e in episodes {
        let s = e.support.pairs();
        let sp: Vec<String> = s.iter().map(|p| format!("{}:{}", p.speech_id, p.image_id)).collect();
        out.push_str(&format!("{}\tsupport\t{}\n", e.id, sp.join(",")));
        out.push_str(&format!("{}\tmatching\t{}\n", e.id, e.matching_ids().join(",")));
        out.push_str(&format!("{}\tqueries\t{}\n", e.id, e.query_ids().join(",")));
    }
    out
}
