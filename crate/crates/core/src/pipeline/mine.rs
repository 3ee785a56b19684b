use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    load_classifiers, mix, pair_sources, prepared_data, provenance, read_artifact, stage_dir, write_text,
    ExperimentConfig, PairSource, Prepared, SPLIT_NAMES,
};
use crate::data::{FrameSequence, ImageGrid, ImageSet, PairLabels, SpeechSet};
use crate::embedding::{classifier_embedding, ModelParams};
use crate::error::{Error, Result};
use crate::features::{CosineMetric, DtwMetric, Metric, PixelMetric};
use crate::mining::{
    assign_to_support, class_correct_fraction, format_pair_manifest, mine_cross_modal_pairs,
    mine_oracle_pairs, mine_within_modality_positives, parse_pair_manifest, sample_support, ManifestSidecar,
    MinedPair, Pool, SupportSet,
};

/// Per-item mining output of one modality, aligned with `ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalMining {
    pub ids: Vec<String>,
    /// Pivot class each item was assigned.
    pub classes: Vec<usize>,
    /// Index of each item's within-modality positive.
    pub positives: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinedSplit {
    pub pairs: Vec<MinedPair>,
    pub speech: ModalMining,
    pub images: ModalMining,
}

fn ids_of<T>(set: &crate::data::Dataset<T>) -> Vec<String> {
    set.ids().iter().map(|s| s.to_string()).collect()
}

pub(crate) fn support_set(cfg: &ExperimentConfig, p: &Prepared) -> Result<SupportSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sub_seed("support"));
    sample_support(&p.speech[0], &p.images[0], &p.labels, cfg.episodes.shots, &BTreeSet::new(), &mut rng)
}

pub(crate) fn embed_speech(params: &ModelParams, items: &[&FrameSequence]) -> Result<Vec<Vec<f64>>> {
    items.par_iter().map(|x| Ok(classifier_embedding(params, (*x).into())?.0)).collect()
}

pub(crate) fn embed_images(params: &ModelParams, items: &[&ImageGrid]) -> Result<Vec<Vec<f64>>> {
    items.par_iter().map(|x| Ok(classifier_embedding(params, (*x).into())?.0)).collect()
}

fn data_refs<T>(set: &crate::data::Dataset<T>) -> Vec<&T> {
    set.items().iter().map(|i| &i.data).collect()
}

/// Classifier embeddings of every item of one split.
pub(crate) fn transfer_reps(
    classifiers: &(ModelParams, ModelParams),
    speech: &SpeechSet,
    images: &ImageSet,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    Ok((
        embed_speech(&classifiers.0, &data_refs(speech))?,
        embed_images(&classifiers.1, &data_refs(images))?,
    ))
}

pub(crate) fn raw_reps(speech: &SpeechSet, images: &ImageSet) -> (Vec<FrameSequence>, Vec<ImageGrid>) {
    (
        speech.items().iter().map(|i| i.data.clone()).collect(),
        images.items().iter().map(|i| i.data.clone()).collect(),
    )
}

#[allow(clippy::too_many_arguments)]
fn mine_split<RA, RV, MA, MV>(
    speech_ids: Vec<String>,
    speech: &[RA],
    image_ids: Vec<String>,
    images: &[RV],
    support_reps: (&[RA], &[RV]),
    support: &SupportSet,
    metrics: (&MA, &MV),
    seed: u64,
) -> Result<MinedSplit>
where
    RA: Sync,
    RV: Sync,
    MA: Metric<RA> + Sync,
    MV: Metric<RV> + Sync,
{
    let classes = support.visual_classes();
    let sa = assign_to_support(Pool::new(&speech_ids, speech)?, support_reps.0, &classes, metrics.0)?;
    let va = assign_to_support(Pool::new(&image_ids, images)?, support_reps.1, &classes, metrics.1)?;
    let mut pairs = mine_cross_modal_pairs(&sa, &va, support, seed)?;
    // Fallback pairs reuse support items, which belong to the train split.
    let (s_set, v_set): (BTreeSet<&str>, BTreeSet<&str>) = (
        speech_ids.iter().map(String::as_str).collect(),
        image_ids.iter().map(String::as_str).collect(),
    );
    pairs.retain(|p| s_set.contains(p.speech_id.as_str()) && v_set.contains(p.image_id.as_str()));
    let by_index = |assign: &[crate::mining::Assignment], n: usize| {
        let mut c = vec![0; n];
        for a in assign {
            c[a.item_index] = a.support_class;
        }
        c
    };
    let sp = mine_within_modality_positives(speech, metrics.0)?;
    let vp = mine_within_modality_positives(images, metrics.1)?;
    Ok(MinedSplit {
        pairs,
        speech: ModalMining {
            classes: by_index(&sa, speech_ids.len()),
            positives: sp.iter().map(|p| p.positive).collect(),
            ids: speech_ids,
        },
        images: ModalMining {
            classes: by_index(&va, image_ids.len()),
            positives: vp.iter().map(|p| p.positive).collect(),
            ids: image_ids,
        },
    })
}

fn random_same_class(classes: &[usize], seed: u64) -> Vec<usize> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    classes
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let others: Vec<usize> = by_class[c].iter().copied().filter(|&j| j != i).collect();
            if others.is_empty() {
                i
            } else {
                others[ChaCha8Rng::seed_from_u64(mix(seed, i as u64)).gen_range(0..others.len())]
            }
        })
        .collect()
}

fn oracle_split(speech: &SpeechSet, images: &ImageSet, labels: &PairLabels, seed: u64) -> Result<MinedSplit> {
    let pairs = mine_oracle_pairs(speech, images, labels, seed)?;
    let speech_classes = (0..speech.len())
        .map(|i| {
            let l = speech.label(i).ok_or_else(|| Error::Argument("oracle pairs need labels".into()))?;
            labels.visual_class_of(l)
        })
        .collect::<Result<Vec<_>>>()?;
    let image_classes = (0..images.len())
        .map(|i| images.label(i).ok_or_else(|| Error::Argument("oracle pairs need labels".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok(MinedSplit {
        pairs,
        speech: ModalMining {
            ids: ids_of(speech),
            positives: random_same_class(&speech_classes, mix(seed, 1)),
            classes: speech_classes,
        },
        images: ModalMining {
            ids: ids_of(images),
            positives: random_same_class(&image_classes, mix(seed, 2)),
            classes: image_classes,
        },
    })
}

/// Mines train and validation splits for one pair source.
pub(crate) fn mine_source(
    cfg: &ExperimentConfig,
    p: &Prepared,
    support: &SupportSet,
    source: PairSource,
    classifiers: Option<&(ModelParams, ModelParams)>,
) -> Result<([MinedSplit; 2], [String; 2])> {
    let seed = |split: &str| cfg.sub_seed(&format!("mine/{}/{split}", source.name()));
    let s_idx = p.speech[0].index_by_id();
    let v_idx = p.images[0].index_by_id();
    let sup_speech: Vec<&FrameSequence> = support.speech_ids().iter().map(|id| p.speech[0].data(s_idx[id])).collect();
    let sup_images: Vec<&ImageGrid> = support.image_ids().iter().map(|id| p.images[0].data(v_idx[id])).collect();
    let mut out = Vec::new();
    let descriptors;
    match source {
        PairSource::Oracle => {
            for k in 0..2 {
                out.push(oracle_split(&p.speech[k], &p.images[k], &p.labels, seed(SPLIT_NAMES[k]))?);
            }
            descriptors = ["labels".to_string(), "labels".to_string()];
        }
        PairSource::Cosine => {
            let sup_a: Vec<FrameSequence> = sup_speech.iter().map(|x| (*x).clone()).collect();
            let sup_v: Vec<ImageGrid> = sup_images.iter().map(|x| (*x).clone()).collect();
            for k in 0..2 {
                let (ra, rv) = raw_reps(&p.speech[k], &p.images[k]);
                out.push(mine_split(
                    ids_of(&p.speech[k]),
                    &ra,
                    ids_of(&p.images[k]),
                    &rv,
                    (&sup_a, &sup_v),
                    support,
                    (&DtwMetric, &PixelMetric),
                    seed(SPLIT_NAMES[k]),
                )?);
            }
            descriptors = [DtwMetric.descriptor(), PixelMetric.descriptor()];
        }
        PairSource::Transfer => {
            let c = classifiers.ok_or_else(|| Error::State("transfer mining needs the background classifiers".into()))?;
            let sup_a = embed_speech(&c.0, &sup_speech)?;
            let sup_v = embed_images(&c.1, &sup_images)?;
            for k in 0..2 {
                let (ra, rv) = transfer_reps(c, &p.speech[k], &p.images[k])?;
                out.push(mine_split(
                    ids_of(&p.speech[k]),
                    &ra,
                    ids_of(&p.images[k]),
                    &rv,
                    (&sup_a, &sup_v),
                    support,
                    (&CosineMetric, &CosineMetric),
                    seed(SPLIT_NAMES[k]),
                )?);
            }
            descriptors = [
                "embedding-backed:classifier_speech".to_string(),
                "embedding-backed:classifier_vision".to_string(),
            ];
        }
    }
    let val = out.pop().expect("two splits");
    let train = out.pop().expect("two splits");
    Ok(([train, val], descriptors))
}

fn source_dir(cfg: &ExperimentConfig, source: PairSource) -> PathBuf {
    stage_dir(cfg, "mine").join(source.name())
}

fn format_modal(cfg: &ExperimentConfig, m: &ModalMining) -> String {
    let mut out = provenance(cfg);
    for (i, id) in m.ids.iter().enumerate() {
        let _ = writeln!(out, "{id}\t{}\t{}", m.classes[i], m.ids[m.positives[i]]);
    }
    out
}

fn parse_modal(text: &str, path: &std::path::Path) -> Result<ModalMining> {
    let bad = |n: usize| Error::Format(format!("{} line {}", path.display(), n + 1));
    let mut ids = Vec::new();
    let mut classes = Vec::new();
    let mut positive_ids = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad(n));
        }
        ids.push(f[0].to_string());
        classes.push(f[1].parse().map_err(|_| bad(n))?);
        positive_ids.push(f[2].to_string());
    }
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let positives = positive_ids
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Format(format!("{}: unknown positive {id}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModalMining { ids, classes, positives })
}

fn format_support(cfg: &ExperimentConfig, s: &SupportSet) -> String {
    let mut out = provenance(cfg);
    for p in s.pairs() {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", p.speech_id, p.image_id, p.class, p.visual_class);
    }
    out
}

/// Mines pairs, positives and pivot classes for every pair source the arms
/// use, and writes them under `mine/<source>/`.
pub fn mine(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let p = prepared_data(cfg)?;
    let support = support_set(cfg, &p)?;
    write_text(&stage_dir(cfg, "mine").join("support.tsv"), &format_support(cfg, &support))?;
    let sources = pair_sources(cfg)?;
    let classifiers = if sources.contains(&PairSource::Transfer) {
        Some(load_classifiers(cfg)?)
    } else {
        None
    };
    for source in sources {
        let ([train, val], descriptors) = mine_source(cfg, &p, &support, source, classifiers.as_ref())?;
        let dir = source_dir(cfg, source);
        for (k, m) in [&train, &val].into_iter().enumerate() {
            let name = SPLIT_NAMES[k];
            write_text(
                &dir.join(format!("{name}_pairs.tsv")),
                &format!("{}{}", provenance(cfg), format_pair_manifest(&m.pairs)),
            )?;
            write_text(&dir.join(format!("{name}_speech.tsv")), &format_modal(cfg, &m.speech))?;
            write_text(&dir.join(format!("{name}_images.tsv")), &format_modal(cfg, &m.images))?;
        }
        let quality = class_correct_fraction(&train.pairs, &p.speech[0], &p.images[0], &p.labels)?;
        eprintln!(
            "mine: {} pairs from {}, {:.1}% class-correct",
            train.pairs.len(),
            source.name(),
            100.0 * quality
        );
        let mut extra = BTreeMap::new();
        extra.insert("master_seed".to_string(), cfg.master_seed.to_string());
        extra.insert("config_hash".to_string(), cfg.config_hash());
        extra.insert("training_hash".to_string(), cfg.training_hash());
        extra.insert("speech_metric".to_string(), descriptors[0].clone());
        extra.insert("image_metric".to_string(), descriptors[1].clone());
        extra.insert("val_pairs".to_string(), val.pairs.len().to_string());
        extra.insert("class_correct_fraction".to_string(), format!("{quality}"));
        let sidecar = ManifestSidecar {
            seed: cfg.sub_seed(&format!("mine/{}/train", source.name())),
            metric: source.name().to_string(),
            pairs: train.pairs.len(),
            extra,
        };
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        write_text(&dir.join("pairs.json"), &(json + "\n"))?;
    }
    Ok(())
}

/// Reads the train and validation mining output of one source.
pub fn load_mined(cfg: &ExperimentConfig, source: PairSource) -> Result<[MinedSplit; 2]> {
    let dir = source_dir(cfg, source);
    let sidecar_path = dir.join("pairs.json");
    let sidecar: ManifestSidecar = serde_json::from_str(&read_artifact(&sidecar_path, "mine")?)
        .map_err(|e| Error::Format(format!("{}: {e}", sidecar_path.display())))?;
    if sidecar.extra.get("training_hash") != Some(&cfg.training_hash()) {
        return Err(Error::State(format!("{} is stale; rerun `mine`", sidecar_path.display())));
    }
    let mut out = Vec::new();
    for name in &SPLIT_NAMES[..2] {
        let pairs = parse_pair_manifest(&read_artifact(&dir.join(format!("{name}_pairs.tsv")), "mine")?)?;
        let sp = dir.join(format!("{name}_speech.tsv"));
        let vp = dir.join(format!("{name}_images.tsv"));
        out.push(MinedSplit {
            pairs,
            speech: parse_modal(&read_artifact(&sp, "mine")?, &sp)?,
            images: parse_modal(&read_artifact(&vp, "mine")?, &vp)?,
        });
    }
    let val = out.pop().expect("two splits");
    let train = out.pop().expect("two splits");
    Ok([train, val])
}
