use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use rayon::prelude::*;

use super::{
    format_log, is_current, load_mined, mix, prepared_data, stage_dir, write_text, Arm,
    ExperimentConfig, MinedSplit, ModelFamily, PairSource, Prepared,
};
use crate::embedding::{save_checkpoint, Checkpoint, Modality, ModelKind, ModelParams};
use crate::error::{Error, Result};
use crate::features::CosineMetric;
use crate::mining::{mine_shared_space_negatives, ClassedPool, KSample, Pool};
use crate::models::{
    bank_embeddings, train_cae, train_mcae, train_mtriplet, CaeExample, InputBank, McaeExample, TrainConfig, TrainedModel,
};

/// One trainable model of the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelKey {
    Direct(ModelFamily, PairSource),
    Cae(Modality, PairSource),
}

impl ModelKey {
    pub fn name(&self) -> String {
        match self {
            ModelKey::Direct(f, s) => format!("{}_{}", f.name(), s.name()),
            ModelKey::Cae(Modality::Speech, s) => format!("cae_speech_{}", s.name()),
            ModelKey::Cae(Modality::Vision, s) => format!("cae_vision_{}", s.name()),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelKey::Direct(ModelFamily::Mcae, _) => ModelKind::Mcae,
            ModelKey::Direct(ModelFamily::MTriplet, _) => ModelKind::MTriplet,
            ModelKey::Cae(Modality::Speech, _) => ModelKind::SpeechCae,
            ModelKey::Cae(Modality::Vision, _) => ModelKind::VisionCae,
        }
    }

    fn source(&self) -> PairSource {
        match self {
            ModelKey::Direct(_, s) | ModelKey::Cae(_, s) => *s,
        }
    }
}

pub(crate) fn arm_models(arm: &Arm, mining_metric: PairSource) -> Vec<ModelKey> {
    match arm {
        Arm::DtwPixels | Arm::IndirectClassifier => vec![],
        Arm::IndirectCae => vec![
            ModelKey::Cae(Modality::Speech, mining_metric),
            ModelKey::Cae(Modality::Vision, mining_metric),
        ],
        Arm::Direct { family, source, .. } => vec![ModelKey::Direct(*family, *source)],
    }
}

pub(crate) fn model_keys(cfg: &ExperimentConfig) -> Result<Vec<ModelKey>> {
    let mut keys: Vec<ModelKey> = cfg
        .parsed_arms()?
        .iter()
        .flat_map(|a| arm_models(a, cfg.mining_metric))
        .collect();
    keys.sort();
    keys.dedup();
    Ok(keys)
}

pub(crate) fn checkpoint_path(cfg: &ExperimentConfig, key: ModelKey, batch_size: usize, seed: u64) -> PathBuf {
    stage_dir(cfg, "train").join(format!("{}_b{batch_size}_s{seed}.ckpt", key.name()))
}

/// Item data of the train and validation splits, addressed by id.
struct Bank {
    bank: InputBank,
    speech: HashMap<String, usize>,
    images: HashMap<String, usize>,
}

impl Bank {
    fn new(p: &Prepared) -> Self {
        let mut bank = InputBank::default();
        let mut speech = HashMap::new();
        let mut images = HashMap::new();
        for k in 0..2 {
            for item in p.speech[k].items() {
                speech.insert(item.id.clone(), bank.speech.len());
                bank.speech.push(item.data.to_f64());
            }
            for item in p.images[k].items() {
                images.insert(item.id.clone(), bank.images.len());
                bank.images.push(item.data.to_f64());
            }
        }
        Bank { bank, speech, images }
    }

    fn speech(&self, id: &str) -> Result<usize> {
        self.speech
            .get(id)
            .copied()
            .ok_or_else(|| Error::State(format!("mined speech id {id} is not in the prepared data")))
    }

    fn image(&self, id: &str) -> Result<usize> {
        self.images
            .get(id)
            .copied()
            .ok_or_else(|| Error::State(format!("mined image id {id} is not in the prepared data")))
    }
}

fn position_map(ids: &[String]) -> HashMap<&str, usize> {
    ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
}

fn mcae_examples(bank: &Bank, m: &MinedSplit) -> Result<Vec<McaeExample>> {
    let sp = position_map(&m.speech.ids);
    let vp = position_map(&m.images.ids);
    m.pairs
        .iter()
        .map(|p| {
            let si = sp[p.speech_id.as_str()];
            let vi = vp[p.image_id.as_str()];
            Ok(McaeExample {
                speech: bank.speech(&p.speech_id)?,
                speech_pair: bank.speech(&m.speech.ids[m.speech.positives[si]])?,
                image: bank.image(&p.image_id)?,
                image_pair: bank.image(&m.images.ids[m.images.positives[vi]])?,
            })
        })
        .collect()
}

fn cae_examples(bank: &Bank, m: &MinedSplit, modality: Modality) -> Result<Vec<CaeExample>> {
    let (modal, lookup): (_, &dyn Fn(&str) -> Result<usize>) = match modality {
        Modality::Speech => (&m.speech, &|id: &str| bank.speech(id)),
        Modality::Vision => (&m.images, &|id: &str| bank.image(id)),
    };
    (0..modal.ids.len())
        .map(|i| {
            Ok(CaeExample {
                input: lookup(&modal.ids[i])?,
                target: lookup(&modal.ids[modal.positives[i]])?,
            })
        })
        .collect()
}

const VAL_STREAM: u64 = 0x7661_6c00;

#[allow(clippy::too_many_arguments)]
/// Closest other-class items to each pair in the model's current embedding
/// space, searched across modalities. Pivot classes come from mining; `seed_of(i)` seeds pair `i`'s
/// candidate sample.
fn online_negatives(
    bank: &Bank,
    split: &MinedSplit,
    model: &ModelParams,
    k_sample: KSample,
    seed_of: impl Fn(usize) -> u64 + Sync,
) -> Result<Vec<(usize, usize)>> {
    let idx_a = split.speech.ids.iter().map(|id| bank.speech(id)).collect::<Result<Vec<_>>>()?;
    let idx_v = split.images.ids.iter().map(|id| bank.image(id)).collect::<Result<Vec<_>>>()?;
    let (za, zv) = bank_embeddings(model, &bank.bank, &idx_a, &idx_v)?;
    let pool_a = ClassedPool::new(Pool::new(&split.speech.ids, &za)?, split.speech.classes.clone())?;
    let pool_v = ClassedPool::new(Pool::new(&split.images.ids, &zv)?, split.images.classes.clone())?;
    split
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let (an, vn) = mine_shared_space_negatives(p, &pool_a, &pool_v, &CosineMetric, k_sample, seed_of(i))?;
            Ok((bank.speech(&an)?, bank.image(&vn)?))
        })
        .collect()
}

fn triplet_cell(
    bank: &Bank,
    mined: &[MinedSplit; 2],
    k_sample: KSample,
    init: ModelParams,
    tcfg: &TrainConfig,
) -> Result<TrainedModel> {
    let pairs = |split: &MinedSplit| {
        split
            .pairs
            .iter()
            .map(|p| Ok((bank.speech(&p.speech_id)?, bank.image(&p.image_id)?)))
            .collect::<Result<Vec<_>>>()
    };
    // Training candidates are redrawn every epoch; validation candidates stay
    // fixed so only the model changes between validation passes.
    let negatives = |epoch: usize, model: &ModelParams| {
        let stream = mix(tcfg.seed, epoch as u64);
        online_negatives(bank, &mined[0], model, k_sample, |i| mix(stream, i as u64))
    };
    let val_negatives =
        |model: &ModelParams| online_negatives(bank, &mined[1], model, k_sample, |i| mix(tcfg.seed ^ VAL_STREAM, i as u64));
    train_mtriplet(&bank.bank, &pairs(&mined[0])?, &pairs(&mined[1])?, negatives, val_negatives, init, tcfg)
}

/// Trains every (model, batch size, seed) cell the arms need. Cells whose
/// checkpoint is already current are skipped.
pub fn train(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let keys = model_keys(cfg)?;
    let cells = cfg.grid.cells();
    let todo: Vec<(ModelKey, usize, u64)> = keys
        .iter()
        .flat_map(|&k| cells.iter().map(move |&(b, s)| (k, b, s)))
        .filter(|&(k, b, s)| !is_current(cfg, &checkpoint_path(cfg, k, b, s)))
        .collect();
    if todo.is_empty() {
        return Ok(());
    }
    let p = prepared_data(cfg)?;
    let bank = Bank::new(&p);
    let mut mined: BTreeMap<PairSource, [MinedSplit; 2]> = BTreeMap::new();
    for (k, _, _) in &todo {
        if !mined.contains_key(&k.source()) {
            mined.insert(k.source(), load_mined(cfg, k.source())?);
        }
    }
    let arch = cfg.architecture();
    let t = &cfg.train;
    for (key, batch_size, grid_seed) in todo {
        let seed = cfg.sub_seed(&format!("train/{}/{batch_size}/{grid_seed}", key.name()));
        let tcfg = TrainConfig {
            learning_rate: t.learning_rate,
            batch_size,
            margin: t.margin,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed,
            weights: t.weights,
        };
        let init = ModelParams::init(key.kind(), &arch, Vec::new(), seed)?;
        let m = &mined[&key.source()];
        let trained = match key {
            ModelKey::Direct(ModelFamily::Mcae, _) => {
                train_mcae(&bank.bank, &mcae_examples(&bank, &m[0])?, &mcae_examples(&bank, &m[1])?, init, &tcfg)?
            }
            ModelKey::Cae(modality, _) => train_cae(
                &bank.bank,
                &cae_examples(&bank, &m[0], modality)?,
                &cae_examples(&bank, &m[1], modality)?,
                init,
                &tcfg,
            )?,
            ModelKey::Direct(ModelFamily::MTriplet, _) => triplet_cell(&bank, m, t.k_sample(), init, &tcfg)?,
        };
        let last = trained.log.last().map_or(f64::NAN, |r| r.wall_secs);
        eprintln!(
            "train: {} b{batch_size} s{grid_seed}: {} epochs, best {} ({last:.1}s)",
            key.name(),
            trained.log.len(),
            trained.best_epoch
        );
        let path = checkpoint_path(cfg, key, batch_size, grid_seed);
        let config = serde_json::json!({
            "config_hash": cfg.config_hash(),
            "training_hash": cfg.training_hash(),
            "master_seed": cfg.master_seed,
            "model": key.name(),
            "batch_size": batch_size,
            "grid_seed": grid_seed,
            "train": tcfg,
            "best_epoch": trained.best_epoch,
            "epochs_run": trained.log.len(),
        });
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        save_checkpoint(
            &path,
            &Checkpoint {
                params: trained.params,
                seed,
                config,
            },
        )?;
        write_text(&path.with_extension("log.tsv"), &format_log(cfg, &trained.log))?;
    }
    Ok(())
}
