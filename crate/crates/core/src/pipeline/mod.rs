//! The experiment pipeline behind the CLI: prepare, mine, train, evaluate and
//! report, each reading the previous stage's artifacts from the output
//! directory.

mod config;
mod evaluate;
mod mine;
mod train;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{
    attach_labels, load_feature_archive, load_idx_labelled, parse_label_table, split, synth_background,
    synth_paired_digits, Dataset, ImageSet, Item, PairLabels, SpeechSet, SplitSpec, DIGIT_WORDS,
};
use crate::embedding::{
    default_exclusions, load_checkpoint, save_checkpoint, train_classifier, Checkpoint, ClassifierConfig, ModelParams,
};
use crate::error::{Error, Result};
use crate::nn::{EpochRecord, FitConfig};

pub use config::{
    ArchPreset, Arm, ClassifierSettings, DataConfig, DataSource, EpisodeSettings, ExperimentConfig, GridConfig,
    ModelFamily, PairSource, TrainSettings,
};
pub use evaluate::{evaluate, report};
pub use mine::{load_mined, mine, MinedSplit, ModalMining};
pub use train::{train, ModelKey};

/// The labelled in-domain data split into train, validation and test.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub labels: PairLabels,
    pub speech: [SpeechSet; 3],
    pub images: [ImageSet; 3],
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

fn provenance(cfg: &ExperimentConfig) -> String {
    format!("# master_seed={} config_hash={}\n", cfg.master_seed, cfg.config_hash())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_artifact(path: &Path, stage: &str) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::MissingArtifact {
        path: path.to_path_buf(),
        message: format!("{e}; run `{stage}` first"),
    })
}

fn stage_dir(cfg: &ExperimentConfig, stage: &str) -> PathBuf {
    cfg.out_dir.join(stage)
}

/// The config echo stored in reports: everything except the output path.
pub fn config_echo(cfg: &ExperimentConfig) -> serde_json::Value {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    v.as_object_mut().expect("object").remove("out_dir");
    v
}

fn load_paired(cfg: &ExperimentConfig) -> Result<(SpeechSet, ImageSet, PairLabels)> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => synth_paired_digits(d.n_per_class, d.noise, cfg.sub_seed("data")),
        DataSource::Files => {
            let need = |field: &str, p: &Option<PathBuf>| {
                p.clone().ok_or_else(|| Error::config(field, "required when data.source = \"files\""))
            };
            let speech = load_feature_archive(&need("data.speech", &d.speech)?)?;
            let table_path = need("data.speech_labels", &d.speech_labels)?;
            let table = std::fs::read_to_string(&table_path).map_err(|e| Error::io(&table_path, e))?;
            let words = DIGIT_WORDS.iter().map(|w| w.to_string()).collect();
            let speech = attach_labels(&speech, &parse_label_table(&table)?, Some(words))?;
            let images = load_idx_labelled(&need("data.images", &d.images)?, &need("data.image_labels", &d.image_labels)?)?;
            let labels = PairLabels::digits().with_items(&speech, &images)?;
            Ok((speech, images, labels))
        }
    }
}

fn rename_classes(set: ImageSet, prefix: &str) -> Result<ImageSet> {
    let classes = set.classes().iter().map(|c| format!("{prefix}{c}")).collect();
    let items: Vec<Item<_>> = set.items().to_vec();
    Dataset::new(items, classes, set.feature_dim())
}

/// Labelled background data for the transfer classifiers.
pub fn load_background(cfg: &ExperimentConfig) -> Result<(SpeechSet, ImageSet)> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => synth_background(
            d.background_classes,
            d.background_per_class,
            d.noise,
            cfg.sub_seed("background"),
        ),
        DataSource::Files => {
            let need = |field: &str, p: &Option<PathBuf>| {
                p.clone()
                    .ok_or_else(|| Error::config(field, "background data is needed for transfer mining and indirect_classifier"))
            };
            let speech = load_feature_archive(&need("data.background_speech", &d.background_speech)?)?;
            let table_path = need("data.background_speech_labels", &d.background_speech_labels)?;
            let table = std::fs::read_to_string(&table_path).map_err(|e| Error::io(&table_path, e))?;
            let speech = attach_labels(&speech, &parse_label_table(&table)?, None)?;
            let images = load_idx_labelled(
                &need("data.background_images", &d.background_images)?,
                &need("data.background_image_labels", &d.background_image_labels)?,
            )?;
            // IDX labels are bare integers, which would collide with digit names.
            Ok((speech, rename_classes(images, "bg")?))
        }
    }
}

/// Regenerates or reloads the in-domain data and splits it.
pub fn load_prepared(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (speech, images, labels) = load_paired(cfg)?;
    let [tr, va, te] = cfg.data.split;
    let spec = SplitSpec::new(tr, va, te, cfg.sub_seed("split"))?;
    let (s0, s1, s2) = split(&speech, &spec)?;
    let (v0, v1, v2) = split(&images, &spec)?;
    Ok(Prepared {
        labels,
        speech: [s0, s1, s2],
        images: [v0, v1, v2],
    })
}

fn splits_manifest(cfg: &ExperimentConfig, p: &Prepared) -> String {
    let mut out = provenance(cfg);
    out.push_str("modality\tsplit\tid\tclass\n");
    for (k, name) in SPLIT_NAMES.iter().enumerate() {
        for item in p.speech[k].items() {
            let class = item.label.map_or("", |l| p.speech[k].classes()[l].as_str());
            let _ = writeln!(out, "speech\t{name}\t{}\t{class}", item.id);
        }
        for item in p.images[k].items() {
            let class = item.label.map_or("", |l| p.images[k].classes()[l].as_str());
            let _ = writeln!(out, "image\t{name}\t{}\t{class}", item.id);
        }
    }
    out
}

/// Loads the prepared data and checks it against the manifest that
/// `prepare` wrote.
pub fn prepared_data(cfg: &ExperimentConfig) -> Result<Prepared> {
    let path = stage_dir(cfg, "prepare").join("splits.tsv");
    let on_disk = read_artifact(&path, "prepare")?;
    let p = load_prepared(cfg)?;
    if on_disk != splits_manifest(cfg, &p) {
        return Err(Error::State(format!(
            "{} was written by a different config; rerun `prepare`",
            path.display()
        )));
    }
    Ok(p)
}

pub fn needs_classifiers(cfg: &ExperimentConfig) -> Result<bool> {
    Ok(cfg.parsed_arms()?.iter().any(|a| {
        matches!(a, Arm::IndirectClassifier) || a.pair_source(cfg.mining_metric) == Some(PairSource::Transfer)
    }))
}

/// Pair sources the configured arms consume.
pub fn pair_sources(cfg: &ExperimentConfig) -> Result<BTreeSet<PairSource>> {
    Ok(cfg
        .parsed_arms()?
        .iter()
        .filter_map(|a| a.pair_source(cfg.mining_metric))
        .collect())
}

pub fn classifier_path(cfg: &ExperimentConfig, modality: &str) -> PathBuf {
    stage_dir(cfg, "prepare").join(format!("classifier_{modality}.ckpt"))
}

/// Loads the speech and vision background classifiers.
pub fn load_classifiers(cfg: &ExperimentConfig) -> Result<(ModelParams, ModelParams)> {
    let load = |m: &str| -> Result<ModelParams> {
        let path = classifier_path(cfg, m);
        let ckpt = load_checkpoint(&path)?;
        if checkpoint_hash(&ckpt) != Some(cfg.training_hash()) {
            return Err(Error::State(format!("{} is stale; rerun `prepare`", path.display())));
        }
        Ok(ckpt.params)
    };
    Ok((load("speech")?, load("vision")?))
}

fn checkpoint_hash(ckpt: &Checkpoint) -> Option<String> {
    ckpt.config.get("training_hash")?.as_str().map(String::from)
}

fn format_log(cfg: &ExperimentConfig, log: &[EpochRecord]) -> String {
    let mut out = provenance(cfg);
    out.push_str("epoch\ttrain_loss\tval_loss\twall_secs\n");
    for r in log {
        let _ = writeln!(out, "{}\t{}\t{}\t{:.3}", r.epoch, r.train_loss, r.val_loss, r.wall_secs);
    }
    out
}

/// True when a checkpoint exists and was produced under the same training hash.
fn is_current(cfg: &ExperimentConfig, path: &Path) -> bool {
    path.exists() && load_checkpoint(path).ok().and_then(|c| checkpoint_hash(&c)) == Some(cfg.training_hash())
}

/// Writes split manifests and trains the background classifiers when any arm
/// needs them. Existing up-to-date classifiers are kept.
pub fn prepare(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let p = load_prepared(cfg)?;
    let dir = stage_dir(cfg, "prepare");
    write_text(&dir.join("splits.tsv"), &splits_manifest(cfg, &p))?;
    write_text(&dir.join("config.toml"), &format!("{}{}", provenance(cfg), cfg.to_toml()))?;
    if !needs_classifiers(cfg)? {
        return Ok(());
    }
    let targets = [("speech", classifier_path(cfg, "speech")), ("vision", classifier_path(cfg, "vision"))];
    if targets.iter().all(|(_, path)| is_current(cfg, path)) {
        return Ok(());
    }
    let (bg_speech, bg_images) = load_background(cfg)?;
    let arch = cfg.architecture();
    let c = &cfg.classifier;
    let settings = |m: &str| ClassifierConfig {
        fit: FitConfig {
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            max_epochs: c.max_epochs,
            patience: c.patience,
            seed: cfg.sub_seed(&format!("classifier/{m}")),
        },
        validation_fraction: c.validation_fraction,
    };
    for (m, path) in &targets {
        let settings = settings(m);
        let trained = match *m {
            "speech" => train_classifier(&bg_speech, &arch, &settings, &default_exclusions())?,
            _ => train_classifier(&bg_images, &arch, &settings, &default_exclusions())?,
        };
        eprintln!(
            "prepare: {m} classifier, {} epochs, validation accuracy {:.3}",
            trained.log.len(),
            trained.validation_accuracy
        );
        let config = serde_json::json!({
            "config_hash": cfg.config_hash(),
            "training_hash": cfg.training_hash(),
            "master_seed": cfg.master_seed,
            "model": format!("classifier_{m}"),
            "classifier": settings,
            "validation_accuracy": trained.validation_accuracy,
        });
        save_checkpoint(
            path,
            &Checkpoint {
                params: trained.params,
                seed: settings.fit.seed,
                config,
            },
        )?;
        write_text(&path.with_extension("log.tsv"), &format_log(cfg, &trained.log))?;
    }
    Ok(())
}

/// All stages in order.
pub fn run(cfg: &ExperimentConfig) -> Result<crate::eval::Summary> {
    prepare(cfg)?;
    mine(cfg)?;
    train(cfg)?;
    evaluate(cfg)
}

/// A seed for item `b` of stream `a`.
fn mix(a: u64, b: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(a ^ splitmix(b))
}
