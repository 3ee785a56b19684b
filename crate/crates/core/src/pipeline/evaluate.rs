use std::collections::HashMap;
use std::path::PathBuf;

use rayon::prelude::*;

use super::train::{arm_models, checkpoint_path, ModelKey};
use super::{
    checkpoint_hash, config_echo, load_classifiers, prepared_data, provenance, read_artifact, stage_dir, write_text,
    Arm, ExperimentConfig,
};
use crate::data::{Dataset, PairLabels};
use crate::embedding::{encode_image, encode_speech, load_checkpoint, ModelParams};
use crate::error::{Error, Result};
use crate::eval::{
    confusion, emit_report, run_episodes, ArmReport, ConfusionMatrix, GridEntry, MatchResult, RunGrid, Summary, Tally,
};
use crate::features::{CosineMetric, DtwMetric, Metric, PixelMetric};
use crate::fewshot::{format_episode_manifest, match_direct, match_indirect, sample_episodes, Episode};

use super::mine::{embed_images, embed_speech};

/// Representations of the test items, by id.
struct Lookup<R> {
    reps: HashMap<String, R>,
}

impl<R> Lookup<R> {
    fn new<T>(set: &Dataset<T>, reps: Vec<R>) -> Self {
        Lookup {
            reps: set.ids().into_iter().map(String::from).zip(reps).collect(),
        }
    }

    fn get(&self, id: &str) -> Result<&R> {
        self.reps
            .get(id)
            .ok_or_else(|| Error::State(format!("episode item {id} is not in the test split")))
    }
}

fn direct_results(
    episodes: &[Episode],
    labels: &PairLabels,
    speech: &Lookup<Vec<f64>>,
    images: &Lookup<Vec<f64>>,
) -> Result<Vec<MatchResult>> {
    let matcher = |e: &Episode, q: usize| -> Result<usize> {
        let query = speech.get(&e.queries[q].speech_id)?;
        let matching = e
            .matching
            .iter()
            .map(|m| images.get(&m.image_id))
            .collect::<Result<Vec<_>>>()?;
        match_direct(query, &matching, &CosineMetric)
    };
    run_episodes(&matcher, episodes, labels)
}

fn indirect_results<RA, RV, MA, MV>(
    episodes: &[Episode],
    labels: &PairLabels,
    speech: &Lookup<RA>,
    images: &Lookup<RV>,
    speech_metric: &MA,
    image_metric: &MV,
) -> Result<Vec<MatchResult>>
where
    RA: Sync,
    RV: Sync,
    MA: Metric<RA> + Sync,
    MV: Metric<RV> + Sync,
{
    let matcher = |e: &Episode, q: usize| -> Result<usize> {
        let query = speech.get(&e.queries[q].speech_id)?;
        let support_speech = e
            .support
            .speech_ids()
            .into_iter()
            .map(|id| speech.get(id))
            .collect::<Result<Vec<_>>>()?;
        let support_images = e
            .support
            .image_ids()
            .into_iter()
            .map(|id| images.get(id))
            .collect::<Result<Vec<_>>>()?;
        let matching = e
            .matching
            .iter()
            .map(|m| images.get(&m.image_id))
            .collect::<Result<Vec<_>>>()?;
        match_indirect(query, &support_speech, &support_images, &matching, speech_metric, image_metric)
    };
    run_episodes(&matcher, episodes, labels)
}

/// Accumulates grid entries and a pooled confusion matrix for one report row.
struct Row {
    name: String,
    entries: Vec<GridEntry>,
    confusion: ConfusionMatrix,
}

impl Row {
    fn new(name: String, labels: &PairLabels) -> Self {
        Row {
            name,
            entries: Vec::new(),
            confusion: ConfusionMatrix::zeros(labels.class_names.len(), labels.num_visual_classes()),
        }
    }

    fn add(&mut self, batch_size: usize, seed: u64, results: &[MatchResult], labels: &PairLabels) -> Result<()> {
        self.entries.push(GridEntry {
            batch_size,
            seed,
            tally: Tally::of(results),
        });
        self.confusion.merge(&confusion(results, labels)?);
        Ok(())
    }

    fn finish(self) -> ArmReport {
        ArmReport {
            arm: self.name,
            grid: RunGrid { entries: self.entries },
            confusion: self.confusion,
        }
    }
}

fn load_model(cfg: &ExperimentConfig, key: ModelKey, batch_size: usize, seed: u64) -> Result<ModelParams> {
    let path = checkpoint_path(cfg, key, batch_size, seed);
    let ckpt = load_checkpoint(&path)?;
    if checkpoint_hash(&ckpt) != Some(cfg.training_hash()) {
        return Err(Error::State(format!("{} is stale; rerun `train`", path.display())));
    }
    Ok(ckpt.params)
}

/// Report rows for the configured arms, in config order; direct models add an
/// `<arm>_indirect` row.
pub fn report_rows(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let mut rows = Vec::new();
    for arm in cfg.parsed_arms()? {
        rows.push(arm.name());
        if matches!(arm, Arm::Direct { .. }) {
            rows.push(format!("{}_indirect", arm.name()));
        }
    }
    Ok(rows)
}

fn results_path(cfg: &ExperimentConfig, row: &str) -> PathBuf {
    stage_dir(cfg, "evaluate").join(format!("results_{row}.json"))
}

fn arm_reports(
    cfg: &ExperimentConfig,
    arm: &Arm,
    episodes: &[Episode],
    p: &super::Prepared,
) -> Result<Vec<ArmReport>> {
    let labels = &p.labels;
    let (test_speech, test_images) = (&p.speech[2], &p.images[2]);
    let speech_data: Vec<_> = test_speech.items().iter().map(|i| &i.data).collect();
    let image_data: Vec<_> = test_images.items().iter().map(|i| &i.data).collect();
    let mut row = Row::new(arm.name(), labels);
    match arm {
        Arm::DtwPixels => {
            let sp = Lookup::new(test_speech, speech_data.iter().map(|x| (*x).clone()).collect());
            let im = Lookup::new(test_images, image_data.iter().map(|x| (*x).clone()).collect());
            let r = indirect_results(episodes, labels, &sp, &im, &DtwMetric, &PixelMetric)?;
            row.add(0, 0, &r, labels)?;
        }
        Arm::IndirectClassifier => {
            let (cs, cv) = load_classifiers(cfg)?;
            let sp = Lookup::new(test_speech, embed_speech(&cs, &speech_data)?);
            let im = Lookup::new(test_images, embed_images(&cv, &image_data)?);
            let r = indirect_results(episodes, labels, &sp, &im, &CosineMetric, &CosineMetric)?;
            row.add(0, 0, &r, labels)?;
        }
        Arm::IndirectCae => {
            let keys = arm_models(arm, cfg.mining_metric);
            for (b, s) in cfg.grid.cells() {
                let speech_model = load_model(cfg, keys[0], b, s)?;
                let vision_model = load_model(cfg, keys[1], b, s)?;
                let sp = Lookup::new(test_speech, encode_all_speech(&speech_model, &speech_data)?);
                let im = Lookup::new(test_images, encode_all_images(&vision_model, &image_data)?);
                let r = indirect_results(episodes, labels, &sp, &im, &CosineMetric, &CosineMetric)?;
                row.add(b, s, &r, labels)?;
            }
        }
        Arm::Direct { .. } => {
            let key = arm_models(arm, cfg.mining_metric)[0];
            let mut indirect = Row::new(format!("{}_indirect", arm.name()), labels);
            for (b, s) in cfg.grid.cells() {
                let model = load_model(cfg, key, b, s)?;
                let sp = Lookup::new(test_speech, encode_all_speech(&model, &speech_data)?);
                let im = Lookup::new(test_images, encode_all_images(&model, &image_data)?);
                row.add(b, s, &direct_results(episodes, labels, &sp, &im)?, labels)?;
                let r = indirect_results(episodes, labels, &sp, &im, &CosineMetric, &CosineMetric)?;
                indirect.add(b, s, &r, labels)?;
            }
            return Ok(vec![row.finish(), indirect.finish()]);
        }
    }
    Ok(vec![row.finish()])
}

fn encode_all_speech(model: &ModelParams, items: &[&crate::data::FrameSequence]) -> Result<Vec<Vec<f64>>> {
    items.par_iter().map(|x| Ok(encode_speech(model, x)?.0)).collect()
}

fn encode_all_images(model: &ModelParams, items: &[&crate::data::ImageGrid]) -> Result<Vec<Vec<f64>>> {
    items.par_iter().map(|x| Ok(encode_image(model, x)?.0)).collect()
}

/// Runs every arm on one shared episode set, stores per-row results and
/// writes the report.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<Summary> {
    cfg.validate()?;
    let p = prepared_data(cfg)?;
    let e = &cfg.episodes;
    let episodes = sample_episodes(&p.speech[2], &p.images[2], &p.labels, &e.spec(), e.count, cfg.sub_seed("episodes"))?;
    write_text(
        &stage_dir(cfg, "evaluate").join("episodes.tsv"),
        &format!("{}{}", provenance(cfg), format_episode_manifest(&episodes)),
    )?;
    for arm in cfg.parsed_arms()? {
        for report in arm_reports(cfg, &arm, &episodes, &p)? {
            let stored = serde_json::json!({ "config_hash": cfg.config_hash(), "report": report });
            let json = serde_json::to_string(&stored).expect("report serializes");
            write_text(&results_path(cfg, &report.arm), &(json + "\n"))?;
        }
    }
    report(cfg)
}

/// Writes `report/summary.json`, the grid and confusion CSVs and a text table
/// from stored evaluation results.
pub fn report(cfg: &ExperimentConfig) -> Result<Summary> {
    cfg.validate()?;
    let labels = PairLabels::digits();
    let mut reports = Vec::new();
    for row in report_rows(cfg)? {
        let path = results_path(cfg, &row);
        let bad = |e: serde_json::Error| Error::Format(format!("{}: {e}", path.display()));
        let stored: serde_json::Value = serde_json::from_str(&read_artifact(&path, "evaluate")?).map_err(bad)?;
        if stored["config_hash"].as_str() != Some(cfg.config_hash().as_str()) {
            return Err(Error::State(format!("{} is stale; rerun `evaluate`", path.display())));
        }
        reports.push(serde_json::from_value::<ArmReport>(stored["report"].clone()).map_err(bad)?);
    }
    emit_report(
        &reports,
        &labels,
        cfg.master_seed,
        &cfg.config_hash(),
        config_echo(cfg),
        &cfg.out_dir.join("report"),
    )
}
