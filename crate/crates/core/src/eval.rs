//! Episode runs, accuracy aggregation over the model grid, confusion
//! matrices and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PairLabels;
use crate::error::{Error, Result};
use crate::fewshot::{score_query, Episode};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub episode_id: usize,
    pub query_id: String,
    pub predicted_image_id: String,
    pub predicted_visual_class: usize,
    pub true_speech_class: usize,
    pub true_visual_class: usize,
    pub correct: bool,
}

/// Picks a matching-set index for one query of an episode.
pub trait Matcher: Sync {
    fn predict(&self, episode: &Episode, query: usize) -> Result<usize>;
}

impl<F: Fn(&Episode, usize) -> Result<usize> + Sync> Matcher for F {
    fn predict(&self, episode: &Episode, query: usize) -> Result<usize> {
        self(episode, query)
    }
}

/// Uniform choice over the matching set, seeded per (episode, query).
pub struct RandomMatcher {
    pub seed: u64,
}

impl Matcher for RandomMatcher {
    fn predict(&self, episode: &Episode, query: usize) -> Result<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((episode.id as u64) << 16) | query as u64);
        Ok(rng.gen_range(0..episode.matching.len()))
    }
}

/// Reads the hidden label; an upper bound for harness checks.
pub struct OracleMatcher;

impl Matcher for OracleMatcher {
    fn predict(&self, episode: &Episode, query: usize) -> Result<usize> {
        let want = episode.queries[query].visual_class;
        episode
            .matching
            .iter()
            .position(|m| m.visual_class == want)
            .ok_or_else(|| Error::Argument(format!("episode {} has no image of class {want}", episode.id)))
    }
}

/// One result per (episode, query), in episode then query order.
pub fn run_episodes<M: Matcher + ?Sized>(matcher: &M, episodes: &[Episode], labels: &PairLabels) -> Result<Vec<MatchResult>> {
    if episodes.is_empty() {
        return Err(Error::Argument("no episodes to run".into()));
    }
    let per_episode: Vec<Result<Vec<MatchResult>>> = episodes
        .par_iter()
        .map(|e| {
            (0..e.queries.len())
                .map(|q| {
                    let pick = matcher.predict(e, q)?;
                    let m = e
                        .matching
                        .get(pick)
                        .ok_or_else(|| Error::Argument(format!("matcher returned index {pick}")))?;
                    let query = &e.queries[q];
                    Ok(MatchResult {
                        episode_id: e.id,
                        query_id: query.speech_id.clone(),
                        predicted_image_id: m.image_id.clone(),
                        predicted_visual_class: m.visual_class,
                        true_speech_class: query.speech_class,
                        true_visual_class: query.visual_class,
                        correct: score_query(m.visual_class, query.speech_class, labels)?,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for r in per_episode {
        out.extend(r?);
    }
    Ok(out)
}

/// Integer correct and total counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: u64,
    pub total: u64,
}

impl Tally {
    pub fn of(results: &[MatchResult]) -> Self {
        Tally {
            correct: results.iter().filter(|r| r.correct).count() as u64,
            total: results.len() as u64,
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn add(&mut self, other: Tally) {
        self.correct += other.correct;
        self.total += other.total;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridEntry {
    pub batch_size: usize,
    pub seed: u64,
    pub tally: Tally,
}

/// Model-level accuracies of one arm over the batch-size × seed grid.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunGrid {
    pub entries: Vec<GridEntry>,
}

impl RunGrid {
    pub fn accuracies(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.tally.accuracy()).collect()
    }

    pub fn pooled(&self) -> Tally {
        let mut t = Tally::default();
        for e in &self.entries {
            t.add(e.tally);
        }
        t
    }
}

/// Mean accuracy and 95% half-width (1.96 · sample std / √n), both in percent.
pub fn aggregate(accuracies: &[f64]) -> Result<(f64, f64)> {
    let n = accuracies.len();
    if n < 2 {
        return Err(Error::Argument(format!("aggregation needs at least 2 entries, got {n}")));
    }
    let mut sorted = accuracies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64;
    Ok((100.0 * mean, 100.0 * 1.96 * var.sqrt() / (n as f64).sqrt()))
}

/// Counts indexed `[spoken class][predicted visual class]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; cols]; rows],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Mass on cells where the prediction is right for the spoken class.
    pub fn consistent(&self, labels: &PairLabels) -> Result<u64> {
        let mut sum = 0;
        for (row, counts) in self.counts.iter().enumerate() {
            sum += counts[labels.visual_class_of(row)?];
        }
        Ok(sum)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

pub fn confusion(results: &[MatchResult], labels: &PairLabels) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::zeros(labels.class_names.len(), labels.num_visual_classes());
    for r in results {
        let row = m
            .counts
            .get_mut(r.true_speech_class)
            .ok_or_else(|| Error::Argument(format!("unknown spoken class {}", r.true_speech_class)))?;
        let cell = row
            .get_mut(r.predicted_visual_class)
            .ok_or_else(|| Error::Argument(format!("unknown visual class {}", r.predicted_visual_class)))?;
        *cell += 1;
    }
    Ok(m)
}

/// Everything reported for one arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub grid: RunGrid,
    pub confusion: ConfusionMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    /// Mean of model-level accuracies, percent.
    pub mean: f64,
    /// 95% half-width in percent; absent for a single model.
    pub ci95: Option<f64>,
    pub models: usize,
    pub correct: u64,
    pub total: u64,
    /// `correct / total` over all models.
    pub pooled_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub master_seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub arms: BTreeMap<String, ArmSummary>,
}

pub fn summarize(report: &ArmReport) -> Result<ArmSummary> {
    let acc = report.grid.accuracies();
    let (mean, ci95) = match acc.len() {
        0 => return Err(Error::Argument(format!("arm {} has no results", report.arm))),
        1 => (100.0 * acc[0], None),
        _ => {
            let (m, c) = aggregate(&acc)?;
            (m, Some(c))
        }
    };
    let pooled = report.grid.pooled();
    Ok(ArmSummary {
        mean,
        ci95,
        models: acc.len(),
        correct: pooled.correct,
        total: pooled.total,
        pooled_accuracy: pooled.accuracy(),
    })
}

fn csv_name(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn format_grid_csv(grid: &RunGrid, seed: u64, config_hash: &str) -> String {
    let mut out = format!("# master_seed={seed} config_hash={config_hash}\nbatch_size,seed,correct,total,accuracy\n");
    for e in &grid.entries {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            e.batch_size,
            e.seed,
            e.tally.correct,
            e.tally.total,
            e.tally.accuracy()
        );
    }
    out
}

pub fn format_confusion_csv(m: &ConfusionMatrix, labels: &PairLabels, seed: u64, config_hash: &str) -> String {
    let mut out = format!("# master_seed={seed} config_hash={config_hash}\nspoken");
    for c in &labels.image_class_names {
        out.push(',');
        out.push_str(&csv_name(c));
    }
    out.push('\n');
    for (row, counts) in m.counts.iter().enumerate() {
        out.push_str(&csv_name(&labels.class_names[row]));
        for c in counts {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
    }
    out
}

pub fn format_table(summary: &Summary) -> String {
    let mut out = format!(
        "master_seed {}  config_hash {}\n{:<32} {:>8} {:>8} {:>7}\n",
        summary.master_seed, summary.config_hash, "arm", "acc %", "± 95%", "models"
    );
    for (arm, s) in &summary.arms {
        let ci = s.ci95.map_or_else(|| "-".to_string(), |c| format!("{c:.1}"));
        let _ = writeln!(out, "{:<32} {:>8.1} {:>8} {:>7}", arm, s.mean, ci, s.models);
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `summary.json`, `grid_<arm>.csv`, `confusion_<arm>.csv` and `table.txt`.
pub fn emit_report(
    reports: &[ArmReport],
    labels: &PairLabels,
    master_seed: u64,
    config_hash: &str,
    config: serde_json::Value,
    out_dir: &Path,
) -> Result<Summary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut arms = BTreeMap::new();
    for r in reports {
        arms.insert(r.arm.clone(), summarize(r)?);
        write(
            &out_dir.join(format!("grid_{}.csv", r.arm)),
            &format_grid_csv(&r.grid, master_seed, config_hash),
        )?;
        write(
            &out_dir.join(format!("confusion_{}.csv", r.arm)),
            &format_confusion_csv(&r.confusion, labels, master_seed, config_hash),
        )?;
    }
    let summary = Summary {
        master_seed,
        config_hash: config_hash.to_string(),
        config,
        arms,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(&out_dir.join("summary.json"), &(json + "\n"))?;
    write(&out_dir.join("table.txt"), &format_table(&summary))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_paired_digits;
    use crate::fewshot::{sample_episodes, EpisodeSpec};

    #[test]
    fn aggregate_examples() {
        let (m, c) = aggregate(&[0.855; 4]).unwrap();
        assert!((m - 85.5).abs() < 1e-9);
        assert_eq!(c, 0.0);
        let (m, c) = aggregate(&[0.8, 0.9]).unwrap();
        assert!((m - 85.0).abs() < 1e-9);
        let sd = ((0.05f64 * 0.05 * 2.0) / 1.0).sqrt();
        assert!((c - 100.0 * 1.96 * sd / 2f64.sqrt()).abs() < 1e-9);
        assert!((c - 9.8).abs() < 1e-9);
        assert_eq!(aggregate(&[0.9, 0.8]).unwrap(), aggregate(&[0.8, 0.9]).unwrap());
        assert!(matches!(aggregate(&[0.5]), Err(Error::Argument(_))));
    }

    fn result(speech: usize, predicted: usize, labels: &PairLabels) -> MatchResult {
        MatchResult {
            episode_id: 0,
            query_id: "q".into(),
            predicted_image_id: "i".into(),
            predicted_visual_class: predicted,
            true_speech_class: speech,
            true_visual_class: labels.visual_class_of(speech).unwrap(),
            correct: score_query(predicted, speech, labels).unwrap(),
        }
    }

    #[test]
    fn hand_tallied_confusion() {
        let labels = PairLabels::digits();
        let oh = labels.speech_class("oh").unwrap();
        let zero = labels.speech_class("zero").unwrap();
        let three = labels.speech_class("three").unwrap();
        let rs = vec![
            result(oh, 0, &labels),
            result(zero, 0, &labels),
            result(three, 3, &labels),
            result(three, 8, &labels),
            result(oh, 6, &labels),
        ];
        let m = confusion(&rs, &labels).unwrap();
        let mut want = ConfusionMatrix::zeros(11, 10);
        want.counts[oh][0] = 1;
        want.counts[zero][0] = 1;
        want.counts[three][3] = 1;
        want.counts[three][8] = 1;
        want.counts[oh][6] = 1;
        assert_eq!(m, want);
        assert_eq!(m.total(), 5);
        assert_eq!(m.consistent(&labels).unwrap(), 3);
        assert_eq!(Tally::of(&rs), Tally { correct: 3, total: 5 });
    }

    #[test]
    fn oracle_and_random_matchers() {
        let (speech, images, labels) = synth_paired_digits(12, 0.1, 3).unwrap();
        let eps = sample_episodes(&speech, &images, &labels, &EpisodeSpec::default(), 20, 1).unwrap();
        let perfect = run_episodes(&OracleMatcher, &eps, &labels).unwrap();
        assert_eq!(perfect.len(), 200);
        assert!(perfect.iter().all(|r| r.correct));
        let m = confusion(&perfect, &labels).unwrap();
        assert_eq!(m.consistent(&labels).unwrap(), m.total());
        let zero = labels.speech_class("zero").unwrap();
        let oh = labels.speech_class("oh").unwrap();
        for row in [zero, oh] {
            assert_eq!(m.counts[row][0], m.counts[row].iter().sum::<u64>());
        }
        let a = run_episodes(&RandomMatcher { seed: 4 }, &eps, &labels).unwrap();
        assert_eq!(a, run_episodes(&RandomMatcher { seed: 4 }, &eps, &labels).unwrap());
    }

    #[test]
    fn report_round_trip() {
        let labels = PairLabels::digits();
        let mut confusion = ConfusionMatrix::zeros(11, 10);
        confusion.counts[0][1] = 7;
        confusion.counts[1][2] = 3;
        let grid = RunGrid {
            entries: vec![
                GridEntry { batch_size: 16, seed: 1, tally: Tally { correct: 7, total: 10 } },
                GridEntry { batch_size: 32, seed: 1, tally: Tally { correct: 3, total: 10 } },
            ],
        };
        let report = ArmReport { arm: "mtriplet".into(), grid, confusion };
        let dir = tempfile::tempdir().unwrap();
        let s = emit_report(&[report.clone()], &labels, 5, "abc", serde_json::json!({"k": 1}), dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
        let back: Summary = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.arms["mtriplet"].mean, 50.0);
        let csv = std::fs::read_to_string(dir.path().join("confusion_mtriplet.csv")).unwrap();
        let rows: Vec<&str> = csv.lines().skip(2).collect();
        assert_eq!(rows.len(), 11);
        assert!(rows.iter().all(|r| r.split(',').count() == 11));
        let first = std::fs::read(dir.path().join("grid_mtriplet.csv")).unwrap();
        emit_report(&[report], &labels, 5, "abc", serde_json::json!({"k": 1}), dir.path()).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join("grid_mtriplet.csv")).unwrap());
    }
}
