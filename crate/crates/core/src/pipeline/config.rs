use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SPEECH_FRAME_DIM;
use crate::embedding::Architecture;
use crate::error::{Error, Result};
use crate::fewshot::EpisodeSpec;
use crate::mining::KSample;
use crate::models::{LossWeights, BATCH_SIZES};

/// Where the cross-modal training pairs come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    /// Nearest support pair under background-classifier embeddings.
    Transfer,
    /// Nearest support pair under DTW (speech) and pixel cosine (images).
    Cosine,
    /// True labels.
    Oracle,
}

impl PairSource {
    pub fn name(self) -> &'static str {
        match self {
            PairSource::Transfer => "transfer",
            PairSource::Cosine => "cosine",
            PairSource::Oracle => "oracle",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "transfer" => Some(PairSource::Transfer),
            "cosine" => Some(PairSource::Cosine),
            "oracle" => Some(PairSource::Oracle),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelFamily {
    Mcae,
    MTriplet,
}

impl ModelFamily {
    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::Mcae => "mcae",
            ModelFamily::MTriplet => "mtriplet",
        }
    }
}

/// One evaluated arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Arm {
    DtwPixels,
    IndirectClassifier,
    IndirectCae,
    /// A direct model; `explicit` is false for the bare `mcae`/`mtriplet`
    /// names, which take the configured mining metric.
    Direct {
        family: ModelFamily,
        source: PairSource,
        explicit: bool,
    },
}

impl Arm {
    pub fn parse(name: &str, mining_metric: PairSource) -> Result<Self> {
        let bad = || Error::config("arms", format!("unknown arm {name:?}"));
        match name {
            "dtw_pixels" => return Ok(Arm::DtwPixels),
            "indirect_classifier" => return Ok(Arm::IndirectClassifier),
            "indirect_cae" => return Ok(Arm::IndirectCae),
            _ => {}
        }
        let (family, rest) = if let Some(rest) = name.strip_prefix("mtriplet") {
            (ModelFamily::MTriplet, rest)
        } else if let Some(rest) = name.strip_prefix("mcae") {
            (ModelFamily::Mcae, rest)
        } else {
            return Err(bad());
        };
        if rest.is_empty() {
            return Ok(Arm::Direct {
                family,
                source: mining_metric,
                explicit: false,
            });
        }
        let source = rest.strip_prefix('_').and_then(PairSource::parse).ok_or_else(bad)?;
        Ok(Arm::Direct {
            family,
            source,
            explicit: true,
        })
    }

    pub fn name(&self) -> String {
        match self {
            Arm::DtwPixels => "dtw_pixels".into(),
            Arm::IndirectClassifier => "indirect_classifier".into(),
            Arm::IndirectCae => "indirect_cae".into(),
            Arm::Direct { family, source, explicit } => {
                if *explicit {
                    format!("{}_{}", family.name(), source.name())
                } else {
                    family.name().into()
                }
            }
        }
    }

    /// Pair source whose mining output this arm consumes, if any.
    pub fn pair_source(&self, mining_metric: PairSource) -> Option<PairSource> {
        match self {
            Arm::DtwPixels | Arm::IndirectClassifier => None,
            Arm::IndirectCae => Some(mining_metric),
            Arm::Direct { source, .. } => Some(*source),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchPreset {
    Reference,
    Compact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Files,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Train, validation and test fractions of the in-domain data.
    pub split: [f64; 3],
    pub n_per_class: usize,
    pub noise: f64,
    pub background_classes: usize,
    pub background_per_class: usize,
    /// MFCA archive of spoken digits and its `id TAB class` label table.
    pub speech: Option<PathBuf>,
    pub speech_labels: Option<PathBuf>,
    /// IDX digit images and labels.
    pub images: Option<PathBuf>,
    pub image_labels: Option<PathBuf>,
    pub background_speech: Option<PathBuf>,
    pub background_speech_labels: Option<PathBuf>,
    /// 28×28 IDX background images (already inverted and downsampled).
    pub background_images: Option<PathBuf>,
    pub background_image_labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            split: [0.6, 0.1, 0.3],
            n_per_class: 60,
            noise: 0.3,
            background_classes: 30,
            background_per_class: 30,
            speech: None,
            speech_labels: None,
            images: None,
            image_labels: None,
            background_speech: None,
            background_speech_labels: None,
            background_images: None,
            background_image_labels: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub batch_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            batch_sizes: BATCH_SIZES.to_vec(),
            seeds: (0..5).collect(),
        }
    }
}

impl GridConfig {
    pub fn cells(&self) -> Vec<(usize, u64)> {
        let mut out = Vec::new();
        for &b in &self.batch_sizes {
            for &s in &self.seeds {
                out.push((b, s));
            }
        }
        out
    }

    /// `16,32:0,1` style override: batch sizes, then seeds.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::config("grid", format!("{m} in {text:?}; expected e.g. 16,32:0,1"));
        let (b, s) = text.split_once(':').ok_or_else(|| bad("missing ':'"))?;
        let batch_sizes = b
            .split(',')
            .map(|x| x.trim().parse::<usize>().map_err(|_| bad("bad batch size")))
            .collect::<Result<Vec<_>>>()?;
        let seeds = s
            .split(',')
            .map(|x| x.trim().parse::<u64>().map_err(|_| bad("bad seed")))
            .collect::<Result<Vec<_>>>()?;
        Ok(GridConfig { batch_sizes, seeds })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub margin: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub weights: LossWeights,
    /// Candidates per hard-negative draw; 0 means all.
    pub k_sample: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            learning_rate: 1e-3,
            margin: 0.2,
            max_epochs: 30,
            patience: 5,
            weights: LossWeights::default(),
            k_sample: 100,
        }
    }
}

impl TrainSettings {
    pub fn k_sample(&self) -> KSample {
        match self.k_sample {
            0 => KSample::All,
            k => KSample::Count(k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        ClassifierSettings {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 30,
            patience: 3,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSettings {
    pub classes: usize,
    pub shots: usize,
    pub matching: usize,
    pub queries: usize,
    pub count: usize,
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        let d = EpisodeSpec::default();
        EpisodeSettings {
            classes: d.classes,
            shots: d.shots,
            matching: d.matching,
            queries: d.queries,
            count: 400,
        }
    }
}

impl EpisodeSettings {
    pub fn spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            classes: self.classes,
            shots: self.shots,
            matching: self.matching,
            queries: self.queries,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub arms: Vec<String>,
    pub mining_metric: PairSource,
    pub architecture: ArchPreset,
    pub data: DataConfig,
    pub grid: GridConfig,
    pub train: TrainSettings,
    pub classifier: ClassifierSettings,
    pub episodes: EpisodeSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: 1,
            out_dir: PathBuf::from("runs/default"),
            arms: ["dtw_pixels", "indirect_classifier", "indirect_cae", "mcae", "mtriplet"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            mining_metric: PairSource::Transfer,
            architecture: ArchPreset::Reference,
            data: DataConfig::default(),
            grid: GridConfig::default(),
            train: TrainSettings::default(),
            classifier: ClassifierSettings::default(),
            episodes: EpisodeSettings::default(),
        }
    }
}

fn canonical_hash(value: &serde_json::Value) -> String {
    // serde_json maps are sorted, so this text is canonical.
    let text = serde_json::to_string(value).expect("config serializes");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .filter(|_| e.message().contains("field"))
                .unwrap_or("config")
                .to_string();
            Error::config(field, e.message().replace('\n', " "))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            field: "--config".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn parsed_arms(&self) -> Result<Vec<Arm>> {
        let mut arms: Vec<Arm> = Vec::new();
        for name in &self.arms {
            let arm = Arm::parse(name, self.mining_metric)?;
            if !arms.contains(&arm) {
                arms.push(arm);
            }
        }
        Ok(arms)
    }

    pub fn architecture(&self) -> Architecture {
        match self.architecture {
            ArchPreset::Reference => Architecture::reference(SPEECH_FRAME_DIM),
            ArchPreset::Compact => Architecture::compact(SPEECH_FRAME_DIM),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(Error::config("arms", "no arms selected"));
        }
        self.parsed_arms()?;
        if self.grid.batch_sizes.is_empty() || self.grid.seeds.is_empty() {
            return Err(Error::config("grid", "grid must have at least one batch size and one seed"));
        }
        if let Some(b) = self.grid.batch_sizes.iter().find(|b| !BATCH_SIZES.contains(b)) {
            return Err(Error::config("grid.batch_sizes", format!("{b} not in {BATCH_SIZES:?}")));
        }
        let d = &self.data;
        let sum: f64 = d.split.iter().sum();
        if d.split.iter().any(|f| !(*f > 0.0 && *f < 1.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("data.split", "fractions must lie in (0, 1) and sum to 1"));
        }
        match d.source {
            DataSource::Synthetic => {
                if d.n_per_class == 0 {
                    return Err(Error::config("data.n_per_class", "must be positive"));
                }
                if !(d.noise >= 0.0 && d.noise.is_finite()) {
                    return Err(Error::config("data.noise", "must be finite and nonnegative"));
                }
                if d.background_classes < 2 || d.background_per_class == 0 {
                    return Err(Error::config("data.background_classes", "need at least 2 classes with items"));
                }
            }
            DataSource::Files => {
                for (field, path) in [
                    ("data.speech", &d.speech),
                    ("data.speech_labels", &d.speech_labels),
                    ("data.images", &d.images),
                    ("data.image_labels", &d.image_labels),
                ] {
                    check_path(field, path.as_deref(), true)?;
                }
                for (field, path) in [
                    ("data.background_speech", &d.background_speech),
                    ("data.background_speech_labels", &d.background_speech_labels),
                    ("data.background_images", &d.background_images),
                    ("data.background_image_labels", &d.background_image_labels),
                ] {
                    check_path(field, path.as_deref(), false)?;
                }
            }
        }
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(t.margin > 0.0 && t.margin.is_finite()) {
            return Err(Error::config("train.margin", "must be positive"));
        }
        if t.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be positive"));
        }
        t.weights.validate().map_err(|e| Error::config("train.weights", e.to_string()))?;
        let c = &self.classifier;
        if c.max_epochs == 0 || c.batch_size == 0 {
            return Err(Error::config("classifier", "epochs and batch size must be positive"));
        }
        if !(c.validation_fraction > 0.0 && c.validation_fraction < 1.0) {
            return Err(Error::config("classifier.validation_fraction", "must lie in (0, 1)"));
        }
        let e = &self.episodes;
        if e.count == 0 || e.queries == 0 || e.shots == 0 {
            return Err(Error::config("episodes", "count, queries and shots must be positive"));
        }
        Ok(())
    }

    /// Hash of everything that can change a result; the output directory is
    /// excluded.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("out_dir");
        canonical_hash(&v)
    }

    /// Hash of the settings a trained model depends on: the arm list, grid
    /// and episode protocol are excluded so resumed runs can reuse cells.
    pub fn training_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let o = v.as_object_mut().expect("object");
        for k in ["out_dir", "arms", "grid", "episodes"] {
            o.remove(k);
        }
        canonical_hash(&v)
    }

    /// Per-stage seed: the first 8 bytes of sha256(master seed LE ‖ stage).
    pub fn sub_seed(&self, stage: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.master_seed.to_le_bytes());
        h.update(stage.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}

fn check_path(field: &str, path: Option<&Path>, required: bool) -> Result<()> {
    match path {
        None if required => Err(Error::config(field, "required when data.source = \"files\"")),
        None => Ok(()),
        Some(p) if !p.exists() => Err(Error::config(field, format!("{} does not exist", p.display()))),
        Some(_) => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_names_round_trip() {
        for name in ["dtw_pixels", "indirect_classifier", "indirect_cae", "mcae", "mtriplet_oracle", "mcae_cosine"] {
            assert_eq!(Arm::parse(name, PairSource::Transfer).unwrap().name(), name);
        }
        assert_eq!(
            Arm::parse("mtriplet", PairSource::Cosine).unwrap(),
            Arm::Direct { family: ModelFamily::MTriplet, source: PairSource::Cosine, explicit: false }
        );
        assert!(Arm::parse("mtriplet_best", PairSource::Transfer).is_err());
        assert!(Arm::parse("svm", PairSource::Transfer).is_err());
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = ExperimentConfig::from_toml("master_seed = 9\n[data]\nnoise = 0.5\n").unwrap();
        assert_eq!(partial.master_seed, 9);
        assert_eq!(partial.data.noise, 0.5);
        assert_eq!(partial.data.n_per_class, 60);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_field_is_named() {
        let err = ExperimentConfig::from_toml("[data]\nnoize = 0.5\n").unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "noize"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_path_is_named() {
        let mut c = ExperimentConfig::default();
        c.data.source = DataSource::Files;
        c.data.speech = Some("/nonexistent/speech.mfca".into());
        match c.validate().unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "data.speech"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hashes_and_seeds() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.config_hash(), b.config_hash());
        b.grid.seeds = vec![7];
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.training_hash(), b.training_hash());
        b.train.margin = 0.3;
        assert_ne!(a.training_hash(), b.training_hash());
        assert_ne!(a.sub_seed("mine"), a.sub_seed("train"));
        assert_eq!(a.sub_seed("mine"), a.clone().sub_seed("mine"));
    }

    #[test]
    fn grid_override() {
        let g = GridConfig::parse("16,32:0,1").unwrap();
        assert_eq!(g.cells(), vec![(16, 0), (16, 1), (32, 0), (32, 1)]);
        assert!(GridConfig::parse("16,32").is_err());
    }
}
