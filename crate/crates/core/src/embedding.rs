//! Speech and vision encoder/decoder networks, background classifiers, and
//! the checkpoint container.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FrameSequence, ImageGrid, Sample, DIGIT_WORDS, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::nn::{fit, glorot_uniform, mean_loss, EpochRecord, FitConfig, Graph, ParamId, ParamSet, Var};

pub const LATENT_DIM: usize = 130;

/// Layer sizes shared by every network of one model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub frame_dim: usize,
    pub latent_dim: usize,
    pub rnn_layers: usize,
    pub rnn_hidden: usize,
    pub conv_channels: [usize; 2],
    pub image_side: usize,
}

impl Architecture {
    /// Three GRU layers of width 200 and 32/64-channel convolutions.
    pub fn reference(frame_dim: usize) -> Self {
        Architecture {
            frame_dim,
            latent_dim: LATENT_DIM,
            rnn_layers: 3,
            rnn_hidden: 200,
            conv_channels: [32, 64],
            image_side: IMAGE_SIDE,
        }
    }

    /// One GRU layer of width 64 and 8/16 channels; same latent size.
    pub fn compact(frame_dim: usize) -> Self {
        Architecture {
            frame_dim,
            latent_dim: LATENT_DIM,
            rnn_layers: 1,
            rnn_hidden: 64,
            conv_channels: [8, 16],
            image_side: IMAGE_SIDE,
        }
    }

    /// A few hundred parameters at most, for finite-difference checks.
    pub fn tiny() -> Self {
        Architecture {
            frame_dim: 2,
            latent_dim: 3,
            rnn_layers: 1,
            rnn_hidden: 2,
            conv_channels: [1, 2],
            image_side: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_dim == 0 || self.latent_dim == 0 || self.rnn_layers == 0 || self.rnn_hidden == 0 {
            return Err(Error::Argument("architecture sizes must be positive".into()));
        }
        if self.conv_channels.contains(&0) {
            return Err(Error::Argument("convolution channels must be positive".into()));
        }
        if self.image_side == 0 || self.image_side % 4 != 0 {
            return Err(Error::Argument(format!(
                "image side {} must be a positive multiple of 4",
                self.image_side
            )));
        }
        Ok(())
    }

    fn pooled_side(&self) -> usize {
        self.image_side / 4
    }

    fn flat_features(&self) -> usize {
        self.conv_channels[1] * self.pooled_side() * self.pooled_side()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Speech,
    Vision,
}

/// Which networks a model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Both encoders and both decoders.
    Mcae,
    /// Both encoders.
    MTriplet,
    SpeechCae,
    VisionCae,
    SpeechClassifier,
    VisionClassifier,
}

impl ModelKind {
    fn has_speech_encoder(self) -> bool {
        matches!(
            self,
            ModelKind::Mcae | ModelKind::MTriplet | ModelKind::SpeechCae | ModelKind::SpeechClassifier
        )
    }

    fn has_vision_encoder(self) -> bool {
        matches!(
            self,
            ModelKind::Mcae | ModelKind::MTriplet | ModelKind::VisionCae | ModelKind::VisionClassifier
        )
    }

    fn has_speech_decoder(self) -> bool {
        matches!(self, ModelKind::Mcae | ModelKind::SpeechCae)
    }

    fn has_vision_decoder(self) -> bool {
        matches!(self, ModelKind::Mcae | ModelKind::VisionCae)
    }

    fn head_modality(self) -> Option<Modality> {
        match self {
            ModelKind::SpeechClassifier => Some(Modality::Speech),
            ModelKind::VisionClassifier => Some(Modality::Vision),
            _ => None,
        }
    }
}

/// A 130-dimensional representation.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// An item of either modality.
#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    Speech(&'a FrameSequence),
    Image(&'a ImageGrid),
}

impl<'a> From<&'a FrameSequence> for Input<'a> {
    fn from(x: &'a FrameSequence) -> Self {
        Input::Speech(x)
    }
}

impl<'a> From<&'a ImageGrid> for Input<'a> {
    fn from(x: &'a ImageGrid) -> Self {
        Input::Image(x)
    }
}

/// Item types that the networks can consume.
pub trait ModalItem: Sample + Sync {
    const MODALITY: Modality;
    fn as_input(&self) -> Input<'_>;
}

impl ModalItem for FrameSequence {
    const MODALITY: Modality = Modality::Speech;
    fn as_input(&self) -> Input<'_> {
        Input::Speech(self)
    }
}

impl ModalItem for ImageGrid {
    const MODALITY: Modality = Modality::Vision;
    fn as_input(&self) -> Input<'_> {
        Input::Image(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct GruLayer {
    wx: ParamId,
    bx: ParamId,
    wh: ParamId,
    bh: ParamId,
    hidden: usize,
}

impl GruLayer {
    fn new(params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) -> Self {
        let wx = params.add(
            format!("{name}.wx"),
            vec![3 * hidden, input],
            glorot_uniform(rng, input, hidden, 3 * hidden * input),
        );
        let bx = params.add(format!("{name}.bx"), vec![3 * hidden], vec![0.0; 3 * hidden]);
        let wh = params.add(
            format!("{name}.wh"),
            vec![3 * hidden, hidden],
            glorot_uniform(rng, hidden, hidden, 3 * hidden * hidden),
        );
        let bh = params.add(format!("{name}.bh"), vec![3 * hidden], vec![0.0; 3 * hidden]);
        GruLayer { wx, bx, wh, bh, hidden }
    }

    /// Gates ordered (reset, update, candidate); the reset gate scales the
    /// recurrent candidate term after its linear map.
    fn step(&self, g: &mut Graph, x: Var, h: Var) -> Var {
        let n = self.hidden;
        let gx = g.linear(x, self.wx, self.bx);
        let gh = g.linear(h, self.wh, self.bh);
        let (xr, xz, xn) = (g.slice(gx, 0, n), g.slice(gx, n, n), g.slice(gx, 2 * n, n));
        let (hr, hz, hn) = (g.slice(gh, 0, n), g.slice(gh, n, n), g.slice(gh, 2 * n, n));
        let r = g.add(xr, hr);
        let r = g.sigmoid(r);
        let z = g.add(xz, hz);
        let z = g.sigmoid(z);
        let rh = g.mul(r, hn);
        let cand = g.add(xn, rh);
        let cand = g.tanh(cand);
        // h' = (1 - z) * cand + z * h = cand + z * (h - cand)
        let diff = g.sub(h, cand);
        let zd = g.mul(z, diff);
        g.add(cand, zd)
    }
}

fn run_stack(layers: &[GruLayer], g: &mut Graph, inputs: Vec<Var>) -> Vec<Var> {
    let mut seq = inputs;
    for layer in layers {
        let mut h = g.input(vec![0.0; layer.hidden]);
        let mut out = Vec::with_capacity(seq.len());
        for &x in &seq {
            h = layer.step(g, x, h);
            out.push(h);
        }
        seq = out;
    }
    seq
}

fn dense(params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, n_in: usize, n_out: usize) -> (ParamId, ParamId) {
    let w = params.add(
        format!("{name}.w"),
        vec![n_out, n_in],
        glorot_uniform(rng, n_in, n_out, n_out * n_in),
    );
    let b = params.add(format!("{name}.b"), vec![n_out], vec![0.0; n_out]);
    (w, b)
}

#[derive(Clone, Debug, PartialEq)]
struct SpeechEncoder {
    layers: Vec<GruLayer>,
    out: (ParamId, ParamId),
}

#[derive(Clone, Debug, PartialEq)]
struct SpeechDecoder {
    layers: Vec<GruLayer>,
    out: (ParamId, ParamId),
}

#[derive(Clone, Debug, PartialEq)]
struct VisionEncoder {
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    out: (ParamId, ParamId),
}

#[derive(Clone, Debug, PartialEq)]
struct VisionDecoder {
    input: (ParamId, ParamId),
    up1: (ParamId, ParamId),
    up2: (ParamId, ParamId),
}

/// Parameters of one model plus the layout that interprets them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    kind: ModelKind,
    arch: Architecture,
    store: ParamSet,
    speech_encoder: Option<SpeechEncoder>,
    speech_decoder: Option<SpeechDecoder>,
    vision_encoder: Option<VisionEncoder>,
    vision_decoder: Option<VisionDecoder>,
    head: Option<(ParamId, ParamId)>,
    classes: Vec<String>,
}

impl ModelParams {
    /// Freshly initialized parameters. `classes` is only used by classifiers.
    pub fn init(kind: ModelKind, arch: &Architecture, classes: Vec<String>, seed: u64) -> Result<Self> {
        arch.validate()?;
        if kind.head_modality().is_some() && classes.len() < 2 {
            return Err(Error::Argument("a classifier needs at least 2 classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamSet::new();
        let a = arch;
        let stack = |store: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, input: usize| -> Vec<GruLayer> {
            (0..a.rnn_layers)
                .map(|l| {
                    let n_in = if l == 0 { input } else { a.rnn_hidden };
                    GruLayer::new(store, rng, &format!("{prefix}.gru{l}"), n_in, a.rnn_hidden)
                })
                .collect()
        };
        let speech_encoder = kind.has_speech_encoder().then(|| {
            let layers = stack(&mut store, &mut rng, "speech_enc", a.frame_dim);
            let out = dense(&mut store, &mut rng, "speech_enc.out", a.rnn_hidden, a.latent_dim);
            SpeechEncoder { layers, out }
        });
        let speech_decoder = kind.has_speech_decoder().then(|| {
            let layers = stack(&mut store, &mut rng, "speech_dec", a.latent_dim);
            let out = dense(&mut store, &mut rng, "speech_dec.out", a.rnn_hidden, a.frame_dim);
            SpeechDecoder { layers, out }
        });
        let [c1, c2] = a.conv_channels;
        let vision_encoder = kind.has_vision_encoder().then(|| {
            let conv1 = conv(&mut store, &mut rng, "vision_enc.conv1", 1, c1);
            let conv2 = conv(&mut store, &mut rng, "vision_enc.conv2", c1, c2);
            let out = dense(&mut store, &mut rng, "vision_enc.out", a.flat_features(), a.latent_dim);
            VisionEncoder { conv1, conv2, out }
        });
        let vision_decoder = kind.has_vision_decoder().then(|| {
            let input = dense(&mut store, &mut rng, "vision_dec.in", a.latent_dim, a.flat_features());
            let up1 = upconv(&mut store, &mut rng, "vision_dec.up1", c2, c1);
            let up2 = upconv(&mut store, &mut rng, "vision_dec.up2", c1, 1);
            VisionDecoder { input, up1, up2 }
        });
        let head = kind
            .head_modality()
            .map(|_| dense(&mut store, &mut rng, "head", a.latent_dim, classes.len()));
        Ok(ModelParams {
            kind,
            arch: arch.clone(),
            store,
            speech_encoder,
            speech_decoder,
            vision_encoder,
            vision_decoder,
            head,
            classes,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn store(&self) -> &ParamSet {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamSet {
        &mut self.store
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    pub fn has_speech_encoder(&self) -> bool {
        self.speech_encoder.is_some()
    }

    pub fn has_vision_encoder(&self) -> bool {
        self.vision_encoder.is_some()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    fn speech_enc(&self) -> Result<&SpeechEncoder> {
        self.speech_encoder
            .as_ref()
            .ok_or_else(|| Error::State(format!("{:?} model has no speech encoder", self.kind)))
    }

    fn vision_enc(&self) -> Result<&VisionEncoder> {
        self.vision_encoder
            .as_ref()
            .ok_or_else(|| Error::State(format!("{:?} model has no vision encoder", self.kind)))
    }

    /// Encoder graph over flattened frames (`n_frames × frame_dim`).
    pub fn speech_encoder_graph(&self, g: &mut Graph, frames: &[f64]) -> Result<Var> {
        let enc = self.speech_enc()?;
        let d = self.arch.frame_dim;
        if frames.is_empty() {
            return Err(Error::EmptyItem("speech input has no frames".into()));
        }
        if frames.len() % d != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form frames of dimension {d}",
                frames.len()
            )));
        }
        let inputs = frames.chunks(d).map(|f| g.input(f.to_vec())).collect();
        let states = run_stack(&enc.layers, g, inputs);
        let last = *states.last().expect("non-empty sequence");
        Ok(g.linear(last, enc.out.0, enc.out.1))
    }

    /// Decoder graph; `z` is fed at every one of `len` steps. Output is flat.
    pub fn speech_decoder_graph(&self, g: &mut Graph, z: Var, len: usize) -> Result<Var> {
        let dec = self
            .speech_decoder
            .as_ref()
            .ok_or_else(|| Error::State(format!("{:?} model has no speech decoder", self.kind)))?;
        if len < 1 {
            return Err(Error::Argument("decoder target length must be at least 1".into()));
        }
        let states = run_stack(&dec.layers, g, vec![z; len]);
        let frames: Vec<Var> = states.into_iter().map(|h| g.linear(h, dec.out.0, dec.out.1)).collect();
        Ok(g.concat(&frames))
    }

    /// Encoder graph over a flattened `image_side²` image.
    pub fn vision_encoder_graph(&self, g: &mut Graph, pixels: &[f64]) -> Result<Var> {
        let enc = self.vision_enc()?;
        let s = self.arch.image_side;
        if pixels.len() != s * s {
            return Err(Error::Shape(format!("expected {} pixels, got {}", s * s, pixels.len())));
        }
        let [c1, c2] = self.arch.conv_channels;
        let x = g.input(pixels.to_vec());
        let h = g.conv3x3(x, enc.conv1.0, enc.conv1.1, 1, s, s);
        let h = g.relu(h);
        let h = g.max_pool2(h, c1, s, s);
        let h = g.conv3x3(h, enc.conv2.0, enc.conv2.1, c1, s / 2, s / 2);
        let h = g.relu(h);
        let h = g.max_pool2(h, c2, s / 2, s / 2);
        Ok(g.linear(h, enc.out.0, enc.out.1))
    }

    /// Decoder graph ending in a sigmoid, so every output lies in `(0, 1)`.
    pub fn vision_decoder_graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let dec = self
            .vision_decoder
            .as_ref()
            .ok_or_else(|| Error::State(format!("{:?} model has no vision decoder", self.kind)))?;
        let q = self.arch.pooled_side();
        let [c1, c2] = self.arch.conv_channels;
        let h = g.linear(z, dec.input.0, dec.input.1);
        let h = g.relu(h);
        let h = g.conv_transpose2x2(h, dec.up1.0, dec.up1.1, c2, q, q);
        let h = g.relu(h);
        let h = g.conv_transpose2x2(h, dec.up2.0, dec.up2.1, c1, 2 * q, 2 * q);
        Ok(g.sigmoid(h))
    }

    pub fn encoder_graph(&self, g: &mut Graph, input: Input<'_>) -> Result<Var> {
        match input {
            Input::Speech(x) => {
                self.check_frame_dim(x)?;
                self.speech_encoder_graph(g, &x.to_f64())
            }
            Input::Image(x) => {
                self.check_image_side()?;
                self.vision_encoder_graph(g, &x.to_f64())
            }
        }
    }

    /// Classifier logits over the penultimate embedding `emb`.
    pub fn head_graph(&self, g: &mut Graph, emb: Var) -> Result<Var> {
        let (w, b) = self.head.ok_or_else(|| Error::State("model has no classifier head".into()))?;
        Ok(g.linear(emb, w, b))
    }

    fn check_frame_dim(&self, x: &FrameSequence) -> Result<()> {
        if x.dim() != self.arch.frame_dim {
            return Err(Error::Shape(format!(
                "frame dimension {} does not match the model's {}",
                x.dim(),
                self.arch.frame_dim
            )));
        }
        Ok(())
    }

    fn check_image_side(&self) -> Result<()> {
        if self.arch.image_side != IMAGE_SIDE {
            return Err(Error::Shape(format!(
                "model expects {0}×{0} images",
                self.arch.image_side
            )));
        }
        Ok(())
    }

    fn layout_matches(&self, other: &ParamSet) -> bool {
        self.store.same_layout(other)
    }
}

fn conv(params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize) -> (ParamId, ParamId) {
    let w = params.add(
        format!("{name}.w"),
        vec![c_out, c_in, 3, 3],
        glorot_uniform(rng, c_in * 9, c_out * 9, c_out * c_in * 9),
    );
    let b = params.add(format!("{name}.b"), vec![c_out], vec![0.0; c_out]);
    (w, b)
}

fn upconv(params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize) -> (ParamId, ParamId) {
    let w = params.add(
        format!("{name}.w"),
        vec![c_in, c_out, 2, 2],
        glorot_uniform(rng, c_in * 4, c_out * 4, c_in * c_out * 4),
    );
    let b = params.add(format!("{name}.b"), vec![c_out], vec![0.0; c_out]);
    (w, b)
}

fn run_encoder(params: &ModelParams, input: Input<'_>) -> Result<Embedding> {
    let mut g = Graph::new(&params.store);
    let z = params.encoder_graph(&mut g, input)?;
    Ok(Embedding(g.value(z).to_vec()))
}

pub fn encode_speech(params: &ModelParams, x: &FrameSequence) -> Result<Embedding> {
    params.speech_enc()?;
    run_encoder(params, Input::Speech(x))
}

pub fn encode_image(params: &ModelParams, x: &ImageGrid) -> Result<Embedding> {
    params.vision_enc()?;
    run_encoder(params, Input::Image(x))
}

/// Encodes with whichever encoder matches the input's modality.
pub fn encode(params: &ModelParams, x: Input<'_>) -> Result<Embedding> {
    run_encoder(params, x)
}

fn check_latent(params: &ModelParams, z: &Embedding) -> Result<()> {
    if z.0.len() != params.arch.latent_dim {
        return Err(Error::Shape(format!(
            "embedding has {} values, model latent size is {}",
            z.0.len(),
            params.arch.latent_dim
        )));
    }
    Ok(())
}

pub fn decode_speech(params: &ModelParams, z: &Embedding, target_len: usize) -> Result<FrameSequence> {
    check_latent(params, z)?;
    let mut g = Graph::new(&params.store);
    let zv = g.input(z.0.clone());
    let out = params.speech_decoder_graph(&mut g, zv, target_len)?;
    let values = g.value(out).iter().map(|&v| v as f32).collect();
    FrameSequence::new(params.arch.frame_dim, values)
}

pub fn decode_image(params: &ModelParams, z: &Embedding) -> Result<ImageGrid> {
    check_latent(params, z)?;
    params.check_image_side()?;
    let mut g = Graph::new(&params.store);
    let zv = g.input(z.0.clone());
    let out = params.vision_decoder_graph(&mut g, zv)?;
    ImageGrid::new(g.value(out).iter().map(|&v| (v as f32).clamp(0.0, 1.0)).collect())
}

/// Penultimate-layer activations of a classifier.
pub fn classifier_embedding(params: &ModelParams, item: Input<'_>) -> Result<Embedding> {
    let Some(modality) = params.kind.head_modality() else {
        return Err(Error::State(format!("{:?} model has no classifier head", params.kind)));
    };
    let item_modality = match item {
        Input::Speech(_) => Modality::Speech,
        Input::Image(_) => Modality::Vision,
    };
    if item_modality != modality {
        return Err(Error::Argument(format!(
            "{item_modality:?} item given to a {modality:?} classifier"
        )));
    }
    run_encoder(params, item)
}

/// Class names that must not appear in background data.
pub fn default_exclusions() -> Vec<String> {
    DIGIT_WORDS
        .iter()
        .map(|w| w.to_string())
        .chain((0..10).map(|d| d.to_string()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub fit: FitConfig,
    pub validation_fraction: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            fit: FitConfig {
                learning_rate: 1e-3,
                batch_size: 32,
                max_epochs: 30,
                patience: 3,
                seed: 0,
            },
            validation_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
    pub validation_accuracy: f64,
}

/// Trains an encoder plus softmax head on labelled background data.
pub fn train_classifier<T: ModalItem>(
    background: &Dataset<T>,
    arch: &Architecture,
    cfg: &ClassifierConfig,
    exclusions: &[String],
) -> Result<TrainedClassifier> {
    if !background.has_labels() {
        return Err(Error::Argument("background data must be labelled".into()));
    }
    let excluded: BTreeSet<String> = exclusions.iter().map(|s| s.to_lowercase()).collect();
    for name in background.classes() {
        if excluded.contains(&name.to_lowercase()) {
            return Err(Error::Contamination(name.clone()));
        }
    }
    let present: BTreeSet<usize> = background.items().iter().filter_map(|i| i.label).collect();
    if present.len() < 2 {
        return Err(Error::Argument("a classifier needs at least 2 classes".into()));
    }
    if !(cfg.validation_fraction > 0.0 && cfg.validation_fraction < 1.0) {
        return Err(Error::Argument("validation fraction must be in (0, 1)".into()));
    }
    let kind = match T::MODALITY {
        Modality::Speech => ModelKind::SpeechClassifier,
        Modality::Vision => ModelKind::VisionClassifier,
    };
    let mut model = ModelParams::init(kind, arch, background.classes().to_vec(), cfg.fit.seed)?;

    let mut order: Vec<usize> = (0..background.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.fit.seed ^ 0x5eed));
    let n_val = ((background.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, background.len() - 1);
    let mut val: Vec<usize> = order[..n_val].to_vec();
    let mut train: Vec<usize> = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();

    let examples = |idx: &[usize]| -> Vec<(Input<'_>, usize)> {
        idx.iter()
            .map(|&i| (background.data(i).as_input(), background.label(i).expect("labelled")))
            .collect()
    };
    let train_ex = examples(&train);
    let val_ex = examples(&val);

    let layout = model.clone();
    let loss = |g: &mut Graph, e: &(Input<'_>, usize)| -> Result<Var> {
        let z = layout.encoder_graph(g, e.0)?;
        let logits = layout.head_graph(g, z)?;
        Ok(g.softmax_cross_entropy(logits, e.1))
    };
    let outcome = fit(model.store_mut(), &cfg.fit, |_, _| Ok(train_ex.clone()), &val_ex, loss)?;
    debug_assert!(model.layout_matches(layout.store()));

    let correct = val_ex
        .iter()
        .map(|(x, y)| -> Result<bool> {
            let mut g = Graph::new(model.store());
            let z = model.encoder_graph(&mut g, *x)?;
            let logits = model.head_graph(&mut g, z)?;
            Ok(argmax(g.value(logits)) == *y)
        })
        .collect::<Result<Vec<bool>>>()?;
    let validation_accuracy = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
    Ok(TrainedClassifier {
        params: model,
        log: outcome.log,
        validation_accuracy,
    })
}

/// Cross-entropy of a classifier on labelled items.
pub fn classifier_loss<T: ModalItem>(params: &ModelParams, set: &Dataset<T>) -> Result<f64> {
    let ex: Vec<(Input<'_>, usize)> = (0..set.len())
        .filter_map(|i| set.label(i).map(|l| (set.data(i).as_input(), l)))
        .collect();
    mean_loss(params.store(), &ex, &|g: &mut Graph, e: &(Input<'_>, usize)| {
        let z = params.encoder_graph(g, e.0)?;
        let logits = params.head_graph(g, z)?;
        Ok(g.softmax_cross_entropy(logits, e.1))
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

// Checkpoint container:
//   b"MMFSCKPT", u32-LE version, u64-LE header length, JSON header,
//   then every tensor's values as f32-LE in header order.
const CHECKPOINT_MAGIC: &[u8; 8] = b"MMFSCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: ModelKind,
    architecture: Architecture,
    classes: Vec<String>,
    seed: u64,
    config: serde_json::Value,
    tensors: Vec<(String, Vec<usize>)>,
}

/// A model with the training settings that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub seed: u64,
    pub config: serde_json::Value,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let p = &ckpt.params;
    let header = CheckpointHeader {
        kind: p.kind,
        architecture: p.arch.clone(),
        classes: p.classes.clone(),
        seed: ckpt.seed,
        config: ckpt.config.clone(),
        tensors: p.store.tensors().iter().map(|t| (t.name.clone(), t.shape.clone())).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 4 * p.store.num_scalars());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in p.store.tensors() {
        for &v in &t.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let fmt = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fmt(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| fmt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| fmt(&e.to_string()))?;
    let mut params = ModelParams::init(header.kind, &header.architecture, header.classes, 0)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .store
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), t.shape.clone()))
        .collect();
    if expected != header.tensors {
        return Err(Error::Shape("checkpoint tensors do not match the architecture".into()));
    }
    let mut rest = &bytes[20 + hlen..];
    for t in params.store.tensors_mut() {
        let need = 4 * t.values.len();
        if rest.len() < need {
            return Err(fmt("truncated tensor data"));
        }
        for (v, chunk) in t.values.iter_mut().zip(rest[..need].chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        rest = &rest[need..];
    }
    if !rest.is_empty() {
        return Err(fmt("trailing bytes"));
    }
    if !params.store.all_finite() {
        return Err(fmt("non-finite parameter"));
    }
    Ok(Checkpoint {
        params,
        seed: header.seed,
        config: header.config,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::MissingArtifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_background, SPEECH_FRAME_DIM};
    use crate::features::cosine_distance;

    fn arch() -> Architecture {
        Architecture {
            rnn_hidden: 16,
            conv_channels: [2, 4],
            ..Architecture::compact(SPEECH_FRAME_DIM)
        }
    }

    fn speech(len: usize, phase: f32) -> FrameSequence {
        let values = (0..len * SPEECH_FRAME_DIM).map(|i| ((i as f32 + phase) * 0.37).sin()).collect();
        FrameSequence::new(SPEECH_FRAME_DIM, values).unwrap()
    }

    #[test]
    fn encoders_always_give_130_values() {
        let m = ModelParams::init(ModelKind::Mcae, &arch(), vec![], 1).unwrap();
        for len in [1, 6, 40] {
            let z = encode_speech(&m, &speech(len, 0.0)).unwrap();
            assert_eq!(z.0.len(), LATENT_DIM);
            assert!(z.0.iter().all(|v| v.is_finite()));
        }
        let a = encode_speech(&m, &speech(9, 1.0)).unwrap();
        assert_eq!(a, encode_speech(&m, &speech(9, 1.0)).unwrap());
        let zero = encode_image(&m, &ImageGrid::zeros()).unwrap();
        assert_eq!(zero.0.len(), LATENT_DIM);
        assert!(zero.0.iter().all(|v| v.is_finite()));
        let wrong = FrameSequence::new(4, vec![0.5; 8]).unwrap();
        assert!(matches!(encode_speech(&m, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn decoders_have_the_requested_shape() {
        let m = ModelParams::init(ModelKind::Mcae, &arch(), vec![], 2).unwrap();
        let z = encode_speech(&m, &speech(7, 0.0)).unwrap();
        assert_eq!(decode_speech(&m, &z, 1).unwrap().len(), 1);
        let out = decode_speech(&m, &z, 12).unwrap();
        assert_eq!(out.len(), 12);
        assert!(out.values().iter().all(|v| v.is_finite()));
        assert!(matches!(decode_speech(&m, &z, 0), Err(Error::Argument(_))));
        let img = decode_image(&m, &z).unwrap();
        assert!(img.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(img, decode_image(&m, &z).unwrap());
    }

    #[test]
    fn reference_architecture_runs() {
        let m = ModelParams::init(ModelKind::MTriplet, &Architecture::reference(SPEECH_FRAME_DIM), vec![], 3).unwrap();
        assert_eq!(encode_speech(&m, &speech(6, 0.0)).unwrap().0.len(), LATENT_DIM);
        assert_eq!(encode_image(&m, &ImageGrid::zeros()).unwrap().0.len(), LATENT_DIM);
        assert!(matches!(decode_image(&m, &Embedding(vec![0.0; LATENT_DIM])), Err(Error::State(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = ModelParams::init(ModelKind::SpeechClassifier, &arch(), vec!["a".into(), "b".into()], 4).unwrap();
        let ckpt = Checkpoint {
            params: m,
            seed: 4,
            config: serde_json::json!({"lr": 0.001}),
        };
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.seed, 4);
        assert_eq!(back.config, ckpt.config);
        for (a, b) in back.params.store().flat().iter().zip(ckpt.params.store().flat()) {
            assert_eq!(*a, b as f32 as f64);
        }
        assert_eq!(encode_checkpoint(&back), bytes);
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn classifier_contract() {
        let (speech, _) = synth_background(2, 4, 0.1, 1).unwrap();
        let mcae = ModelParams::init(ModelKind::Mcae, &arch(), vec![], 1).unwrap();
        assert!(matches!(
            classifier_embedding(&mcae, Input::Speech(speech.data(0))),
            Err(Error::State(_))
        ));
        let untrained = ModelParams::init(ModelKind::SpeechClassifier, &arch(), speech.classes().to_vec(), 1).unwrap();
        assert_eq!(classifier_embedding(&untrained, speech.data(0).as_input()).unwrap().0.len(), LATENT_DIM);

        let one_class = speech.subset(&speech.positions_by_label()[0]);
        let cfg = ClassifierConfig::default();
        assert!(matches!(
            train_classifier(&one_class, &arch(), &cfg, &default_exclusions()),
            Err(Error::Argument(_))
        ));
        let mut items = speech.items().to_vec();
        items[0].label = Some(2);
        let mut classes = speech.classes().to_vec();
        classes.push("seven".into());
        let dirty = Dataset::new(items, classes, SPEECH_FRAME_DIM).unwrap();
        assert!(matches!(
            train_classifier(&dirty, &arch(), &cfg, &default_exclusions()),
            Err(Error::Contamination(c)) if c == "seven"
        ));
    }

    #[test]
    fn background_classifier_beats_chance() {
        let (_, images) = synth_background(5, 50, 0.3, 7).unwrap();
        let cfg = ClassifierConfig {
            fit: FitConfig {
                max_epochs: 8,
                ..ClassifierConfig::default().fit
            },
            validation_fraction: 0.2,
        };
        let trained = train_classifier(&images, &arch(), &cfg, &default_exclusions()).unwrap();
        assert!(trained.validation_accuracy > 0.2, "{}", trained.validation_accuracy);
        // within-class pairs sit closer than cross-class pairs on average
        let embs: Vec<Embedding> = (0..images.len())
            .map(|i| classifier_embedding(&trained.params, images.data(i).as_input()).unwrap())
            .collect();
        let (mut same, mut ns, mut diff, mut nd) = (0.0, 0, 0.0, 0);
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let d = cosine_distance(&embs[i].0, &embs[j].0).unwrap();
                if images.label(i) == images.label(j) {
                    same += d;
                    ns += 1;
                } else {
                    diff += d;
                    nd += 1;
                }
            }
        }
        assert!(same / (ns as f64) < diff / (nd as f64));
    }
}
