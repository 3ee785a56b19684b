//! Losses and trainers for the multimodal models (MCAE, MTriplet) and the
//! unimodal CAEs behind the indirect baseline.
//!
//! Trainers see item data only, through an [`InputBank`] and index-based
//! examples; labels never reach this module.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{ModelKind, ModelParams};
use crate::error::{Error, Result};
use crate::features::cosine_distance;
use crate::nn::{fit, fit_online, mean_loss, EpochRecord, FitConfig, Graph, ParamSet, Var};

pub use crate::nn::{early_stop, StopDecision};

pub const BATCH_SIZES: [usize; 5] = [16, 32, 64, 128, 256];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_a: f64,
    pub alpha_v: f64,
    pub alpha_z: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_a: 0.3,
            alpha_v: 0.3,
            alpha_z: 0.4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha_a", self.alpha_a), ("alpha_v", self.alpha_v), ("alpha_z", self.alpha_z)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Argument(format!("loss weight {name} = {v} must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    pub fn combine(&self, speech: f64, vision: f64, latent: f64) -> f64 {
        self.alpha_a * speech + self.alpha_v * vision + self.alpha_z * latent
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub margin: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            margin: 0.2,
            max_epochs: 50,
            patience: 3,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !BATCH_SIZES.contains(&self.batch_size) {
            return Err(Error::Argument(format!(
                "batch size {} not in {BATCH_SIZES:?}",
                self.batch_size
            )));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Argument(format!("margin {} must be positive", self.margin)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument("learning rate must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Argument("max_epochs must be positive".into()));
        }
        self.weights.validate()
    }

    fn fit_config(&self) -> FitConfig {
        FitConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
        }
    }
}

/// `‖target − y_hat‖²` over all elements.
pub fn cae_loss(y_hat: &[f64], target: &[f64]) -> Result<f64> {
    if y_hat.len() != target.len() {
        return Err(Error::Shape(format!(
            "reconstruction has {} values, target has {}",
            y_hat.len(),
            target.len()
        )));
    }
    Ok(y_hat.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum())
}

fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

/// Two-sided cosine margin loss over a matched pair and one negative per modality.
pub fn mtriplet_loss(z_a: &[f64], z_v: &[f64], z_a_neg: &[f64], z_v_neg: &[f64], margin: f64) -> Result<f64> {
    let pos = cosine_distance(z_a, z_v)?;
    let to_v_neg = cosine_distance(z_a, z_v_neg)?;
    let to_a_neg = cosine_distance(z_a_neg, z_v)?;
    Ok(hinge(margin + pos - to_v_neg) + hinge(margin + pos - to_a_neg))
}

/// Flattened item data addressed by index: speech as `frames × frame_dim`
/// values, images as `side²` pixels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InputBank {
    pub speech: Vec<Vec<f64>>,
    pub images: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct McaeExample {
    pub speech: usize,
    pub speech_pair: usize,
    pub image: usize,
    pub image_pair: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripletExample {
    pub speech: usize,
    pub image: usize,
    pub speech_neg: usize,
    pub image_neg: usize,
}

/// Input and reconstruction target for a unimodal CAE.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaeExample {
    pub input: usize,
    pub target: usize,
}

/// The three MCAE terms before weighting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McaeTerms {
    pub speech: f64,
    pub vision: f64,
    pub latent: f64,
}

fn speech_frames(params: &ModelParams, values: &[f64]) -> Result<usize> {
    let d = params.architecture().frame_dim;
    if values.is_empty() || values.len() % d != 0 {
        return Err(Error::Shape(format!("{} values are not whole frames of {d}", values.len())));
    }
    Ok(values.len() / d)
}

/// Speech CAE term: encode `input`, decode to the length of `target`.
pub fn speech_cae_graph(g: &mut Graph, params: &ModelParams, input: &[f64], target: &[f64]) -> Result<(Var, Var)> {
    let z = params.speech_encoder_graph(g, input)?;
    let len = speech_frames(params, target)?;
    let y = params.speech_decoder_graph(g, z, len)?;
    Ok((g.squared_error(y, target.to_vec())?, z))
}

pub fn vision_cae_graph(g: &mut Graph, params: &ModelParams, input: &[f64], target: &[f64]) -> Result<(Var, Var)> {
    let z = params.vision_encoder_graph(g, input)?;
    let y = params.vision_decoder_graph(g, z)?;
    Ok((g.squared_error(y, target.to_vec())?, z))
}

/// Weighted MCAE loss and its three unweighted terms.
pub fn mcae_graph(
    g: &mut Graph,
    params: &ModelParams,
    bank: &InputBank,
    ex: &McaeExample,
    w: &LossWeights,
) -> Result<(Var, [Var; 3])> {
    let (la, za) = speech_cae_graph(g, params, &bank.speech[ex.speech], &bank.speech[ex.speech_pair])?;
    let (lv, zv) = vision_cae_graph(g, params, &bank.images[ex.image], &bank.images[ex.image_pair])?;
    let lz = g.squared_distance(za, zv);
    let a = g.scale(la, w.alpha_a);
    let v = g.scale(lv, w.alpha_v);
    let z = g.scale(lz, w.alpha_z);
    let av = g.add(a, v);
    Ok((g.add(av, z), [la, lv, lz]))
}

/// MCAE loss of one example, with its unweighted terms.
pub fn mcae_loss(params: &ModelParams, bank: &InputBank, ex: &McaeExample, w: &LossWeights) -> Result<(f64, McaeTerms)> {
    let mut g = Graph::new(params.store());
    let (total, [a, v, z]) = mcae_graph(&mut g, params, bank, ex, w)?;
    Ok((
        g.scalar(total),
        McaeTerms {
            speech: g.scalar(a),
            vision: g.scalar(v),
            latent: g.scalar(z),
        },
    ))
}

pub fn mtriplet_graph(g: &mut Graph, params: &ModelParams, bank: &InputBank, ex: &TripletExample, margin: f64) -> Result<Var> {
    let za = params.speech_encoder_graph(g, &bank.speech[ex.speech])?;
    let zv = params.vision_encoder_graph(g, &bank.images[ex.image])?;
    let zan = params.speech_encoder_graph(g, &bank.speech[ex.speech_neg])?;
    let zvn = params.vision_encoder_graph(g, &bank.images[ex.image_neg])?;
    let pos = g.cosine_distance(za, zv)?;
    let to_v_neg = g.cosine_distance(za, zvn)?;
    let to_a_neg = g.cosine_distance(zan, zv)?;
    let t1 = g.sub(pos, to_v_neg);
    let t1 = g.add_scalar(t1, margin);
    let t1 = g.relu(t1);
    let t2 = g.sub(pos, to_a_neg);
    let t2 = g.add_scalar(t2, margin);
    let t2 = g.relu(t2);
    Ok(g.add(t1, t2))
}

/// Current embeddings of bank items under a two-encoder model.
pub fn bank_embeddings(
    params: &ModelParams,
    bank: &InputBank,
    speech: &[usize],
    images: &[usize],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let enc_a = |&i: &usize| -> Result<Vec<f64>> {
        let mut g = Graph::new(params.store());
        let z = params.speech_encoder_graph(&mut g, &bank.speech[i])?;
        Ok(g.value(z).to_vec())
    };
    let enc_v = |&i: &usize| -> Result<Vec<f64>> {
        let mut g = Graph::new(params.store());
        let z = params.vision_encoder_graph(&mut g, &bank.images[i])?;
        Ok(g.value(z).to_vec())
    };
    Ok((
        speech.par_iter().map(enc_a).collect::<Result<_>>()?,
        images.par_iter().map(enc_v).collect::<Result<_>>()?,
    ))
}

pub fn cae_graph(g: &mut Graph, params: &ModelParams, bank: &InputBank, ex: &CaeExample) -> Result<Var> {
    match params.kind() {
        ModelKind::SpeechCae => Ok(speech_cae_graph(g, params, &bank.speech[ex.input], &bank.speech[ex.target])?.0),
        ModelKind::VisionCae => Ok(vision_cae_graph(g, params, &bank.images[ex.input], &bank.images[ex.target])?.0),
        other => Err(Error::State(format!("{other:?} model is not a unimodal CAE"))),
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn expect_kind(params: &ModelParams, kinds: &[ModelKind]) -> Result<()> {
    if kinds.contains(&params.kind()) {
        Ok(())
    } else {
        Err(Error::State(format!("cannot train a {:?} model here", params.kind())))
    }
}

pub fn train_mcae(
    bank: &InputBank,
    train: &[McaeExample],
    val: &[McaeExample],
    init: ModelParams,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    expect_kind(&init, &[ModelKind::Mcae])?;
    if train.is_empty() {
        return Err(Error::Argument("no MCAE training examples".into()));
    }
    let mut params = init;
    let layout = params.clone();
    let w = cfg.weights;
    let loss = |g: &mut Graph, ex: &McaeExample| Ok(mcae_graph(g, &layout, bank, ex, &w)?.0);
    let out = fit(params.store_mut(), &cfg.fit_config(), |_, _| Ok(train.to_vec()), val, loss)?;
    Ok(TrainedModel {
        params,
        log: out.log,
        best_epoch: out.best_epoch,
    })
}

fn triplet_examples(pairs: &[(usize, usize)], negs: Vec<(usize, usize)>) -> Result<Vec<TripletExample>> {
    if negs.len() != pairs.len() {
        return Err(Error::Argument(format!("{} negatives for {} pairs", negs.len(), pairs.len())));
    }
    Ok(pairs
        .iter()
        .zip(negs)
        .map(|(&(speech, image), (speech_neg, image_neg))| TripletExample {
            speech,
            image,
            speech_neg,
            image_neg,
        })
        .collect())
}

/// `negatives(epoch, model)` returns one `(speech_neg, image_neg)` per
/// training pair and is called before every epoch; `val_negatives(model)` does
/// the same for the validation pairs after every epoch. Both see the model as
/// it stands, so negatives can be mined in the current embedding space.
pub fn train_mtriplet<N, V>(
    bank: &InputBank,
    pairs: &[(usize, usize)],
    val_pairs: &[(usize, usize)],
    mut negatives: N,
    mut val_negatives: V,
    init: ModelParams,
    cfg: &TrainConfig,
) -> Result<TrainedModel>
where
    N: FnMut(usize, &ModelParams) -> Result<Vec<(usize, usize)>>,
    V: FnMut(&ModelParams) -> Result<Vec<(usize, usize)>>,
{
    cfg.validate()?;
    expect_kind(&init, &[ModelKind::MTriplet])?;
    if pairs.is_empty() {
        return Err(Error::Argument("no MTriplet training pairs".into()));
    }
    let mut params = init;
    let layout = params.clone();
    let margin = cfg.margin;
    let loss = |g: &mut Graph, ex: &TripletExample| mtriplet_graph(g, &layout, bank, ex, margin);
    let mut current = layout.clone();
    let examples = |epoch: usize, store: &ParamSet| {
        current.store_mut().clone_from(store);
        triplet_examples(pairs, negatives(epoch, &current)?)
    };
    let mut current_val = layout.clone();
    let val = |store: &ParamSet| {
        if val_pairs.is_empty() {
            return Ok(Vec::new());
        }
        current_val.store_mut().clone_from(store);
        triplet_examples(val_pairs, val_negatives(&current_val)?)
    };
    let out = fit_online(params.store_mut(), &cfg.fit_config(), examples, val, loss)?;
    Ok(TrainedModel {
        params,
        log: out.log,
        best_epoch: out.best_epoch,
    })
}

pub fn train_cae(
    bank: &InputBank,
    train: &[CaeExample],
    val: &[CaeExample],
    init: ModelParams,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    expect_kind(&init, &[ModelKind::SpeechCae, ModelKind::VisionCae])?;
    if train.is_empty() {
        return Err(Error::Argument("no CAE training examples".into()));
    }
    let mut params = init;
    let layout = params.clone();
    let loss = |g: &mut Graph, ex: &CaeExample| cae_graph(g, &layout, bank, ex);
    let out = fit(params.store_mut(), &cfg.fit_config(), |_, _| Ok(train.to_vec()), val, loss)?;
    Ok(TrainedModel {
        params,
        log: out.log,
        best_epoch: out.best_epoch,
    })
}

/// Mean MTriplet loss over fixed examples.
pub fn mtriplet_mean_loss(params: &ModelParams, bank: &InputBank, examples: &[TripletExample], margin: f64) -> Result<f64> {
    mean_loss(params.store(), examples, &|g: &mut Graph, ex: &TripletExample| {
        mtriplet_graph(g, params, bank, ex, margin)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Architecture;
    use proptest::prelude::*;

    #[test]
    fn cae_examples() {
        assert_eq!(cae_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(cae_loss(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(cae_loss(&[0.5, 0.5], &[0.0, 1.0]).unwrap(), 0.5);
        assert!(matches!(cae_loss(&[0.5], &[0.0, 1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn weight_combination() {
        let w = LossWeights::default();
        assert!((w.combine(1.0, 2.0, 0.5) - 1.1).abs() < 1e-12);
        assert_eq!(w.combine(0.0, 0.0, 0.0), 0.0);
        let speech_only = LossWeights { alpha_a: 1.0, alpha_v: 0.0, alpha_z: 0.0 };
        assert_eq!(speech_only.combine(0.7, 3.0, 9.0), 0.7);
    }

    fn e(i: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn mtriplet_examples() {
        let z = vec![0.3; 130];
        assert!((mtriplet_loss(&z, &z, &z, &z, 0.2).unwrap() - 0.4).abs() < 1e-12);
        let (a, b) = (e(0, 130), e(1, 130));
        assert_eq!(mtriplet_loss(&a, &a, &b, &b, 0.2).unwrap(), 0.0);
        let mut vn = vec![0.0; 130];
        vn[0] = 1.0 / 2f64.sqrt();
        vn[1] = 1.0 / 2f64.sqrt();
        assert_eq!(mtriplet_loss(&a, &a, &b, &vn, 0.2).unwrap(), 0.0);
        assert!(matches!(
            mtriplet_loss(&vec![0.0; 130], &a, &a, &a, 0.2),
            Err(Error::DegenerateVector(_))
        ));
    }

    proptest! {
        #[test]
        fn mtriplet_bounds_and_scale_invariance(
            v in proptest::collection::vec(0.1f64..1.0, 16),
            signs in proptest::collection::vec(any::<bool>(), 16),
            scale in 0.01f64..100.0,
            m in 0.01f64..1.0,
        ) {
            let v: Vec<f64> = v.iter().zip(&signs).map(|(x, s)| if *s { *x } else { -*x }).collect();
            let (a, b, c, d) = (&v[0..4], &v[4..8], &v[8..12], &v[12..16]);
            let l = mtriplet_loss(a, b, c, d, m).unwrap();
            prop_assert!(l >= 0.0 && l <= 2.0 * (m + 2.0));
            let scaled: Vec<f64> = c.iter().map(|x| x * scale).collect();
            let l2 = mtriplet_loss(a, b, &scaled, d, m).unwrap();
            prop_assert!((l - l2).abs() < 1e-9);
            prop_assert!((mtriplet_loss(a, a, a, a, m).unwrap() - 2.0 * m).abs() < 1e-12);
        }

        #[test]
        fn mcae_is_linear_in_its_terms(
            la in 0.0f64..10.0, lv in 0.0f64..10.0, lz in 0.0f64..10.0, dl in 0.0f64..5.0,
            wa in 0.0f64..1.0, wv in 0.0f64..1.0, wz in 0.0f64..1.0,
        ) {
            let w = LossWeights { alpha_a: wa, alpha_v: wv, alpha_z: wz };
            let base = w.combine(la, lv, lz);
            prop_assert!((w.combine(la + dl, lv, lz) - base - wa * dl).abs() < 1e-9);
            prop_assert!((w.combine(la, lv + dl, lz) - base - wv * dl).abs() < 1e-9);
            prop_assert!((w.combine(la, lv, lz + dl) - base - wz * dl).abs() < 1e-9);
        }
    }

    fn tiny_bank() -> InputBank {
        let speech = (0..6)
            .map(|i| (0..2 * (2 + i % 3)).map(|k| ((i * 7 + k) as f64 * 0.61).sin()).collect())
            .collect();
        let images = (0..6)
            .map(|i| (0..16).map(|k| (((i * 5 + k) as f64 * 0.37).cos() + 1.0) / 2.0).collect())
            .collect();
        InputBank { speech, images }
    }

    #[test]
    fn mcae_graph_terms_combine() {
        let params = ModelParams::init(ModelKind::Mcae, &Architecture::tiny(), vec![], 3).unwrap();
        let bank = tiny_bank();
        let ex = McaeExample { speech: 0, speech_pair: 1, image: 2, image_pair: 3 };
        let w = LossWeights::default();
        let (total, t) = mcae_loss(&params, &bank, &ex, &w).unwrap();
        assert!((total - w.combine(t.speech, t.vision, t.latent)).abs() < 1e-12);
        let speech_only = LossWeights { alpha_a: 1.0, alpha_v: 0.0, alpha_z: 0.0 };
        let (only, _) = mcae_loss(&params, &bank, &ex, &speech_only).unwrap();
        let mut g = Graph::new(params.store());
        let (l, _) = speech_cae_graph(&mut g, &params, &bank.speech[0], &bank.speech[1]).unwrap();
        assert_eq!(only, g.scalar(l));
    }

    fn tiny_cfg(patience: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            batch_size: 16,
            max_epochs: 6,
            patience,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_contract() {
        assert!(TrainConfig { batch_size: 20, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { margin: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        let params = ModelParams::init(ModelKind::Mcae, &Architecture::tiny(), vec![], 3).unwrap();
        assert!(matches!(
            train_mcae(&tiny_bank(), &[], &[], params, &tiny_cfg(2)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn mtriplet_training_is_deterministic_and_stops() {
        let bank = tiny_bank();
        let pairs: Vec<(usize, usize)> = (0..6).map(|i| (i, i)).collect();
        let negs = |epoch: usize, _: &ModelParams| Ok((0..6).map(|i| ((i + 1 + epoch) % 6, (i + 2) % 6)).collect());
        let val_negs = |_: &ModelParams| Ok((0..6).map(|i| ((i + 3) % 6, (i + 3) % 6)).collect());
        let init = ModelParams::init(ModelKind::MTriplet, &Architecture::tiny(), vec![], 1).unwrap();
        let a = train_mtriplet(&bank, &pairs, &pairs, negs, val_negs, init.clone(), &tiny_cfg(0)).unwrap();
        let b = train_mtriplet(&bank, &pairs, &pairs, negs, val_negs, init, &tiny_cfg(0)).unwrap();
        assert_eq!(a.params, b.params);
        // patience 0 stops right after the first epoch that fails to improve
        let hist: Vec<f64> = a.log.iter().map(|r| r.val_loss).collect();
        let first_bad = (1..hist.len()).find(|&i| hist[i] >= hist[..i].iter().cloned().fold(f64::INFINITY, f64::min));
        match first_bad {
            Some(i) => assert_eq!(hist.len(), i + 1),
            None => assert_eq!(hist.len(), 6),
        }
    }
}
