//! Minimal f64 reverse-mode autodiff, enough for the GRU and CNN encoders.

mod fit;
mod graph;
mod optim;
mod params;

pub use fit::{batch_gradient, early_stop, fit, fit_online, mean_loss, EpochRecord, FitConfig, FitOutcome, StopDecision};
pub use graph::{Graph, Var};
pub use optim::Adam;
pub use params::{glorot_uniform, Grads, ParamId, ParamSet, ParamTensor};
