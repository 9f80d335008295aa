//! Optimization, synthetic self-rendered scenes, the train step and evaluation.

mod scene;
mod step;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::autodiff::{AdError, NdArray};
use crate::body::BodyError;
use crate::gaussian::AvatarError;
use crate::losses::{LossReport, LossWeights};
use crate::network::NetworkError;
use crate::render::RenderError;

pub use scene::{anchors_to_text, head_rect, make_synthetic_scene, mean_nn_spacing, parse_anchors, render_posed, SceneConfig, SceneView, SyntheticScene};
pub use step::{
    evaluate, evaluate_avatar, fit, plan_step, predict_avatar, train_step, Checkpoint, EvalReport, StepOutcome, StepPlan,
    TrainContext,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error(transparent)]
    Avatar(#[from] AvatarError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("non-finite loss at step {step}: {report:?}; {detail}")]
    NonFinite { step: u64, report: LossReport, detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 4e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optim: AdamWConfig,
    /// Global L2 gradient-norm threshold.
    pub clip: f64,
    pub iterations: u64,
    pub targets: usize,
    /// Drives view and mask sampling; step `k` uses stream `k` of this seed.
    pub seed: u64,
    pub init_seed: u64,
    pub loss: LossWeights,
    /// ASAP target scale; `None` uses the mean nearest-neighbor spacing of the anchors.
    pub asap_scale: Option<f64>,
    /// Query skinning weights at the anchors instead of at the predicted positions.
    pub anchor_skinning: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: AdamWConfig::default(),
            clip: 0.1,
            iterations: 2000,
            targets: 4,
            seed: 0,
            init_seed: 0,
            loss: LossWeights::default(),
            asap_scale: None,
            anchor_skinning: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let o = &self.optim;
        let ok = o.lr > 0.0
            && (0.0..1.0).contains(&o.beta1)
            && (0.0..1.0).contains(&o.beta2)
            && o.eps > 0.0
            && o.weight_decay >= 0.0
            && self.clip > 0.0
            && self.targets >= 1
            && self.asap_scale.map_or(true, |t| t > 0.0);
        if !ok {
            return Err(TrainError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Adam moments keyed like the weights they track.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, NdArray>,
    pub v: BTreeMap<String, NdArray>,
}

impl AdamState {
    pub fn new(params: &BTreeMap<String, NdArray>) -> Self {
        let zeros: BTreeMap<String, NdArray> = params.iter().map(|(k, p)| (k.clone(), NdArray::zeros_like(p))).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// Decoupled weight decay with bias-corrected moments:
/// `θ ← θ − lr·(m̂ / (√v̂ + ε) + λ·θ)`.
pub fn adamw_step(
    params: &mut BTreeMap<String, NdArray>,
    grads: &BTreeMap<String, NdArray>,
    state: &mut AdamState,
    cfg: &AdamWConfig,
) -> Result<(), TrainError> {
    for (k, p) in params.iter() {
        let g = grads.get(k).ok_or_else(|| TrainError::Config(format!("no gradient for {k}")))?;
        let (m, v) = (state.m.get(k), state.v.get(k));
        if g.shape() != p.shape() || m.map(NdArray::shape) != Some(p.shape()) || v.map(NdArray::shape) != Some(p.shape()) {
            return Err(TrainError::Config(format!("shape mismatch for {k}")));
        }
    }
    if grads.len() != params.len() {
        return Err(TrainError::Config(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, p) in params.iter_mut() {
        let g = grads[k].data();
        let m = state.m.get_mut(k).expect("checked").data_mut();
        let v = state.v.get_mut(k).expect("checked").data_mut();
        for (i, theta) in p.data_mut().iter_mut().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *theta -= cfg.lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * *theta);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &BTreeMap<String, NdArray>) -> f64 {
    grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales all gradients by `threshold / norm` when the global norm exceeds `threshold`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut BTreeMap<String, NdArray>, threshold: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > threshold {
        let s = threshold / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
