use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Matrix4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{adamw_step, clip_gradients, mean_nn_spacing, AdamState, SyntheticScene, TrainConfig, TrainError};
use crate::autodiff::{NdArray, Tape};
use crate::body::Region;
use crate::gaussian::{activate, Activation, GaussianSet, GaussianVars};
use crate::losses::{
    acap_loss, asap_loss, color_loss, mask_loss, perceptual_from_features, psnr, ssim, total_loss_op, FeatureNet,
    LossReport, LossVars, DEFAULT_PERCEPTUAL_SEED,
};
use crate::network::{predict_gaussians, Mode, NetworkConfig, NetworkInput, NetworkWeights, ParamVars};
use crate::render::{render_op, Image};
use crate::skinning::{pose_gaussians, SkinField};

/// View choice and head-mask draw for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub source: usize,
    pub targets: Vec<usize>,
    pub ratio: f64,
    pub mask_seed: u64,
}

/// Draws from stream `step` of the training seed: source view, then `targets` distinct
/// other views (with replacement when there are too few), then the mask ratio in
/// `[0, mask_max]` and the mask seed.
pub fn plan_step(cfg: &TrainConfig, mask_max: f64, train_views: &[usize], step: u64) -> StepPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step);
    let n = train_views.len();
    let source = train_views[rng.gen_range(0..n)];
    let others: Vec<usize> = train_views.iter().copied().filter(|&v| v != source).collect();
    let targets = if others.len() >= cfg.targets {
        rand::seq::index::sample(&mut rng, others.len(), cfg.targets).into_iter().map(|i| others[i]).collect()
    } else {
        (0..cfg.targets).map(|_| train_views[rng.gen_range(0..n)]).collect()
    };
    let ratio = if mask_max > 0.0 { rng.gen_range(0.0..=mask_max) } else { 0.0 };
    StepPlan { source, targets, ratio, mask_seed: rng.gen() }
}

struct ViewCache {
    body: NdArray,
    crop: NdArray,
    rgb: NdArray,
    mask: NdArray,
    features: Vec<NdArray>,
    transforms: Vec<Matrix4<f64>>,
}

/// Everything about a scene that stays fixed during training.
pub struct TrainContext<'a> {
    pub scene: &'a SyntheticScene,
    pub net: NetworkConfig,
    pub cfg: TrainConfig,
    pub train_views: Vec<usize>,
    pub asap_scale: f64,
    pub field: SkinField,
    anchors: NdArray,
    anchor_weights: NdArray,
    features: FeatureNet,
    views: Vec<ViewCache>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub plan: StepPlan,
    /// Loss before the update.
    pub report: LossReport,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepOutcome {
    pub fn log_line(&self, step: u64) -> String {
        format!("{} grad_norm={:?} mask_ratio={:?}", self.report.log_line(step as usize), self.grad_norm, self.plan.ratio)
    }
}

impl<'a> TrainContext<'a> {
    pub fn new(scene: &'a SyntheticScene, net: &NetworkConfig, cfg: &TrainConfig) -> Result<Self, TrainError> {
        net.validate()?;
        cfg.validate()?;
        if net.sh_degree != scene.gt.sh_degree {
            return Err(TrainError::Config(format!(
                "network predicts SH degree {}, scene uses {}",
                net.sh_degree, scene.gt.sh_degree
            )));
        }
        let train_views: Vec<usize> = scene.train_views().collect();
        if train_views.is_empty() {
            return Err(TrainError::Config("scene has no training views".into()));
        }
        let field = scene.skin_field()?;
        let anchor_weights = NdArray::new(vec![scene.anchors.len(), field.joints], field.query(&scene.anchors))?;
        let features = FeatureNet::new(DEFAULT_PERCEPTUAL_SEED);
        let mut views = Vec::with_capacity(scene.views.len());
        for (i, v) in scene.views.iter().enumerate() {
            let rgb = v.rgb.to_ndarray();
            let mut tape = Tape::new();
            let x = tape.constant(rgb.clone())?;
            let f = features.features(&mut tape, x)?;
            views.push(ViewCache {
                body: v.body_image(net.body_res).to_ndarray(),
                crop: v.head_crop(net.head_res).to_ndarray(),
                mask: v.mask.to_ndarray(),
                rgb,
                features: f.iter().map(|&fv| tape.value(fv).clone()).collect(),
                transforms: scene.joint_transforms(i)?,
            });
        }
        let asap_scale = cfg.asap_scale.unwrap_or_else(|| mean_nn_spacing(&scene.anchors).max(1e-3));
        let anchors = NdArray::new(vec![scene.anchors.len(), 3], scene.anchors.concat())?;
        Ok(Self { scene, net: net.clone(), cfg: cfg.clone(), train_views, asap_scale, field, anchors, anchor_weights, features, views })
    }

    pub fn plan(&self, step: u64) -> StepPlan {
        plan_step(&self.cfg, self.net.mask_max, &self.train_views, step)
    }

    /// Records the full step objective: predict, activate, regularize once, then pose,
    /// render and compare against each target, averaging the photometric terms.
    pub fn step_loss(&self, tape: &mut Tape, p: &ParamVars, plan: &StepPlan) -> Result<LossVars, TrainError> {
        let src = &self.views[plan.source];
        let body_image = tape.constant(src.body.clone())?;
        let head_crop = tape.constant(src.crop.clone())?;
        let input = NetworkInput { body_image, head_crop, anchors: &self.scene.anchors, regions: &self.scene.regions };
        let pred = predict_gaussians(tape, &self.net, p, &input, Mode::Train { ratio: plan.ratio, seed: plan.mask_seed })?;
        let anchors = tape.constant(self.anchors.clone())?;
        let (g, offsets) = activate(tape, &pred.raw, anchors, &Activation::default())?;
        let asap = asap_loss(tape, g.rotations, g.scales, self.asap_scale)?;
        let acap = acap_loss(tape, offsets, self.cfg.loss.acap_radius)?;
        let weights = if self.cfg.anchor_skinning {
            tape.constant(self.anchor_weights.clone())?
        } else {
            self.field.query_op(tape, g.positions)?
        };
        let mut sums: Option<[crate::autodiff::Var; 3]> = None;
        for &t in &plan.targets {
            let view = &self.views[t];
            let posed = pose_gaussians(tape, g.positions, g.rotations, weights, &view.transforms)?;
            let gv = GaussianVars { positions: tape.narrow(posed, 1, 0, 3)?, rotations: tape.narrow(posed, 1, 3, 4)?, ..g };
            let img = render_op(tape, &gv, &self.scene.views[t].camera, [0.0; 3])?;
            let rgb = tape.narrow(img, 2, 0, 3)?;
            let alpha = tape.narrow(img, 2, 3, 1)?;
            let target_rgb = tape.constant(view.rgb.clone())?;
            let target_mask = tape.constant(view.mask.clone())?;
            let c = color_loss(tape, rgb, target_rgb)?;
            let m = mask_loss(tape, alpha, target_mask)?;
            let fa = self.features.features(tape, rgb)?;
            let fb = view.features.iter().map(|f| tape.constant(f.clone())).collect::<Result<Vec<_>, _>>()?;
            let per = perceptual_from_features(tape, &fa, &fb)?;
            sums = Some(match sums {
                None => [c, m, per],
                Some([a, b, d]) => [tape.add(a, c)?, tape.add(b, m)?, tape.add(d, per)?],
            });
        }
        let [c, m, per] = sums.ok_or_else(|| TrainError::Config("no target views".into()))?;
        let k = 1.0 / plan.targets.len() as f64;
        let (c, m, per) = (tape.scale(c, k)?, tape.scale(m, k)?, tape.scale(per, k)?);
        Ok(total_loss_op(tape, c, m, per, asap, acap, &self.cfg.loss)?)
    }
}

/// One optimization step at index `state.step`: loss, backward, clip, AdamW, then the
/// weights are rounded to `f32` so that checkpoints hold them exactly.
pub fn train_step(ctx: &TrainContext<'_>, weights: &mut NetworkWeights, state: &mut AdamState) -> Result<StepOutcome, TrainError> {
    let step = state.step;
    let plan = ctx.plan(step);
    let mut tape = Tape::new();
    let p = weights.bind(&mut tape, true)?;
    let lv = ctx.step_loss(&mut tape, &p, &plan)?;
    let report = lv.report(&tape);
    let finite = [report.color, report.mask, report.perceptual, report.asap, report.acap, report.total];
    if finite.iter().any(|v| !v.is_finite()) {
        return Err(TrainError::NonFinite { step, report, detail: format!("plan {plan:?}") });
    }
    let mut g = tape.backward(lv.total)?;
    let mut grads = BTreeMap::new();
    for (k, v) in &p.vars {
        let gk = g.take(*v)?;
        if let Some(i) = gk.data().iter().position(|x| !x.is_finite()) {
            return Err(TrainError::NonFinite { step, report, detail: format!("gradient of {k}[{i}] is not finite") });
        }
        grads.insert(k.clone(), gk);
    }
    let grad_norm = clip_gradients(&mut grads, ctx.cfg.clip);
    adamw_step(&mut weights.tensors, &grads, state, &ctx.cfg.optim)?;
    for t in weights.tensors.values_mut() {
        for x in t.data_mut() {
            *x = *x as f32 as f64;
        }
    }
    Ok(StepOutcome { plan, report, grad_norm })
}

/// Runs steps until `state.step == until`, reporting each one.
pub fn fit(
    ctx: &TrainContext<'_>,
    weights: &mut NetworkWeights,
    state: &mut AdamState,
    until: u64,
    mut on_step: impl FnMut(u64, &StepOutcome, &NetworkWeights, &AdamState) -> Result<(), TrainError>,
) -> Result<(), TrainError> {
    while state.step < until {
        let step = state.step;
        let out = train_step(ctx, weights, state)?;
        on_step(step, &out, weights, state)?;
    }
    Ok(())
}

/// Single inference-mode forward pass to a canonical avatar.
pub fn predict_avatar(
    net: &NetworkConfig,
    weights: &NetworkWeights,
    body_image: &Image,
    head_crop: &Image,
    anchors: &[[f64; 3]],
    regions: &[Region],
) -> Result<GaussianSet, TrainError> {
    let mut tape = Tape::new();
    let p = weights.bind(&mut tape, false)?;
    let body_image = tape.constant(body_image.to_ndarray())?;
    let head_crop = tape.constant(head_crop.to_ndarray())?;
    let input = NetworkInput { body_image, head_crop, anchors, regions };
    let pred = predict_gaussians(&mut tape, net, &p, &input, Mode::Infer)?;
    let a = tape.constant(NdArray::new(vec![anchors.len(), 3], anchors.concat())?)?;
    let (g, _) = activate(&mut tape, &pred.raw, a, &Activation::default())?;
    Ok(GaussianSet::from_vars(&tape, &g, net.sh_degree))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `(view, psnr, ssim)`.
    pub rows: Vec<(usize, f64, f64)>,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.1).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.2).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// ```text
    /// # view psnr ssim
    /// view 8 31.25 0.97
    /// mean 30.1 0.96
    /// ```
    pub fn to_text(&self) -> String {
        let mut s = String::from("# view psnr ssim\n");
        for (v, p, q) in &self.rows {
            s.push_str(&format!("view {v} {p:?} {q:?}\n"));
        }
        s.push_str(&format!("mean {:?} {:?}\n", self.mean_psnr(), self.mean_ssim()));
        s
    }
}

/// Renders a canonical avatar with fixed skin weights at each view's pose and camera.
pub fn evaluate_avatar(scene: &SyntheticScene, g: &GaussianSet, weights: &NdArray, views: &[usize]) -> Result<EvalReport, TrainError> {
    let mut rows = Vec::with_capacity(views.len());
    for &v in views {
        let view = scene.views.get(v).ok_or_else(|| TrainError::Config(format!("scene has no view {v}")))?;
        let (rgb, _) = super::render_posed(&scene.template, g, weights, &view.pose, &view.camera)?;
        rows.push((v, psnr(&rgb, &view.rgb)?, ssim(&rgb, &view.rgb)?));
    }
    Ok(EvalReport { rows })
}

/// Predicts from the first training view and scores the avatar on `views`.
pub fn evaluate(ctx: &TrainContext<'_>, weights: &NetworkWeights, views: &[usize]) -> Result<EvalReport, TrainError> {
    let src = &ctx.scene.views[ctx.train_views[0]];
    let g = predict_avatar(
        &ctx.net,
        weights,
        &src.body_image(ctx.net.body_res),
        &src.head_crop(ctx.net.head_res),
        &ctx.scene.anchors,
        &ctx.scene.regions,
    )?;
    let w = if ctx.cfg.anchor_skinning {
        ctx.anchor_weights.clone()
    } else {
        NdArray::new(vec![g.len(), ctx.field.joints], ctx.field.query(&g.positions))?
    };
    evaluate_avatar(ctx.scene, &g, &w, views)
}

/// Weights, optimizer state and the run configuration text.
///
/// File layout (little-endian): `LHC1`, `u32` version, `u32` length + UTF-8 config text,
/// `u64` step, `u32` length + weight archive (`LHW1`), then for every weight in archive
/// order its first and second Adam moments as `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub weights: NetworkWeights,
    pub state: AdamState,
}

const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = b"LHC1".to_vec();
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.state.step.to_le_bytes());
        let w = self.weights.to_bytes();
        out.extend_from_slice(&(w.len() as u32).to_le_bytes());
        out.extend_from_slice(&w);
        for k in self.weights.tensors.keys() {
            for moments in [&self.state.m, &self.state.v] {
                for x in moments[k].data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let bad = |m: &str| TrainError::Format(format!("checkpoint: {m}"));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], TrainError> {
            if n > bytes.len() - pos {
                return Err(bad("truncated"));
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        if take(4)? != b"LHC1" {
            return Err(bad("bad magic"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let version = u32_at(take(4)?);
        if version != CHECKPOINT_VERSION as usize {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n = u32_at(take(4)?);
        let config = String::from_utf8(take(n)?.to_vec()).map_err(|_| bad("config is not UTF-8"))?;
        let step = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let n = u32_at(take(4)?);
        let weights = NetworkWeights::from_bytes(take(n)?)?;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (k, t) in &weights.tensors {
            for dst in [&mut m, &mut v] {
                let raw = take(t.len() * 8)?;
                let data = raw.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                dst.insert(k.clone(), NdArray::new(t.shape().to_vec(), data)?);
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { config, weights, state: AdamState { step, m, v } })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
