//! Finite-difference gradient suites behind `lhm gradcheck`.
//!
//! Each row checks one component and names the tape operation it is built around, so a
//! corrupted backward rule (see [`crate::autodiff::set_gradient_fault`]) shows up as a
//! failing row with that name.

use nalgebra::Matrix4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, grad_check_coords, AdError, BinaryOp, NdArray, ReduceOp, Tape, UnaryOp, Var};
use crate::body::Region;
use crate::gaussian::{activate, normalize_quat_rows, Activation, GaussianSet, GaussianVars, RawVars};
use crate::losses::{
    acap_loss, asap_loss, color_loss, mask_loss, perceptual_loss, total_loss_op, FeatureNet, LossWeights,
    DEFAULT_PERCEPTUAL_SEED,
};
use crate::math::{axis_angle_to_mat, normalize_quat, rigid};
use crate::network::{
    attention, global_context, mbht_block, mm_transformer_block, predict_gaussians, Mode, NetworkConfig, NetworkInput,
    NetworkWeights, Streams,
};
use crate::render::{render_op, Camera};
use crate::skinning::{pose_gaussians, SkinField};

pub const SUITES: [&str; 5] = ["ops", "network", "renderer", "losses", "end2end"];

/// Smooth primitives.
pub const TIGHT: f64 = 1e-6;
/// Composites through the renderer or the whole network.
pub const LOOSE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub suite: &'static str,
    pub component: String,
    pub worst: f64,
    pub threshold: f64,
    pub error: Option<String>,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.worst < self.threshold
    }

    pub fn line(&self) -> String {
        let status = if self.passed() { "ok  " } else { "FAIL" };
        match &self.error {
            Some(e) => format!("{status} {:<8} {:<28} error: {e}", self.suite, self.component),
            None => format!(
                "{status} {:<8} {:<28} worst {:.3e} (limit {:.0e})",
                self.suite, self.component, self.worst, self.threshold
            ),
        }
    }
}

pub fn run_suite(name: &str) -> Result<Vec<CheckRow>, String> {
    match name {
        "ops" => Ok(ops()),
        "network" => Ok(network()),
        "renderer" => Ok(renderer()),
        "losses" => Ok(losses()),
        "end2end" => Ok(end2end()),
        _ => Err(format!("unknown suite `{name}`, expected one of {}", SUITES.join(", "))),
    }
}

struct Suite {
    name: &'static str,
    rows: Vec<CheckRow>,
}

impl Suite {
    fn new(name: &'static str) -> Self {
        Self { name, rows: Vec::new() }
    }

    fn push(&mut self, component: &str, threshold: f64, worst: Result<f64, AdError>) {
        let (worst, error) = match worst {
            Ok(w) => (w, None),
            Err(e) => (f64::INFINITY, Some(e.to_string())),
        };
        self.rows.push(CheckRow { suite: self.name, component: component.to_string(), worst, threshold, error });
    }

    fn check<F>(&mut self, component: &str, threshold: f64, f: F, x: &NdArray, step: f64)
    where
        F: Fn(&mut Tape, Var) -> Result<Var, AdError>,
    {
        self.push(component, threshold, grad_check(f, x, step).map(|r| r.max_rel_error));
    }
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> NdArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    NdArray::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// `Σ w ⊙ y` with fixed random `w`, so every output coordinate matters.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, AdError> {
    let w = tape.constant(random(tape.shape(y), seed, -1.0, 1.0))?;
    let m = tape.mul(y, w)?;
    tape.sum_all(m)
}

fn ops() -> Vec<CheckRow> {
    let mut s = Suite::new("ops");
    let x = random(&[3, 4], 1, -1.5, 1.5);
    let pos = random(&[3, 4], 2, 0.3, 2.0);
    let unary = [
        (UnaryOp::Exp, &x),
        (UnaryOp::Log, &pos),
        (UnaryOp::Sigmoid, &x),
        (UnaryOp::Softplus, &x),
        (UnaryOp::Gelu, &x),
        (UnaryOp::Silu, &x),
        (UnaryOp::Tanh, &x),
        (UnaryOp::Sqrt, &pos),
        (UnaryOp::Square, &x),
        (UnaryOp::Negate, &x),
        (UnaryOp::Abs, &pos),
        (UnaryOp::Relu, &pos),
    ];
    for (op, input) in unary {
        s.check(op.name(), TIGHT, |t, v| {
            let y = t.apply_unary(op, v)?;
            probe(t, y, 10)
        }, input, 1e-5);
    }
    let other = random(&[1, 4], 3, 0.5, 1.5);
    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
        s.check(op.name(), TIGHT, |t, v| {
            let b = t.constant(other.clone())?;
            let y = t.apply_binary(op, v, b)?;
            probe(t, y, 11)
        }, &x, 1e-5);
        // broadcast side
        s.check(&format!("{} (broadcast)", op.name()), TIGHT, |t, v| {
            let a = t.constant(pos.clone())?;
            let y = t.apply_binary(op, a, v)?;
            probe(t, y, 12)
        }, &other, 1e-5);
    }
    s.check("scale", TIGHT, |t, v| {
        let y = t.scale(v, -0.7)?;
        probe(t, y, 13)
    }, &x, 1e-5);
    s.check("add_scalar", TIGHT, |t, v| {
        let y = t.add_scalar(v, 0.3)?;
        probe(t, y, 14)
    }, &x, 1e-5);
    let b3 = random(&[2, 4, 3], 4, -1.0, 1.0);
    let a3 = random(&[2, 3, 4], 5, -1.0, 1.0);
    s.check("matmul", TIGHT, |t, v| {
        let b = t.constant(b3.clone())?;
        let y = t.matmul(v, b)?;
        probe(t, y, 15)
    }, &a3, 1e-5);
    let (w, bias) = (random(&[4, 5], 6, -1.0, 1.0), random(&[5], 7, -0.5, 0.5));
    s.check("linear", TIGHT, |t, v| {
        let wv = t.param(w.clone())?;
        let bv = t.constant(bias.clone())?;
        let y = t.linear(v, wv, bv)?;
        probe(t, y, 16)
    }, &x, 1e-5);
    s.check("linear (weight)", TIGHT, |t, v| {
        let xv = t.constant(x.clone())?;
        let bv = t.constant(bias.clone())?;
        let y = t.linear(xv, v, bv)?;
        probe(t, y, 17)
    }, &w, 1e-5);
    s.check("softmax", TIGHT, |t, v| {
        let y = t.softmax(v, 1)?;
        probe(t, y, 18)
    }, &x, 1e-5);
    let (gain, beta) = (random(&[4], 8, 0.5, 1.5), random(&[4], 9, -0.3, 0.3));
    s.check("layer_norm", TIGHT, |t, v| {
        let g = t.constant(gain.clone())?;
        let b = t.constant(beta.clone())?;
        let y = t.layer_norm(v, g, b, 1e-5)?;
        probe(t, y, 19)
    }, &x, 1e-5);
    for op in [ReduceOp::Sum, ReduceOp::Mean, ReduceOp::Max] {
        s.check(op.name(), TIGHT, |t, v| {
            let y = t.reduce(op, v, 0)?;
            probe(t, y, 20)
        }, &x, 1e-5);
    }
    s.check("reshape/permute", TIGHT, |t, v| {
        let r = t.reshape(v, &[2, 2, 3])?;
        let y = t.permute(r, &[2, 0, 1])?;
        probe(t, y, 21)
    }, &x, 1e-5);
    s.check("narrow/concat", TIGHT, |t, v| {
        let a = t.narrow(v, 1, 1, 2)?;
        let b = t.narrow(v, 0, 0, 2)?;
        let b = t.narrow(b, 1, 0, 2)?;
        let y = t.concat(&[a, b, a], 0)?;
        probe(t, y, 22)
    }, &x, 1e-5);
    s.check("index_rows/gather", TIGHT, |t, v| {
        let a = t.index_rows(v, &[2, 0, 2])?;
        let b = t.gather(v, vec![11, 0, 5, 5], &[2, 2])?;
        let pa = probe(t, a, 23)?;
        let pb = probe(t, b, 24)?;
        t.add(pa, pb)
    }, &x, 1e-5);
    s.check("sum_all/mean_all", TIGHT, |t, v| {
        let sq = t.square(v)?;
        let a = t.sum_all(sq)?;
        let b = t.mean_all(v)?;
        t.add(a, b)
    }, &x, 1e-5);
    let q = random(&[3, 4], 25, -1.0, 1.0);
    s.check("normalize_quat", TIGHT, |t, v| {
        let y = normalize_quat_rows(t, v)?;
        probe(t, y, 26)
    }, &q, 1e-6);
    let heads = random(&[5, 4], 27, -1.0, 1.0);
    s.check("attention", TIGHT, |t, v| {
        let k = t.constant(random(&[5, 4], 28, -1.0, 1.0))?;
        let (y, _) = attention(t, v, k, v, 2)?;
        probe(t, y, 29)
    }, &heads, 1e-5);

    // skinning: a small analytic field and rigid joint transforms
    let field = toy_field();
    let pts = random(&[4, 3], 30, 0.1, 0.9);
    s.check("skin_query", TIGHT, |t, v| {
        let y = field.query_op(t, v)?;
        probe(t, y, 31)
    }, &pts, 1e-6);
    let transforms = toy_transforms();
    let rot = NdArray::new(vec![4, 4], (0..4).flat_map(|i| normalize_quat(&[1.0, 0.1 * i as f64, -0.2, 0.3]).0).collect()).expect("shape");
    let wts = NdArray::new(vec![4, 2], vec![0.7, 0.3, 0.2, 0.8, 0.5, 0.5, 1.0, 0.0]).expect("shape");
    for which in 0..3 {
        let start = [&pts, &rot, &wts][which];
        let name = ["pose_gaussians (p)", "pose_gaussians (r)", "pose_gaussians (w)"][which];
        s.check(name, TIGHT, |t, v| {
            let mut leaves = [t.constant(pts.clone())?, t.constant(rot.clone())?, t.constant(wts.clone())?];
            leaves[which] = v;
            let y = pose_gaussians(t, leaves[0], leaves[1], leaves[2], &transforms)?;
            probe(t, y, 32)
        }, start, 1e-6);
    }
    s.rows
}

fn toy_field() -> SkinField {
    let r = 4;
    let mut weights = Vec::with_capacity(r * r * r * 2);
    for z in 0..r {
        for y in 0..r {
            for x in 0..r {
                let a = 0.2 + 0.6 * ((x + 2 * y + 3 * z) % 5) as f64 / 4.0;
                weights.extend([a, 1.0 - a]);
            }
        }
    }
    SkinField { min: [0.0; 3], max: [1.0; 3], resolution: r, joints: 2, weights }
}

fn toy_transforms() -> Vec<Matrix4<f64>> {
    vec![
        rigid(&axis_angle_to_mat(&[0.1, -0.3, 0.2]), &nalgebra::Vector3::new(0.05, 0.0, -0.1)),
        rigid(&axis_angle_to_mat(&[-0.4, 0.2, 0.5]), &nalgebra::Vector3::new(0.0, 0.2, 0.1)),
    ]
}

/// Micro network with every modulation gate opened.
fn micro_network() -> (NetworkConfig, NetworkWeights) {
    let cfg = NetworkConfig::micro();
    let mut w = NetworkWeights::init(&cfg, 14).expect("micro config is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(140);
    for (k, v) in w.tensors.iter_mut() {
        if k.ends_with(".mod.w") || k.ends_with(".mod.b") {
            for x in v.data_mut() {
                if *x == 0.0 {
                    *x = rng.gen_range(-0.3..0.3);
                }
            }
        }
    }
    (cfg, w)
}

fn micro_points(n: usize) -> (Vec<[f64; 3]>, Vec<Region>) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts = (0..n).map(|_| [rng.gen_range(-0.8..0.8), rng.gen_range(0.0..1.7), rng.gen_range(-0.1..0.1)]).collect();
    let regions = (0..n).map(|i| if i % 3 == 0 { Region::Head } else { Region::Body }).collect();
    (pts, regions)
}

/// Checks a few evenly spaced coordinates of one weight tensor, with the given scalar.
fn weight_check<F>(w: &NetworkWeights, path: &str, step: f64, scalar: F) -> Result<f64, AdError>
where
    F: Fn(&mut Tape, &crate::network::ParamVars) -> Result<Var, AdError>,
{
    let x = w.get(path)?.clone();
    let coords: Vec<usize> = (0..x.len()).step_by((x.len() / 6).max(1)).collect();
    let f = |tape: &mut Tape, v: Var| {
        let p = w.bind_with(tape, false, Some((path, v)))?;
        scalar(tape, &p)
    };
    grad_check_coords(f, &x, step, &coords).map(|r| r.max_rel_error)
}

fn network() -> Vec<CheckRow> {
    let mut s = Suite::new("network");
    let (cfg, w) = micro_network();
    let c = cfg.c_tok;
    let body = random(&[cfg.body_res, cfg.body_res, 3], 1, 0.0, 1.0);
    let crop = random(&[cfg.head_res, cfg.head_res, 3], 2, 0.0, 1.0);
    let (pts, regions) = micro_points(12);

    let geo = |t: &mut Tape, p: &crate::network::ParamVars| {
        let g = crate::network::encode_geometric(t, &cfg, p, &pts, &regions)?;
        let a = probe(t, g.head, 40)?;
        let b = probe(t, g.body, 41)?;
        t.add(a, b)
    };
    s.push("geometric tokens", TIGHT, weight_check(&w, "geo.mlp0.w", 1e-5, geo));
    let body_enc = |t: &mut Tape, p: &crate::network::ParamVars| {
        let x = t.constant(body.clone())?;
        let y = crate::network::encode_body_image(t, &cfg, p, x)?;
        probe(t, y, 42)
    };
    s.push("body encoder", TIGHT, weight_check(&w, "body.blk0.qkv.w", 1e-5, body_enc));
    let head_enc = |t: &mut Tape, p: &crate::network::ParamVars| {
        let x = t.constant(crop.clone())?;
        let y = crate::network::encode_head_pyramid(t, &cfg, p, x)?;
        probe(t, y, 43)
    };
    s.push("head pyramid (fusion)", TIGHT, weight_check(&w, "head.fuse.w", 1e-5, head_enc));
    s.push("head pyramid (deep tap)", TIGHT, weight_check(&w, "head.blk3.ffn0.w", 1e-5, head_enc));
    let tokens = random(&[5, c], 44, -1.0, 1.0);
    {
        let p_fixed = |t: &mut Tape| w.bind(t, false);
        s.check("global context", TIGHT, |t, v| {
            let p = p_fixed(t)?;
            let f = global_context(t, &p, v)?;
            probe(t, f, 45)
        }, &tokens, 1e-5);
        let ctx = random(&[4, c], 46, -1.0, 1.0);
        let fg = random(&[1, c], 47, -1.0, 1.0);
        s.check("mm block (query)", TIGHT, |t, v| {
            let p = p_fixed(t)?;
            let k = t.constant(ctx.clone())?;
            let f = t.constant(fg.clone())?;
            let out = mm_transformer_block(t, &cfg, &p, "mbht0.s1", v, k, f)?;
            let a = probe(t, out.query, 48)?;
            let b = probe(t, out.context, 49)?;
            t.add(a, b)
        }, &tokens, 1e-5);
        s.check("mm block (global)", TIGHT, |t, v| {
            let p = p_fixed(t)?;
            let q = t.constant(tokens.clone())?;
            let k = t.constant(ctx.clone())?;
            let out = mm_transformer_block(t, &cfg, &p, "mbht0.s3", q, k, v)?;
            let a = probe(t, out.query, 50)?;
            let b = probe(t, out.context, 51)?;
            t.add(a, b)
        }, &fg, 1e-5);
        let gh = random(&[3, c], 52, -1.0, 1.0);
        s.check("mbht block", TIGHT, |t, v| {
            let p = p_fixed(t)?;
            let streams = Streams {
                geo_head: v,
                geo_body: t.constant(random(&[5, c], 53, -1.0, 1.0))?,
                img_head: t.constant(random(&[4, c], 54, -1.0, 1.0))?,
                img_body: t.constant(random(&[4, c], 55, -1.0, 1.0))?,
            };
            let f = t.constant(fg.clone())?;
            let (out, _) = mbht_block(t, &cfg, &p, 0, streams, f)?;
            let a = probe(t, out.geo_head, 56)?;
            let b = probe(t, out.geo_body, 57)?;
            t.add(a, b)
        }, &gh, 1e-5);
    }
    s.rows
}

/// Sum of all raw outputs of the micro network, the end-to-end scalar.
fn raw_sum(
    tape: &mut Tape,
    cfg: &NetworkConfig,
    p: &crate::network::ParamVars,
    body: Var,
    crop: Var,
    pts: &[[f64; 3]],
    regions: &[Region],
) -> Result<Var, AdError> {
    let input = NetworkInput { body_image: body, head_crop: crop, anchors: pts, regions };
    let pred = predict_gaussians(tape, cfg, p, &input, Mode::Infer)?;
    let r = &pred.raw;
    let mut total = tape.sum_all(r.offsets)?;
    for v in [r.rotations, r.scales, r.opacities, r.sh] {
        let sv = tape.sum_all(v)?;
        total = tape.add(total, sv)?;
    }
    Ok(total)
}

fn end2end() -> Vec<CheckRow> {
    let mut s = Suite::new("end2end");
    let (cfg, w) = micro_network();
    let body = random(&[cfg.body_res, cfg.body_res, 3], 1, 0.0, 1.0);
    let crop = random(&[cfg.head_res, cfg.head_res, 3], 2, 0.0, 1.0);
    let (pts, regions) = micro_points(12);
    let paths = [
        "geo.mlp0.w", "body.patch.w", "body.blk0.qkv.w", "head.blk3.ffn0.w", "head.fuse.w", "ctx0.w",
        "mbht0.s1.q.mod.w", "mbht0.s1.c.qkv.w", "mbht0.s3.q.out.w", "mbht0.norm_body.g", "reg0.w", "reg.sh.w",
    ];
    let mut worst: Result<f64, AdError> = Ok(0.0);
    for path in paths {
        let r = weight_check(&w, path, 1e-4, |t, p| {
            let b = t.constant(body.clone())?;
            let h = t.constant(crop.clone())?;
            raw_sum(t, &cfg, p, b, h, &pts, &regions)
        });
        worst = match (worst, r) {
            (Ok(a), Ok(b)) => Ok(a.max(b)),
            (Err(e), _) | (_, Err(e)) => Err(AdError::Invalid(format!("{path}: {e}"))),
        };
    }
    s.push("network weights", LOOSE, worst);
    let coords: Vec<usize> = (0..body.len()).step_by(97).collect();
    let f = |t: &mut Tape, v: Var| {
        let p = w.bind(t, false)?;
        let h = t.constant(crop.clone())?;
        raw_sum(t, &cfg, &p, v, h, &pts, &regions)
    };
    s.push("network body image", LOOSE, grad_check_coords(f, &body, 1e-4, &coords).map(|r| r.max_rel_error));

    // raw outputs → activation → render → all loss terms
    let (raw, sh, target, mask) = composite_inputs();
    let net = FeatureNet::new(DEFAULT_PERCEPTUAL_SEED);
    for which in 0..5 {
        let start = if which == 4 { sh.clone() } else { raw[which].clone() };
        let f = |t: &mut Tape, x: Var| {
            let mut leaves = [0, 1, 2, 3].map(|k| t.constant(raw[k].clone()));
            let mut shv = t.constant(sh.clone())?;
            if which == 4 {
                shv = x;
            } else {
                leaves[which] = Ok(x);
            }
            let [a, b, c, d] = leaves;
            composite_loss(t, [a?, b?, c?, d?], shv, &target, &mask, &net)
        };
        let name = ["loss via offsets", "loss via rotations", "loss via scales", "loss via opacities", "loss via sh"][which];
        s.check(name, LOOSE, f, &start, 1e-4);
    }
    s.rows
}

fn composite_inputs() -> ([NdArray; 4], NdArray, NdArray, NdArray) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut arr = |c: usize, lo: f64, hi: f64| NdArray::new(vec![4, c], (0..4 * c).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape");
    let raw = [arr(3, -2.0, 2.0), arr(4, -1.0, 1.0), arr(3, -3.5, -2.9), arr(1, -1.0, 1.5)];
    let sh = arr(12, -0.5, 0.5);
    let target = random(&[16, 16, 3], 9, 0.0, 1.0);
    let mask = NdArray::new(vec![16, 16, 1], (0..256).map(|i| ((i / 16 + i % 16) % 3 == 0) as u8 as f64).collect()).expect("shape");
    (raw, sh, target, mask)
}

/// Four Gaussians rendered at 16×16 through every loss term.
fn composite_loss(tape: &mut Tape, raw: [Var; 4], sh: Var, target: &NdArray, mask: &NdArray, net: &FeatureNet) -> Result<Var, AdError> {
    let anchors = tape.constant(NdArray::new(vec![4, 3], vec![-0.1, -0.1, 2.0, 0.12, -0.05, 2.2, 0.0, 0.1, 1.9, -0.05, 0.08, 2.4])?)?;
    let rv = RawVars { offsets: raw[0], rotations: raw[1], scales: raw[2], opacities: raw[3], sh };
    let (g, offsets) = activate(tape, &rv, anchors, &Activation::default())?;
    let cam = Camera::look_at([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0], 20.0, 16, 16);
    let out = render_op(tape, &g, &cam, [0.0; 3])?;
    let rgb = tape.narrow(out, 2, 0, 3)?;
    let alpha = tape.narrow(out, 2, 3, 1)?;
    let tv = tape.constant(target.clone())?;
    let mv = tape.constant(mask.clone())?;
    let w = LossWeights { asap_scale: 0.04, ..Default::default() };
    let color = color_loss(tape, rgb, tv)?;
    let m = mask_loss(tape, alpha, mv)?;
    let per = perceptual_loss(tape, net, rgb, tv)?;
    let asap = asap_loss(tape, g.rotations, g.scales, w.asap_scale)?;
    let acap = acap_loss(tape, offsets, 0.02)?;
    Ok(total_loss_op(tape, color, m, per, asap, acap, &w)?.total)
}

/// Eight Gaussians at well-separated depths in front of a 32×32 axis-aligned camera.
fn render_scene() -> (GaussianSet, Camera, NdArray) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let cam = Camera {
        fx: 36.0,
        fy: 36.0,
        cx: 16.0,
        cy: 16.0,
        world_to_cam: Matrix4::identity(),
        width: 32,
        height: 32,
        near: 0.01,
    };
    let mut g = GaussianSet::empty(1);
    for k in 0..8 {
        let z = 2.0 + 0.25 * k as f64;
        g.positions.push([rng.gen_range(-0.3..0.3) * z, rng.gen_range(-0.3..0.3) * z, z]);
        let q = [1.0, rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
        g.rotations.push(normalize_quat(&q).0);
        g.scales.push([0, 1, 2].map(|_| rng.gen_range(0.08..0.2)));
        g.opacities.push(rng.gen_range(0.3..0.8));
        for _ in 0..12 {
            g.sh.push(rng.gen_range(-0.3..0.3));
        }
    }
    let w = random(&[32, 32, 4], 43, -1.0, 1.0);
    (g, cam, w)
}

fn renderer() -> Vec<CheckRow> {
    let mut s = Suite::new("renderer");
    let (g, cam, w) = render_scene();
    let mut t0 = Tape::new();
    let base = g.to_vars(&mut t0, false).expect("valid scene");
    let attrs = [
        ("render_gaussians (p)", base.positions),
        ("render_gaussians (r)", base.rotations),
        ("render_gaussians (sigma)", base.scales),
        ("render_gaussians (rho)", base.opacities),
        ("render_gaussians (f)", base.sh),
    ];
    for (which, (name, v)) in attrs.into_iter().enumerate() {
        let start = t0.value(v).clone();
        s.check(name, LOOSE, |tape, x| {
            let mut gv: GaussianVars = g.to_vars(tape, false)?;
            match which {
                0 => gv.positions = x,
                1 => gv.rotations = x,
                2 => gv.scales = x,
                3 => gv.opacities = x,
                _ => gv.sh = x,
            }
            let img = render_op(tape, &gv, &cam, [0.1, 0.2, 0.3])?;
            let wv = tape.constant(w.clone())?;
            let m = tape.mul(img, wv)?;
            tape.sum_all(m)
        }, &start, 1e-6);
    }
    s.rows
}

fn losses() -> Vec<CheckRow> {
    let mut s = Suite::new("losses");
    let pred = random(&[6, 6, 3], 60, 0.0, 1.0);
    let target = random(&[6, 6, 3], 61, 0.0, 1.0);
    s.check("color (l1)", TIGHT, |t, v| {
        let y = t.constant(target.clone())?;
        color_loss(t, v, y)
    }, &pred, 1e-7);
    let alpha = random(&[6, 6, 1], 62, 0.0, 1.0);
    let m = NdArray::new(vec![6, 6, 1], (0..36).map(|i| (i % 3 == 0) as u8 as f64).collect()).expect("shape");
    s.check("mask (l1)", TIGHT, |t, v| {
        let y = t.constant(m.clone())?;
        mask_loss(t, v, y)
    }, &alpha, 1e-7);
    let net = FeatureNet::new(DEFAULT_PERCEPTUAL_SEED);
    let a = random(&[8, 8, 3], 63, 0.0, 1.0);
    let b = random(&[8, 8, 3], 64, 0.0, 1.0);
    s.check("perceptual", TIGHT, |t, v| {
        let y = t.constant(b.clone())?;
        perceptual_loss(t, &net, v, y)
    }, &a, 1e-4);
    let q = random(&[4, 4], 65, -1.0, 1.0);
    let sc = random(&[4, 3], 66, 0.01, 0.08);
    s.check("asap (scales)", TIGHT, |t, v| {
        let qv = t.constant(q.clone())?;
        asap_loss(t, qv, v, 0.03)
    }, &sc, 1e-5);
    // rotation invariance makes the exact rotation gradient zero; report its largest entry
    let rot_grad = (|| {
        let mut t = Tape::new();
        let qv = t.param(q.clone())?;
        let unit = normalize_quat_rows(&mut t, qv)?;
        let sv = t.constant(sc.clone())?;
        let l = asap_loss(&mut t, unit, sv, 0.03)?;
        let g = t.backward(l)?.get(qv)?;
        Ok(g.data().iter().fold(0.0f64, |m, x| m.max(x.abs())))
    })();
    s.push("asap (rotation gradient)", 1e-10, rot_grad);
    let off = NdArray::new(vec![3, 3], vec![0.01, -0.02, 0.015, 0.06, 0.05, -0.04, -0.07, 0.01, 0.03]).expect("shape");
    s.check("acap", TIGHT, |t, v| acap_loss(t, v, 0.0525), &off, 1e-7);
    let terms = random(&[5], 67, 0.0, 1.0);
    s.check("total assembly", TIGHT, |t, v| {
        let parts: Vec<Var> = (0..5).map(|i| {
            let x = t.narrow(v, 0, i, 1)?;
            t.reshape(x, &[])
        }).collect::<Result<_, _>>()?;
        Ok(total_loss_op(t, parts[0], parts[1], parts[2], parts[3], parts[4], &LossWeights::default())?.total)
    }, &terms, 1e-5);
    s.rows
}
