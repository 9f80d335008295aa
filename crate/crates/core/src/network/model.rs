use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NetworkConfig, ParamVars};
use crate::autodiff::{AdError, NdArray, ReduceOp, Tape, Var};
use crate::body::Region;
use crate::gaussian::RawVars;

const LN_EPS: f64 = 1e-5;

/// `[sin(2⁰πx), cos(2⁰πx), …, sin(2^{L−1}πx), cos(2^{L−1}πx)]` for each coordinate in turn.
pub fn positional_encoding(p: &[f64; 3], freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * freqs);
    for &x in p {
        for k in 0..freqs {
            let a = (1u64 << k) as f64 * std::f64::consts::PI * x;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

fn linear(tape: &mut Tape, p: &ParamVars, path: &str, x: Var) -> Result<Var, AdError> {
    let w = p.get(&format!("{path}.w"))?;
    let b = p.get(&format!("{path}.b"))?;
    tape.linear(x, w, b)
}

fn mlp2(tape: &mut Tape, p: &ParamVars, a: &str, b: &str, x: Var) -> Result<Var, AdError> {
    let h = linear(tape, p, a, x)?;
    let h = tape.gelu(h)?;
    linear(tape, p, b, h)
}

fn norm(tape: &mut Tape, p: &ParamVars, path: &str, x: Var) -> Result<Var, AdError> {
    let g = p.get(&format!("{path}.g"))?;
    let b = p.get(&format!("{path}.b"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

fn plain_norm(tape: &mut Tape, x: Var) -> Result<Var, AdError> {
    let c = tape.shape(x)[1];
    let g = tape.constant(NdArray::ones(&[c]))?;
    let b = tape.constant(NdArray::zeros(&[c]))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

fn rows(tape: &Tape, x: Var) -> usize {
    tape.shape(x)[0]
}

/// Multi-head scaled dot-product attention over `[N, C]` inputs.
/// Returns the `[N, C]` result and the `[H, N, N]` attention probabilities.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Var), AdError> {
    let (n, c) = (tape.shape(q)[0], tape.shape(q)[1]);
    if c % heads != 0 || tape.shape(k) != [n, c] || tape.shape(v) != [n, c] {
        return Err(AdError::Shape(format!("attention inputs {:?} {:?} {:?} with {heads} heads", tape.shape(q), tape.shape(k), tape.shape(v))));
    }
    let d = c / heads;
    let split = |tape: &mut Tape, x: Var, axes: &[usize]| -> Result<Var, AdError> {
        let r = tape.reshape(x, &[n, heads, d])?;
        tape.permute(r, axes)
    };
    let qh = split(tape, q, &[1, 0, 2])?;
    let kt = split(tape, k, &[1, 2, 0])?;
    let vh = split(tape, v, &[1, 0, 2])?;
    let s = tape.matmul(qh, kt)?;
    let s = tape.scale(s, 1.0 / (d as f64).sqrt())?;
    let probs = tape.softmax(s, 2)?;
    let o = tape.matmul(probs, vh)?;
    let o = tape.permute(o, &[1, 0, 2])?;
    let o = tape.reshape(o, &[n, c])?;
    Ok((o, probs))
}

fn encoder_block(tape: &mut Tape, cfg: &NetworkConfig, p: &ParamVars, path: &str, x: Var) -> Result<Var, AdError> {
    let c = cfg.c_tok;
    let h = norm(tape, p, &format!("{path}.ln1"), x)?;
    let qkv = linear(tape, p, &format!("{path}.qkv"), h)?;
    let q = tape.narrow(qkv, 1, 0, c)?;
    let k = tape.narrow(qkv, 1, c, c)?;
    let v = tape.narrow(qkv, 1, 2 * c, c)?;
    let (a, _) = attention(tape, q, k, v, cfg.heads)?;
    let a = linear(tape, p, &format!("{path}.out"), a)?;
    let x = tape.add(x, a)?;
    let h = norm(tape, p, &format!("{path}.ln2"), x)?;
    let f = mlp2(tape, p, &format!("{path}.ffn0"), &format!("{path}.ffn1"), h)?;
    tape.add(x, f)
}

/// Patch embedding plus transformer blocks; returns the final tokens and the outputs at `taps`.
fn encode_image(
    tape: &mut Tape,
    cfg: &NetworkConfig,
    p: &ParamVars,
    prefix: &str,
    img: Var,
    (res, patch, depth): (usize, usize, usize),
    taps: &[usize],
) -> Result<(Var, Vec<Var>), AdError> {
    if tape.shape(img) != [res, res, 3] {
        return Err(AdError::Shape(format!("{prefix} image must be {res}x{res}x3, got {:?}", tape.shape(img))));
    }
    let g = res / patch;
    let x = tape.reshape(img, &[g, patch, g, patch, 3])?;
    let x = tape.permute(x, &[0, 2, 1, 3, 4])?;
    let x = tape.reshape(x, &[g * g, patch * patch * 3])?;
    let x = linear(tape, p, &format!("{prefix}.patch"), x)?;
    let pos = p.get(&format!("{prefix}.pos"))?;
    let mut x = tape.add(x, pos)?;
    let mut tapped = Vec::with_capacity(taps.len());
    for d in 0..depth {
        x = encoder_block(tape, cfg, p, &format!("{prefix}.blk{d}"), x)?;
        if taps.contains(&(d + 1)) {
            tapped.push(x);
        }
    }
    Ok((x, tapped))
}

/// Body image tokens `[N_body, C]`.
pub fn encode_body_image(tape: &mut Tape, cfg: &NetworkConfig, p: &ParamVars, img: Var) -> Result<Var, AdError> {
    let (x, _) = encode_image(tape, cfg, p, "body", img, (cfg.body_res, cfg.body_patch, cfg.body_depth), &[])?;
    mlp2(tape, p, "body.proj0", "body.proj1", x)
}

/// Head tokens `[N_img_head, C]`: encoder outputs at the four tap depths, concatenated
/// along channels, mixed per token (1×1 convolution), then projected.
pub fn encode_head_pyramid(tape: &mut Tape, cfg: &NetworkConfig, p: &ParamVars, crop: Var) -> Result<Var, AdError> {
    let (_, taps) = encode_image(tape, cfg, p, "head", crop, (cfg.head_res, cfg.head_patch, cfg.head_depth), &cfg.taps)?;
    let cat = tape.concat(&taps, 1)?;
    let fused = linear(tape, p, "head.fuse", cat)?;
    mlp2(tape, p, "head.proj0", "head.proj1", fused)
}

/// Geometric tokens split by region; `head_index`/`body_index` give each token's input row.
#[derive(Clone, Debug)]
pub struct GeoTokens {
    pub head: Var,
    pub body: Var,
    pub head_index: Vec<usize>,
    pub body_index: Vec<usize>,
}

pub fn encode_geometric(
    tape: &mut Tape,
    cfg: &NetworkConfig,
    p: &ParamVars,
    anchors: &[[f64; 3]],
    regions: &[Region],
) -> Result<GeoTokens, AdError> {
    if anchors.len() != regions.len() {
        return Err(AdError::Shape(format!("{} anchors but {} region labels", anchors.len(), regions.len())));
    }
    if anchors.iter().flatten().any(|x| !x.is_finite()) {
        return Err(AdError::Invalid("non-finite anchor".into()));
    }
    let width = 6 * cfg.freqs;
    let mut enc = Vec::with_capacity(anchors.len() * width);
    for a in anchors {
        let q = [0, 1, 2].map(|c| (a[c] - cfg.coord_center[c]) / cfg.coord_scale);
        enc.extend(positional_encoding(&q, cfg.freqs));
    }
    let x = tape.constant(NdArray::new(vec![anchors.len(), width], enc)?)?;
    let tokens = mlp2(tape, p, "geo.mlp0", "geo.mlp1", x)?;
    let head_index: Vec<usize> = (0..regions.len()).filter(|&i| regions[i] == Region::Head).collect();
    let body_index: Vec<usize> = (0..regions.len()).filter(|&i| regions[i] == Region::Body).collect();
    let head = tape.index_rows(tokens, &head_index)?;
    let body = tape.index_rows(tokens, &body_index)?;
    Ok(GeoTokens { head, body, head_index, body_index })
}

/// `MLP(MLP(maxpool(tokens)))` as a `[1, C]` row.
pub fn global_context(tape: &mut Tape, p: &ParamVars, body_tokens: Var) -> Result<Var, AdError> {
    let sh = tape.shape(body_tokens).to_vec();
    if sh.len() != 2 || sh[0] == 0 {
        return Err(AdError::Invalid(format!("global context needs at least one body token, got {sh:?}")));
    }
    let m = tape.reduce(ReduceOp::Max, body_tokens, 0)?;
    let m = tape.reshape(m, &[1, sh[1]])?;
    mlp2(tape, p, "ctx0", "ctx1", m)
}

#[derive(Clone, Debug)]
pub struct MmOutput {
    pub query: Var,
    pub context: Var,
    /// `[H, N_q + N_c, N_q + N_c]`.
    pub attention: Var,
}

struct Modulation {
    shift1: Var,
    scale1: Var,
    gate1: Var,
    shift2: Var,
    scale2: Var,
    gate2: Var,
}

fn modulation(tape: &mut Tape, p: &ParamVars, path: &str, f_act: Var, c: usize) -> Result<Modulation, AdError> {
    let m = linear(tape, p, &format!("{path}.mod"), f_act)?;
    let mut part = |i: usize| tape.narrow(m, 1, i * c, c);
    Ok(Modulation { shift1: part(0)?, scale1: part(1)?, gate1: part(2)?, shift2: part(3)?, scale2: part(4)?, gate2: part(5)? })
}

fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var, AdError> {
    let h = plain_norm(tape, x)?;
    let s = tape.add_scalar(scale, 1.0)?;
    let h = tape.mul(h, s)?;
    tape.add(h, shift)
}

/// Joint attention over two token streams, each with its own adaptive-norm modulation
/// (shift, scale, gate) derived from the global context, own projections and own feed-forward.
pub fn mm_transformer_block(
    tape: &mut Tape,
    cfg: &NetworkConfig,
    p: &ParamVars,
    path: &str,
    query: Var,
    context: Var,
    f_global: Var,
) -> Result<MmOutput, AdError> {
    let c = cfg.c_tok;
    for (name, v) in [("query", query), ("context", context)] {
        let sh = tape.shape(v);
        if sh.len() != 2 || sh[1] != c {
            return Err(AdError::Shape(format!("{path}: {name} tokens {sh:?}, width must be {c}")));
        }
    }
    if tape.shape(f_global) != [1, c] {
        return Err(AdError::Shape(format!("{path}: global context {:?}, need [1, {c}]", tape.shape(f_global))));
    }
    let (nq, nc) = (rows(tape, query), rows(tape, context));
    let f_act = tape.silu(f_global)?;
    let streams = [(query, format!("{path}.q")), (context, format!("{path}.c"))];
    let mut mods = Vec::with_capacity(2);
    let mut qkv = Vec::with_capacity(2);
    for (x, sp) in &streams {
        let m = modulation(tape, p, sp, f_act, c)?;
        let h = modulate(tape, *x, m.shift1, m.scale1)?;
        qkv.push(linear(tape, p, &format!("{sp}.qkv"), h)?);
        mods.push(m);
    }
    let joint = tape.concat(&qkv, 0)?;
    let q = tape.narrow(joint, 1, 0, c)?;
    let k = tape.narrow(joint, 1, c, c)?;
    let v = tape.narrow(joint, 1, 2 * c, c)?;
    let (a, probs) = attention(tape, q, k, v, cfg.heads)?;
    let spans = [(0, nq), (nq, nc)];
    let mut out = Vec::with_capacity(2);
    for (((x, sp), m), (start, len)) in streams.iter().zip(&mods).zip(spans) {
        let part = tape.narrow(a, 0, start, len)?;
        let o = linear(tape, p, &format!("{sp}.out"), part)?;
        let o = tape.mul(o, m.gate1)?;
        let x = tape.add(*x, o)?;
        let h = modulate(tape, x, m.shift2, m.scale2)?;
        let f = mlp2(tape, p, &format!("{sp}.ffn0"), &format!("{sp}.ffn1"), h)?;
        let f = tape.mul(f, m.gate2)?;
        out.push(tape.add(x, f)?);
    }
    Ok(MmOutput { query: out[0], context: out[1], attention: probs })
}

/// Drops `⌊ratio·N⌋` rows chosen uniformly without replacement; survivors keep their order.
/// Returns the kept tokens and their original row indices.
pub fn shrink_head_tokens(
    tape: &mut Tape,
    tokens: Var,
    ratio: f64,
    seed: u64,
    max_ratio: f64,
) -> Result<(Var, Vec<usize>), AdError> {
    if !(0.0..=max_ratio).contains(&ratio) {
        return Err(AdError::Invalid(format!("head mask ratio {ratio} outside [0, {max_ratio}]")));
    }
    let n = rows(tape, tokens);
    let drop = (ratio * n as f64).floor() as usize;
    if drop == 0 {
        return Ok((tokens, (0..n).collect()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropped = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, drop) {
        dropped[i] = true;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| !dropped[i]).collect();
    Ok((tape.index_rows(tokens, &keep)?, keep))
}

/// The four token streams flowing through the body-head blocks.
#[derive(Clone, Copy, Debug)]
pub struct Streams {
    pub geo_head: Var,
    pub geo_body: Var,
    pub img_head: Var,
    pub img_body: Var,
}

/// Head stage, normalized concatenation of the geometric streams, then body stage.
pub fn mbht_block(
    tape: &mut Tape,
    cfg: &NetworkConfig,
    p: &ParamVars,
    layer: usize,
    s: Streams,
    f_global: Var,
) -> Result<(Streams, [Var; 2]), AdError> {
    let (nh, nb) = (rows(tape, s.geo_head), rows(tape, s.geo_body));
    let s1 = mm_transformer_block(tape, cfg, p, &format!("mbht{layer}.s1"), s.geo_head, s.img_head, f_global)?;
    let gh = norm(tape, p, &format!("mbht{layer}.norm_head"), s1.query)?;
    let gb = norm(tape, p, &format!("mbht{layer}.norm_body"), s.geo_body)?;
    let t3 = tape.concat(&[gh, gb], 0)?;
    let s3 = mm_transformer_block(tape, cfg, p, &format!("mbht{layer}.s3"), t3, s.img_body, f_global)?;
    if rows(tape, s3.query) != nh + nb {
        return Err(AdError::Shape(format!("mbht{layer}: {} geometric tokens after fusion, expected {}", rows(tape, s3.query), nh + nb)));
    }
    let geo_head = tape.narrow(s3.query, 0, 0, nh)?;
    let geo_body = tape.narrow(s3.query, 0, nh, nb)?;
    Ok((Streams { geo_head, geo_body, img_head: s1.context, img_body: s3.context }, [s1.attention, s3.attention]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Train { ratio: f64, seed: u64 },
    Infer,
}

pub struct NetworkInput<'a> {
    /// `[body_res, body_res, 3]`.
    pub body_image: Var,
    /// `[head_res, head_res, 3]`.
    pub head_crop: Var,
    pub anchors: &'a [[f64; 3]],
    pub regions: &'a [Region],
}

pub struct Prediction {
    pub raw: RawVars,
    /// Attention probabilities of every joint-attention call, in block order.
    pub attention: Vec<Var>,
    pub head_tokens_kept: usize,
}

/// Full forward pass to raw per-point Gaussian parameters, rows in input point order.
pub fn predict_gaussians(
    tape: &mut Tape,
    cfg: &NetworkConfig,
    p: &ParamVars,
    input: &NetworkInput<'_>,
    mode: Mode,
) -> Result<Prediction, AdError> {
    let geo = encode_geometric(tape, cfg, p, input.anchors, input.regions)?;
    let body = encode_body_image(tape, cfg, p, input.body_image)?;
    let mut head = encode_head_pyramid(tape, cfg, p, input.head_crop)?;
    let f_global = global_context(tape, p, body)?;
    if let Mode::Train { ratio, seed } = mode {
        head = shrink_head_tokens(tape, head, ratio, seed, cfg.mask_max)?.0;
    }
    let head_tokens_kept = rows(tape, head);
    let mut s = Streams { geo_head: geo.head, geo_body: geo.body, img_head: head, img_body: body };
    let mut attn = Vec::with_capacity(2 * cfg.layers);
    for l in 0..cfg.layers {
        let (next, a) = mbht_block(tape, cfg, p, l, s, f_global)?;
        s = next;
        attn.extend(a);
    }
    let t = tape.concat(&[s.geo_head, s.geo_body], 0)?;
    let n = input.anchors.len();
    let mut inverse = vec![0; n];
    for (pos, &row) in geo.head_index.iter().chain(&geo.body_index).enumerate() {
        inverse[row] = pos;
    }
    let t = tape.index_rows(t, &inverse)?;
    let h = linear(tape, p, "reg0", t)?;
    let h = tape.gelu(h)?;
    let h = linear(tape, p, "reg1", h)?;
    let h = tape.gelu(h)?;
    let raw = RawVars {
        offsets: linear(tape, p, "reg.offset", h)?,
        rotations: linear(tape, p, "reg.rotation", h)?,
        scales: linear(tape, p, "reg.scale", h)?,
        opacities: linear(tape, p, "reg.opacity", h)?,
        sh: linear(tape, p, "reg.sh", h)?,
    };
    Ok(Prediction { raw, attention: attn, head_tokens_kept })
}
