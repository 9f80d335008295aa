//! Photometric and canonical-space losses, plus PSNR and SSIM.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdError, NdArray, Tape, Var};
use crate::math::{covariance, covariance_backward};
use crate::render::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rgb: f64,
    pub mask: f64,
    pub perceptual: f64,
    pub asap: f64,
    pub acap: f64,
    /// ACAP hinge radius (meters).
    pub acap_radius: f64,
    /// ASAP target scale `t` (meters).
    pub asap_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rgb: 1.0, mask: 0.5, perceptual: 1.0, asap: 50.0, acap: 10.0, acap_radius: 0.0525, asap_scale: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub color: f64,
    pub mask: f64,
    pub perceptual: f64,
    pub asap: f64,
    pub acap: f64,
    pub total: f64,
}

impl LossReport {
    /// Weighted assembly, in the same operation order as [`total_loss_op`].
    pub fn assemble(color: f64, mask: f64, perceptual: f64, asap: f64, acap: f64, w: &LossWeights) -> Self {
        let total = w.rgb * color + w.mask * mask + w.perceptual * perceptual + w.asap * asap + w.acap * acap;
        Self { color, mask, perceptual, asap, acap, total }
    }

    /// `step=… color=… mask=… perceptual=… asap=… acap=… total=…`, exact round-trip formatting.
    pub fn log_line(&self, step: usize) -> String {
        format!(
            "step={} color={:?} mask={:?} perceptual={:?} asap={:?} acap={:?} total={:?}",
            step, self.color, self.mask, self.perceptual, self.asap, self.acap, self.total
        )
    }
}

/// Loss terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub color: Var,
    pub mask: Var,
    pub perceptual: Var,
    pub asap: Var,
    pub acap: Var,
    pub total: Var,
}

impl LossVars {
    pub fn report(&self, tape: &Tape) -> LossReport {
        let v = |x: Var| tape.value(x).item();
        LossReport {
            color: v(self.color),
            mask: v(self.mask),
            perceptual: v(self.perceptual),
            asap: v(self.asap),
            acap: v(self.acap),
            total: v(self.total),
        }
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var) -> Result<(), AdError> {
    if tape.shape(a) != tape.shape(b) {
        return Err(AdError::Shape(format!("loss inputs {:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    Ok(())
}

/// Mean absolute error over every element.
pub fn l1_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var, AdError> {
    same_shape(tape, pred, target)?;
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d)?;
    tape.mean_all(a)
}

/// L1 over rgb.
pub fn color_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var, AdError> {
    l1_loss(tape, pred, target)
}

/// L1 over single-channel silhouettes.
pub fn mask_loss(tape: &mut Tape, pred_alpha: Var, target_mask: Var) -> Result<Var, AdError> {
    l1_loss(tape, pred_alpha, target_mask)
}

/// `(1/N) Σ ‖R diag(σ²) Rᵀ / t² − I‖_F²` over Gaussians.
pub fn asap_loss(tape: &mut Tape, rotations: Var, scales: Var, t: f64) -> Result<Var, AdError> {
    let n = tape.shape(rotations)[0];
    if tape.shape(rotations) != [n, 4] || tape.shape(scales) != [n, 3] {
        return Err(AdError::Shape("asap needs rotations [N,4] and scales [N,3]".into()));
    }
    if !(t > 0.0) {
        return Err(AdError::Invalid(format!("asap target scale must be positive, got {t}")));
    }
    let (q, s) = (tape.value(rotations).data().to_vec(), tape.value(scales).data().to_vec());
    let inv_t2 = 1.0 / (t * t);
    let residuals: Vec<Matrix3<f64>> = (0..n)
        .map(|i| {
            let qi = [q[i * 4], q[i * 4 + 1], q[i * 4 + 2], q[i * 4 + 3]];
            covariance(&qi, &[s[i * 3], s[i * 3 + 1], s[i * 3 + 2]]) * inv_t2 - Matrix3::identity()
        })
        .collect();
    let total: f64 = residuals.iter().map(|r| r.norm_squared()).sum();
    let value = if n == 0 { 0.0 } else { total / n as f64 };
    tape.record(
        "asap",
        &[rotations, scales],
        NdArray::scalar(value),
        Box::new(move |ctx| {
            let g = ctx.grad.item();
            let mut gq = vec![0.0; n * 4];
            let mut gs = vec![0.0; n * 3];
            for i in 0..n {
                let gs_mat = residuals[i] * (2.0 * g * inv_t2 / n as f64);
                let qi = [q[i * 4], q[i * 4 + 1], q[i * 4 + 2], q[i * 4 + 3]];
                let (dq, dsc) = covariance_backward(&qi, &[s[i * 3], s[i * 3 + 1], s[i * 3 + 2]], &gs_mat);
                gq[i * 4..i * 4 + 4].copy_from_slice(&dq);
                gs[i * 3..i * 3 + 3].copy_from_slice(&dsc);
            }
            vec![Some(NdArray::new(vec![n, 4], gq).expect("shape")), Some(NdArray::new(vec![n, 3], gs).expect("shape"))]
        }),
    )
}

/// `(1/N) Σ max(‖Δp_i‖ − d, 0)`.
pub fn acap_loss(tape: &mut Tape, offsets: Var, d: f64) -> Result<Var, AdError> {
    let n = tape.shape(offsets)[0];
    if tape.shape(offsets) != [n, 3] {
        return Err(AdError::Shape("acap needs offsets [N,3]".into()));
    }
    let x = tape.value(offsets).data().to_vec();
    let norms: Vec<f64> = x.chunks(3).map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()).collect();
    let total: f64 = norms.iter().map(|&r| (r - d).max(0.0)).sum();
    let value = if n == 0 { 0.0 } else { total / n as f64 };
    tape.record(
        "acap",
        &[offsets],
        NdArray::scalar(value),
        Box::new(move |ctx| {
            let g = ctx.grad.item() / n as f64;
            let mut out = vec![0.0; n * 3];
            for i in 0..n {
                if norms[i] > d {
                    for c in 0..3 {
                        out[i * 3 + c] = g * x[i * 3 + c] / norms[i];
                    }
                }
            }
            vec![Some(NdArray::new(vec![n, 3], out).expect("shape"))]
        }),
    )
}

/// `λ_rgb·color + λ_mask·mask + λ_per·perceptual + w_asap·asap + w_acap·acap`.
pub fn total_loss_op(
    tape: &mut Tape,
    color: Var,
    mask: Var,
    perceptual: Var,
    asap: Var,
    acap: Var,
    w: &LossWeights,
) -> Result<LossVars, AdError> {
    let a = tape.scale(color, w.rgb)?;
    let b = tape.scale(mask, w.mask)?;
    let c = tape.scale(perceptual, w.perceptual)?;
    let d = tape.scale(asap, w.asap)?;
    let e = tape.scale(acap, w.acap)?;
    let ab = tape.add(a, b)?;
    let abc = tape.add(ab, c)?;
    let abcd = tape.add(abc, d)?;
    let total = tape.add(abcd, e)?;
    Ok(LossVars { color, mask, perceptual, asap, acap, total })
}

/// Fixed random 3-scale convolutional feature pyramid (3→8→8→8 channels, 3×3 kernels,
/// GELU, 2× average pooling between scales).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNet {
    pub seed: u64,
    /// Per scale: `[9·C_in, C_out]` kernel and `[C_out]` bias.
    pub layers: Vec<(NdArray, NdArray)>,
}

pub const DEFAULT_PERCEPTUAL_SEED: u64 = 0x5eed_1e55;

impl FeatureNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [(3, 8), (8, 8), (8, 8)];
        let layers = widths
            .iter()
            .map(|&(cin, cout)| {
                let fan_in = 9 * cin;
                let bound = (6.0 / fan_in as f64).sqrt();
                let w: Vec<f64> = (0..fan_in * cout).map(|_| rng.gen_range(-bound..bound)).collect();
                let b: Vec<f64> = (0..cout).map(|_| rng.gen_range(-0.1..0.1)).collect();
                (NdArray::new(vec![fan_in, cout], w).unwrap(), NdArray::new(vec![cout], b).unwrap())
            })
            .collect();
        Self { seed, layers }
    }

    /// Feature maps `[H_s·W_s, 8]` at the three scales for an `[H, W, 3]` image.
    pub fn features(&self, tape: &mut Tape, img: Var) -> Result<Vec<Var>, AdError> {
        let mut x = img;
        let mut out = Vec::with_capacity(self.layers.len());
        for (s, (w, b)) in self.layers.iter().enumerate() {
            if s > 0 {
                x = avg_pool2(tape, x)?;
            }
            let shape = tape.shape(x).to_vec();
            let cols = im2col3(tape, x)?;
            let wv = tape.constant(w.clone())?;
            let bv = tape.constant(b.clone())?;
            let y = tape.linear(cols, wv, bv)?;
            let y = tape.gelu(y)?;
            out.push(y);
            x = tape.reshape(y, &[shape[0], shape[1], w.cols()])?;
        }
        Ok(out)
    }
}

/// Mean over scales of the mean squared feature difference.
pub fn perceptual_loss(tape: &mut Tape, net: &FeatureNet, pred: Var, target: Var) -> Result<Var, AdError> {
    same_shape(tape, pred, target)?;
    let fa = net.features(tape, pred)?;
    let fb = net.features(tape, target)?;
    perceptual_from_features(tape, &fa, &fb)
}

/// Same as [`perceptual_loss`] with precomputed feature maps.
pub fn perceptual_from_features(tape: &mut Tape, fa: &[Var], fb: &[Var]) -> Result<Var, AdError> {
    let mut terms = Vec::with_capacity(fa.len());
    for (&a, &b) in fa.iter().zip(fb) {
        let d = tape.sub(a, b)?;
        let sq = tape.square(d)?;
        terms.push(tape.mean_all(sq)?);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// `[H, W, C]` → `[H·W, 9·C]` zero-padded 3×3 neighborhoods (row-major kernel offsets, channel fastest).
fn im2col3(tape: &mut Tape, x: Var) -> Result<Var, AdError> {
    let (h, w, c) = match *tape.shape(x) {
        [h, w, c] => (h, w, c),
        ref s => return Err(AdError::Shape(format!("im2col needs [H,W,C], got {s:?}"))),
    };
    let src = tape.value(x).data();
    let mut out = vec![0.0; h * w * 9 * c];
    for y in 0..h {
        for xx in 0..w {
            let row = &mut out[(y * w + xx) * 9 * c..(y * w + xx + 1) * 9 * c];
            for k in 0..9 {
                let (sy, sx) = (y as isize + k as isize / 3 - 1, xx as isize + k as isize % 3 - 1);
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                let s = (sy as usize * w + sx as usize) * c;
                row[k * c..(k + 1) * c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    tape.record(
        "im2col3",
        &[x],
        NdArray::new(vec![h * w, 9 * c], out)?,
        Box::new(move |ctx| {
            let g = ctx.grad.data();
            let mut gx = vec![0.0; h * w * c];
            for y in 0..h {
                for xx in 0..w {
                    let row = &g[(y * w + xx) * 9 * c..(y * w + xx + 1) * 9 * c];
                    for k in 0..9 {
                        let (sy, sx) = (y as isize + k as isize / 3 - 1, xx as isize + k as isize % 3 - 1);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let s = (sy as usize * w + sx as usize) * c;
                        for ch in 0..c {
                            gx[s + ch] += row[k * c + ch];
                        }
                    }
                }
            }
            vec![Some(NdArray::new(vec![h, w, c], gx).expect("shape"))]
        }),
    )
}

/// 2×2 average pooling of `[H, W, C]` (odd trailing rows/columns dropped).
fn avg_pool2(tape: &mut Tape, x: Var) -> Result<Var, AdError> {
    let (h, w, c) = match *tape.shape(x) {
        [h, w, c] if h >= 2 && w >= 2 => (h, w, c),
        ref s => return Err(AdError::Shape(format!("avg_pool2 needs [H>=2,W>=2,C], got {s:?}"))),
    };
    let (ho, wo) = (h / 2, w / 2);
    let src = tape.value(x).data();
    let mut out = vec![0.0; ho * wo * c];
    for y in 0..ho {
        for xx in 0..wo {
            for ch in 0..c {
                let at = |dy: usize, dx: usize| src[((2 * y + dy) * w + 2 * xx + dx) * c + ch];
                out[(y * wo + xx) * c + ch] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
            }
        }
    }
    tape.record(
        "avg_pool2",
        &[x],
        NdArray::new(vec![ho, wo, c], out)?,
        Box::new(move |ctx| {
            let g = ctx.grad.data();
            let mut gx = vec![0.0; h * w * c];
            for y in 0..ho {
                for xx in 0..wo {
                    for ch in 0..c {
                        let v = 0.25 * g[(y * wo + xx) * c + ch];
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            gx[((2 * y + dy) * w + 2 * xx + dx) * c + ch] += v;
                        }
                    }
                }
            }
            vec![Some(NdArray::new(vec![h, w, c], gx).expect("shape"))]
        }),
    )
}

fn check_same(a: &Image, b: &Image) -> Result<(), AdError> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(AdError::Shape(format!(
            "images {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

pub const PSNR_CAP: f64 = 100.0;

/// `10·log10(1/MSE)`, capped at 100 dB.
pub fn psnr(pred: &Image, target: &Image) -> Result<f64, AdError> {
    check_same(pred, target)?;
    let mse = pred.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.data.len() as f64;
    Ok(if mse < 1e-10 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5) over valid positions, averaged over channels.
pub fn ssim(pred: &Image, target: &Image) -> Result<f64, AdError> {
    check_same(pred, target)?;
    const R: usize = 5;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let raw: Vec<f64> = (0..=2 * R).map(|i| (-((i as f64 - R as f64).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let norm: f64 = raw.iter().sum();
    let k: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    let (w, h) = (pred.width, pred.height);
    if w < 2 * R + 1 || h < 2 * R + 1 {
        return Err(AdError::Shape(format!("ssim needs at least 11x11 images, got {w}x{h}")));
    }
    let mut total = 0.0;
    for ch in 0..pred.channels {
        let mut acc = 0.0;
        let mut count = 0usize;
        for y in R..h - R {
            for x in R..w - R {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..=2 * R {
                    for dx in 0..=2 * R {
                        let wt = k[dy] * k[dx];
                        let a = pred.at(x + dx - R, y + dy - R, ch);
                        let b = target.at(x + dx - R, y + dy - R, ch);
                        ma += wt * a;
                        mb += wt * b;
                        saa += wt * a * a;
                        sbb += wt * b * b;
                        sab += wt * a * b;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok(total / pred.channels as f64)
}
