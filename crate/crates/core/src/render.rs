//! Tile-based differentiable Gaussian splatting.
//!
//! Camera space looks along `+z` with `y` down; pixel `(x, y)` is sampled at the
//! integer coordinates `(x, y)`, so a point on the optical axis lands exactly on
//! pixel `(cx, cy)` when those are integers.

use std::path::Path;

use nalgebra::{Matrix2x3, Matrix3, Matrix4, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{AdError, NdArray, Tape, Var};
use crate::gaussian::{sh_basis, sh_coeffs, GaussianSet, GaussianVars, SH_C1};
use crate::math::{covariance, covariance_backward, rotation_part, translation_part, Quat};

pub const TILE: usize = 16;
pub const LOWPASS: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const T_MIN: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Ad(#[from] AdError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_cam: Matrix4<f64>,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], focal: f64, width: usize, height: usize) -> Self {
        let eye = Vector3::from(eye);
        let fwd = (Vector3::from(target) - eye).normalize();
        let right = fwd.cross(&Vector3::from(up)).normalize();
        let down = fwd.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let t = -(r * eye);
        Self {
            fx: focal,
            fy: focal,
            cx: (width / 2) as f64,
            cy: (height / 2) as f64,
            world_to_cam: crate::math::rigid(&r, &t),
            width,
            height,
            near: 0.01,
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let r = rotation_part(&self.world_to_cam);
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(RenderError::Camera("focal lengths must be positive".into()));
        }
        if !(self.near > 0.0) {
            return Err(RenderError::Camera("near plane must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(RenderError::Camera("empty image".into()));
        }
        if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(RenderError::Camera("extrinsic rotation is not orthonormal".into()));
        }
        let last = self.world_to_cam.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(RenderError::Camera("extrinsic bottom row must be 0 0 0 1".into()));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(rotation_part(&self.world_to_cam).transpose() * translation_part(&self.world_to_cam))
    }

    /// Text block:
    /// ```text
    /// width W
    /// height H
    /// intrinsics fx fy cx cy
    /// near n
    /// extrinsic
    /// m00 m01 m02 m03
    /// ... (4 rows)
    /// ```
    /// Numbers are printed with `{:?}` so they parse back exactly.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "width {}\nheight {}\nintrinsics {:?} {:?} {:?} {:?}\nnear {:?}\nextrinsic\n",
            self.width, self.height, self.fx, self.fy, self.cx, self.cy, self.near
        );
        for r in 0..4 {
            let row: Vec<String> = (0..4).map(|c| format!("{:?}", self.world_to_cam[(r, c)])).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, RenderError> {
        let err = |m: &str| RenderError::Camera(m.to_string());
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let mut field = |name: &str, count: usize| -> Result<Vec<f64>, RenderError> {
            let line = lines.next().ok_or_else(|| err(&format!("missing `{name}` line")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(name) {
                return Err(err(&format!("expected `{name}`, got `{line}`")));
            }
            let vals: Vec<f64> = parts
                .map(|p| p.parse::<f64>().map_err(|_| err(&format!("bad number `{p}` in `{name}`"))))
                .collect::<Result<_, _>>()?;
            if vals.len() != count {
                return Err(err(&format!("`{name}` needs {count} values")));
            }
            Ok(vals)
        };
        let width = field("width", 1)?[0];
        let height = field("height", 1)?[0];
        let k = field("intrinsics", 4)?;
        let near = field("near", 1)?[0];
        field("extrinsic", 0)?;
        let mut m = Matrix4::zeros();
        for r in 0..4 {
            let line = lines.next().ok_or_else(|| err("extrinsic needs 4 rows"))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|p| p.parse::<f64>().map_err(|_| err(&format!("bad number `{p}` in extrinsic"))))
                .collect::<Result<_, _>>()?;
            if vals.len() != 4 {
                return Err(err("extrinsic rows need 4 values"));
            }
            for c in 0..4 {
                m[(r, c)] = vals[c];
            }
        }
        if width < 1.0 || height < 1.0 || width.fract() != 0.0 || height.fract() != 0.0 {
            return Err(err("width and height must be positive integers"));
        }
        let cam = Camera {
            fx: k[0],
            fy: k[1],
            cx: k[2],
            cy: k[3],
            world_to_cam: m,
            width: width as usize,
            height: height as usize,
            near,
        };
        cam.validate()?;
        Ok(cam)
    }
}

/// Floating-point raster, row-major `[y][x][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let mut img = Self::new(width, height, value.len());
        for px in img.data.chunks_mut(value.len()) {
            px.copy_from_slice(value);
        }
        img
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn to_ndarray(&self) -> NdArray {
        NdArray::new(vec![self.height, self.width, self.channels], self.data.clone()).expect("image shape")
    }

    pub fn from_ndarray(a: &NdArray) -> Result<Self, RenderError> {
        match a.shape() {
            [h, w, c] => Ok(Self { width: *w, height: *h, channels: *c, data: a.data().to_vec() }),
            s => Err(RenderError::Image(format!("expected [H,W,C], got {s:?}"))),
        }
    }

    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Lossless 8-bit PNG (gray for one channel, RGB for three).
    pub fn save_png(&self, path: &Path) -> Result<(), RenderError> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(RenderError::Image(format!("cannot write {c}-channel png"))),
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color)
            .map_err(|e| RenderError::Image(e.to_string()))
    }

    /// Raw dump: `RAWF`, `u32` width, height, channels, then `f32` samples.
    pub fn to_raw(&self) -> Vec<u8> {
        let mut out = b"RAWF".to_vec();
        for d in [self.width, self.height, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_raw(bytes: &[u8]) -> Result<Self, RenderError> {
        if bytes.len() < 16 || &bytes[..4] != b"RAWF" {
            return Err(RenderError::Image("not a RAWF image".into()));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (w, h, c) = (u(0), u(1), u(2));
        if bytes.len() != 16 + w * h * c * 4 {
            return Err(RenderError::Image("RAWF size mismatch".into()));
        }
        let data = bytes[16..].chunks(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
        Ok(Self { width: w, height: h, channels: c, data })
    }

    /// Bilinear resample of the rectangle `[x0, x1] × [y0, y1]` (pixel coordinates) to `out_w × out_h`.
    pub fn crop_resize(&self, rect: [f64; 4], out_w: usize, out_h: usize) -> Image {
        let [x0, y0, x1, y1] = rect;
        let mut out = Image::new(out_w, out_h, self.channels);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let fx = x0 + (ox as f64 + 0.5) / out_w as f64 * (x1 - x0) - 0.5;
                let fy = y0 + (oy as f64 + 0.5) / out_h as f64 * (y1 - y0) - 0.5;
                let fx = fx.clamp(0.0, (self.width - 1) as f64);
                let fy = fy.clamp(0.0, (self.height - 1) as f64);
                let (ix, iy) = ((fx.floor() as usize).min(self.width.saturating_sub(2)), (fy.floor() as usize).min(self.height.saturating_sub(2)));
                let (tx, ty) = (fx - ix as f64, fy - iy as f64);
                let ix1 = (ix + 1).min(self.width - 1);
                let iy1 = (iy + 1).min(self.height - 1);
                for c in 0..self.channels {
                    let v = (1.0 - tx) * (1.0 - ty) * self.at(ix, iy, c)
                        + tx * (1.0 - ty) * self.at(ix1, iy, c)
                        + (1.0 - tx) * ty * self.at(ix, iy1, c)
                        + tx * ty * self.at(ix1, iy1, c);
                    out.data[(oy * out_w + ox) * self.channels + c] = v;
                }
            }
        }
        out
    }
}

/// A Gaussian projected to screen space.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub index: usize,
    pub mean: [f64; 2],
    /// Screen covariance `(a, b, c)` for `[[a, b], [b, c]]`, floor included.
    pub cov: [f64; 3],
    /// Inverse of `cov`, same packing.
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    /// Inclusive pixel bounds `[x0, y0, x1, y1]` of the region where α can reach 1/255.
    pub bounds: [i64; 4],
    cam: [f64; 3],
    color_live: [bool; 3],
    view: [f64; 3],
}

struct GaussianRef<'a> {
    p: [f64; 3],
    q: Quat,
    s: [f64; 3],
    rho: f64,
    sh: &'a [f64],
}

fn project(g: &GaussianRef<'_>, index: usize, cam: &Camera) -> Option<Splat2D> {
    let w = rotation_part(&cam.world_to_cam);
    let t = w * Vector3::from(g.p) + translation_part(&cam.world_to_cam);
    if !(t.z > cam.near) {
        return None;
    }
    let (tz, tz2) = (t.z, t.z * t.z);
    let jm = Matrix2x3::new(cam.fx / tz, 0.0, -cam.fx * t.x / tz2, 0.0, cam.fy / tz, -cam.fy * t.y / tz2);
    let tm = jm * w;
    let c2 = tm * covariance(&g.q, &g.s) * tm.transpose();
    let cov = [c2[(0, 0)] + LOWPASS, 0.5 * (c2[(0, 1)] + c2[(1, 0)]), c2[(1, 1)] + LOWPASS];
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det > 0.0) {
        return None;
    }
    let conic = [cov[2] / det, -cov[1] / det, cov[0] / det];
    let mean = [cam.fx * t.x / tz + cam.cx, cam.fy * t.y / tz + cam.cy];
    // α = ρ·exp(−m/2) reaches 1/255 only where m ≤ 2 ln(255 ρ)
    let level = 255.0 * g.rho.min(ALPHA_MAX);
    if !(level > 1.0) {
        return None;
    }
    let k = (2.0 * level.ln()).sqrt() * 1.0001 + 1e-9;
    let (hx, hy) = (k * cov[0].sqrt(), k * cov[2].sqrt());
    let bounds = [
        (mean[0] - hx).ceil().max(0.0) as i64,
        (mean[1] - hy).ceil().max(0.0) as i64,
        (mean[0] + hx).floor().min(cam.width as f64 - 1.0) as i64,
        (mean[1] + hy).floor().min(cam.height as f64 - 1.0) as i64,
    ];
    if bounds[0] > bounds[2] || bounds[1] > bounds[3] {
        return None;
    }
    let view = Vector3::from(g.p) - cam.center();
    let d = view / view.norm();
    let basis = sh_basis(&[d.x, d.y, d.z]);
    let mut color = [0.0; 3];
    let mut color_live = [false; 3];
    for ch in 0..3 {
        let mut s = 0.5;
        for (k, y) in basis.iter().enumerate().take(g.sh.len() / 3) {
            s += g.sh[k * 3 + ch] * y;
        }
        color_live[ch] = (0.0..=1.0).contains(&s);
        color[ch] = s.clamp(0.0, 1.0);
    }
    Some(Splat2D {
        index,
        mean,
        cov,
        conic,
        depth: tz,
        color,
        opacity: g.rho,
        bounds,
        cam: [t.x, t.y, t.z],
        color_live,
        view: [view.x, view.y, view.z],
    })
}

fn gaussian_ref(g: &GaussianSet, i: usize) -> GaussianRef<'_> {
    GaussianRef { p: g.positions[i], q: g.rotations[i], s: g.scales[i], rho: g.opacities[i], sh: g.sh_row(i) }
}

/// Projects Gaussian `i`; `None` when culled (behind the near plane or no visible footprint).
pub fn project_gaussian(g: &GaussianSet, i: usize, cam: &Camera) -> Option<Splat2D> {
    project(&gaussian_ref(g, i), i, cam)
}

/// Opacity of splat `s` at pixel `(x, y)`, or `None` below the skip threshold.
#[inline]
fn splat_alpha(s: &Splat2D, x: f64, y: f64) -> Option<(f64, f64, [f64; 2])> {
    let d = [x - s.mean[0], y - s.mean[1]];
    let m = s.conic[0] * d[0] * d[0] + 2.0 * s.conic[1] * d[0] * d[1] + s.conic[2] * d[1] * d[1];
    let gauss = (-0.5 * m).exp();
    let alpha = (s.opacity * gauss).min(ALPHA_MAX);
    if alpha < ALPHA_MIN {
        None
    } else {
        Some((alpha, gauss, d))
    }
}

/// Front-to-back compositing of one pixel; returns (rgb, final transmittance).
#[inline]
fn composite<'a>(splats: impl Iterator<Item = &'a Splat2D>, x: f64, y: f64, bg: &[f64; 3], early_exit: bool) -> ([f64; 3], f64) {
    let mut t = 1.0;
    let mut c = [0.0; 3];
    for s in splats {
        let Some((alpha, _, _)) = splat_alpha(s, x, y) else { continue };
        let w = alpha * t;
        for ch in 0..3 {
            c[ch] += s.color[ch] * w;
        }
        t *= 1.0 - alpha;
        if early_exit && t < T_MIN {
            break;
        }
    }
    for ch in 0..3 {
        c[ch] += t * bg[ch];
    }
    (c, t)
}

/// Projected, depth-sorted splats and per-tile lists for one view.
struct Frame {
    splats: Vec<Splat2D>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    width: usize,
    height: usize,
}

fn build_frame(refs: &[GaussianRef<'_>], cam: &Camera) -> Frame {
    let mut splats: Vec<Splat2D> = refs.iter().enumerate().filter_map(|(i, g)| project(g, i, cam)).collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    let tiles_x = cam.width.div_ceil(TILE);
    let tiles_y = cam.height.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let [x0, y0, x1, y1] = s.bounds;
        for ty in (y0 as usize / TILE)..=(y1 as usize / TILE) {
            for tx in (x0 as usize / TILE)..=(x1 as usize / TILE) {
                tiles[ty * tiles_x + tx].push(si as u32);
            }
        }
    }
    Frame { splats, tiles, tiles_x, width: cam.width, height: cam.height }
}

impl Frame {
    fn tile_rect(&self, tile: usize) -> (usize, usize, usize, usize) {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let x0 = tx * TILE;
        let y0 = ty * TILE;
        (x0, y0, (x0 + TILE).min(self.width), (y0 + TILE).min(self.height))
    }

    /// `[H, W, 4]`: composited rgb then alpha.
    fn forward(&self, bg: &[f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.width * self.height * 4];
        let tiles: Vec<Vec<f64>> = (0..self.tiles.len())
            .into_par_iter()
            .map(|tile| {
                let (x0, y0, x1, y1) = self.tile_rect(tile);
                let list = &self.tiles[tile];
                let mut buf = Vec::with_capacity((x1 - x0) * (y1 - y0) * 4);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let (c, t) = composite(list.iter().map(|&i| &self.splats[i as usize]), x as f64, y as f64, bg, true);
                        buf.extend_from_slice(&[c[0], c[1], c[2], 1.0 - t]);
                    }
                }
                buf
            })
            .collect();
        for (tile, buf) in tiles.iter().enumerate() {
            let (x0, y0, x1, y1) = self.tile_rect(tile);
            let w = x1 - x0;
            for y in y0..y1 {
                let src = &buf[(y - y0) * w * 4..(y - y0 + 1) * w * 4];
                out[(y * self.width + x0) * 4..(y * self.width + x1) * 4].copy_from_slice(src);
            }
        }
        out
    }

    /// Screen-space gradients per sorted splat: mean (2), conic (3), color (3), opacity (1).
    fn backward(&self, bg: &[f64; 3], grad: &[f64]) -> Vec<[f64; 9]> {
        let partial: Vec<Vec<[f64; 9]>> = (0..self.tiles.len())
            .into_par_iter()
            .map(|tile| {
                let (x0, y0, x1, y1) = self.tile_rect(tile);
                let list = &self.tiles[tile];
                let mut acc = vec![[0.0; 9]; list.len()];
                let mut hits: Vec<(usize, f64, f64, [f64; 2], f64)> = Vec::new();
                for y in y0..y1 {
                    for x in x0..x1 {
                        let g = &grad[(y * self.width + x) * 4..(y * self.width + x) * 4 + 4];
                        if g.iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        // replay the forward pass, keeping each contributor's α and T
                        hits.clear();
                        let mut t = 1.0;
                        for (li, &si) in list.iter().enumerate() {
                            let s = &self.splats[si as usize];
                            let Some((alpha, gauss, d)) = splat_alpha(s, x as f64, y as f64) else { continue };
                            hits.push((li, alpha, gauss, d, t));
                            t *= 1.0 - alpha;
                            if t < T_MIN {
                                break;
                            }
                        }
                        let t_final = t;
                        // suffix = Σ_{k>i} c_k α_k T_k + T_final·bg, per channel, projected on the rgb grad
                        let mut suffix = (0..3).map(|ch| g[ch] * t_final * bg[ch]).sum::<f64>();
                        for &(li, alpha, gauss, d, t_i) in hits.iter().rev() {
                            let s = &self.splats[list[li] as usize];
                            let a = &mut acc[li];
                            let gc: f64 = (0..3).map(|ch| g[ch] * s.color[ch]).sum();
                            for ch in 0..3 {
                                a[5 + ch] += g[ch] * alpha * t_i;
                            }
                            let one_minus = 1.0 - alpha;
                            let dalpha = gc * t_i - suffix / one_minus + g[3] * t_final / one_minus;
                            suffix += gc * alpha * t_i;
                            if s.opacity * gauss >= ALPHA_MAX {
                                continue;
                            }
                            a[8] += dalpha * gauss;
                            let dgauss = dalpha * s.opacity;
                            // m = dᵀ Q d, gauss = exp(−m/2)
                            let dm = -0.5 * gauss * dgauss;
                            let qd = [s.conic[0] * d[0] + s.conic[1] * d[1], s.conic[1] * d[0] + s.conic[2] * d[1]];
                            a[0] += -2.0 * dm * qd[0];
                            a[1] += -2.0 * dm * qd[1];
                            a[2] += dm * d[0] * d[0];
                            a[3] += dm * 2.0 * d[0] * d[1];
                            a[4] += dm * d[1] * d[1];
                        }
                    }
                }
                acc
            })
            .collect();
        let mut out = vec![[0.0; 9]; self.splats.len()];
        for (tile, acc) in partial.iter().enumerate() {
            for (li, a) in acc.iter().enumerate() {
                let o = &mut out[self.tiles[tile][li] as usize];
                for k in 0..9 {
                    o[k] += a[k];
                }
            }
        }
        out
    }
}

/// Renders rgb and alpha images.
pub fn render(g: &GaussianSet, cam: &Camera, bg: &[f64; 3]) -> Result<(Image, Image), RenderError> {
    g.validate().map_err(|e| RenderError::Image(e.to_string()))?;
    let refs: Vec<GaussianRef<'_>> = (0..g.len()).map(|i| gaussian_ref(g, i)).collect();
    let frame = build_frame(&refs, cam);
    Ok(split_rgba(&frame.forward(bg), cam.width, cam.height))
}

fn split_rgba(data: &[f64], width: usize, height: usize) -> (Image, Image) {
    let mut rgb = Image::new(width, height, 3);
    let mut alpha = Image::new(width, height, 1);
    for (i, px) in data.chunks(4).enumerate() {
        rgb.data[i * 3..i * 3 + 3].copy_from_slice(&px[..3]);
        alpha.data[i] = px[3];
    }
    (rgb, alpha)
}

/// Per-pixel loop over every projected splat in depth order, without tiling or early exit.
pub fn brute_force_render(g: &GaussianSet, cam: &Camera, bg: &[f64; 3]) -> Result<(Image, Image), RenderError> {
    g.validate().map_err(|e| RenderError::Image(e.to_string()))?;
    let mut splats: Vec<Splat2D> = (0..g.len()).filter_map(|i| project_gaussian(g, i, cam)).collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    let mut data = Vec::with_capacity(cam.width * cam.height * 4);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (c, t) = composite(splats.iter(), x as f64, y as f64, bg, false);
            data.extend_from_slice(&[c[0], c[1], c[2], 1.0 - t]);
        }
    }
    Ok(split_rgba(&data, cam.width, cam.height))
}

/// Differentiable render on the tape. Returns `[H, W, 4]` (rgb, alpha).
///
/// Sort order and culling are fixed by the forward pass.
pub fn render_op(tape: &mut Tape, g: &GaussianVars, cam: &Camera, bg: [f64; 3]) -> Result<Var, AdError> {
    let n = tape.shape(g.positions)[0];
    let c = tape.shape(g.sh)[1];
    if c != sh_coeffs(0) && c != sh_coeffs(1) {
        return Err(AdError::Shape(format!("{c} SH coefficients per gaussian")));
    }
    let inputs = [g.positions, g.rotations, g.scales, g.opacities, g.sh];
    let expect = [3, 4, 3, 1, c];
    for (v, cols) in inputs.iter().zip(expect) {
        if tape.shape(*v) != [n, cols] {
            return Err(AdError::Shape(format!("render input {:?}, expected [{n},{cols}]", tape.shape(*v))));
        }
    }
    let frame = {
        let (p, q, s, rho, sh) = (
            tape.value(g.positions).data(),
            tape.value(g.rotations).data(),
            tape.value(g.scales).data(),
            tape.value(g.opacities).data(),
            tape.value(g.sh).data(),
        );
        let refs: Vec<GaussianRef<'_>> = (0..n)
            .map(|i| GaussianRef {
                p: [p[i * 3], p[i * 3 + 1], p[i * 3 + 2]],
                q: [q[i * 4], q[i * 4 + 1], q[i * 4 + 2], q[i * 4 + 3]],
                s: [s[i * 3], s[i * 3 + 1], s[i * 3 + 2]],
                rho: rho[i],
                sh: &sh[i * c..(i + 1) * c],
            })
            .collect();
        build_frame(&refs, cam)
    };
    let value = NdArray::new(vec![cam.height, cam.width, 4], frame.forward(&bg))?;
    let cam = cam.clone();
    tape.record(
        "render",
        &inputs,
        value,
        Box::new(move |ctx| {
            let screen = frame.backward(&bg, ctx.grad.data());
            let (q, s, sh) = (ctx.inputs[1].data(), ctx.inputs[2].data(), ctx.inputs[4].data());
            let mut gp = vec![0.0; n * 3];
            let mut gq = vec![0.0; n * 4];
            let mut gs = vec![0.0; n * 3];
            let mut grho = vec![0.0; n];
            let mut gsh = vec![0.0; n * c];
            let w = rotation_part(&cam.world_to_cam);
            for (sp, sg) in frame.splats.iter().zip(&screen) {
                let i = sp.index;
                grho[i] += sg[8];
                // color → SH coefficients and view direction
                let view = Vector3::from(sp.view);
                let vn = view.norm();
                let dir = view / vn;
                let basis = sh_basis(&[dir.x, dir.y, dir.z]);
                let mut gdir = Vector3::zeros();
                for ch in 0..3 {
                    if !sp.color_live[ch] {
                        continue;
                    }
                    let gc = sg[5 + ch];
                    for (k, y) in basis.iter().enumerate().take(c / 3) {
                        gsh[i * c + k * 3 + ch] += gc * y;
                    }
                    if c == 12 {
                        let f = |k: usize| sh[i * c + k * 3 + ch];
                        gdir += gc * SH_C1 * Vector3::new(-f(3), -f(1), f(2));
                    }
                }
                let gview = (gdir - dir * dir.dot(&gdir)) / vn;
                // conic → screen covariance: dΣ = −Q dQ Q
                let qm = nalgebra::Matrix2::new(sp.conic[0], sp.conic[1], sp.conic[1], sp.conic[2]);
                let gqm = nalgebra::Matrix2::new(sg[2], 0.5 * sg[3], 0.5 * sg[3], sg[4]);
                let gcov = -(qm * gqm * qm);
                // screen covariance → camera-space mean (via J) and world covariance
                let t = Vector3::from(sp.cam);
                let (tz, tz2, tz3) = (t.z, t.z * t.z, t.z * t.z * t.z);
                let jm = Matrix2x3::new(cam.fx / tz, 0.0, -cam.fx * t.x / tz2, 0.0, cam.fy / tz, -cam.fy * t.y / tz2);
                let tm = jm * w;
                let qi: Quat = [q[i * 4], q[i * 4 + 1], q[i * 4 + 2], q[i * 4 + 3]];
                let si = [s[i * 3], s[i * 3 + 1], s[i * 3 + 2]];
                let sigma = covariance(&qi, &si);
                let gsigma = tm.transpose() * gcov * tm;
                let (dq, dscale) = covariance_backward(&qi, &si, &gsigma);
                for k in 0..4 {
                    gq[i * 4 + k] += dq[k];
                }
                for k in 0..3 {
                    gs[i * 3 + k] += dscale[k];
                }
                let gtm = 2.0 * gcov * tm * sigma;
                let gj = gtm * w.transpose();
                let mut gt = Vector3::new(
                    gj[(0, 2)] * (-cam.fx / tz2),
                    gj[(1, 2)] * (-cam.fy / tz2),
                    gj[(0, 0)] * (-cam.fx / tz2)
                        + gj[(0, 2)] * (2.0 * cam.fx * t.x / tz3)
                        + gj[(1, 1)] * (-cam.fy / tz2)
                        + gj[(1, 2)] * (2.0 * cam.fy * t.y / tz3),
                );
                // mean2d
                gt.x += sg[0] * cam.fx / tz;
                gt.y += sg[1] * cam.fy / tz;
                gt.z += -sg[0] * cam.fx * t.x / tz2 - sg[1] * cam.fy * t.y / tz2;
                let gpi = w.transpose() * gt + gview;
                for k in 0..3 {
                    gp[i * 3 + k] += gpi[k];
                }
            }
            let arr = |shape: Vec<usize>, v: Vec<f64>| Some(NdArray::new(shape, v).expect("shape"));
            vec![arr(vec![n, 3], gp), arr(vec![n, 4], gq), arr(vec![n, 3], gs), arr(vec![n, 1], grho), arr(vec![n, c], gsh)]
        }),
    )
}
