//! Self-rendered training scenes.
//!
//! A scene directory holds:
//!
//! ```text
//! scene.txt            key = value settings (see SceneConfig)
//! body.lbm             body template
//! anchors.txt          one line per point: x y z head|body
//! gt.lha               ground-truth avatar with per-Gaussian skin weights
//! view_NNN/camera.txt  camera block
//! view_NNN/pose.txt    pose line
//! view_NNN/head.txt    head crop rectangle x0 y0 x1 y1 (pixels)
//! view_NNN/rgb.raw     RAWF rgb image
//! view_NNN/mask.raw    RAWF alpha mask
//! view_NNN/rgb.png     8-bit previews, not read back
//! view_NNN/mask.png
//! ```
//!
//! Views `0..train_views` are training views and the rest are holdout views.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::autodiff::NdArray;
use crate::body::{BodyTemplate, Pose, Region};
use crate::gaussian::{read_avatar, write_avatar, AvatarSkinning, GaussianSet, SH_C0};
use crate::math::{normalize_quat, Quat};
use crate::render::{render, Camera, Image};
use crate::skinning::{build_skin_field, pose_set, SkinField, SkinFieldConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub gaussians: usize,
    pub train_views: usize,
    pub holdout_views: usize,
    pub resolution: usize,
    pub focal: f64,
    /// Camera distance from the body axis (meters).
    pub radius: f64,
    /// Camera height above the look-at point (meters).
    pub elevation: f64,
    /// Per-component bound of the random joint axis-angles (radians).
    pub pose_amplitude: f64,
    /// Ground-truth offsets are at most this long (meters).
    pub max_offset: f64,
    pub skin: SkinFieldConfig,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            gaussians: 500,
            train_views: 8,
            holdout_views: 4,
            resolution: 128,
            focal: 180.0,
            radius: 3.0,
            elevation: 0.3,
            pose_amplitude: 0.25,
            max_offset: 0.02,
            skin: SkinFieldConfig::default(),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.gaussians >= 1
            && self.train_views >= 1
            && self.resolution >= 8
            && self.focal > 0.0
            && self.radius > 0.5
            && self.pose_amplitude >= 0.0
            && self.max_offset >= 0.0
            && self.skin.resolution >= 8
            && self.skin.margin >= 0.0;
        if !ok {
            return Err(TrainError::Config(format!("scene settings out of range: {self:?}")));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let s = &self.skin;
        format!(
            "gaussians = {}\ntrain_views = {}\nholdout_views = {}\nresolution = {}\nfocal = {:?}\nradius = {:?}\n\
             elevation = {:?}\npose_amplitude = {:?}\nmax_offset = {:?}\nskin_resolution = {}\nskin_steps = {}\n\
             skin_margin = {:?}\nseed = {}\n",
            self.gaussians,
            self.train_views,
            self.holdout_views,
            self.resolution,
            self.focal,
            self.radius,
            self.elevation,
            self.pose_amplitude,
            self.max_offset,
            s.resolution,
            s.diffusion_steps,
            s.margin,
            self.seed
        )
    }

    /// Sets one `key = value` entry; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}` for `{key}`"))
        }
        match key {
            "gaussians" => self.gaussians = p(key, value)?,
            "train_views" => self.train_views = p(key, value)?,
            "holdout_views" => self.holdout_views = p(key, value)?,
            "resolution" => self.resolution = p(key, value)?,
            "focal" => self.focal = p(key, value)?,
            "radius" => self.radius = p(key, value)?,
            "elevation" => self.elevation = p(key, value)?,
            "pose_amplitude" => self.pose_amplitude = p(key, value)?,
            "max_offset" => self.max_offset = p(key, value)?,
            "skin_resolution" => self.skin.resolution = p(key, value)?,
            "skin_steps" => self.skin.diffusion_steps = p(key, value)?,
            "skin_margin" => self.skin.margin = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            _ => return Err(format!("unknown scene key `{key}`")),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| format!("expected `key = value`, got `{line}`"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneView {
    pub camera: Camera,
    pub pose: Pose,
    pub rgb: Image,
    pub mask: Image,
    /// `[x0, y0, x1, y1]` in pixels.
    pub head_rect: [f64; 4],
}

impl SceneView {
    /// The head crop resampled to `res × res`.
    pub fn head_crop(&self, res: usize) -> Image {
        self.rgb.crop_resize(self.head_rect, res, res)
    }

    /// The full frame at `res × res`; returned unchanged when it already has that size.
    pub fn body_image(&self, res: usize) -> Image {
        if self.rgb.width == res && self.rgb.height == res {
            self.rgb.clone()
        } else {
            self.rgb.crop_resize([0.0, 0.0, self.rgb.width as f64, self.rgb.height as f64], res, res)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub template: BodyTemplate,
    pub anchors: Vec<[f64; 3]>,
    pub regions: Vec<Region>,
    pub gt: GaussianSet,
    /// N×J skinning weights of the ground-truth Gaussians.
    pub gt_weights: NdArray,
    pub views: Vec<SceneView>,
}

/// Mean distance from each point to its nearest other point.
pub fn mean_nn_spacing(points: &[[f64; 3]]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let total: f64 = points
        .iter()
        .enumerate()
        .map(|(i, a)| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    total / points.len() as f64
}

/// Square crop around the projected points, the box grown by 20% about its center.
pub fn head_rect(cam: &Camera, points: &[[f64; 3]]) -> [f64; 4] {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        let c = cam.world_to_cam * Vector4::new(p[0], p[1], p[2], 1.0);
        if c.z <= cam.near {
            continue;
        }
        let uv = [cam.fx * c.x / c.z + cam.cx, cam.fy * c.y / c.z + cam.cy];
        for k in 0..2 {
            lo[k] = lo[k].min(uv[k]);
            hi[k] = hi[k].max(uv[k]);
        }
    }
    if !lo[0].is_finite() {
        return [0.0, 0.0, cam.width as f64, cam.height as f64];
    }
    let half = 0.5 * 1.2 * (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1.0);
    let cx = 0.5 * (lo[0] + hi[0]);
    let cy = 0.5 * (lo[1] + hi[1]);
    [cx - half, cy - half, cx + half, cy + half]
}

/// One `x y z head|body` line per anchor.
pub fn anchors_to_text(anchors: &[[f64; 3]], regions: &[Region]) -> String {
    let mut s = String::new();
    for (p, r) in anchors.iter().zip(regions) {
        let tag = if *r == Region::Head { "head" } else { "body" };
        s.push_str(&format!("{:?} {:?} {:?} {tag}\n", p[0], p[1], p[2]));
    }
    s
}

pub fn parse_anchors(text: &str) -> Result<(Vec<[f64; 3]>, Vec<Region>), TrainError> {
    let mut anchors = Vec::new();
    let mut regions = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || TrainError::Format(format!("bad anchor line `{line}`"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let xyz: Vec<f64> = parts[..3].iter().map(|t| t.parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
        anchors.push([xyz[0], xyz[1], xyz[2]]);
        regions.push(match parts[3] {
            "head" => Region::Head,
            "body" => Region::Body,
            _ => return Err(bad()),
        });
    }
    Ok((anchors, regions))
}

/// Poses `g` with fixed weights and renders it on black.
pub fn render_posed(
    template: &BodyTemplate,
    g: &GaussianSet,
    weights: &NdArray,
    pose: &Pose,
    cam: &Camera,
) -> Result<(Image, Image), TrainError> {
    let transforms = template.forward_kinematics(pose)?;
    let posed = pose_set(g, weights, &transforms)?;
    Ok(render(&posed, cam, &[0.0; 3])?)
}

fn region_color(p: &[f64; 3], region: Region) -> [f64; 3] {
    let [x, y, z] = *p;
    if region == Region::Head {
        if y > 1.64 || (z < -0.01 && y > 1.52) {
            return [0.22, 0.14, 0.1];
        }
        return [0.86, 0.66, 0.52];
    }
    if y < 0.08 {
        [0.12, 0.1, 0.1]
    } else if y < 0.85 {
        [0.22 + 0.05 * (8.0 * y).sin(), 0.25, 0.38]
    } else if x.abs() > 0.24 {
        if x.abs() > 0.55 {
            [0.84, 0.64, 0.5]
        } else {
            [0.75, 0.3, 0.25]
        }
    } else {
        let stripe = 0.12 * (18.0 * y).sin();
        [0.2 + stripe, 0.45 + stripe, 0.7]
    }
}

fn random_unit_quat(rng: &mut ChaCha8Rng) -> Quat {
    loop {
        let q: Quat = [0, 1, 2, 3].map(|_| rng.gen_range(-1.0..1.0));
        let n2: f64 = q.iter().map(|v| v * v).sum();
        if n2 > 1e-4 && n2 <= 1.0 {
            return normalize_quat(&q).0;
        }
    }
}

fn camera_for(cfg: &SceneConfig, azimuth: f64) -> Camera {
    let target = [0.0, 0.87, 0.0];
    let eye = [cfg.radius * azimuth.sin(), target[1] + cfg.elevation, cfg.radius * azimuth.cos()];
    Camera::look_at(eye, target, [0.0, 1.0, 0.0], cfg.focal, cfg.resolution, cfg.resolution)
}

fn random_pose(rng: &mut ChaCha8Rng, joints: usize, amp: f64) -> Pose {
    let mut pose = Pose::identity(joints);
    for (j, aa) in pose.axis_angle.iter_mut().enumerate() {
        *aa = if j == 0 {
            [0.0, rng.gen_range(-amp..=amp), 0.0]
        } else {
            [0, 1, 2].map(|_| rng.gen_range(-amp..=amp))
        };
    }
    pose
}

fn skin_weights(field: &SkinField, points: &[[f64; 3]]) -> Result<NdArray, TrainError> {
    let w = field.query(points).into_iter().map(|v| v as f32 as f64).collect();
    Ok(NdArray::new(vec![points.len(), field.joints], w)?)
}

/// Ground-truth Gaussians on sampled anchors plus rendered views.
///
/// Attributes are rounded to `f32` before rendering, so the scene survives its file
/// formats unchanged and the ground truth is exactly representable.
pub fn make_synthetic_scene(template: &BodyTemplate, cfg: &SceneConfig) -> Result<SyntheticScene, TrainError> {
    cfg.validate()?;
    template.validate()?;
    let samples = template.sample_surface_points(&template.vertices, cfg.gaussians, cfg.seed)?;
    let anchors = samples.positions;
    let regions = samples.regions;
    let t = mean_nn_spacing(&anchors).max(1e-3);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5ce4e_0001);
    let mut gt = GaussianSet::empty(1);
    for (a, &region) in anchors.iter().zip(&regions) {
        let dir = random_unit_quat(&mut rng);
        let len = rng.gen_range(0.0..=cfg.max_offset);
        let n = (dir[1] * dir[1] + dir[2] * dir[2] + dir[3] * dir[3]).sqrt().max(1e-12);
        gt.positions.push([0, 1, 2].map(|c| a[c] + len * dir[c + 1] / n));
        gt.rotations.push(random_unit_quat(&mut rng));
        gt.scales.push([0, 1, 2].map(|_| t * rng.gen_range(0.8..1.2)));
        gt.opacities.push(rng.gen_range(0.6..0.95));
        let base = region_color(a, region);
        for k in 0..4 {
            for ch in 0..3 {
                let v = if k == 0 {
                    (base[ch] + rng.gen_range(-0.03..0.03) - 0.5) / SH_C0
                } else {
                    rng.gen_range(-0.03..0.03)
                };
                gt.sh.push(v);
            }
        }
    }
    let gt = gt.rounded_to_f32();
    let field = build_skin_field(template, &template.vertices, &cfg.skin).map_err(TrainError::Config)?;
    let gt_weights = skin_weights(&field, &gt.positions)?;
    let anchor_weights = skin_weights(&field, &anchors)?;
    let head_anchors = GaussianSet {
        positions: anchors.clone(),
        rotations: vec![[1.0, 0.0, 0.0, 0.0]; anchors.len()],
        scales: vec![[t; 3]; anchors.len()],
        opacities: vec![1.0; anchors.len()],
        sh: vec![0.0; anchors.len() * 12],
        sh_degree: 1,
    };

    let mut views = Vec::with_capacity(cfg.train_views + cfg.holdout_views);
    let n_views = cfg.train_views + cfg.holdout_views;
    for v in 0..n_views {
        let azimuth = if v < cfg.train_views {
            2.0 * PI * v as f64 / cfg.train_views as f64
        } else {
            let k = v - cfg.train_views;
            2.0 * PI * k as f64 / cfg.holdout_views as f64 + PI / cfg.train_views as f64
        };
        let camera = camera_for(cfg, azimuth);
        let pose = random_pose(&mut rng, template.num_joints(), cfg.pose_amplitude);
        let (mut rgb, mut mask) = render_posed(template, &gt, &gt_weights, &pose, &camera)?;
        rgb.round_to_f32();
        mask.round_to_f32();
        let transforms = template.forward_kinematics(&pose)?;
        let posed_anchors = pose_set(&head_anchors, &anchor_weights, &transforms)?;
        let head_pts: Vec<[f64; 3]> =
            posed_anchors.positions.iter().zip(&regions).filter(|(_, &r)| r == Region::Head).map(|(p, _)| *p).collect();
        let head_rect = head_rect(&camera, &head_pts).map(|x| x as f32 as f64);
        views.push(SceneView { camera, pose, rgb, mask, head_rect });
    }
    Ok(SyntheticScene { config: cfg.clone(), template: template.clone(), anchors, regions, gt, gt_weights, views })
}

impl SyntheticScene {
    pub fn train_views(&self) -> std::ops::Range<usize> {
        0..self.config.train_views
    }

    pub fn holdout_views(&self) -> std::ops::Range<usize> {
        self.config.train_views..self.views.len()
    }

    pub fn skin_field(&self) -> Result<SkinField, TrainError> {
        build_skin_field(&self.template, &self.template.vertices, &self.config.skin).map_err(TrainError::Config)
    }

    pub fn joint_transforms(&self, view: usize) -> Result<Vec<Matrix4<f64>>, TrainError> {
        Ok(self.template.forward_kinematics(&self.views[view].pose)?)
    }

    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("scene.txt"), self.config.to_text())?;
        self.template.save(&dir.join("body.lbm"))?;
        fs::write(dir.join("anchors.txt"), anchors_to_text(&self.anchors, &self.regions))?;
        let joints = (0..self.template.num_joints() as u32).collect();
        let skin = AvatarSkinning { weights: Some((self.gt_weights.clone(), joints)), field: None };
        write_avatar(&dir.join("gt.lha"), &self.gt, &skin)?;
        for (i, v) in self.views.iter().enumerate() {
            let vd = dir.join(format!("view_{i:03}"));
            fs::create_dir_all(&vd)?;
            fs::write(vd.join("camera.txt"), v.camera.to_text())?;
            fs::write(vd.join("pose.txt"), v.pose.to_line() + "\n")?;
            let r = v.head_rect;
            fs::write(vd.join("head.txt"), format!("{:?} {:?} {:?} {:?}\n", r[0], r[1], r[2], r[3]))?;
            fs::write(vd.join("rgb.raw"), v.rgb.to_raw())?;
            fs::write(vd.join("mask.raw"), v.mask.to_raw())?;
            v.rgb.save_png(&vd.join("rgb.png"))?;
            v.mask.save_png(&vd.join("mask.png"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let read = |name: &str| -> Result<String, TrainError> {
            fs::read_to_string(dir.join(name))
                .map_err(|e| TrainError::Format(format!("{}: {e}", dir.join(name).display())))
        };
        let config = SceneConfig::from_text(&read("scene.txt")?).map_err(TrainError::Format)?;
        let template = BodyTemplate::load(&dir.join("body.lbm"))?;
        let (anchors, regions) = parse_anchors(&read("anchors.txt")?)?;
        let (gt, skin) = read_avatar(&dir.join("gt.lha"))?;
        let gt_weights = skin.weights.ok_or_else(|| TrainError::Format("gt.lha has no skin weights".into()))?.0;
        let n_views = config.train_views + config.holdout_views;
        let mut views = Vec::with_capacity(n_views);
        for i in 0..n_views {
            let name = format!("view_{i:03}");
            let camera = Camera::from_text(&read(&format!("{name}/camera.txt"))?)?;
            let pose = Pose::from_line(read(&format!("{name}/pose.txt"))?.trim())?;
            let rect: Vec<f64> = read(&format!("{name}/head.txt"))?
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| TrainError::Format(format!("bad head rectangle in {name}"))))
                .collect::<Result<_, _>>()?;
            if rect.len() != 4 {
                return Err(TrainError::Format(format!("{name}/head.txt needs 4 numbers")));
            }
            let rgb = Image::from_raw(&fs::read(dir.join(&name).join("rgb.raw"))?)?;
            let mask = Image::from_raw(&fs::read(dir.join(&name).join("mask.raw"))?)?;
            views.push(SceneView { camera, pose, rgb, mask, head_rect: [rect[0], rect[1], rect[2], rect[3]] });
        }
        let scene = Self { config, template, anchors, regions, gt, gt_weights, views };
        scene.check()?;
        Ok(scene)
    }

    fn check(&self) -> Result<(), TrainError> {
        let n = self.anchors.len();
        let j = self.template.num_joints();
        let bad = |m: String| Err(TrainError::Format(m));
        if n != self.config.gaussians || self.gt.len() != n {
            return bad(format!("{n} anchors, {} ground-truth gaussians, config says {}", self.gt.len(), self.config.gaussians));
        }
        if self.gt_weights.shape() != [n, j] {
            return bad(format!("skin weights {:?}, expected [{n}, {j}]", self.gt_weights.shape()));
        }
        for (i, v) in self.views.iter().enumerate() {
            let (w, h) = (v.camera.width, v.camera.height);
            if (v.rgb.width, v.rgb.height, v.rgb.channels) != (w, h, 3) || (v.mask.width, v.mask.height, v.mask.channels) != (w, h, 1) {
                return bad(format!("view {i}: image sizes disagree with its camera"));
            }
            if v.pose.axis_angle.len() != j {
                return bad(format!("view {i}: pose has {} joints, body has {j}", v.pose.axis_angle.len()));
            }
        }
        Ok(())
    }
}
