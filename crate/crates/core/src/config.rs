//! Run configuration text format.
//!
//! ```text
//! # comment
//! [scene]
//! gaussians = 500
//! [network]
//! taps = 2 4 6 8
//! [train]
//! asap_scale = auto
//! [loss]
//! mask = 0.5
//! ```
//!
//! Every key belongs to a section, unknown sections or keys are errors, and values are
//! printed so that they parse back to the same bits.

use crate::network::NetworkConfig;
use crate::train::{SceneConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("bad value `{v}` for `{key}`"))
}

fn parse_list<T: std::str::FromStr, const N: usize>(key: &str, v: &str) -> Result<[T; N], String> {
    let items: Vec<T> = v.split([' ', ',']).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect::<Result<_, _>>()?;
    items.try_into().map_err(|_| format!("`{key}` needs {N} values, got `{v}`"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{key}` must be true or false, got `{v}`")),
    }
}

impl RunConfig {
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        match section {
            "scene" => self.scene.set(key, value),
            "network" => self.set_network(key, value),
            "train" => self.set_train(key, value),
            "loss" => self.set_loss(key, value),
            _ => Err(format!("unknown section `[{section}]`")),
        }
    }

    /// `section.key=value`, the form taken by `--set`.
    pub fn set_dotted(&mut self, assignment: &str) -> Result<(), String> {
        let (path, value) = assignment.split_once('=').ok_or_else(|| format!("expected section.key=value, got `{assignment}`"))?;
        let (section, key) = path.trim().split_once('.').ok_or_else(|| format!("expected section.key, got `{path}`"))?;
        self.set(section, key, value.trim())
    }

    fn set_network(&mut self, key: &str, v: &str) -> Result<(), String> {
        let n = &mut self.network;
        match key {
            "c_tok" => n.c_tok = parse(key, v)?,
            "freqs" => n.freqs = parse(key, v)?,
            "layers" => n.layers = parse(key, v)?,
            "heads" => n.heads = parse(key, v)?,
            "body_res" => n.body_res = parse(key, v)?,
            "body_patch" => n.body_patch = parse(key, v)?,
            "body_depth" => n.body_depth = parse(key, v)?,
            "head_res" => n.head_res = parse(key, v)?,
            "head_patch" => n.head_patch = parse(key, v)?,
            "head_depth" => n.head_depth = parse(key, v)?,
            "taps" => n.taps = parse_list(key, v)?,
            "mask_max" => n.mask_max = parse(key, v)?,
            "sh_degree" => n.sh_degree = parse(key, v)?,
            "ffn_ratio" => n.ffn_ratio = parse(key, v)?,
            "coord_center" => n.coord_center = parse_list(key, v)?,
            "coord_scale" => n.coord_scale = parse(key, v)?,
            "init_scale" => n.init_scale = parse(key, v)?,
            "init_opacity" => n.init_opacity = parse(key, v)?,
            _ => return Err(format!("unknown network key `{key}`")),
        }
        Ok(())
    }

    fn set_train(&mut self, key: &str, v: &str) -> Result<(), String> {
        let t = &mut self.train;
        match key {
            "lr" => t.optim.lr = parse(key, v)?,
            "beta1" => t.optim.beta1 = parse(key, v)?,
            "beta2" => t.optim.beta2 = parse(key, v)?,
            "eps" => t.optim.eps = parse(key, v)?,
            "weight_decay" => t.optim.weight_decay = parse(key, v)?,
            "clip" => t.clip = parse(key, v)?,
            "iterations" => t.iterations = parse(key, v)?,
            "targets" => t.targets = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "init_seed" => t.init_seed = parse(key, v)?,
            "asap_scale" => t.asap_scale = if v == "auto" { None } else { Some(parse(key, v)?) },
            "anchor_skinning" => t.anchor_skinning = parse_bool(key, v)?,
            _ => return Err(format!("unknown train key `{key}`")),
        }
        Ok(())
    }

    fn set_loss(&mut self, key: &str, v: &str) -> Result<(), String> {
        let l = &mut self.train.loss;
        match key {
            "rgb" => l.rgb = parse(key, v)?,
            "mask" => l.mask = parse(key, v)?,
            "perceptual" => l.perceptual = parse(key, v)?,
            "asap" => l.asap = parse(key, v)?,
            "acap" => l.acap = parse(key, v)?,
            "acap_radius" => l.acap_radius = parse(key, v)?,
            _ => return Err(format!("unknown loss key `{key}`")),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies every entry of `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        let mut section: Option<String> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.trim().to_string());
                continue;
            }
            let at = |e: String| format!("line {}: {e}", no + 1);
            let (k, v) = line.split_once('=').ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let sec = section.as_deref().ok_or_else(|| at(format!("`{}` appears before any [section]", k.trim())))?;
            self.set(sec, k.trim(), v.trim()).map_err(at)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let n = &self.network;
        let t = &self.train;
        let l = &t.loss;
        let join = |xs: &[String]| xs.join(" ");
        let mut s = String::from("[scene]\n");
        s.push_str(&self.scene.to_text());
        s.push_str("\n[network]\n");
        s.push_str(&format!(
            "c_tok = {}\nfreqs = {}\nlayers = {}\nheads = {}\nbody_res = {}\nbody_patch = {}\nbody_depth = {}\n\
             head_res = {}\nhead_patch = {}\nhead_depth = {}\ntaps = {}\nmask_max = {:?}\nsh_degree = {}\n\
             ffn_ratio = {}\ncoord_center = {}\ncoord_scale = {:?}\ninit_scale = {:?}\ninit_opacity = {:?}\n",
            n.c_tok,
            n.freqs,
            n.layers,
            n.heads,
            n.body_res,
            n.body_patch,
            n.body_depth,
            n.head_res,
            n.head_patch,
            n.head_depth,
            join(&n.taps.map(|x| x.to_string())),
            n.mask_max,
            n.sh_degree,
            n.ffn_ratio,
            join(&n.coord_center.map(|x| format!("{x:?}"))),
            n.coord_scale,
            n.init_scale,
            n.init_opacity
        ));
        s.push_str("\n[train]\n");
        s.push_str(&format!(
            "lr = {:?}\nbeta1 = {:?}\nbeta2 = {:?}\neps = {:?}\nweight_decay = {:?}\nclip = {:?}\niterations = {}\n\
             targets = {}\nseed = {}\ninit_seed = {}\nasap_scale = {}\nanchor_skinning = {}\n",
            t.optim.lr,
            t.optim.beta1,
            t.optim.beta2,
            t.optim.eps,
            t.optim.weight_decay,
            t.clip,
            t.iterations,
            t.targets,
            t.seed,
            t.init_seed,
            t.asap_scale.map_or("auto".to_string(), |x| format!("{x:?}")),
            t.anchor_skinning
        ));
        s.push_str("\n[loss]\n");
        s.push_str(&format!(
            "rgb = {:?}\nmask = {:?}\nperceptual = {:?}\nasap = {:?}\nacap = {:?}\nacap_radius = {:?}\n",
            l.rgb, l.mask, l.perceptual, l.asap, l.acap, l.acap_radius
        ));
        s
    }
}
