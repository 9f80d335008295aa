//! Reconstruction network: tokenizers, head feature pyramid, global context,
//! multimodal body-head transformer blocks, and the Gaussian regression head.

mod model;

pub use model::{
    attention, encode_body_image, encode_geometric, encode_head_pyramid, global_context, mbht_block,
    mm_transformer_block, positional_encoding, predict_gaussians, shrink_head_tokens, GeoTokens, Mode, MmOutput,
    NetworkInput, Prediction, Streams,
};

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AdError, NdArray, Tape, Var};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("missing weight {0}")]
    Missing(String),
    #[error("weights file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Ad(#[from] AdError),
}

impl From<NetworkError> for AdError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Ad(a) => a,
            other => AdError::Invalid(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub c_tok: usize,
    /// Sinusoidal frequencies per coordinate.
    pub freqs: usize,
    pub layers: usize,
    pub heads: usize,
    pub body_res: usize,
    pub body_patch: usize,
    pub body_depth: usize,
    pub head_res: usize,
    pub head_patch: usize,
    pub head_depth: usize,
    /// 1-based encoder depths whose outputs feed the head pyramid.
    pub taps: [usize; 4],
    pub mask_max: f64,
    pub sh_degree: usize,
    pub ffn_ratio: usize,
    /// Points are mapped to `(p − center) / scale` before encoding.
    pub coord_center: [f64; 3],
    pub coord_scale: f64,
    /// Scale the regression head starts at (meters).
    pub init_scale: f64,
    pub init_opacity: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            c_tok: 64,
            freqs: 8,
            layers: 2,
            heads: 4,
            body_res: 128,
            body_patch: 16,
            body_depth: 2,
            head_res: 64,
            head_patch: 8,
            head_depth: 8,
            taps: [2, 4, 6, 8],
            mask_max: 0.5,
            sh_degree: 1,
            ffn_ratio: 2,
            coord_center: [0.0, 0.865, 0.0],
            coord_scale: 0.9,
            init_scale: 0.03,
            init_opacity: 0.8,
        }
    }
}

impl NetworkConfig {
    /// Smallest configuration used by the end-to-end gradient check.
    pub fn micro() -> Self {
        Self {
            c_tok: 16,
            freqs: 4,
            layers: 1,
            heads: 2,
            body_res: 32,
            body_patch: 16,
            body_depth: 1,
            head_res: 16,
            head_patch: 8,
            head_depth: 4,
            taps: [1, 2, 3, 4],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::Config(m));
        if self.c_tok == 0 || self.heads == 0 || self.c_tok % self.heads != 0 {
            return bad(format!("c_tok {} not divisible by heads {}", self.c_tok, self.heads));
        }
        if self.freqs == 0 || self.layers == 0 || self.ffn_ratio == 0 {
            return bad("freqs, layers and ffn_ratio must be positive".into());
        }
        for (name, res, patch) in [("body", self.body_res, self.body_patch), ("head", self.head_res, self.head_patch)] {
            if patch == 0 || res == 0 || res % patch != 0 {
                return bad(format!("{name} resolution {res} not divisible by patch {patch}"));
            }
        }
        if self.body_depth == 0 || self.head_depth == 0 {
            return bad("encoder depths must be positive".into());
        }
        if self.taps[0] == 0 || self.taps.windows(2).any(|w| w[0] >= w[1]) || self.taps[3] > self.head_depth {
            return bad(format!("tap depths {:?} must increase strictly within 1..={}", self.taps, self.head_depth));
        }
        if !(0.0..=0.5).contains(&self.mask_max) {
            return bad(format!("mask_max {} outside [0, 0.5]", self.mask_max));
        }
        if self.sh_degree > 1 {
            return bad(format!("sh_degree {} unsupported", self.sh_degree));
        }
        if !(self.coord_scale > 0.0) || !(self.init_scale > 0.0) || !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return bad("coord_scale, init_scale, init_opacity out of range".into());
        }
        Ok(())
    }

    pub fn sh_coeffs(&self) -> usize {
        3 * (self.sh_degree + 1) * (self.sh_degree + 1)
    }

    pub fn body_tokens(&self) -> usize {
        (self.body_res / self.body_patch).pow(2)
    }

    pub fn head_tokens(&self) -> usize {
        (self.head_res / self.head_patch).pow(2)
    }
}

/// Learnable arrays keyed by stable path strings such as `mbht0.s1.q.qkv.w`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWeights {
    pub tensors: BTreeMap<String, NdArray>,
}

struct Init {
    rng: ChaCha8Rng,
    tensors: BTreeMap<String, NdArray>,
}

impl Init {
    fn put(&mut self, path: String, shape: &[usize], f: impl FnMut(&mut ChaCha8Rng) -> f64) {
        let mut f = f;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| f(&mut self.rng) as f32 as f64).collect();
        let prev = self.tensors.insert(path.clone(), NdArray::new(shape.to_vec(), data).expect("shape"));
        assert!(prev.is_none(), "duplicate weight {path}");
    }

    fn linear(&mut self, path: &str, fan_in: usize, fan_out: usize, gain: f64) {
        let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.put(format!("{path}.w"), &[fan_in, fan_out], |r| r.gen_range(-bound..=bound));
        self.put(format!("{path}.b"), &[fan_out], |_| 0.0);
    }

    fn norm(&mut self, path: &str, c: usize) {
        self.put(format!("{path}.g"), &[c], |_| 1.0);
        self.put(format!("{path}.b"), &[c], |_| 0.0);
    }

    fn encoder(&mut self, path: &str, cfg: &NetworkConfig, patch: usize, tokens: usize, depth: usize) {
        let c = cfg.c_tok;
        self.linear(&format!("{path}.patch"), patch * patch * 3, c, 1.0);
        self.put(format!("{path}.pos"), &[tokens, c], |r| r.gen_range(-0.035..=0.035));
        for d in 0..depth {
            let b = format!("{path}.blk{d}");
            self.norm(&format!("{b}.ln1"), c);
            self.linear(&format!("{b}.qkv"), c, 3 * c, 1.0);
            self.linear(&format!("{b}.out"), c, c, 1.0);
            self.norm(&format!("{b}.ln2"), c);
            self.linear(&format!("{b}.ffn0"), c, cfg.ffn_ratio * c, 1.0);
            self.linear(&format!("{b}.ffn1"), cfg.ffn_ratio * c, c, 1.0);
        }
    }

    fn mm_stream(&mut self, path: &str, cfg: &NetworkConfig) {
        let c = cfg.c_tok;
        // (shift1, scale1, gate1, shift2, scale2, gate2); gate columns start at zero
        let bound = (6.0 / (7 * c) as f64).sqrt();
        self.put(format!("{path}.mod.w"), &[c, 6 * c], |r| r.gen_range(-bound..=bound));
        let w = self.tensors.get_mut(&format!("{path}.mod.w")).unwrap();
        for row in w.data_mut().chunks_mut(6 * c) {
            row[2 * c..3 * c].fill(0.0);
            row[5 * c..6 * c].fill(0.0);
        }
        self.put(format!("{path}.mod.b"), &[6 * c], |_| 0.0);
        self.linear(&format!("{path}.qkv"), c, 3 * c, 1.0);
        self.linear(&format!("{path}.out"), c, c, 1.0);
        self.linear(&format!("{path}.ffn0"), c, cfg.ffn_ratio * c, 1.0);
        self.linear(&format!("{path}.ffn1"), cfg.ffn_ratio * c, c, 1.0);
    }
}

fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl NetworkWeights {
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Result<Self, NetworkError> {
        cfg.validate()?;
        let c = cfg.c_tok;
        let mut it = Init { rng: ChaCha8Rng::seed_from_u64(seed), tensors: BTreeMap::new() };
        it.linear("geo.mlp0", 6 * cfg.freqs, c, 1.0);
        it.linear("geo.mlp1", c, c, 1.0);
        it.encoder("body", cfg, cfg.body_patch, cfg.body_tokens(), cfg.body_depth);
        it.linear("body.proj0", c, c, 1.0);
        it.linear("body.proj1", c, c, 1.0);
        it.encoder("head", cfg, cfg.head_patch, cfg.head_tokens(), cfg.head_depth);
        it.linear("head.fuse", 4 * c, c, 1.0);
        it.linear("head.proj0", c, c, 1.0);
        it.linear("head.proj1", c, c, 1.0);
        it.linear("ctx0", c, c, 1.0);
        it.linear("ctx1", c, c, 1.0);
        for l in 0..cfg.layers {
            for stage in ["s1", "s3"] {
                it.mm_stream(&format!("mbht{l}.{stage}.q"), cfg);
                it.mm_stream(&format!("mbht{l}.{stage}.c"), cfg);
            }
            it.norm(&format!("mbht{l}.norm_head"), c);
            it.norm(&format!("mbht{l}.norm_body"), c);
        }
        it.linear("reg0", c, c, 1.0);
        it.linear("reg1", c, c, 1.0);
        let heads = [("offset", 3), ("rotation", 4), ("scale", 3), ("opacity", 1), ("sh", cfg.sh_coeffs())];
        for (name, cols) in heads {
            it.linear(&format!("reg.{name}"), c, cols, 0.1);
        }
        let act = crate::gaussian::Activation::default();
        let scale_bias = softplus_inv(cfg.init_scale - act.min_scale) as f32 as f64;
        let opacity_bias = ((cfg.init_opacity / (1.0 - cfg.init_opacity)).ln()) as f32 as f64;
        let t = &mut it.tensors;
        t.get_mut("reg.rotation.b").unwrap().data_mut()[0] = 1.0;
        t.get_mut("reg.scale.b").unwrap().data_mut().fill(scale_bias);
        t.get_mut("reg.opacity.b").unwrap().data_mut().fill(opacity_bias);
        Ok(Self { tensors: it.tensors })
    }

    pub fn get(&self, path: &str) -> Result<&NdArray, NetworkError> {
        self.tensors.get(path).ok_or_else(|| NetworkError::Missing(path.to_string()))
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(NdArray::len).sum()
    }

    /// Records every tensor on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<ParamVars, AdError> {
        self.bind_with(tape, trainable, None)
    }

    /// Like [`NetworkWeights::bind`], with one path replaced by an existing variable.
    pub fn bind_with(&self, tape: &mut Tape, trainable: bool, replace: Option<(&str, Var)>) -> Result<ParamVars, AdError> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.tensors {
            let var = match replace {
                Some((path, x)) if path == k => x,
                _ if trainable => tape.param(v.clone())?,
                _ => tape.constant(v.clone())?,
            };
            vars.insert(k.clone(), var);
        }
        Ok(ParamVars { vars })
    }

    /// Little-endian container: `LHW1`, u32 version, u32 count, then per tensor
    /// u32 name length, UTF-8 name, u32 rank, u32 extents, f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_params() * 4);
        out.extend_from_slice(b"LHW1");
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (k, v) in &self.tensors {
            out.extend_from_slice(&(k.len() as u32).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&(v.ndim() as u32).to_le_bytes());
            for &d in v.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in v.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetworkError> {
        let (w, used) = Self::read_prefix(bytes)?;
        if used != bytes.len() {
            return Err(NetworkError::Format(format!("{} trailing bytes", bytes.len() - used)));
        }
        Ok(w)
    }

    /// Parses a container at the start of `bytes`; returns it and the bytes consumed.
    pub fn read_prefix(bytes: &[u8]) -> Result<(Self, usize), NetworkError> {
        let mut r = crate::gaussian::ByteReader { bytes, pos: 0 };
        let err = |e: crate::gaussian::AvatarError| NetworkError::Format(e.to_string());
        if r.take(4).map_err(err)? != b"LHW1" {
            return Err(NetworkError::Format("bad magic".into()));
        }
        let version = r.u32().map_err(err)?;
        if version != WEIGHTS_VERSION {
            return Err(NetworkError::Format(format!("unsupported version {version}")));
        }
        let count = r.u32().map_err(err)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32().map_err(err)? as usize;
            let name = String::from_utf8(r.take(len).map_err(err)?.to_vec())
                .map_err(|_| NetworkError::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32().map_err(err)? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>().map_err(err)?;
            let n: usize = shape.iter().product();
            let data = r.f32s(n).map_err(err)?;
            if data.iter().any(|x| !x.is_finite()) {
                return Err(NetworkError::Format(format!("non-finite value in {name}")));
            }
            if tensors.insert(name.clone(), NdArray::new(shape, data)?).is_some() {
                return Err(NetworkError::Format(format!("duplicate tensor {name}")));
            }
        }
        Ok((Self { tensors }, r.pos))
    }

    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Checks that every tensor the config needs exists with the expected shape.
    pub fn check_against(&self, cfg: &NetworkConfig) -> Result<(), NetworkError> {
        let reference = Self::init(cfg, 0)?;
        for (k, v) in &reference.tensors {
            let have = self.get(k)?;
            if have.shape() != v.shape() {
                return Err(NetworkError::Format(format!("{k}: shape {:?}, config needs {:?}", have.shape(), v.shape())));
            }
        }
        if self.tensors.len() != reference.tensors.len() {
            return Err(NetworkError::Format(format!(
                "{} tensors, config needs {}",
                self.tensors.len(),
                reference.tensors.len()
            )));
        }
        Ok(())
    }
}

pub const WEIGHTS_VERSION: u32 = 1;

/// Tape variables for every weight, by path.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, path: &str) -> Result<Var, AdError> {
        self.vars.get(path).copied().ok_or_else(|| AdError::Invalid(format!("missing weight {path}")))
    }
}
