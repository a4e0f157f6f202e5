//! Stain-agnostic slide encoder.
//!
//! One parameter set encodes every stain:
//!
//! ```text
//! patches (N × d_patch) ─┬─ concat stain encoding (N × d_se) ─ pre-attention
//!                        │   3 × [linear → layer norm → GELU → dropout]
//!                        ▼
//!            hidden (N × d_hidden) ── M gated-attention heads ── weighted sums
//!                        ▼
//!   concat (M·d_hidden) → linear → GELU → linear → slide embedding (d_out)
//! ```
//!
//! Head `m` scores patch `j` as `w_mᵀ(tanh(V_mᵀh_j) ⊙ σ(U_mᵀh_j))` and
//! softmax-normalizes the scores over the bag.

mod backward;
mod checkpoint;
mod forward;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub use backward::{backward, encoder_backward, Upstream};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION, PARAMS_FILE,
};
pub use forward::{attention_scores, encode_slide, forward, AttentionRecord, ForwardCache, Mode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_patch: usize,
    /// Width of the learnable per-stain encoding.
    pub d_se: usize,
    pub d_hidden: usize,
    /// Hidden width of each gated-attention MLP.
    pub d_attn: usize,
    pub n_heads: usize,
    pub n_pre_layers: usize,
    pub post_hidden: usize,
    pub d_out: usize,
    pub dropout_pre: f64,
    pub dropout_attn: f64,
    pub use_stain_encoding: bool,
    /// Rows of the stain-encoding table (anchor + other stains).
    pub n_stains: usize,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_patch: 512,
            d_se: 32,
            d_hidden: 512,
            d_attn: 512,
            n_heads: 4,
            n_pre_layers: 3,
            post_hidden: 2048,
            d_out: 512,
            dropout_pre: 0.1,
            dropout_attn: 0.25,
            use_stain_encoding: true,
            n_stains: 5,
            layer_norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_patch", self.d_patch),
            ("d_se", self.d_se),
            ("d_hidden", self.d_hidden),
            ("d_attn", self.d_attn),
            ("n_heads", self.n_heads),
            ("n_pre_layers", self.n_pre_layers),
            ("post_hidden", self.post_hidden),
            ("d_out", self.d_out),
            ("n_stains", self.n_stains),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        for (name, p) in [("dropout_pre", self.dropout_pre), ("dropout_attn", self.dropout_attn)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(name, format!("must be in [0, 1), got {p}")));
            }
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::config("layer_norm_eps", "must be positive"));
        }
        Ok(())
    }

    /// Width entering the first pre-attention layer.
    pub fn input_width(&self) -> usize {
        if self.use_stain_encoding {
            self.d_patch + self.d_se
        } else {
            self.d_patch
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreLayer {
    /// `in × out`
    pub weight: Matrix,
    pub bias: Matrix,
    pub ln_scale: Matrix,
    pub ln_shift: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    /// `d_hidden × d_attn`, tanh branch.
    pub v: Matrix,
    /// `d_hidden × d_attn`, sigmoid gate.
    pub u: Matrix,
    /// `d_attn × 1`
    pub w: Matrix,
}

/// All learnable weights. Also used as the container for their gradients and
/// optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub stain_encodings: Matrix,
    pub pre: Vec<PreLayer>,
    pub heads: Vec<AttentionHead>,
    pub post1_weight: Matrix,
    pub post1_bias: Matrix,
    pub post2_weight: Matrix,
    pub post2_bias: Matrix,
}

fn uniform_fan_in(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let bound = 1.0 / (rows as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-bound, bound))
}

impl EncoderParams {
    /// Fan-in uniform weights `U(-1/√fan_in, 1/√fan_in)`, zero biases, unit
    /// layer-norm scale, zero shift, stain encodings `N(0, 0.02²)`.
    pub fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let stain_encodings = Matrix::from_fn(cfg.n_stains, cfg.d_se, |_, _| 0.02 * rng.normal());
        let mut pre = Vec::with_capacity(cfg.n_pre_layers);
        let mut width = cfg.input_width();
        for _ in 0..cfg.n_pre_layers {
            pre.push(PreLayer {
                weight: uniform_fan_in(width, cfg.d_hidden, rng),
                bias: Matrix::zeros(1, cfg.d_hidden),
                ln_scale: Matrix::filled(1, cfg.d_hidden, 1.0),
                ln_shift: Matrix::zeros(1, cfg.d_hidden),
            });
            width = cfg.d_hidden;
        }
        let heads = (0..cfg.n_heads)
            .map(|_| AttentionHead {
                v: uniform_fan_in(cfg.d_hidden, cfg.d_attn, rng),
                u: uniform_fan_in(cfg.d_hidden, cfg.d_attn, rng),
                w: uniform_fan_in(cfg.d_attn, 1, rng),
            })
            .collect();
        let concat = cfg.n_heads * cfg.d_hidden;
        Ok(Self {
            stain_encodings,
            pre,
            heads,
            post1_weight: uniform_fan_in(concat, cfg.post_hidden, rng),
            post1_bias: Matrix::zeros(1, cfg.post_hidden),
            post2_weight: uniform_fan_in(cfg.post_hidden, cfg.d_out, rng),
            post2_bias: Matrix::zeros(1, cfg.d_out),
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for b in z.blocks_mut() {
            b.as_mut_slice().fill(0.0);
        }
        z
    }

    /// Parameter blocks in declared (serialization) order.
    pub fn blocks(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.stain_encodings];
        for l in &self.pre {
            out.extend([&l.weight, &l.bias, &l.ln_scale, &l.ln_shift]);
        }
        for h in &self.heads {
            out.extend([&h.v, &h.u, &h.w]);
        }
        out.extend([&self.post1_weight, &self.post1_bias, &self.post2_weight, &self.post2_bias]);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.stain_encodings];
        for l in &mut self.pre {
            out.extend([&mut l.weight, &mut l.bias, &mut l.ln_scale, &mut l.ln_shift]);
        }
        for h in &mut self.heads {
            out.extend([&mut h.v, &mut h.u, &mut h.w]);
        }
        out.extend([
            &mut self.post1_weight,
            &mut self.post1_bias,
            &mut self.post2_weight,
            &mut self.post2_bias,
        ]);
        out
    }

    /// Names matching [`Self::blocks`].
    pub fn block_names(&self) -> Vec<String> {
        let mut out = vec!["stain_encodings".to_string()];
        for i in 0..self.pre.len() {
            for f in ["weight", "bias", "ln_scale", "ln_shift"] {
                out.push(format!("pre.{i}.{f}"));
            }
        }
        for m in 0..self.heads.len() {
            for f in ["v", "u", "w"] {
                out.push(format!("heads.{m}.{f}"));
            }
        }
        out.extend(["post1.weight", "post1.bias", "post2.weight", "post2.bias"].map(String::from));
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.as_slice().len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for b in self.blocks() {
            v.extend_from_slice(b.as_slice());
        }
        v
    }

    /// Overwrites all parameters from a flat vector in declared order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dims("EncoderParams::set_flat", self.num_params(), flat.len()));
        }
        let mut offset = 0;
        for b in self.blocks_mut() {
            let n = b.as_slice().len();
            b.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &EncoderParams) -> Result<()> {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.add_scaled(alpha, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for b in self.blocks_mut() {
            b.scale(s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks().iter().map(|b| b.max_abs()).fold(0.0, f64::max)
    }

    /// Checks block shapes against a config.
    pub fn check_shapes(&self, cfg: &EncoderConfig) -> Result<()> {
        let template = EncoderParams::init(cfg, &mut Rng::new(0))?;
        let mine: Vec<_> = self.blocks().iter().map(|b| b.shape()).collect();
        let want: Vec<_> = template.blocks().iter().map(|b| b.shape()).collect();
        if mine != want {
            return Err(Error::dims(
                "EncoderParams",
                format!("{mine:?}"),
                format!("config expects {want:?}"),
            ));
        }
        Ok(())
    }
}

/// One slide's embedding for one stain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideEmbedding {
    pub case_id: String,
    pub stain: crate::datamodel::StainId,
    pub vector: Vec<f64>,
}
