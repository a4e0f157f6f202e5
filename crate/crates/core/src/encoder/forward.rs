use serde::{Deserialize, Serialize};

use super::{AttentionHead, EncoderConfig, EncoderParams, SlideEmbedding};
use crate::datamodel::{PatchEmbeddingBag, StainId};
use crate::error::{Error, Result};
use crate::numerics::{gelu, layer_norm, sigmoid, softmax_inplace, Matrix, Rng};

/// Dropout is active only in `Train`, with masks drawn from the given stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    fn mask(&mut self, rows: usize, cols: usize, p: f64) -> Option<Matrix> {
        match self {
            Mode::Train(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                Some(Matrix::from_fn(rows, cols, |_, _| {
                    if rng.bernoulli(p) {
                        0.0
                    } else {
                        keep
                    }
                }))
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerCache {
    pub input: Matrix,
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
    /// Layer-norm output, the GELU argument.
    pub pre_act: Matrix,
    pub mask: Option<Matrix>,
}

#[derive(Clone, Debug)]
pub(crate) struct HeadCache {
    pub tanh_a: Matrix,
    pub sig_b: Matrix,
    /// Gated features after dropout, the input to `w`.
    pub gated: Matrix,
    pub mask: Option<Matrix>,
    pub weights: Vec<f64>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub(crate) stain_index: usize,
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) hidden: Matrix,
    pub(crate) heads: Vec<HeadCache>,
    pub(crate) concat: Vec<f64>,
    pub(crate) post_pre: Vec<f64>,
    pub(crate) post_act: Vec<f64>,
    pub(crate) output: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Pre-attention features of every patch, `N × d_hidden`.
    pub fn hidden(&self) -> &Matrix {
        &self.hidden
    }

    pub fn n_patches(&self) -> usize {
        self.hidden.rows()
    }

    pub fn attention(&self) -> Vec<Vec<f64>> {
        self.heads.iter().map(|h| h.weights.clone()).collect()
    }
}

/// Per-head attention weights of one encoded bag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub case_id: String,
    pub stain: StainId,
    /// `weights[m][j]`: weight of patch `j` in head `m`.
    pub weights: Vec<Vec<f64>>,
}

/// Attention weights of one head over the rows of `hidden`.
pub fn attention_scores(hidden: &Matrix, head: &AttentionHead) -> Result<Vec<f64>> {
    Ok(gated_attention(hidden, head, None)?.weights)
}

fn gated_attention(hidden: &Matrix, head: &AttentionHead, mask: Option<Matrix>) -> Result<HeadCache> {
    if hidden.rows() == 0 {
        return Err(Error::EmptyBag);
    }
    if head.w.cols() != 1 || head.v.cols() != head.w.rows() || head.u.shape() != head.v.shape() {
        return Err(Error::dims(
            "attention head",
            format!("V {} U {}", head.v.shape_str(), head.u.shape_str()),
            format!("w {}", head.w.shape_str()),
        ));
    }
    let tanh_a = hidden.matmul(&head.v)?.map(f64::tanh);
    let sig_b = hidden.matmul(&head.u)?.map(sigmoid);
    let mut gated = tanh_a.hadamard(&sig_b)?;
    if let Some(m) = &mask {
        gated = gated.hadamard(m)?;
    }
    let mut weights = gated.mul_vec(head.w.as_slice())?;
    softmax_inplace(&mut weights);
    Ok(HeadCache {
        tanh_a,
        sig_b,
        gated,
        mask,
        weights,
    })
}

/// Runs the encoder over one bag of patch embeddings (`N × d_patch`).
pub fn forward(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    patches: &Matrix,
    stain_index: usize,
    mut mode: Mode<'_>,
) -> Result<ForwardCache> {
    if patches.rows() == 0 {
        return Err(Error::EmptyBag);
    }
    if patches.cols() != cfg.d_patch {
        return Err(Error::dims(
            "encoder input",
            format!("d_patch={}", cfg.d_patch),
            format!("bag {}", patches.shape_str()),
        ));
    }
    if stain_index >= params.stain_encodings.rows() {
        return Err(Error::UnknownStain(format!(
            "index {stain_index} (encoder knows {} stains)",
            params.stain_encodings.rows()
        )));
    }
    let n = patches.rows();

    let mut x = if cfg.use_stain_encoding {
        let se = params.stain_encodings.row(stain_index);
        let tiled = Matrix::from_fn(n, se.len(), |_, j| se[j]);
        patches.hcat(&tiled)?
    } else {
        patches.clone()
    };

    let mut layers = Vec::with_capacity(params.pre.len());
    for layer in &params.pre {
        let mut z = x.matmul(&layer.weight)?;
        z.add_row_broadcast(layer.bias.as_slice())?;
        let mut xhat = Matrix::zeros(n, z.cols());
        let mut pre_act = Matrix::zeros(n, z.cols());
        let mut inv_std = Vec::with_capacity(n);
        let scale = layer.ln_scale.as_slice();
        let shift = layer.ln_shift.as_slice();
        for i in 0..n {
            let (normed, stats) = layer_norm(z.row(i), cfg.layer_norm_eps);
            inv_std.push(stats.inv_std);
            for (j, v) in normed.iter().enumerate() {
                pre_act[(i, j)] = v * scale[j] + shift[j];
            }
            xhat.row_mut(i).copy_from_slice(&normed);
        }
        let mut out = pre_act.map(gelu);
        let mask = mode.mask(n, out.cols(), cfg.dropout_pre);
        if let Some(m) = &mask {
            out = out.hadamard(m)?;
        }
        layers.push(LayerCache {
            input: x,
            xhat,
            inv_std,
            pre_act,
            mask,
        });
        x = out;
    }
    let hidden = x;

    let mut heads = Vec::with_capacity(params.heads.len());
    let mut concat = Vec::with_capacity(params.heads.len() * hidden.cols());
    for head in &params.heads {
        let mask = mode.mask(n, head.v.cols(), cfg.dropout_attn);
        let hc = gated_attention(&hidden, head, mask)?;
        concat.extend(hidden.vec_mul(&hc.weights)?);
        heads.push(hc);
    }

    let mut post_pre = params.post1_weight.vec_mul(&concat)?;
    for (p, b) in post_pre.iter_mut().zip(params.post1_bias.as_slice()) {
        *p += b;
    }
    let post_act: Vec<f64> = post_pre.iter().map(|&v| gelu(v)).collect();
    let mut output = params.post2_weight.vec_mul(&post_act)?;
    for (o, b) in output.iter_mut().zip(params.post2_bias.as_slice()) {
        *o += b;
    }
    if output.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("slide embedding".into()));
    }

    Ok(ForwardCache {
        stain_index,
        layers,
        hidden,
        heads,
        concat,
        post_pre,
        post_act,
        output,
    })
}

/// Encodes a bag into a slide embedding plus its attention weights.
pub fn encode_slide(
    case_id: &str,
    bag: &PatchEmbeddingBag,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    mode: Mode<'_>,
) -> Result<(SlideEmbedding, AttentionRecord)> {
    let cache = forward(params, cfg, &bag.embeddings, bag.stain.index, mode)?;
    let record = AttentionRecord {
        case_id: case_id.to_string(),
        stain: bag.stain.clone(),
        weights: cache.attention(),
    };
    Ok((
        SlideEmbedding {
            case_id: case_id.to_string(),
            stain: bag.stain.clone(),
            vector: cache.output,
        },
        record,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            d_patch: 6,
            d_se: 3,
            d_hidden: 8,
            d_attn: 5,
            n_heads: 3,
            n_pre_layers: 3,
            post_hidden: 12,
            d_out: 4,
            n_stains: 3,
            ..Default::default()
        }
    }

    fn bag(n: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_fn(n, 6, |_, _| rng.normal())
    }

    #[test]
    fn singleton_attention() {
        let p = EncoderParams::init(&cfg(), &mut Rng::new(0)).unwrap();
        let h = bag(1, 1).map(|x| x * 0.3);
        let h = Matrix::from_fn(1, 8, |_, j| h[(0, j % 6)]);
        assert_eq!(attention_scores(&h, &p.heads[0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn identical_patches_get_uniform_weights() {
        let p = EncoderParams::init(&cfg(), &mut Rng::new(0)).unwrap();
        let h = Matrix::from_fn(5, 8, |_, j| j as f64 * 0.1 - 0.3);
        for w in attention_scores(&h, &p.heads[1]).unwrap() {
            assert!((w - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_matches_scalar_formula() {
        let p = EncoderParams::init(&cfg(), &mut Rng::new(4)).unwrap();
        let mut rng = Rng::new(9);
        let h = Matrix::from_fn(6, 8, |_, _| rng.normal());
        let head = &p.heads[2];
        let got = attention_scores(&h, head).unwrap();
        // direct re-evaluation, one scalar at a time
        let mut logits = Vec::new();
        for j in 0..6 {
            let mut s = 0.0;
            for a in 0..5 {
                let mut va = 0.0;
                let mut ua = 0.0;
                for k in 0..8 {
                    va += head.v[(k, a)] * h[(j, k)];
                    ua += head.u[(k, a)] * h[(j, k)];
                }
                s += head.w[(a, 0)] * va.tanh() * (1.0 / (1.0 + (-ua).exp()));
            }
            logits.push(s);
        }
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (g, l) in got.iter().zip(&logits) {
            assert!((g - l.exp() / z).abs() < 1e-12);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eval_is_deterministic_and_permutation_invariant() {
        let c = cfg();
        let p = EncoderParams::init(&c, &mut Rng::new(0)).unwrap();
        let x = bag(7, 3);
        let a = forward(&p, &c, &x, 1, Mode::Eval).unwrap();
        let b = forward(&p, &c, &x, 1, Mode::Eval).unwrap();
        assert_eq!(a.output(), b.output());
        let perm = [3, 0, 6, 2, 5, 1, 4];
        let y = x.select_rows(&perm);
        let c2 = forward(&p, &c, &y, 1, Mode::Eval).unwrap();
        for (u, v) in a.output().iter().zip(c2.output()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn single_patch_pools_its_hidden_row() {
        let c = cfg();
        let p = EncoderParams::init(&c, &mut Rng::new(0)).unwrap();
        let cache = forward(&p, &c, &bag(1, 5), 0, Mode::Eval).unwrap();
        let h = cache.hidden().row(0).to_vec();
        for m in 0..c.n_heads {
            assert_eq!(&cache.concat[m * 8..(m + 1) * 8], &h[..]);
        }
    }

    #[test]
    fn stain_encoding_is_the_only_stain_pathway() {
        let mut c = cfg();
        let p = EncoderParams::init(&c, &mut Rng::new(0)).unwrap();
        let x = bag(4, 2);
        let a = forward(&p, &c, &x, 0, Mode::Eval).unwrap();
        let b = forward(&p, &c, &x, 2, Mode::Eval).unwrap();
        assert_ne!(a.output(), b.output());
        // identical encodings for two stains => identical outputs
        let mut q = p.clone();
        let row0 = q.stain_encodings.row(0).to_vec();
        q.stain_encodings.row_mut(2).copy_from_slice(&row0);
        let a = forward(&q, &c, &x, 0, Mode::Eval).unwrap();
        let b = forward(&q, &c, &x, 2, Mode::Eval).unwrap();
        assert_eq!(a.output(), b.output());

        c.use_stain_encoding = false;
        let p = EncoderParams::init(&c, &mut Rng::new(0)).unwrap();
        let a = forward(&p, &c, &x, 0, Mode::Eval).unwrap();
        let b = forward(&p, &c, &x, 2, Mode::Eval).unwrap();
        assert_eq!(a.output(), b.output());
    }

    #[test]
    fn train_mode_uses_dropout() {
        let c = cfg();
        let p = EncoderParams::init(&c, &mut Rng::new(0)).unwrap();
        let x = bag(9, 2);
        let e = forward(&p, &c, &x, 0, Mode::Eval).unwrap();
        let mut r1 = Rng::new(1);
        let mut r2 = Rng::new(1);
        let t1 = forward(&p, &c, &x, 0, Mode::Train(&mut r1)).unwrap();
        let t2 = forward(&p, &c, &x, 0, Mode::Train(&mut r2)).unwrap();
        assert_eq!(t1.output(), t2.output());
        assert_ne!(t1.output(), e.output());
    }

    #[test]
    fn errors() {
        let c = cfg();
        let p = EncoderParams::init(&c, &mut Rng::new(0)).unwrap();
        assert!(matches!(
            forward(&p, &c, &Matrix::zeros(3, 5), 0, Mode::Eval),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            forward(&p, &c, &bag(3, 0), 7, Mode::Eval),
            Err(Error::UnknownStain(_))
        ));
    }

    #[test]
    fn attention_weights_form_distributions() {
        let c = cfg();
        let p = EncoderParams::init(&c, &mut Rng::new(3)).unwrap();
        let b = PatchEmbeddingBag::new(StainId::new("ER", 1), bag(11, 8)).unwrap();
        let (emb, rec) = encode_slide("x", &b, &p, &c, Mode::Eval).unwrap();
        assert_eq!(emb.vector.len(), 4);
        assert_eq!(rec.weights.len(), 3);
        for w in &rec.weights {
            assert_eq!(w.len(), 11);
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
