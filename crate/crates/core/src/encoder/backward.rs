use rayon::prelude::*;

use super::{EncoderConfig, EncoderParams, ForwardCache};
use crate::error::{Error, Result};
use crate::numerics::{gelu_grad, layer_norm_backward, Matrix};

/// Gradients flowing into one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Upstream<'a> {
    /// d loss / d slide embedding.
    pub output: &'a [f64],
    /// Optional d loss / d pre-attention features (`N × d_hidden`).
    pub hidden: Option<&'a Matrix>,
}

fn outer_add(acc: &mut Matrix, left: &[f64], right: &[f64]) {
    let cols = acc.cols();
    for (i, &l) in left.iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        let row = &mut acc.as_mut_slice()[i * cols..(i + 1) * cols];
        for (a, &r) in row.iter_mut().zip(right) {
            *a += l * r;
        }
    }
}

fn add_into(acc: &mut Matrix, values: &[f64]) {
    for (a, v) in acc.as_mut_slice().iter_mut().zip(values) {
        *a += v;
    }
}

/// Accumulates the parameter gradients of one forward pass into `grads`.
pub fn backward(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    cache: &ForwardCache,
    upstream: Upstream<'_>,
    grads: &mut EncoderParams,
) -> Result<()> {
    if upstream.output.len() != cache.output.len() {
        return Err(Error::dims(
            "encoder backward",
            format!("embedding width {}", cache.output.len()),
            format!("upstream width {}", upstream.output.len()),
        ));
    }
    let n = cache.hidden.rows();
    let dh = cache.hidden.cols();
    let mut d_hidden = match upstream.hidden {
        Some(g) if g.shape() != cache.hidden.shape() => {
            return Err(Error::dims(
                "encoder backward",
                format!("hidden {}", cache.hidden.shape_str()),
                format!("upstream hidden {}", g.shape_str()),
            ))
        }
        Some(g) => g.clone(),
        None => Matrix::zeros(n, dh),
    };

    // post-attention
    let d_out = upstream.output;
    add_into(&mut grads.post2_bias, d_out);
    outer_add(&mut grads.post2_weight, &cache.post_act, d_out);
    let d_act = params.post2_weight.mul_vec(d_out)?;
    let d_pre: Vec<f64> = d_act
        .iter()
        .zip(&cache.post_pre)
        .map(|(g, &x)| g * gelu_grad(x))
        .collect();
    add_into(&mut grads.post1_bias, &d_pre);
    outer_add(&mut grads.post1_weight, &cache.concat, &d_pre);
    let d_concat = params.post1_weight.mul_vec(&d_pre)?;

    // attention heads
    for (m, (head, hc)) in params.heads.iter().zip(&cache.heads).enumerate() {
        let d_pooled = &d_concat[m * dh..(m + 1) * dh];
        outer_add(&mut d_hidden, &hc.weights, d_pooled);
        let d_weight = cache.hidden.mul_vec(d_pooled)?;
        let s: f64 = hc.weights.iter().zip(&d_weight).map(|(a, g)| a * g).sum();
        let d_logit: Vec<f64> = hc.weights.iter().zip(&d_weight).map(|(a, g)| a * (g - s)).collect();
        let gw = hc.gated.vec_mul(&d_logit)?;
        add_into(&mut grads.heads[m].w, &gw);

        let w = head.w.as_slice();
        let da = hc.tanh_a.cols();
        let mut d_a = Matrix::zeros(n, da);
        let mut d_b = Matrix::zeros(n, da);
        for j in 0..n {
            let t = hc.tanh_a.row(j);
            let sg = hc.sig_b.row(j);
            let mask = hc.mask.as_ref().map(|mk| mk.row(j));
            let ra = d_a.row_mut(j);
            for k in 0..da {
                let mut g = d_logit[j] * w[k];
                if let Some(mk) = mask {
                    g *= mk[k];
                }
                ra[k] = g * sg[k] * (1.0 - t[k] * t[k]);
            }
            let rb = d_b.row_mut(j);
            for k in 0..da {
                let mut g = d_logit[j] * w[k];
                if let Some(mk) = mask {
                    g *= mk[k];
                }
                rb[k] = g * t[k] * sg[k] * (1.0 - sg[k]);
            }
        }
        grads.heads[m].v.add_scaled(1.0, &cache.hidden.t_matmul(&d_a)?)?;
        grads.heads[m].u.add_scaled(1.0, &cache.hidden.t_matmul(&d_b)?)?;
        d_hidden.add_scaled(1.0, &d_a.matmul_t(&head.v)?)?;
        d_hidden.add_scaled(1.0, &d_b.matmul_t(&head.u)?)?;
    }

    // pre-attention, last layer first
    let mut d_x = d_hidden;
    for (l, (layer, lc)) in params.pre.iter().zip(&cache.layers).enumerate().rev() {
        if let Some(mask) = &lc.mask {
            d_x = d_x.hadamard(mask)?;
        }
        let width = lc.pre_act.cols();
        let scale = layer.ln_scale.as_slice();
        let mut d_z = Matrix::zeros(n, width);
        let g = &mut grads.pre[l];
        for i in 0..n {
            let d_y: Vec<f64> = d_x
                .row(i)
                .iter()
                .zip(lc.pre_act.row(i))
                .map(|(g, &y)| g * gelu_grad(y))
                .collect();
            let xhat = lc.xhat.row(i);
            let mut d_xhat = vec![0.0; width];
            for k in 0..width {
                g.ln_shift.as_mut_slice()[k] += d_y[k];
                g.ln_scale.as_mut_slice()[k] += d_y[k] * xhat[k];
                d_xhat[k] = d_y[k] * scale[k];
            }
            let row = layer_norm_backward(xhat, &d_xhat, lc.inv_std[i]);
            d_z.row_mut(i).copy_from_slice(&row);
        }
        add_into(&mut g.bias, &d_z.sum_rows());
        g.weight.add_scaled(1.0, &lc.input.t_matmul(&d_z)?)?;
        if l > 0 || cfg.use_stain_encoding {
            d_x = d_z.matmul_t(&layer.weight)?;
        }
    }

    if cfg.use_stain_encoding && !params.pre.is_empty() {
        let se = grads.stain_encodings.row_mut(cache.stain_index);
        for i in 0..n {
            for (s, g) in se.iter_mut().zip(&d_x.row(i)[cfg.d_patch..]) {
                *s += g;
            }
        }
    }
    Ok(())
}

const REDUCE_CHUNK: usize = 16;

/// Parameter gradients summed over a batch of forward passes.
///
/// Per-item gradients are computed in parallel and summed in item order, so
/// the result does not depend on the worker count.
pub fn encoder_backward(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    caches: &[&ForwardCache],
    upstream: &[Upstream<'_>],
) -> Result<EncoderParams> {
    if caches.len() != upstream.len() {
        return Err(Error::dims("encoder_backward", caches.len(), upstream.len()));
    }
    let mut total = params.zeros_like();
    for (cache_chunk, up_chunk) in caches.chunks(REDUCE_CHUNK).zip(upstream.chunks(REDUCE_CHUNK)) {
        let parts: Vec<Result<EncoderParams>> = cache_chunk
            .par_iter()
            .zip(up_chunk.par_iter())
            .map(|(c, u)| {
                let mut g = params.zeros_like();
                backward(params, cfg, c, *u, &mut g)?;
                Ok(g)
            })
            .collect();
        for part in parts {
            total.add_scaled(1.0, &part?)?;
        }
    }
    Ok(total)
}
