use super::TrainConfig;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};

/// Adam moments, shaped like the parameters they track.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub first: EncoderParams,
    pub second: EncoderParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &EncoderParams) -> Self {
        Self {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay.
///
/// Weights are first shrunk by `1 − lr·weight_decay`, then moved by the
/// bias-corrected Adam direction. Every block is checked for non-finite
/// gradients before anything is modified.
pub fn adamw_step(
    params: &mut EncoderParams,
    grads: &EncoderParams,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.num_params() != grads.num_params() || params.num_params() != state.first.num_params() {
        return Err(Error::dims("adamw_step", params.num_params(), grads.num_params()));
    }
    for (name, g) in grads.block_names().into_iter().zip(grads.blocks()) {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    let (b1, b2) = cfg.adam_betas;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    let blocks = params
        .blocks_mut()
        .into_iter()
        .zip(grads.blocks())
        .zip(state.first.blocks_mut().into_iter().zip(state.second.blocks_mut()));
    for ((w, g), (m, v)) in blocks {
        if w.shape() != g.shape() {
            return Err(Error::dims("adamw_step", w.shape_str(), g.shape_str()));
        }
        let w = w.as_mut_slice();
        let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
        for (i, &gi) in g.as_slice().iter().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            w[i] = w[i] * decay - lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::numerics::Rng;

    fn small() -> (EncoderParams, EncoderConfig) {
        let cfg = EncoderConfig {
            d_patch: 3,
            d_se: 2,
            d_hidden: 4,
            d_attn: 3,
            n_heads: 2,
            n_pre_layers: 1,
            post_hidden: 4,
            d_out: 3,
            n_stains: 2,
            ..Default::default()
        };
        (EncoderParams::init(&cfg, &mut Rng::new(1)).unwrap(), cfg)
    }

    fn filled(like: &EncoderParams, v: f64) -> EncoderParams {
        let mut g = like.zeros_like();
        g.set_flat(&vec![v; like.num_params()]).unwrap();
        g
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut p, _) = small();
        let before = p.to_flat();
        let mut st = OptimizerState::new(&p);
        let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let zero = p.zeros_like();
        for _ in 0..3 {
            adamw_step(&mut p, &zero, &mut st, 1e-2, &cfg).unwrap();
        }
        assert_eq!(p.to_flat(), before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g and v̂ = g² after bias correction, so the step is lr·g/(|g|+eps)
        let (mut p, _) = small();
        let before = p.to_flat();
        let mut st = OptimizerState::new(&p);
        let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let lr = 1e-3;
        let ones = filled(&p, 1.0);
        adamw_step(&mut p, &ones, &mut st, lr, &cfg).unwrap();
        let expected = lr / (1.0 + cfg.adam_eps);
        for (a, b) in before.iter().zip(p.to_flat()) {
            assert!(((a - b) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn decay_alone_shrinks_weights() {
        let (mut p, _) = small();
        let before = p.to_flat();
        let mut st = OptimizerState::new(&p);
        let cfg = TrainConfig { weight_decay: 0.01, ..Default::default() };
        let lr = 0.5;
        let zero = p.zeros_like();
        adamw_step(&mut p, &zero, &mut st, lr, &cfg).unwrap();
        for (a, b) in before.iter().zip(p.to_flat()) {
            assert_eq!(b, a * (1.0 - lr * 0.01));
        }
    }

    #[test]
    fn zero_betas_give_sign_descent() {
        let (mut p, _) = small();
        let mut rng = Rng::new(4);
        let cfg = TrainConfig { weight_decay: 0.0, adam_betas: (0.0, 0.0), adam_eps: 1e-12, ..Default::default() };
        let mut st = OptimizerState::new(&p);
        let lr = 0.1;
        for _ in 0..3 {
            let before = p.to_flat();
            let g: Vec<f64> = (0..p.num_params()).map(|_| rng.normal()).collect();
            let mut grads = p.zeros_like();
            grads.set_flat(&g).unwrap();
            adamw_step(&mut p, &grads, &mut st, lr, &cfg).unwrap();
            for ((a, b), gi) in before.iter().zip(p.to_flat()).zip(&g) {
                assert!(((a - b) - lr * gi.signum()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn non_finite_gradient_names_the_block() {
        let (mut p, _) = small();
        let mut st = OptimizerState::new(&p);
        let mut g = p.zeros_like();
        g.heads[1].w[(0, 0)] = f64::NAN;
        let before = p.to_flat();
        let err = adamw_step(&mut p, &g, &mut st, 1e-3, &TrainConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::NonFiniteGradient(b) if b == "heads.1.w"), "{err}");
        assert_eq!(p.to_flat(), before);
        assert_eq!(st.step, 0);
    }
}
