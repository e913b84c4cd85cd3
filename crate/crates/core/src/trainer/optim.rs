use serde::{Deserialize, Serialize};

use super::config::{OptimizerConfig, OptimizerKind};
use crate::error::{Error, Result};
use crate::models::ParamSet;

/// Moment buffers, created lazily on the first step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<P> {
    pub step: u64,
    pub first: Option<P>,
    pub second: Option<P>,
}

impl<P> Default for OptimizerState<P> {
    fn default() -> Self {
        Self {
            step: 0,
            first: None,
            second: None,
        }
    }
}

fn check_finite<P: ParamSet>(p: &P, prefix: &str, what: &str) -> Result<()> {
    match p.named_tensors().into_iter().find(|(_, t)| !t.is_finite()) {
        Some((name, t)) => Err(Error::Divergence {
            tensor: format!("{prefix}{name}"),
            detail: format!("non-finite {what} (max |value| {:e})", t.max_abs()),
        }),
        None => Ok(()),
    }
}

/// One descent step: SGD (with optional heavy-ball momentum) or Adam.
pub fn optimizer_step<P: ParamSet>(
    params: &mut P,
    grads: &P,
    cfg: &OptimizerConfig,
    state: &mut OptimizerState<P>,
) -> Result<()> {
    check_finite(grads, "", "gradient")?;
    state.step += 1;
    match cfg.kind {
        OptimizerKind::Sgd if cfg.momentum == 0.0 => params.add_scaled(-cfg.lr, grads)?,
        OptimizerKind::Sgd => {
            let v = state.first.get_or_insert_with(|| grads.zeros_like());
            v.scale(cfg.momentum);
            v.add_scaled(1.0, grads)?;
            params.add_scaled(-cfg.lr, v)?;
        }
        OptimizerKind::Adam => {
            let m = state.first.get_or_insert_with(|| grads.zeros_like());
            m.scale(cfg.beta1);
            m.add_scaled(1.0 - cfg.beta1, grads)?;
            let v = state.second.get_or_insert_with(|| grads.zeros_like());
            let mut sq = grads.clone();
            sq.tensors_mut()
                .into_iter()
                .for_each(|t| t.data_mut().iter_mut().for_each(|x| *x *= *x));
            v.scale(cfg.beta2);
            v.add_scaled(1.0 - cfg.beta2, &sq)?;
            let t = state.step as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            let m = state.first.as_ref().expect("set above");
            let v = state.second.as_ref().expect("set above");
            let ms = m.named_tensors();
            let vs = v.named_tensors();
            for ((p, (_, mt)), (_, vt)) in params.tensors_mut().into_iter().zip(&ms).zip(&vs) {
                for ((w, &mi), &vi) in p.data_mut().iter_mut().zip(mt.data()).zip(vt.data()) {
                    *w -= cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
                }
            }
        }
    }
    check_finite(params, "", "parameter after update")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{GeneratorConfig, GeneratorParams};

    fn cfg(kind: OptimizerKind, lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind,
            lr,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn params() -> GeneratorParams {
        GeneratorParams::init(
            &GeneratorConfig {
                vocab_size: 3,
                d_model: 2,
                temperature: 1.0,
                logit_offset: 0.0,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn zero_lr_is_identity() {
        let p0 = params();
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = p0.clone();
            let mut g = p0.clone();
            g.scale(3.0);
            optimizer_step(&mut p, &g, &cfg(kind, 0.0), &mut OptimizerState::default()).unwrap();
            assert!(p.bitwise_eq(&p0));
        }
    }

    #[test]
    fn sgd_scalar_step() {
        let mut p = params();
        let before = p.flatten();
        let mut g = p.zeros_like();
        g.tensors_mut().into_iter().for_each(|t| t.fill(1.0));
        optimizer_step(&mut p, &g, &cfg(OptimizerKind::Sgd, 0.1), &mut OptimizerState::default())
            .unwrap();
        for (a, b) in p.flatten().iter().zip(&before) {
            assert!((b - a - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        // f(θ) = ½ Σ (θ - c)², gradient θ - c
        let mut p = params();
        let mut target = p.clone();
        target.tensors_mut().into_iter().for_each(|t| t.fill(0.7));
        let c = cfg(OptimizerKind::Adam, 0.1);
        let mut state = OptimizerState::default();
        for _ in 0..100 {
            let mut g = p.clone();
            g.add_scaled(-1.0, &target).unwrap();
            optimizer_step(&mut p, &g, &c, &mut state).unwrap();
        }
        let worst = p
            .flatten()
            .iter()
            .map(|v| (v - 0.7).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-2, "{worst}");
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = params();
        let before = p.flatten();
        let mut g = p.zeros_like();
        g.tensors_mut().into_iter().for_each(|t| t.fill(1.0));
        let mut c = cfg(OptimizerKind::Sgd, 0.1);
        c.momentum = 0.5;
        let mut state = OptimizerState::default();
        optimizer_step(&mut p, &g, &c, &mut state).unwrap();
        optimizer_step(&mut p, &g, &c, &mut state).unwrap();
        // 0.1·1 + 0.1·1.5
        assert!((before[0] - p.flatten()[0] - 0.25).abs() < 1e-14);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = params();
        let mut g = p.zeros_like();
        g.attn.w_k.set(0, 1, f64::NAN);
        let e = optimizer_step(&mut p, &g, &cfg(OptimizerKind::Sgd, 0.1), &mut OptimizerState::default())
            .unwrap_err();
        assert!(matches!(e, Error::Divergence { ref tensor, .. } if tensor == "attn.w_k"), "{e}");
    }
}
