//! Exact expected reward by enumerating every mask of a small policy.

use crate::error::{Error, Result};
use crate::models::{gnet_backward_from_logit_grads, gnet_forward, GeneratorParams};
use crate::numkernel::{sigmoid, Tensor2D};

/// Enumeration bound on `N·L²`.
pub const ORACLE_MAX_UNITS: usize = 20;

/// Integer code of a decision: unit `u` (layer-major, then row-major) is bit `u`.
pub fn mask_index(drops: &[Vec<bool>]) -> usize {
    drops
        .iter()
        .flatten()
        .enumerate()
        .fold(0, |acc, (u, &b)| acc | (usize::from(b) << u))
}

/// `J = E[R]` over all `2^(N·L²)` masks under independent units, and its
/// exact gradient `Σ_m P(m) R(m) Σ_u ∇log P(d_u)`.
pub fn expected_reward_oracle(
    gparams: &GeneratorParams,
    tokens: &[usize],
    num_layers: usize,
    reward_fn: impl Fn(&[Vec<bool>]) -> f64,
) -> Result<(f64, GeneratorParams)> {
    let len = tokens.len();
    let per_layer = len * len;
    let units = num_layers * per_layer;
    if units > ORACLE_MAX_UNITS {
        return Err(Error::Oracle(format!(
            "{units} units exceed the enumeration bound of {ORACLE_MAX_UNITS}"
        )));
    }
    let fwd = gnet_forward(gparams, tokens, num_layers)?;
    let probs: Vec<f64> = fwd
        .logits
        .iter()
        .flat_map(|l| l.data().iter().map(|&z| sigmoid(z)))
        .collect();

    let mut expected = 0.0;
    let mut coeff = vec![0.0; units];
    let mut drops = vec![vec![false; per_layer]; num_layers];
    for code in 0..(1usize << units) {
        let mut p = 1.0;
        for u in 0..units {
            let bit = (code >> u) & 1 == 1;
            drops[u / per_layer][u % per_layer] = bit;
            p *= if bit { probs[u] } else { 1.0 - probs[u] };
        }
        let weighted = p * reward_fn(&drops);
        expected += weighted;
        for u in 0..units {
            let bit = if (code >> u) & 1 == 1 { 1.0 } else { 0.0 };
            coeff[u] += weighted * (bit - probs[u]);
        }
    }

    let dlogits: Vec<Tensor2D> = coeff
        .chunks(per_layer)
        .map(|c| Tensor2D::new(len, len, c.to_vec()))
        .collect::<Result<_>>()?;
    let grad = gnet_backward_from_logit_grads(gparams, &fwd, &dlogits)?;
    Ok((expected, grad))
}
