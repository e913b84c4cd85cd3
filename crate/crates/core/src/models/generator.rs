//! The mask generator: a token embedding plus one single-head attention
//! layer applied once per task-model layer. Each application's pre-softmax
//! scores, divided by the temperature, are independent Bernoulli drop-logits
//! for the corresponding task-model attention matrix.

use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::attention::{attn_backward_with_scores, attn_forward, AttentionCache, AttentionParams, MaskMatrix};
use crate::error::{Error, Result};
use crate::numkernel::{gumbel_binary_sample, log_sigmoid, sigmoid, RngState, Tensor2D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// Scores are divided by this before becoming drop-logits.
    pub temperature: f64,
    /// Fixed (untrained) shift added to every drop-logit.
    #[serde(default)]
    pub logit_offset: f64,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 {
            return Err(Error::Config(
                "generator vocab_size and d_model must be positive".into(),
            ));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "generator temperature {} must be positive and finite",
                self.temperature
            )));
        }
        if self.logit_offset.is_nan() {
            return Err(Error::Config("generator logit_offset is NaN".into()));
        }
        Ok(())
    }
}

/// One embedding and one shared single-head attention group. No
/// feed-forward weights exist, and the parameter count does not depend on
/// how many task layers the generator serves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub config: GeneratorConfig,
    pub tok_emb: Tensor2D,
    pub attn: AttentionParams,
}

impl GeneratorParams {
    pub fn init(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::new(seed, 2);
        let tok_emb =
            Tensor2D::from_fn(config.vocab_size, config.d_model, |_, _| rng.uniform(-0.5, 0.5));
        let attn = AttentionParams::init(config.d_model, 1, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            tok_emb,
            attn,
        })
    }
}

impl ParamSet for GeneratorParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor2D)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb)];
        for (name, t) in self.attn.tensors() {
            out.push((format!("attn.{name}"), t));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor2D> {
        let mut out = vec![&mut self.tok_emb];
        out.extend(self.attn.tensors_mut());
        out
    }
}

/// A sampled dropout decision for one sequence: `drops[layer]` holds `L×L`
/// row-major bits, `true` meaning the unit is removed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDecision {
    pub len: usize,
    pub drops: Vec<Vec<bool>>,
    /// Mean per-unit log-probability, `(1 / (N·L²)) Σ log P(d)`.
    pub logprob: f64,
    /// Realized fraction of dropped units per layer.
    pub layer_drop_fraction: Vec<f64>,
    /// Mean drop probability `σ(logit)` per layer.
    pub layer_drop_prob: Vec<f64>,
}

impl MaskDecision {
    /// Deterministic decision with every bit equal to `drop` (logprob 0).
    pub fn uniform(num_layers: usize, len: usize, drop: bool) -> Self {
        let frac = if drop { 1.0 } else { 0.0 };
        Self {
            len,
            drops: vec![vec![drop; len * len]; num_layers],
            logprob: 0.0,
            layer_drop_fraction: vec![frac; num_layers],
            layer_drop_prob: vec![frac; num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.drops.len()
    }
}

/// Drop-logits of every layer plus the attention caches that produced them.
#[derive(Clone, Debug)]
pub struct GeneratorForward {
    pub tokens: Vec<usize>,
    pub logits: Vec<Tensor2D>,
    pub caches: Vec<AttentionCache>,
}

/// `h₀ = embed(tokens)`; for each layer `i`: scores of the shared attention
/// on `hᵢ` give the layer-`i` drop-logits, and `hᵢ₊₁ = hᵢ + attn(hᵢ)`.
pub fn gnet_forward(
    gparams: &GeneratorParams,
    tokens: &[usize],
    num_layers: usize,
) -> Result<GeneratorForward> {
    if tokens.is_empty() {
        return Err(Error::shape("gnet_forward", "empty token sequence"));
    }
    if num_layers == 0 {
        return Err(Error::Config("generator needs at least one layer".into()));
    }
    let cfg = &gparams.config;
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Index {
            what: "token id",
            index: bad,
            bound: cfg.vocab_size,
        });
    }
    let mut h = Tensor2D::from_fn(tokens.len(), cfg.d_model, |r, c| {
        gparams.tok_emb.get(tokens[r], c)
    });
    let mut logits = Vec::with_capacity(num_layers);
    let mut caches = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let (a, cache) = attn_forward(&h, &gparams.attn, &MaskMatrix::None)?;
        let scaled = cache.scores[0].map(|s| s / cfg.temperature + cfg.logit_offset);
        logits.push(scaled);
        h = h.add(&a)?;
        caches.push(cache);
    }
    Ok(GeneratorForward {
        tokens: tokens.to_vec(),
        logits,
        caches,
    })
}

/// Mean per-unit log-likelihood of `drops` under independent Bernoulli
/// units with the given logits.
pub fn logprob_from_logits(logits: &[Tensor2D], drops: &[Vec<bool>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (l, bits) in logits.iter().zip(drops) {
        for (&z, &b) in l.data().iter().zip(bits) {
            total += if b { log_sigmoid(z) } else { log_sigmoid(-z) };
            count += 1;
        }
    }
    total / count as f64
}

/// Sample one decision with a Gumbel-max draw per unit, layer by layer in
/// row-major order.
pub fn gnet_sample_masks(
    gparams: &GeneratorParams,
    tokens: &[usize],
    num_layers: usize,
    rng: &mut RngState,
) -> Result<MaskDecision> {
    let fwd = gnet_forward(gparams, tokens, num_layers)?;
    let len = tokens.len();
    let units = (len * len) as f64;
    let mut drops = Vec::with_capacity(num_layers);
    let mut frac = Vec::with_capacity(num_layers);
    let mut prob = Vec::with_capacity(num_layers);
    let mut total = 0.0;
    for logits in &fwd.logits {
        let mut bits = Vec::with_capacity(len * len);
        let mut dropped = 0usize;
        let mut psum = 0.0;
        for &z in logits.data() {
            let (bit, lp) = gumbel_binary_sample(z, rng)?;
            total += lp;
            dropped += usize::from(bit);
            psum += sigmoid(z);
            bits.push(bit);
        }
        drops.push(bits);
        frac.push(dropped as f64 / units);
        prob.push(psum / units);
    }
    Ok(MaskDecision {
        len,
        drops,
        logprob: total / (num_layers as f64 * units),
        layer_drop_fraction: frac,
        layer_drop_prob: prob,
    })
}

/// Gradient of `Σ_layers ⟨dlogits[i], logits[i]⟩` with respect to the
/// generator parameters.
pub fn gnet_backward_from_logit_grads(
    gparams: &GeneratorParams,
    fwd: &GeneratorForward,
    dlogits: &[Tensor2D],
) -> Result<GeneratorParams> {
    if dlogits.len() != fwd.logits.len() {
        return Err(Error::shape(
            "gnet_backward",
            format!("{} logit grads for {} layers", dlogits.len(), fwd.logits.len()),
        ));
    }
    let inv_t = 1.0 / gparams.config.temperature;
    let (len, d) = (fwd.tokens.len(), gparams.config.d_model);
    let mut grads = gparams.zeros_like();
    // dh holds the gradient flowing into h_{i+1}
    let mut dh = Tensor2D::zeros(len, d);
    for (cache, dl) in fwd.caches.iter().zip(dlogits).rev() {
        if dl.shape() != (len, len) {
            return Err(Error::shape("gnet_backward", "logit grad is not L×L"));
        }
        let ds = [dl.scale(inv_t)];
        let (dx, dattn) = attn_backward_with_scores(&gparams.attn, cache, &dh, Some(&ds))?;
        grads.attn.accumulate(&dattn)?;
        dh.add_assign(&dx)?;
    }
    for (r, &tok) in fwd.tokens.iter().enumerate() {
        for c in 0..d {
            let v = grads.tok_emb.get(tok, c) + dh.get(r, c);
            grads.tok_emb.set(tok, c, v);
        }
    }
    Ok(grads)
}

/// `∇θ logprob` of a stored decision. The decision must come from these
/// parameters and tokens; a mismatch in the recomputed log-probability is a
/// contract violation.
pub fn gnet_logprob_backward(
    gparams: &GeneratorParams,
    tokens: &[usize],
    decision: &MaskDecision,
) -> Result<GeneratorParams> {
    if decision.len != tokens.len() {
        return Err(Error::Contract(format!(
            "decision for length {} applied to {} tokens",
            decision.len,
            tokens.len()
        )));
    }
    let fwd = gnet_forward(gparams, tokens, decision.num_layers())?;
    let recomputed = logprob_from_logits(&fwd.logits, &decision.drops);
    if (recomputed - decision.logprob).abs() > 1e-9 * (1.0 + recomputed.abs()) {
        return Err(Error::Contract(format!(
            "stale decision: stored logprob {} but parameters give {recomputed}",
            decision.logprob
        )));
    }
    let norm = 1.0 / (decision.num_layers() * tokens.len() * tokens.len()) as f64;
    let dlogits: Vec<Tensor2D> = fwd
        .logits
        .iter()
        .zip(&decision.drops)
        .map(|(l, bits)| {
            let data = l
                .data()
                .iter()
                .zip(bits)
                .map(|(&z, &b)| (f64::from(u8::from(b)) - sigmoid(z)) * norm)
                .collect();
            Tensor2D::new(l.rows(), l.cols(), data)
        })
        .collect::<Result<_>>()?;
    gnet_backward_from_logit_grads(gparams, &fwd, &dlogits)
}
