//! Post-LN transformer encoder with first-position pooling and a linear
//! classifier head, written with an explicit reverse pass.

use serde::{Deserialize, Serialize};

use super::generator::MaskDecision;
use super::ParamSet;
use crate::attention::{attn_backward, attn_forward, AttentionCache, AttentionParams, DropMode, MaskMatrix};
use crate::error::{Error, Result};
use crate::numkernel::{cross_entropy_logits, RngState, Tensor2D};
use crate::par::Execution;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub num_classes: usize,
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config("model.num_classes must be at least 2".into()));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model {} is not divisible by model.num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub attn: AttentionParams,
    pub ff_w1: Tensor2D,
    pub ff_b1: Tensor2D,
    pub ff_w2: Tensor2D,
    pub ff_b2: Tensor2D,
    pub ln1_gain: Tensor2D,
    pub ln1_bias: Tensor2D,
    pub ln2_gain: Tensor2D,
    pub ln2_bias: Tensor2D,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskModelParams {
    pub config: TaskConfig,
    pub tok_emb: Tensor2D,
    pub pos_emb: Tensor2D,
    pub blocks: Vec<BlockParams>,
    pub head_w: Tensor2D,
    pub head_b: Tensor2D,
}

fn xavier(rows: usize, cols: usize, rng: &mut RngState) -> Tensor2D {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor2D::from_fn(rows, cols, |_, _| rng.uniform(-bound, bound))
}

impl TaskModelParams {
    /// Deterministic initialization from `(config, seed)`.
    pub fn init(config: &TaskConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::new(seed, 1);
        let d = config.d_model;
        let tok_emb = Tensor2D::from_fn(config.vocab_size, d, |_, _| rng.uniform(-0.5, 0.5));
        let pos_emb = Tensor2D::from_fn(config.max_len, d, |_, _| rng.uniform(-0.5, 0.5));
        let mut blocks = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            blocks.push(BlockParams {
                attn: AttentionParams::init(d, config.num_heads, &mut rng)?,
                ff_w1: xavier(d, config.d_ff, &mut rng),
                ff_b1: Tensor2D::zeros(1, config.d_ff),
                ff_w2: xavier(config.d_ff, d, &mut rng),
                ff_b2: Tensor2D::zeros(1, d),
                ln1_gain: Tensor2D::filled(1, d, 1.0),
                ln1_bias: Tensor2D::zeros(1, d),
                ln2_gain: Tensor2D::filled(1, d, 1.0),
                ln2_bias: Tensor2D::zeros(1, d),
            });
        }
        let head_w = xavier(d, config.num_classes, &mut rng);
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            blocks,
            head_w,
            head_b: Tensor2D::zeros(1, config.num_classes),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }
}

impl ParamSet for TaskModelParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor2D)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.attn.tensors() {
                out.push((format!("block{i}.attn.{name}"), t));
            }
            for (name, t) in [
                ("ff_w1", &b.ff_w1),
                ("ff_b1", &b.ff_b1),
                ("ff_w2", &b.ff_w2),
                ("ff_b2", &b.ff_b2),
                ("ln1_gain", &b.ln1_gain),
                ("ln1_bias", &b.ln1_bias),
                ("ln2_gain", &b.ln2_gain),
                ("ln2_bias", &b.ln2_bias),
            ] {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out.push(("head_w".to_string(), &self.head_w));
        out.push(("head_b".to_string(), &self.head_b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor2D> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.attn.tensors_mut());
            out.extend([
                &mut b.ff_w1,
                &mut b.ff_b1,
                &mut b.ff_w2,
                &mut b.ff_b2,
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
            ]);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }
}

/// What one encoder block does on a given forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockPlan {
    Attend(MaskMatrix),
    /// Whole block bypassed; its input passes through unchanged.
    Skip,
}

impl BlockPlan {
    pub fn clean(num_layers: usize) -> Vec<BlockPlan> {
        vec![BlockPlan::Attend(MaskMatrix::None); num_layers]
    }
}

/// Per-layer plan for a generator decision (or the clean plan when absent).
pub fn decision_plan(
    decision: Option<&MaskDecision>,
    num_layers: usize,
    mode: DropMode,
) -> Result<Vec<BlockPlan>> {
    match decision {
        None => Ok(BlockPlan::clean(num_layers)),
        Some(d) => {
            if d.drops.len() != num_layers {
                return Err(Error::shape(
                    "decision_plan",
                    format!("{} mask layers for {num_layers} blocks", d.drops.len()),
                ));
            }
            d.drops
                .iter()
                .map(|bits| Ok(BlockPlan::Attend(MaskMatrix::from_drop_bits(d.len, bits, mode)?)))
                .collect()
        }
    }
}

#[derive(Clone, Debug)]
struct LnCache {
    xhat: Tensor2D,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Tensor2D, gain: &Tensor2D, bias: &Tensor2D) -> (Tensor2D, LnCache) {
    let (rows, cols) = x.shape();
    let mut xhat = Tensor2D::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    let mut y = Tensor2D::zeros(rows, cols);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for c in 0..cols {
            let h = (row[c] - mean) * is;
            xhat.set(r, c, h);
            y.set(r, c, h * gain.get(0, c) + bias.get(0, c));
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Tensor2D,
    cache: &LnCache,
    gain: &Tensor2D,
) -> (Tensor2D, Tensor2D, Tensor2D) {
    let (rows, cols) = dy.shape();
    let mut dx = Tensor2D::zeros(rows, cols);
    let mut dgain = Tensor2D::zeros(1, cols);
    let mut dbias = Tensor2D::zeros(1, cols);
    for r in 0..rows {
        let mut dxhat = vec![0.0; cols];
        for c in 0..cols {
            let g = dy.get(r, c);
            dgain.data_mut()[c] += g * cache.xhat.get(r, c);
            dbias.data_mut()[c] += g;
            dxhat[c] = g * gain.get(0, c);
        }
        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
        let mean_dx = dxhat
            .iter()
            .enumerate()
            .map(|(c, v)| v * cache.xhat.get(r, c))
            .sum::<f64>()
            / cols as f64;
        for c in 0..cols {
            let v = cache.inv_std[r] * (dxhat[c] - mean_d - cache.xhat.get(r, c) * mean_dx);
            dx.set(r, c, v);
        }
    }
    (dx, dgain, dbias)
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add_row_bias(m: &mut Tensor2D, bias: &Tensor2D) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
}

fn col_sums(m: &Tensor2D) -> Tensor2D {
    let mut out = Tensor2D::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

#[derive(Clone, Debug)]
enum BlockCache {
    Skipped,
    Active {
        attn: AttentionCache,
        ln1: LnCache,
        h1: Tensor2D,
        pre_act: Tensor2D,
        act: Tensor2D,
        ln2: LnCache,
    },
}

/// Everything [`task_backward`] needs from a forward pass.
#[derive(Clone, Debug)]
pub struct TaskCache {
    tokens: Vec<usize>,
    blocks: Vec<BlockCache>,
    pooled: Tensor2D,
}

impl TaskCache {
    pub fn attention(&self, layer: usize) -> Option<&AttentionCache> {
        match self.blocks.get(layer)? {
            BlockCache::Active { attn, .. } => Some(attn),
            BlockCache::Skipped => None,
        }
    }
}

fn validate_tokens(params: &TaskModelParams, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::shape("task_forward", "empty token sequence"));
    }
    if tokens.len() > params.config.max_len {
        return Err(Error::shape(
            "task_forward",
            format!("length {} exceeds max_len {}", tokens.len(), params.config.max_len),
        ));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= params.config.vocab_size) {
        return Err(Error::Index {
            what: "token id",
            index: bad,
            bound: params.config.vocab_size,
        });
    }
    Ok(())
}

/// Forward pass with an explicit per-block plan. Returns `1×C` logits.
pub fn task_forward_planned(
    params: &TaskModelParams,
    tokens: &[usize],
    plan: &[BlockPlan],
) -> Result<(Tensor2D, TaskCache)> {
    validate_tokens(params, tokens)?;
    if plan.len() != params.num_layers() {
        return Err(Error::shape(
            "task_forward",
            format!("plan has {} entries for {} blocks", plan.len(), params.num_layers()),
        ));
    }
    let d = params.config.d_model;
    let mut x = Tensor2D::from_fn(tokens.len(), d, |r, c| {
        params.tok_emb.get(tokens[r], c) + params.pos_emb.get(r, c)
    });
    let mut caches = Vec::with_capacity(plan.len());
    for (block, step) in params.blocks.iter().zip(plan) {
        let mask = match step {
            BlockPlan::Skip => {
                caches.push(BlockCache::Skipped);
                continue;
            }
            BlockPlan::Attend(mask) => mask,
        };
        let (a, attn) = attn_forward(&x, &block.attn, mask)?;
        let (h1, ln1) = layer_norm(&x.add(&a)?, &block.ln1_gain, &block.ln1_bias);
        let mut pre_act = h1.matmul(&block.ff_w1)?;
        add_row_bias(&mut pre_act, &block.ff_b1);
        let act = pre_act.map(gelu);
        let mut ff = act.matmul(&block.ff_w2)?;
        add_row_bias(&mut ff, &block.ff_b2);
        let (out, ln2) = layer_norm(&h1.add(&ff)?, &block.ln2_gain, &block.ln2_bias);
        caches.push(BlockCache::Active {
            attn,
            ln1,
            h1,
            pre_act,
            act,
            ln2,
        });
        x = out;
    }
    let pooled = Tensor2D::new(1, d, x.row(0).to_vec())?;
    let mut logits = pooled.matmul(&params.head_w)?;
    add_row_bias(&mut logits, &params.head_b);
    Ok((
        logits,
        TaskCache {
            tokens: tokens.to_vec(),
            blocks: caches,
            pooled,
        },
    ))
}

/// Forward pass; with a decision, layer `i` uses its mask in scores mode
/// (the constant path when every unit is dropped).
pub fn task_forward(
    params: &TaskModelParams,
    tokens: &[usize],
    masks: Option<&MaskDecision>,
) -> Result<(Tensor2D, TaskCache)> {
    let plan = decision_plan(masks, params.num_layers(), DropMode::Scores)?;
    task_forward_planned(params, tokens, &plan)
}

/// Gradients of `⟨dlogits, logits⟩` for every parameter.
pub fn task_backward(
    params: &TaskModelParams,
    cache: &TaskCache,
    dlogits: &Tensor2D,
) -> Result<TaskModelParams> {
    let c = params.config.num_classes;
    if dlogits.shape() != (1, c) {
        return Err(Error::shape(
            "task_backward",
            format!("dlogits {:?}, expected 1x{c}", dlogits.shape()),
        ));
    }
    if cache.blocks.len() != params.num_layers() {
        return Err(Error::shape("task_backward", "cache from a different model"));
    }
    let d = params.config.d_model;
    let len = cache.tokens.len();
    let mut grads = params.zeros_like();
    grads.head_w = cache.pooled.t_matmul(dlogits)?;
    grads.head_b = dlogits.clone();
    let dpooled = dlogits.matmul_t(&params.head_w)?;
    let mut dx = Tensor2D::zeros(len, d);
    dx.row_mut(0).copy_from_slice(dpooled.data());

    for (i, bc) in cache.blocks.iter().enumerate().rev() {
        let BlockCache::Active {
            attn,
            ln1,
            h1,
            pre_act,
            act,
            ln2,
        } = bc
        else {
            continue;
        };
        let block = &params.blocks[i];
        let g = &mut grads.blocks[i];
        let (dr2, dg2, db2) = layer_norm_backward(&dx, ln2, &block.ln2_gain);
        g.ln2_gain = dg2;
        g.ln2_bias = db2;
        g.ff_w2 = act.t_matmul(&dr2)?;
        g.ff_b2 = col_sums(&dr2);
        let dact = dr2.matmul_t(&block.ff_w2)?;
        let dpre = Tensor2D::from_fn(len, params.config.d_ff, |r, cc| {
            dact.get(r, cc) * gelu_grad(pre_act.get(r, cc))
        });
        g.ff_w1 = h1.t_matmul(&dpre)?;
        g.ff_b1 = col_sums(&dpre);
        let mut dh1 = dr2;
        dh1.add_assign(&dpre.matmul_t(&block.ff_w1)?)?;
        let (dr1, dg1, db1) = layer_norm_backward(&dh1, ln1, &block.ln1_gain);
        g.ln1_gain = dg1;
        g.ln1_bias = db1;
        let (dx_attn, dattn) = attn_backward(&block.attn, attn, &dr1)?;
        g.attn = dattn;
        dx = dr1;
        dx.add_assign(&dx_attn)?;
    }

    for (r, &tok) in cache.tokens.iter().enumerate() {
        let row = dx.row(r);
        for (cc, &v) in row.iter().enumerate() {
            let e = grads.tok_emb.get(tok, cc);
            grads.tok_emb.set(tok, cc, e + v);
            grads.pos_emb.set(r, cc, v);
        }
    }
    Ok(grads)
}

/// Clean-forward argmax (lowest index on ties).
pub fn predict(params: &TaskModelParams, tokens: &[usize]) -> Result<usize> {
    let (logits, _) = task_forward_planned(params, tokens, &BlockPlan::clean(params.num_layers()))?;
    let row = logits.row(0);
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Mean cross-entropy over a batch and its gradient. `plans`, when given,
/// holds one block plan per example. Per-example passes run under `exec`;
/// gradients are reduced in example order.
pub fn batch_loss_and_grads(
    params: &TaskModelParams,
    tokens: &[&[usize]],
    labels: &[usize],
    plans: Option<&[Vec<BlockPlan>]>,
    exec: Execution,
) -> Result<(f64, TaskModelParams)> {
    if tokens.len() != labels.len() || tokens.is_empty() {
        return Err(Error::shape(
            "batch_loss_and_grads",
            format!("{} sequences, {} labels", tokens.len(), labels.len()),
        ));
    }
    if let Some(p) = plans {
        if p.len() != tokens.len() {
            return Err(Error::shape("batch_loss_and_grads", "one plan per example"));
        }
    }
    let clean = BlockPlan::clean(params.num_layers());
    let forwards = exec.map_range(tokens.len(), |i| {
        let plan = plans.map_or(clean.as_slice(), |p| p[i].as_slice());
        task_forward_planned(params, tokens[i], plan)
    });
    let forwards: Vec<(Tensor2D, TaskCache)> = forwards.into_iter().collect::<Result<_>>()?;
    let classes = params.config.num_classes;
    let mut stacked = Tensor2D::zeros(tokens.len(), classes);
    for (r, (logits, _)) in forwards.iter().enumerate() {
        stacked.row_mut(r).copy_from_slice(logits.data());
    }
    let (loss, dlogits) = cross_entropy_logits(&stacked, labels)?;
    let per_example = exec.map_range(tokens.len(), |i| {
        let d = Tensor2D::new(1, classes, dlogits.row(i).to_vec())?;
        task_backward(params, &forwards[i].1, &d)
    });
    let mut total = params.zeros_like();
    for g in per_example {
        total.add_scaled(1.0, &g?)?;
    }
    Ok((loss, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::generator::MaskDecision;
    use crate::numkernel::{finite_diff_grad, relative_error};

    fn small_config() -> TaskConfig {
        TaskConfig {
            vocab_size: 6,
            max_len: 8,
            d_model: 16,
            d_ff: 32,
            num_heads: 2,
            num_layers: 2,
            num_classes: 3,
        }
    }

    fn tokens(len: usize, seed: u64) -> Vec<usize> {
        let mut rng = RngState::new(seed, 5);
        (0..len).map(|_| rng.below(6)).collect()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = small_config();
        let a = TaskModelParams::init(&cfg, 3).unwrap();
        let b = TaskModelParams::init(&cfg, 3).unwrap();
        let c = TaskModelParams::init(&cfg, 4).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = small_config();
        cfg.num_heads = 3;
        assert!(matches!(TaskModelParams::init(&cfg, 0), Err(Error::Config(_))));
        cfg = small_config();
        cfg.num_layers = 0;
        assert!(TaskModelParams::init(&cfg, 0).is_err());
    }

    #[test]
    fn initial_loss_is_near_chance() {
        let cfg = small_config();
        let params = TaskModelParams::init(&cfg, 1).unwrap();
        let seqs: Vec<Vec<usize>> = (0..64).map(|s| tokens(8, s)).collect();
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let mut rng = RngState::new(2, 2);
        let labels: Vec<usize> = (0..64).map(|_| rng.below(3)).collect();
        let (loss, _) =
            batch_loss_and_grads(&params, &refs, &labels, None, Execution::Sequential).unwrap();
        assert!(loss.is_finite());
        assert!((loss - 3f64.ln()).abs() < 0.5, "loss {loss}");
    }

    #[test]
    fn all_keep_masks_match_clean_forward_bitwise() {
        let params = TaskModelParams::init(&small_config(), 5).unwrap();
        let toks = tokens(7, 1);
        let keep = MaskDecision::uniform(2, 7, false);
        let (a, _) = task_forward(&params, &toks, None).unwrap();
        let (b, _) = task_forward(&params, &toks, Some(&keep)).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn all_dropped_masks_stay_finite() {
        let params = TaskModelParams::init(&small_config(), 5).unwrap();
        let toks = tokens(6, 2);
        let drop = MaskDecision::uniform(2, 6, true);
        let (logits, cache) = task_forward(&params, &toks, Some(&drop)).unwrap();
        assert!(logits.is_finite());
        for layer in 0..2 {
            assert!(cache.attention(layer).unwrap().q.is_none());
        }
    }

    #[test]
    fn input_validation() {
        let params = TaskModelParams::init(&small_config(), 5).unwrap();
        assert!(matches!(
            task_forward(&params, &[1, 9], None),
            Err(Error::Index { .. })
        ));
        assert!(task_forward(&params, &[0; 9], None).is_err());
        assert!(task_forward(&params, &[], None).is_err());
        let wrong = MaskDecision::uniform(3, 2, false);
        assert!(task_forward(&params, &[1, 2], Some(&wrong)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let params = TaskModelParams::init(&small_config(), 5).unwrap();
        let (_, cache) = task_forward(&params, &tokens(5, 3), None).unwrap();
        let g = task_backward(&params, &cache, &Tensor2D::zeros(1, 3)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_dropped_layer_has_zero_query_key_gradients() {
        let params = TaskModelParams::init(&small_config(), 5).unwrap();
        let toks = tokens(6, 4);
        let mut d = MaskDecision::uniform(2, 6, false);
        d.drops[1].fill(true);
        let (_, cache) = task_forward(&params, &toks, Some(&d)).unwrap();
        let dl = Tensor2D::new(1, 3, vec![0.3, -0.2, 0.5]).unwrap();
        let g = task_backward(&params, &cache, &dl).unwrap();
        assert!(g.blocks[1].attn.w_q.data().iter().all(|&v| v == 0.0));
        assert!(g.blocks[1].attn.w_k.data().iter().all(|&v| v == 0.0));
        assert!(g.blocks[0].attn.w_q.max_abs() > 0.0);
    }

    #[test]
    fn skipped_block_passes_input_through() {
        let params = TaskModelParams::init(&small_config(), 5).unwrap();
        let toks = tokens(4, 5);
        let skip_all = vec![BlockPlan::Skip, BlockPlan::Skip];
        let (logits, _) = task_forward_planned(&params, &toks, &skip_all).unwrap();
        let pooled: Vec<f64> = (0..16)
            .map(|c| params.tok_emb.get(toks[0], c) + params.pos_emb.get(0, c))
            .collect();
        let expected = Tensor2D::new(1, 16, pooled)
            .unwrap()
            .matmul(&params.head_w)
            .unwrap();
        assert!(logits.sub(&expected).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let params = TaskModelParams::init(&small_config(), 8).unwrap();
        let seqs: Vec<Vec<usize>> = (0..3).map(|s| tokens(8, 10 + s)).collect();
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let labels = [0, 2, 1];
        let mut d = MaskDecision::uniform(2, 8, false);
        for (i, b) in d.drops[0].iter_mut().enumerate() {
            *b = i % 3 == 0;
        }
        let plans: Vec<Vec<BlockPlan>> = (0..3)
            .map(|_| decision_plan(Some(&d), 2, DropMode::Scores).unwrap())
            .collect();
        let (_, grads) =
            batch_loss_and_grads(&params, &refs, &labels, Some(&plans), Execution::Sequential)
                .unwrap();
        let theta = params.flatten();
        let numeric = finite_diff_grad(
            |t| {
                let mut p = params.clone();
                p.assign_flat(t).unwrap();
                batch_loss_and_grads(&p, &refs, &labels, Some(&plans), Execution::Sequential)
                    .unwrap()
                    .0
            },
            &theta,
            1e-5,
        )
        .unwrap();
        let mut offset = 0;
        for (name, t) in grads.named_tensors() {
            let n = t.len();
            let err = relative_error(t.data(), &numeric[offset..offset + n]);
            assert!(err <= 1e-4, "{name}: {err}");
            offset += n;
        }
    }

    #[test]
    fn parallel_and_sequential_batches_agree_bitwise() {
        let params = TaskModelParams::init(&small_config(), 8).unwrap();
        let seqs: Vec<Vec<usize>> = (0..9).map(|s| tokens(6, 30 + s)).collect();
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
        let (l1, g1) =
            batch_loss_and_grads(&params, &refs, &labels, None, Execution::Sequential).unwrap();
        let (l2, g2) =
            batch_loss_and_grads(&params, &refs, &labels, None, Execution::default()).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert!(g1.bitwise_eq(&g2));
    }
}
