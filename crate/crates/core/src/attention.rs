//! Multi-head self-attention with the four attention-dropout modes.
//!
//! `x: L×d` → `Q = xW_Q`, `K = xW_K`, `V = xW_V`; per head
//! `S = Q_h K_hᵀ / √d_k`; `A` is built from `S` according to the mask mode;
//! `y = concat_h(A_h V_h) W_O`. One mask is shared by every head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{is_masked, softmax_rows, RngState, Tensor2D, NEG_INF};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_q: Tensor2D,
    pub w_k: Tensor2D,
    pub w_v: Tensor2D,
    pub w_o: Tensor2D,
    pub num_heads: usize,
}

impl AttentionParams {
    pub fn new(
        w_q: Tensor2D,
        w_k: Tensor2D,
        w_v: Tensor2D,
        w_o: Tensor2D,
        num_heads: usize,
    ) -> Result<Self> {
        let d = w_q.rows();
        for (name, w) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v), ("w_o", &w_o)] {
            if w.shape() != (d, d) {
                return Err(Error::shape(
                    "AttentionParams::new",
                    format!("{name} is {:?}, expected {d}x{d}", w.shape()),
                ));
            }
        }
        validate_heads(d, num_heads)?;
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            num_heads,
        })
    }

    /// Xavier-uniform projections.
    pub fn init(d_model: usize, num_heads: usize, rng: &mut RngState) -> Result<Self> {
        validate_heads(d_model, num_heads)?;
        let bound = (6.0 / (2 * d_model) as f64).sqrt();
        let mut draw = || Tensor2D::from_fn(d_model, d_model, |_, _| rng.uniform(-bound, bound));
        let (w_q, w_k, w_v, w_o) = (draw(), draw(), draw(), draw());
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            num_heads,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.d_model();
        Self {
            w_q: Tensor2D::zeros(d, d),
            w_k: Tensor2D::zeros(d, d),
            w_v: Tensor2D::zeros(d, d),
            w_o: Tensor2D::zeros(d, d),
            num_heads: self.num_heads,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_k(&self) -> usize {
        self.d_model() / self.num_heads
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor2D); 4] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor2D; 4] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o]
    }

    /// `self += other`, projection by projection.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        self.w_q.add_assign(&other.w_q)?;
        self.w_k.add_assign(&other.w_k)?;
        self.w_v.add_assign(&other.w_v)?;
        self.w_o.add_assign(&other.w_o)
    }
}

fn validate_heads(d_model: usize, num_heads: usize) -> Result<()> {
    if num_heads == 0 || d_model == 0 || d_model % num_heads != 0 {
        return Err(Error::Config(format!(
            "d_model {d_model} must be a positive multiple of num_heads {num_heads}"
        )));
    }
    Ok(())
}

/// How a dropped unit enters the attention computation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropMode {
    /// Additive `{0, NEG_INF}` mask before softmax.
    #[default]
    Scores,
    /// Multiplicative `{0, 1}` mask after softmax.
    Weights,
}

/// Mask applied to one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskMatrix {
    None,
    /// `A = softmax(S) ⊙ keep`, optionally scaled by `1 / keep_prob`.
    Weights {
        keep: Tensor2D,
        rescale: Option<f64>,
    },
    /// `A = softmax(S + additive)`. Rows flagged in `constant_rows` had every
    /// unit dropped and take the uniform `1/L` row instead; their additive
    /// row is stored as zeros.
    Scores {
        additive: Tensor2D,
        constant_rows: Vec<bool>,
    },
    /// Every unit dropped: `A` is the constant `1/L` matrix and the
    /// query/key path is skipped.
    AllDropped,
}

impl MaskMatrix {
    /// Additive scores mask. Entries must be `0` or `NEG_INF`, and no row may
    /// be fully masked (express that with [`MaskMatrix::from_drop_bits`]).
    pub fn scores(additive: Tensor2D) -> Result<Self> {
        if additive.rows() != additive.cols() {
            return Err(Error::shape("MaskMatrix::scores", "mask must be square"));
        }
        for r in 0..additive.rows() {
            let row = additive.row(r);
            if row.iter().any(|&v| v != 0.0 && v != NEG_INF) {
                return Err(Error::Contract(format!(
                    "scores mask row {r} has entries outside {{0, NEG_INF}}"
                )));
            }
            if row.iter().all(|&v| v == NEG_INF) {
                return Err(Error::Contract(format!(
                    "scores mask row {r} drops every unit; use the all-dropped path"
                )));
            }
        }
        let constant_rows = vec![false; additive.rows()];
        Ok(MaskMatrix::Scores {
            additive,
            constant_rows,
        })
    }

    pub fn weights(keep: Tensor2D) -> Result<Self> {
        if keep.rows() != keep.cols() {
            return Err(Error::shape("MaskMatrix::weights", "mask must be square"));
        }
        if keep.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract("weights mask entries must be 0 or 1".into()));
        }
        Ok(MaskMatrix::Weights {
            keep,
            rescale: None,
        })
    }

    /// Inverted-dropout variant of a weights mask: kept units scaled by `1/keep_prob`.
    pub fn with_rescale(self, keep_prob: f64) -> Result<Self> {
        match self {
            MaskMatrix::Weights { keep, .. } if keep_prob > 0.0 && keep_prob <= 1.0 => {
                Ok(MaskMatrix::Weights {
                    keep,
                    rescale: Some(keep_prob),
                })
            }
            MaskMatrix::Weights { .. } => Err(Error::Parameter(format!(
                "keep probability {keep_prob} outside (0, 1]"
            ))),
            _ => Err(Error::Contract("rescale applies to weights masks only".into())),
        }
    }

    /// Build a mask from row-major drop bits (`true` = drop) of an `L×L` matrix.
    ///
    /// Scores mode: all bits set becomes [`MaskMatrix::AllDropped`]; a single
    /// fully dropped row falls back to the uniform row.
    pub fn from_drop_bits(len: usize, bits: &[bool], mode: DropMode) -> Result<Self> {
        if bits.len() != len * len {
            return Err(Error::shape(
                "MaskMatrix::from_drop_bits",
                format!("{} bits for L = {len}", bits.len()),
            ));
        }
        match mode {
            DropMode::Weights => {
                let keep = Tensor2D::new(
                    len,
                    len,
                    bits.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect(),
                )?;
                Ok(MaskMatrix::Weights {
                    keep,
                    rescale: None,
                })
            }
            DropMode::Scores => {
                if bits.iter().all(|&b| b) {
                    return Ok(MaskMatrix::AllDropped);
                }
                let mut additive = Tensor2D::zeros(len, len);
                let mut constant_rows = vec![false; len];
                for (r, flag) in constant_rows.iter_mut().enumerate() {
                    let row_bits = &bits[r * len..(r + 1) * len];
                    if row_bits.iter().all(|&b| b) {
                        *flag = true;
                        continue;
                    }
                    for (v, &b) in additive.row_mut(r).iter_mut().zip(row_bits) {
                        if b {
                            *v = NEG_INF;
                        }
                    }
                }
                Ok(MaskMatrix::Scores {
                    additive,
                    constant_rows,
                })
            }
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        let dim = match self {
            MaskMatrix::Weights { keep, .. } => Some(keep.shape()),
            MaskMatrix::Scores { additive, .. } => Some(additive.shape()),
            _ => None,
        };
        match dim {
            Some(d) if d != (len, len) => Err(Error::shape(
                "attn_forward",
                format!("mask is {d:?}, sequence length {len}"),
            )),
            _ => Ok(()),
        }
    }
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub x: Tensor2D,
    /// Absent on the all-dropped path.
    pub q: Option<Tensor2D>,
    pub k: Option<Tensor2D>,
    pub v: Tensor2D,
    /// Unmasked scaled scores `Q_h K_hᵀ / √d_k`, one per head.
    pub scores: Vec<Tensor2D>,
    /// Plain softmax of the scores (weights mode only).
    pub probs: Vec<Tensor2D>,
    /// Attention matrix actually applied to `V`, one per head.
    pub attn: Vec<Tensor2D>,
    /// Concatenated head outputs before `W_O`.
    pub mixed: Tensor2D,
    pub mask: MaskMatrix,
}

/// Uniform mixing `(1/L)·𝟙 · V`, so every row is the column mean of `V`.
pub fn constant_attention(v: &Tensor2D) -> Tensor2D {
    let len = v.rows();
    let uniform = Tensor2D::filled(len, len, 1.0 / len as f64);
    uniform
        .matmul(v)
        .expect("uniform attention is L×L and V has L rows")
}

pub fn attn_forward(
    x: &Tensor2D,
    params: &AttentionParams,
    mask: &MaskMatrix,
) -> Result<(Tensor2D, AttentionCache)> {
    let (len, d) = x.shape();
    if len == 0 {
        return Err(Error::shape("attn_forward", "empty sequence"));
    }
    if d != params.d_model() {
        return Err(Error::shape(
            "attn_forward",
            format!("input width {d}, d_model {}", params.d_model()),
        ));
    }
    mask.check_len(len)?;
    let heads = params.num_heads;
    let dk = params.d_k();
    let v = x.matmul(&params.w_v)?;

    if let MaskMatrix::AllDropped = mask {
        let mixed = constant_attention(&v);
        let uniform = Tensor2D::filled(len, len, 1.0 / len as f64);
        let y = mixed.matmul(&params.w_o)?;
        return Ok((
            y,
            AttentionCache {
                x: x.clone(),
                q: None,
                k: None,
                v,
                scores: Vec::new(),
                probs: Vec::new(),
                attn: vec![uniform; heads],
                mixed,
                mask: mask.clone(),
            },
        ));
    }

    let q = x.matmul(&params.w_q)?;
    let k = x.matmul(&params.w_k)?;
    let inv_sqrt = 1.0 / (dk as f64).sqrt();
    let mut scores = Vec::with_capacity(heads);
    let mut probs = Vec::new();
    let mut attn = Vec::with_capacity(heads);
    let mut mixed = Tensor2D::zeros(len, d);
    for h in 0..heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let qh = q.col_block(lo, hi);
        let kh = k.col_block(lo, hi);
        let vh = v.col_block(lo, hi);
        let s = qh.matmul_t(&kh)?.scale(inv_sqrt);
        let a = match mask {
            MaskMatrix::None => softmax_rows(&s)?,
            MaskMatrix::Scores {
                additive,
                constant_rows,
            } => {
                let mut a = softmax_rows_masked(&s, additive, constant_rows)?;
                for (r, &c) in constant_rows.iter().enumerate() {
                    if c {
                        a.row_mut(r).fill(1.0 / len as f64);
                    }
                }
                a
            }
            MaskMatrix::Weights { keep, rescale } => {
                let p = softmax_rows(&s)?;
                let mut a = p.hadamard(keep)?;
                if let Some(kp) = rescale {
                    a.scale_in_place(1.0 / kp);
                }
                probs.push(p);
                a
            }
            MaskMatrix::AllDropped => unreachable!(),
        };
        mixed.set_col_block(lo, &a.matmul(&vh)?);
        scores.push(s);
        attn.push(a);
    }
    let y = mixed.matmul(&params.w_o)?;
    Ok((
        y,
        AttentionCache {
            x: x.clone(),
            q: Some(q),
            k: Some(k),
            v,
            scores,
            probs,
            attn,
            mixed,
            mask: mask.clone(),
        },
    ))
}

/// Softmax of `s + additive`, skipping rows flagged constant (filled later).
fn softmax_rows_masked(
    s: &Tensor2D,
    additive: &Tensor2D,
    constant_rows: &[bool],
) -> Result<Tensor2D> {
    let mut pre = s.add(additive)?;
    for (r, &c) in constant_rows.iter().enumerate() {
        if c {
            pre.row_mut(r).fill(0.0);
        } else if additive.row(r).iter().all(|&v| is_masked(v)) {
            return Err(Error::Contract(format!(
                "scores mask row {r} drops every unit; use the all-dropped path"
            )));
        }
    }
    softmax_rows(&pre)
}

/// `dS = A ⊙ (dA − rowsum(dA ⊙ A))`.
fn softmax_backward(a: &Tensor2D, da: &Tensor2D) -> Tensor2D {
    let mut ds = Tensor2D::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let (ar, dar) = (a.row(r), da.row(r));
        let dot: f64 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
        for ((o, &ai), &dai) in ds.row_mut(r).iter_mut().zip(ar).zip(dar) {
            *o = ai * (dai - dot);
        }
    }
    ds
}

/// Reverse pass of [`attn_forward`] for the scalar `⟨dy, y⟩`.
pub fn attn_backward(
    params: &AttentionParams,
    cache: &AttentionCache,
    dy: &Tensor2D,
) -> Result<(Tensor2D, AttentionParams)> {
    attn_backward_with_scores(params, cache, dy, None)
}

/// Like [`attn_backward`], with an extra upstream gradient on each head's
/// unmasked scaled scores (used when the scores themselves feed a loss).
pub fn attn_backward_with_scores(
    params: &AttentionParams,
    cache: &AttentionCache,
    dy: &Tensor2D,
    d_scores: Option<&[Tensor2D]>,
) -> Result<(Tensor2D, AttentionParams)> {
    let (len, d) = cache.x.shape();
    if dy.shape() != (len, d) {
        return Err(Error::shape(
            "attn_backward",
            format!("dy is {:?}, forward output was {len}x{d}", dy.shape()),
        ));
    }
    let heads = params.num_heads;
    let dk = params.d_k();
    let mut grads = params.zeros_like();

    grads.w_o = cache.mixed.t_matmul(dy)?;
    let dmixed = dy.matmul_t(&params.w_o)?;

    let mut dq = Tensor2D::zeros(len, d);
    let mut dk_full = Tensor2D::zeros(len, d);
    let mut dv = Tensor2D::zeros(len, d);
    let inv_sqrt = 1.0 / (dk as f64).sqrt();

    for h in 0..heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let dz = dmixed.col_block(lo, hi);
        let a = &cache.attn[h];
        dv.set_col_block(lo, &a.t_matmul(&dz)?);

        let (q, k) = match (&cache.q, &cache.k) {
            (Some(q), Some(k)) => (q, k),
            // constant attention: no gradient reaches Q or K
            _ => continue,
        };
        let vh = cache.v.col_block(lo, hi);
        let da = dz.matmul_t(&vh)?;
        let mut ds = match &cache.mask {
            MaskMatrix::None => softmax_backward(a, &da),
            MaskMatrix::Scores { constant_rows, .. } => {
                let mut ds = softmax_backward(a, &da);
                for (r, &c) in constant_rows.iter().enumerate() {
                    if c {
                        ds.row_mut(r).fill(0.0);
                    }
                }
                ds
            }
            MaskMatrix::Weights { keep, rescale } => {
                let mut dp = da.hadamard(keep)?;
                if let Some(kp) = rescale {
                    dp.scale_in_place(1.0 / kp);
                }
                softmax_backward(&cache.probs[h], &dp)
            }
            MaskMatrix::AllDropped => unreachable!(),
        };
        if let Some(extra) = d_scores {
            ds.add_assign(&extra[h])?;
        }
        let qh = q.col_block(lo, hi);
        let kh = k.col_block(lo, hi);
        dq.set_col_block(lo, &ds.matmul(&kh)?.scale(inv_sqrt));
        dk_full.set_col_block(lo, &ds.t_matmul(&qh)?.scale(inv_sqrt));
    }

    grads.w_v = cache.x.t_matmul(&dv)?;
    let mut dx = dv.matmul_t(&params.w_v)?;
    if cache.q.is_some() {
        grads.w_q = cache.x.t_matmul(&dq)?;
        grads.w_k = cache.x.t_matmul(&dk_full)?;
        dx.add_assign(&dq.matmul_t(&params.w_q)?)?;
        dx.add_assign(&dk_full.matmul_t(&params.w_k)?)?;
    }
    Ok((dx, grads))
}
