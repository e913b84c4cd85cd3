//! Finite-difference verification suites for every hand-written backward
//! pass, plus the enumeration check of the policy gradient.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{attn_backward, attn_forward, AttentionParams, DropMode, MaskMatrix};
use crate::error::{Error, Result};
use crate::models::{
    batch_loss_and_grads, gnet_forward, gnet_logprob_backward, gnet_sample_masks,
    logprob_from_logits, BlockPlan, GeneratorConfig, GeneratorParams, ParamSet, TaskConfig,
    TaskModelParams,
};
use crate::numkernel::{finite_diff_grad, relative_error, RngState, Tensor2D};
use crate::par::Execution;
use crate::policygrad::{expected_reward_oracle, mask_index};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub tol: f64,
    pub h: f64,
    pub vocab: usize,
    pub task_layers: usize,
    pub task_d_model: usize,
    pub task_d_ff: usize,
    pub task_heads: usize,
    pub task_len: usize,
    pub g_layers: usize,
    pub g_len: usize,
    pub g_d_model: usize,
    pub oracle_layers: usize,
    pub oracle_len: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            h: 1e-5,
            vocab: 7,
            task_layers: 2,
            task_d_model: 16,
            task_d_ff: 32,
            task_heads: 2,
            task_len: 8,
            g_layers: 2,
            g_len: 3,
            g_d_model: 8,
            oracle_layers: 1,
            oracle_len: 2,
        }
    }
}

impl GradcheckConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub tensor: String,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seconds: f64,
    pub max_rel_err: f64,
    pub tensors: Vec<TensorCheck>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tol: f64,
    pub h: f64,
    pub suites: Vec<SuiteReport>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.suites.iter().map(|s| s.max_rel_err).fold(0.0, f64::max)
    }

    /// The first tensor over tolerance, as an error naming it.
    pub fn verdict(&self) -> Result<()> {
        for s in &self.suites {
            for t in &s.tensors {
                if !(t.rel_err <= self.tol) {
                    return Err(Error::GradCheck {
                        tensor: format!("{}/{}", s.suite, t.tensor),
                        rel_err: t.rel_err,
                        tol: self.tol,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Perturbs the analytic gradient of one named tensor, to confirm a bad
/// gradient is caught.
#[derive(Clone, Debug, Default)]
pub struct Corruption {
    pub tensor: Option<String>,
}

impl Corruption {
    fn apply(&self, name: &str, grad: &mut [f64]) {
        if self.tensor.as_deref() == Some(name) {
            if let Some(g) = grad.first_mut() {
                *g += 1.0;
            }
        }
    }
}

fn random_tensor(rows: usize, cols: usize, rng: &mut RngState) -> Tensor2D {
    Tensor2D::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
}

fn random_bits(n: usize, p: f64, rng: &mut RngState) -> Vec<bool> {
    (0..n).map(|_| rng.next_f64() < p).collect()
}

/// Compare a [`ParamSet`] gradient to central differences, tensor by tensor.
fn check_param_set<P: ParamSet>(
    params: &P,
    analytic: &P,
    f: impl Fn(&P) -> Result<f64>,
    h: f64,
    corrupt: &Corruption,
) -> Result<Vec<TensorCheck>> {
    let theta = params.flatten();
    let mut probe = params.clone();
    let mut failure = None;
    let numeric = finite_diff_grad(
        |x| {
            probe.assign_flat(x).expect("same length");
            match f(&probe) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &theta,
        h,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let numeric = numeric?;
    let mut out = Vec::new();
    let mut offset = 0;
    for (name, t) in analytic.named_tensors() {
        let mut g = t.data().to_vec();
        corrupt.apply(&name, &mut g);
        let n = g.len();
        out.push(TensorCheck {
            rel_err: relative_error(&g, &numeric[offset..offset + n]),
            tensor: name,
        });
        offset += n;
    }
    Ok(out)
}

fn attention_suite(cfg: &GradcheckConfig, rng: &mut RngState, corrupt: &Corruption) -> Result<Vec<TensorCheck>> {
    let (len, d) = (cfg.task_len, cfg.task_d_model);
    let params = AttentionParams::init(d, cfg.task_heads, rng)?;
    let x = random_tensor(len, d, rng);
    let r = random_tensor(len, d, rng);
    let mut partial = random_bits(len * len, 0.3, rng);
    // one fully dropped row exercises the uniform-row fallback
    partial[..len].iter_mut().for_each(|b| *b = true);
    let masks = [
        ("clean", MaskMatrix::None),
        ("scores", MaskMatrix::from_drop_bits(len, &partial, DropMode::Scores)?),
        ("weights", MaskMatrix::from_drop_bits(len, &partial, DropMode::Weights)?),
        (
            "weights_rescaled",
            MaskMatrix::from_drop_bits(len, &partial, DropMode::Weights)?.with_rescale(0.7)?,
        ),
        ("all_dropped", MaskMatrix::AllDropped),
    ];
    let mut out = Vec::new();
    for (label, mask) in &masks {
        let (_, cache) = attn_forward(&x, &params, mask)?;
        let (dx, grads) = attn_backward(&params, &cache, &r)?;
        let objective = |x: &Tensor2D, p: &AttentionParams| -> f64 {
            attn_forward(x, p, mask)
                .and_then(|(y, _)| y.dot(&r))
                .unwrap_or(f64::NAN)
        };
        let numeric_x = finite_diff_grad(
            |v| objective(&Tensor2D::new(len, d, v.to_vec()).expect("shape"), &params),
            x.data(),
            cfg.h,
        )?;
        let name = format!("{label}.x");
        let mut g = dx.data().to_vec();
        corrupt.apply(&name, &mut g);
        out.push(TensorCheck {
            rel_err: relative_error(&g, &numeric_x),
            tensor: name,
        });
        for (i, (wname, w)) in params.tensors().into_iter().enumerate() {
            let (rows, cols) = w.shape();
            let numeric = finite_diff_grad(
                |v| {
                    let mut p = params.clone();
                    *p.tensors_mut()[i] = Tensor2D::new(rows, cols, v.to_vec()).expect("shape");
                    objective(&x, &p)
                },
                w.data(),
                cfg.h,
            )?;
            let name = format!("{label}.{wname}");
            let mut g = grads.tensors()[i].1.data().to_vec();
            corrupt.apply(&name, &mut g);
            out.push(TensorCheck {
                rel_err: relative_error(&g, &numeric),
                tensor: name,
            });
        }
    }
    Ok(out)
}

fn task_suite(cfg: &GradcheckConfig, rng: &mut RngState, corrupt: &Corruption) -> Result<Vec<TensorCheck>> {
    let tc = TaskConfig {
        vocab_size: cfg.vocab,
        max_len: cfg.task_len,
        d_model: cfg.task_d_model,
        d_ff: cfg.task_d_ff,
        num_heads: cfg.task_heads,
        num_layers: cfg.task_layers,
        num_classes: 3,
    };
    let params = TaskModelParams::init(&tc, rng.next_raw())?;
    let len = cfg.task_len;
    let seqs: Vec<Vec<usize>> = (0..3)
        .map(|_| (0..len).map(|_| rng.below(cfg.vocab)).collect())
        .collect();
    let labels = [0, 1, 2];
    let n = cfg.task_layers;
    let plan_scores: Vec<BlockPlan> = (0..n)
        .map(|i| {
            let m = if i + 1 == n {
                MaskMatrix::AllDropped
            } else {
                MaskMatrix::from_drop_bits(len, &random_bits(len * len, 0.3, rng), DropMode::Scores)?
            };
            Ok(BlockPlan::Attend(m))
        })
        .collect::<Result<_>>()?;
    let plan_weights: Vec<BlockPlan> = (0..n)
        .map(|i| {
            if i == 0 {
                Ok(BlockPlan::Skip)
            } else {
                MaskMatrix::from_drop_bits(len, &random_bits(len * len, 0.3, rng), DropMode::Weights)
                    .map(BlockPlan::Attend)
            }
        })
        .collect::<Result<_>>()?;
    let plans = vec![BlockPlan::clean(n), plan_scores, plan_weights];
    let tokens: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let exec = Execution::Sequential;
    let (_, grads) = batch_loss_and_grads(&params, &tokens, &labels, Some(&plans), exec)?;
    check_param_set(
        &params,
        &grads,
        |p| batch_loss_and_grads(p, &tokens, &labels, Some(&plans), exec).map(|(l, _)| l),
        cfg.h,
        corrupt,
    )
}

fn generator(cfg: &GradcheckConfig, rng: &mut RngState) -> Result<GeneratorParams> {
    GeneratorParams::init(
        &GeneratorConfig {
            vocab_size: cfg.vocab,
            d_model: cfg.g_d_model,
            temperature: 1.0,
            logit_offset: 0.0,
        },
        rng.next_raw(),
    )
}

fn logprob_suite(cfg: &GradcheckConfig, rng: &mut RngState, corrupt: &Corruption) -> Result<Vec<TensorCheck>> {
    let g = generator(cfg, rng)?;
    let tokens: Vec<usize> = (0..cfg.g_len).map(|_| rng.below(cfg.vocab)).collect();
    let decision = gnet_sample_masks(&g, &tokens, cfg.g_layers, rng)?;
    let analytic = gnet_logprob_backward(&g, &tokens, &decision)?;
    check_param_set(
        &g,
        &analytic,
        |p| {
            let fwd = gnet_forward(p, &tokens, cfg.g_layers)?;
            Ok(logprob_from_logits(&fwd.logits, &decision.drops))
        },
        cfg.h,
        corrupt,
    )
}

fn oracle_suite(cfg: &GradcheckConfig, rng: &mut RngState, corrupt: &Corruption) -> Result<Vec<TensorCheck>> {
    let g = generator(cfg, rng)?;
    let tokens: Vec<usize> = (0..cfg.oracle_len).map(|_| rng.below(cfg.vocab)).collect();
    let units = cfg.oracle_layers * cfg.oracle_len * cfg.oracle_len;
    let table: Vec<f64> = (0..1usize << units.min(20)).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let reward = |d: &[Vec<bool>]| table[mask_index(d)];
    let (_, grad) = expected_reward_oracle(&g, &tokens, cfg.oracle_layers, reward)?;
    check_param_set(
        &g,
        &grad,
        |p| expected_reward_oracle(p, &tokens, cfg.oracle_layers, reward).map(|(j, _)| j),
        cfg.h,
        corrupt,
    )
}

/// Run every suite. Use [`GradcheckReport::verdict`] to turn the report
/// into pass/fail.
pub fn run_gradcheck(cfg: &GradcheckConfig, seed: u64, corrupt: &Corruption) -> Result<GradcheckReport> {
    type Suite = fn(&GradcheckConfig, &mut RngState, &Corruption) -> Result<Vec<TensorCheck>>;
    let suites: [(&str, Suite); 4] = [
        ("attention", attention_suite),
        ("task_model", task_suite),
        ("generator_logprob", logprob_suite),
        ("reinforce_oracle", oracle_suite),
    ];
    let mut reports = Vec::new();
    for (i, (name, suite)) in suites.into_iter().enumerate() {
        let mut rng = RngState::new(seed, 40 + i as u64);
        let start = Instant::now();
        let tensors = suite(cfg, &mut rng, corrupt)?;
        reports.push(SuiteReport {
            suite: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
            max_rel_err: tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max),
            tensors,
        });
    }
    Ok(GradcheckReport {
        tol: cfg.tol,
        h: cfg.h,
        suites: reports,
    })
}
