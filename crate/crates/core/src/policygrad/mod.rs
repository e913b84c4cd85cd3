//! Score-function (REINFORCE) training of the mask generator.
//!
//! The generator's objective is the expected game reward. With independent
//! Bernoulli units and a moving-average baseline `b`, one dropout step
//! contributes `Σ_t ∇logprob_t · (r_t − b)`, where each `logprob_t` is
//! already the per-unit mean over the `N·L²` units of sample `t`.

mod oracle;

pub use oracle::{expected_reward_oracle, mask_index, ORACLE_MAX_UNITS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{gnet_logprob_backward, GeneratorParams, MaskDecision, ParamSet};
use crate::par::Execution;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    Attacker,
    Defender,
    Tie,
}

/// How the evaluation gap becomes a reward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardScheme {
    /// `+1` attacker win, `-1` defender win, `0` tie.
    #[default]
    Signed,
    /// `eval_A − eval_D`.
    Gap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub rewards: Vec<f64>,
    pub eval_attacker: f64,
    pub eval_defender: f64,
    pub winner: Winner,
}

impl RewardRecord {
    pub fn mean(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }
}

/// Broadcast the step outcome to all `count` samples of the dropout step.
pub fn compute_rewards(
    eval_attacker: f64,
    eval_defender: f64,
    count: usize,
    scheme: RewardScheme,
) -> Result<RewardRecord> {
    if count == 0 {
        return Err(Error::Parameter("reward count must be at least 1".into()));
    }
    for (who, v) in [("attacker", eval_attacker), ("defender", eval_defender)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Parameter(format!("{who} score {v} outside [0, 1]")));
        }
    }
    let winner = if eval_attacker > eval_defender {
        Winner::Attacker
    } else if eval_attacker < eval_defender {
        Winner::Defender
    } else {
        Winner::Tie
    };
    let r = match scheme {
        RewardScheme::Signed => match winner {
            Winner::Attacker => 1.0,
            Winner::Defender => -1.0,
            Winner::Tie => 0.0,
        },
        RewardScheme::Gap => eval_attacker - eval_defender,
    };
    Ok(RewardRecord {
        rewards: vec![r; count],
        eval_attacker,
        eval_defender,
        winner,
    })
}

/// Exponential moving average of mean rewards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub value: f64,
    pub decay: f64,
    pub initialized: bool,
}

impl Baseline {
    pub fn new(decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Parameter(format!("baseline decay {decay} outside (0, 1)")));
        }
        Ok(Self {
            value: 0.0,
            decay,
            initialized: false,
        })
    }

    /// First call sets `b = r̄`; afterwards `b ← β·b + (1 − β)·r̄`.
    pub fn observe(&mut self, mean_reward: f64) {
        if self.initialized {
            self.value = self.decay * self.value + (1.0 - self.decay) * mean_reward;
        } else {
            self.value = mean_reward;
            self.initialized = true;
        }
    }
}

pub fn update_baseline(mut baseline: Baseline, rewards: &RewardRecord) -> Baseline {
    baseline.observe(rewards.mean());
    baseline
}

/// Ascent direction `Σ_t ∇logprob_t · (r_t − b)` for one trajectory.
pub fn reinforce_gradient(
    gparams: &GeneratorParams,
    decisions: &[(&[usize], &MaskDecision)],
    rewards: &[f64],
    baseline: f64,
    exec: Execution,
) -> Result<GeneratorParams> {
    if decisions.len() != rewards.len() {
        return Err(Error::Contract(format!(
            "{} decisions but {} rewards",
            decisions.len(),
            rewards.len()
        )));
    }
    let per_sample = exec.map_range(decisions.len(), |t| -> Result<Option<GeneratorParams>> {
        let advantage = rewards[t] - baseline;
        if advantage == 0.0 {
            return Ok(None);
        }
        let (tokens, decision) = decisions[t];
        let mut g = gnet_logprob_backward(gparams, tokens, decision)?;
        g.scale(advantage);
        Ok(Some(g))
    });
    let mut total = gparams.zeros_like();
    for g in per_sample {
        if let Some(g) = g? {
            total.add_scaled(1.0, &g)?;
        }
    }
    Ok(total)
}

/// `θ_G ← θ_G + lr · Σ_t ∇logprob_t · (r_t − b)` (gradient ascent, one trajectory).
pub fn reinforce_update(
    gparams: &GeneratorParams,
    decisions: &[(&[usize], &MaskDecision)],
    rewards: &RewardRecord,
    baseline: &Baseline,
    lr: f64,
    exec: Execution,
) -> Result<GeneratorParams> {
    let grad = reinforce_gradient(gparams, decisions, &rewards.rewards, baseline.value, exec)?;
    if let Some((name, _)) = grad
        .named_tensors()
        .into_iter()
        .find(|(_, t)| !t.is_finite())
    {
        return Err(Error::Divergence {
            tensor: format!("generator.{name}"),
            detail: "non-finite policy gradient".into(),
        });
    }
    let mut next = gparams.clone();
    next.add_scaled(lr, &grad)?;
    Ok(next)
}
