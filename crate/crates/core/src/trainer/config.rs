use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::DropMode;
use crate::error::{Error, Result};
use crate::models::{GeneratorConfig, TaskConfig};
use crate::policygrad::RewardScheme;
use crate::regularizers::Schedule;
use crate::tasks::{self, Dataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    None,
    Attendout,
    Vanilla,
    Layerdrop,
    AttnLayerdrop,
    Scheduled,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Attendout => "attendout",
            Method::Vanilla => "vanilla",
            Method::Layerdrop => "layerdrop",
            Method::AttnLayerdrop => "attn_layerdrop",
            Method::Scheduled => "scheduled",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Majority,
    Brackets,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_dev: usize,
    #[serde(default)]
    pub n_test: usize,
    /// Content length, excluding the leading pooling token.
    pub length: usize,
    /// Ignored by the bracket task (fixed vocabulary of 3).
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    /// Data seed; the run seed is used when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_vocab() -> usize {
    6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub d_ff: usize,
    pub num_heads: usize,
    pub num_layers: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, v: f64| Error::Config(format!("optimizer.{f} = {v} is invalid"));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("momentum", self.momentum));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(bad("beta1", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(bad("beta2", self.beta2));
        }
        if !(self.eps > 0.0) {
            return Err(bad("eps", self.eps));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPool {
    #[default]
    Dev,
    /// A slice of the training split withheld from training.
    TrainHoldout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttendoutSection {
    pub g_lr: f64,
    #[serde(default = "default_g_dim")]
    pub g_d_model: usize,
    #[serde(default = "default_one")]
    pub temperature: f64,
    #[serde(default)]
    pub logit_offset: f64,
    #[serde(default = "default_decay")]
    pub baseline_decay: f64,
    #[serde(default)]
    pub reward: RewardScheme,
    #[serde(default)]
    pub drop_mode: DropMode,
    /// Samples per evaluation; the dropout step length when absent.
    #[serde(default)]
    pub eval_samples: Option<usize>,
}

fn default_g_dim() -> usize {
    8
}
fn default_one() -> f64 {
    1.0
}
fn default_decay() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VanillaSection {
    pub p: f64,
    #[serde(default)]
    pub drop_mode: DropMode,
    /// Weights mode only: divide kept weights by `1 - p`.
    #[serde(default)]
    pub rescale: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerdropSection {
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledSection {
    #[serde(default)]
    pub p0: Option<f64>,
    /// One slope per layer, used with `p0`.
    #[serde(default)]
    pub slopes: Option<Vec<f64>>,
    /// Schedule text file; relative paths resolve against the config file.
    #[serde(default)]
    pub schedule_file: Option<PathBuf>,
    #[serde(default)]
    pub drop_mode: DropMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps per dropout step.
    pub dropout_step: usize,
    #[serde(default)]
    pub eval_pool: EvalPool,
    #[serde(default)]
    pub holdout_size: usize,
    pub task: TaskSection,
    pub model: ModelSection,
    pub optimizer: OptimizerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attendout: Option<AttendoutSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vanilla: Option<VanillaSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layerdrop: Option<LayerdropSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attn_layerdrop: Option<LayerdropSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheduled: Option<ScheduledSection>,
    /// Resolved schedule; filled in by [`TrainConfig::resolve_schedule`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Schedule>,
}

pub const METHOD_SECTIONS: [&str; 6] = [
    "attendout",
    "vanilla",
    "layerdrop",
    "attn_layerdrop",
    "scheduled",
    "schedule",
];

/// The section a method requires, if any.
pub fn method_section(method: Method) -> Option<&'static str> {
    match method {
        Method::None => None,
        Method::Attendout => Some("attendout"),
        Method::Vanilla => Some("vanilla"),
        Method::Layerdrop => Some("layerdrop"),
        Method::AttnLayerdrop => Some("attn_layerdrop"),
        Method::Scheduled => Some("scheduled"),
    }
}

fn check_prob(field: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{field} = {p} outside [0, 1]")))
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse, resolve any schedule file relative to the config's directory,
    /// and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        cfg.resolve_schedule(path.parent())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Turn a `scheduled` section into a concrete [`Schedule`]. A schedule
    /// already present (e.g. from a run snapshot) is kept.
    pub fn resolve_schedule(&mut self, base: Option<&Path>) -> Result<()> {
        let Some(sec) = &self.scheduled else {
            return Ok(());
        };
        if self.schedule.is_some() {
            return Ok(());
        }
        let schedule = match (&sec.schedule_file, sec.p0, &sec.slopes) {
            (Some(file), None, None) => {
                let path = match base {
                    Some(b) if file.is_relative() => b.join(file),
                    _ => file.clone(),
                };
                Schedule::load(&path)?
            }
            (None, Some(p0), Some(slopes)) => Schedule::linear(p0, slopes),
            (None, Some(p0), None) => Schedule::constant(self.model.num_layers, p0),
            _ => {
                return Err(Error::Config(
                    "scheduled: give either schedule_file or p0 (with optional slopes)".into(),
                ))
            }
        };
        self.schedule = Some(schedule);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.dropout_step == 0 {
            return Err(Error::Config("dropout_step must be positive".into()));
        }
        if self.task.n_train == 0 {
            return Err(Error::Config("task.n_train must be positive".into()));
        }
        self.optimizer.validate()?;
        self.task_config()?.validate()?;
        match self.eval_pool {
            EvalPool::Dev if self.task.n_dev == 0 => {
                return Err(Error::Config("eval_pool = dev needs task.n_dev > 0".into()))
            }
            EvalPool::TrainHoldout
                if self.holdout_size == 0 || self.holdout_size >= self.task.n_train =>
            {
                return Err(Error::Config(
                    "eval_pool = train_holdout needs 0 < holdout_size < task.n_train".into(),
                ))
            }
            _ => {}
        }
        let present = [
            ("attendout", self.attendout.is_some()),
            ("vanilla", self.vanilla.is_some()),
            ("layerdrop", self.layerdrop.is_some()),
            ("attn_layerdrop", self.attn_layerdrop.is_some()),
            ("scheduled", self.scheduled.is_some()),
        ];
        let wanted = method_section(self.method);
        for (name, here) in present {
            if here && Some(name) != wanted {
                return Err(Error::Config(format!(
                    "section [{name}] is not used by method {}",
                    self.method
                )));
            }
            if !here && Some(name) == wanted {
                return Err(Error::Config(format!(
                    "method {} requires section [{name}]",
                    self.method
                )));
            }
        }
        if self.schedule.is_some() && self.method != Method::Scheduled {
            return Err(Error::Config(format!(
                "a resolved schedule is not used by method {}",
                self.method
            )));
        }
        if let Some(a) = &self.attendout {
            self.generator_config()?.validate()?;
            if !(a.g_lr >= 0.0 && a.g_lr.is_finite()) {
                return Err(Error::Config(format!("attendout.g_lr = {} is invalid", a.g_lr)));
            }
            if !(a.baseline_decay > 0.0 && a.baseline_decay < 1.0) {
                return Err(Error::Config(format!(
                    "attendout.baseline_decay = {} outside (0, 1)",
                    a.baseline_decay
                )));
            }
            if a.eval_samples == Some(0) {
                return Err(Error::Config("attendout.eval_samples must be positive".into()));
            }
            let pool = self.eval_pool_size();
            if self.eval_samples() > pool {
                return Err(Error::Config(format!(
                    "evaluation draws {} samples from a pool of {pool}",
                    self.eval_samples()
                )));
            }
        }
        if let Some(v) = &self.vanilla {
            check_prob("vanilla.p", v.p)?;
            if v.rescale && (v.drop_mode != DropMode::Weights || v.p >= 1.0) {
                return Err(Error::Config(
                    "vanilla.rescale needs drop_mode = weights and p < 1".into(),
                ));
            }
        }
        if let Some(l) = &self.layerdrop {
            check_prob("layerdrop.p", l.p)?;
        }
        if let Some(l) = &self.attn_layerdrop {
            check_prob("attn_layerdrop.p", l.p)?;
        }
        if self.scheduled.is_some() {
            let s = self
                .schedule
                .as_ref()
                .ok_or_else(|| Error::Config("scheduled: schedule not resolved".into()))?;
            s.validate()?;
            if s.num_layers() != self.model.num_layers {
                return Err(Error::Config(format!(
                    "schedule has {} layers, model has {}",
                    s.num_layers(),
                    self.model.num_layers
                )));
            }
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.task.seed.unwrap_or(self.seed)
    }

    pub fn vocab_size(&self) -> usize {
        match self.task.kind {
            TaskKind::Majority => self.task.vocab,
            TaskKind::Brackets => 3,
        }
    }

    pub fn task_config(&self) -> Result<TaskConfig> {
        Ok(TaskConfig {
            vocab_size: self.vocab_size(),
            max_len: self.task.length + 1,
            d_model: self.model.d_model,
            d_ff: self.model.d_ff,
            num_heads: self.model.num_heads,
            num_layers: self.model.num_layers,
            num_classes: 2,
        })
    }

    pub fn generator_config(&self) -> Result<GeneratorConfig> {
        let a = self
            .attendout
            .as_ref()
            .ok_or_else(|| Error::Config("no [attendout] section".into()))?;
        Ok(GeneratorConfig {
            vocab_size: self.vocab_size(),
            d_model: a.g_d_model,
            temperature: a.temperature,
            logit_offset: a.logit_offset,
        })
    }

    pub fn eval_samples(&self) -> usize {
        self.attendout
            .as_ref()
            .and_then(|a| a.eval_samples)
            .unwrap_or(self.dropout_step)
    }

    pub fn eval_pool_size(&self) -> usize {
        match self.eval_pool {
            EvalPool::Dev => self.task.n_dev,
            EvalPool::TrainHoldout => self.holdout_size,
        }
    }

    /// (train, dev, test) splits as configured.
    pub fn datasets(&self) -> Result<(Dataset, Dataset, Dataset)> {
        let t = &self.task;
        let total = t.n_train + t.n_dev + t.n_test;
        let full = match t.kind {
            TaskKind::Majority => tasks::gen_majority_token(total, t.length, t.vocab, self.data_seed())?,
            TaskKind::Brackets => tasks::gen_balanced_brackets(total, t.length, self.data_seed())?,
        };
        let n = total as f64;
        tasks::split(
            &full,
            [t.n_train as f64 / n, t.n_dev as f64 / n, t.n_test as f64 / n],
            self.data_seed(),
        )
    }

    /// Everything except the method and method-specific sections, as
    /// canonical JSON. Two runs are a fair comparison iff these match.
    pub fn fairness_key(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("method");
            for s in METHOD_SECTIONS {
                obj.remove(s);
            }
        }
        Ok(serde_json::to_string(&v)?)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const BASE: &str = r#"
method = "none"
seed = 3
epochs = 2
batch_size = 8
dropout_step = 4

[task]
kind = "majority"
n_train = 64
n_dev = 32
n_test = 16
length = 8
vocab = 5

[model]
d_model = 8
d_ff = 16
num_heads = 2
num_layers = 2

[optimizer]
kind = "adam"
lr = 0.01
"#;

    #[test]
    fn parses_and_validates() {
        let cfg = TrainConfig::from_toml(BASE).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.method, Method::None);
        assert_eq!(cfg.optimizer.beta2, 0.999);
        let (tr, dv, te) = cfg.datasets().unwrap();
        assert_eq!((tr.len(), dv.len(), te.len()), (64, 32, 16));
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_missing_fields_are_named() {
        let e = TrainConfig::from_toml(&BASE.replace("epochs = 2", "epochs = 2\nepohcs = 1"))
            .unwrap_err();
        assert!(e.to_string().contains("epohcs"), "{e}");
        let e = TrainConfig::from_toml(&BASE.replace("batch_size = 8\n", "")).unwrap_err();
        assert!(e.to_string().contains("batch_size"), "{e}");
    }

    #[test]
    fn method_sections_present_exactly_when_needed() {
        let text = BASE.replace("\"none\"", "\"vanilla\"");
        let cfg = TrainConfig::from_toml(&text).unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("[vanilla]"));
        let cfg = TrainConfig::from_toml(&format!("{text}\n[vanilla]\np = 0.1\n")).unwrap();
        cfg.validate().unwrap();
        let cfg = TrainConfig::from_toml(&format!("{BASE}\n[layerdrop]\np = 0.1\n")).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fairness_ignores_method_sections_only() {
        let a = TrainConfig::from_toml(BASE).unwrap();
        let b = TrainConfig::from_toml(&format!(
            "{}\n[layerdrop]\np = 0.2\n",
            BASE.replace("\"none\"", "\"layerdrop\"")
        ))
        .unwrap();
        assert_eq!(a.fairness_key().unwrap(), b.fairness_key().unwrap());
        let c = TrainConfig::from_toml(&BASE.replace("lr = 0.01", "lr = 0.02")).unwrap();
        assert_ne!(a.fairness_key().unwrap(), c.fairness_key().unwrap());
    }

    #[test]
    fn scheduled_sources() {
        let text = format!(
            "{}\n[scheduled]\np0 = 0.6\nslopes = [-0.001, -0.0005]\n",
            BASE.replace("\"none\"", "\"scheduled\"")
        );
        let mut cfg = TrainConfig::from_toml(&text).unwrap();
        assert!(cfg.validate().is_err());
        cfg.resolve_schedule(None).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.schedule.as_ref().unwrap().layers[1].slope, -0.0005);

        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("s.txt"), "layers 2\nbreakpoint 0 0 0.5\n").unwrap();
        let text = format!(
            "{}\n[scheduled]\nschedule_file = \"s.txt\"\n",
            BASE.replace("\"none\"", "\"scheduled\"")
        );
        let path = dir.path().join("c.toml");
        std::fs::write(&path, text).unwrap();
        let cfg = TrainConfig::load(&path).unwrap();
        assert_eq!(cfg.schedule.unwrap().layers[0].breakpoints, vec![(0, 0.5)]);
    }
}
