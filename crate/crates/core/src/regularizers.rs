//! Baseline regularizers: Bernoulli attention dropout, LayerDrop,
//! attention LayerDrop and the per-layer scheduled dropout.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{DropMode, MaskMatrix};
use crate::error::{Error, Result};
use crate::models::BlockPlan;
use crate::numkernel::{sample_bernoulli, RngState};

/// `L²` independent Bernoulli(`p`) drop bits, row-major.
pub fn bernoulli_bits(len: usize, p: f64, rng: &mut RngState) -> Result<Vec<bool>> {
    (0..len * len).map(|_| sample_bernoulli(p, rng)).collect()
}

/// Like [`MaskMatrix::from_drop_bits`], but an all-keep pattern becomes
/// [`MaskMatrix::None`].
pub fn mask_from_bits(len: usize, bits: &[bool], mode: DropMode) -> Result<MaskMatrix> {
    if bits.len() == len * len && bits.iter().all(|&b| !b) {
        return Ok(MaskMatrix::None);
    }
    MaskMatrix::from_drop_bits(len, bits, mode)
}

/// Drops each of the `L²` units independently with probability `p`.
pub fn vanilla_attention_mask(
    len: usize,
    p: f64,
    rng: &mut RngState,
    mode: DropMode,
) -> Result<MaskMatrix> {
    mask_from_bits(len, &bernoulli_bits(len, p, rng)?, mode)
}

/// One independent mask per layer, with layer `i` using `probs[i]`.
pub fn bernoulli_plan(
    len: usize,
    probs: &[f64],
    rng: &mut RngState,
    mode: DropMode,
) -> Result<Vec<BlockPlan>> {
    probs
        .iter()
        .map(|&p| Ok(BlockPlan::Attend(vanilla_attention_mask(len, p, rng, mode)?)))
        .collect()
}

/// `true` = skip the whole block.
pub fn layerdrop_decision(num_layers: usize, p: f64, rng: &mut RngState) -> Result<Vec<bool>> {
    (0..num_layers).map(|_| sample_bernoulli(p, rng)).collect()
}

/// `true` = replace the attention sublayer by the constant path.
pub fn attn_layerdrop_decision(
    num_layers: usize,
    p: f64,
    rng: &mut RngState,
) -> Result<Vec<bool>> {
    (0..num_layers).map(|_| sample_bernoulli(p, rng)).collect()
}

pub fn layerdrop_plan(skips: &[bool]) -> Vec<BlockPlan> {
    skips
        .iter()
        .map(|&s| if s { BlockPlan::Skip } else { BlockPlan::Attend(MaskMatrix::None) })
        .collect()
}

pub fn attn_layerdrop_plan(dropped: &[bool]) -> Vec<BlockPlan> {
    dropped
        .iter()
        .map(|&d| BlockPlan::Attend(if d { MaskMatrix::AllDropped } else { MaskMatrix::None }))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSchedule {
    pub p0: f64,
    pub slope: f64,
    /// `(step, probability)` with strictly increasing steps. When present
    /// these override `p0` and `slope`.
    #[serde(default)]
    pub breakpoints: Vec<(u64, f64)>,
}

impl LayerSchedule {
    pub fn constant(p: f64) -> Self {
        Self {
            p0: p,
            slope: 0.0,
            breakpoints: Vec::new(),
        }
    }

    fn validate(&self, layer: usize) -> Result<()> {
        if !self.p0.is_finite() || !self.slope.is_finite() {
            return Err(Error::Config(format!("layer {layer}: non-finite p0 or slope")));
        }
        for w in self.breakpoints.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config(format!(
                    "layer {layer}: breakpoint steps {} then {} are not strictly increasing",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some(&(s, p)) = self.breakpoints.iter().find(|(_, p)| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!(
                "layer {layer}: breakpoint probability {p} at step {s} outside [0, 1]"
            )));
        }
        Ok(())
    }

    pub fn at(&self, step: u64) -> f64 {
        let p = match self.breakpoints.as_slice() {
            [] => self.p0 + self.slope * step as f64,
            [(_, p)] => *p,
            bps => {
                let idx = bps.partition_point(|&(s, _)| s <= step);
                if idx == 0 {
                    bps[0].1
                } else if idx == bps.len() {
                    bps[idx - 1].1
                } else {
                    let (s0, p0) = bps[idx - 1];
                    let (s1, p1) = bps[idx];
                    if step == s0 {
                        p0
                    } else {
                        let t = (step - s0) as f64 / (s1 - s0) as f64;
                        p0 + t * (p1 - p0)
                    }
                }
            }
        };
        p.clamp(0.0, 1.0)
    }
}

/// Per-layer drop probability as a function of the optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub layers: Vec<LayerSchedule>,
}

impl Schedule {
    pub fn new(layers: Vec<LayerSchedule>) -> Result<Self> {
        let s = Self { layers };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(num_layers: usize, p: f64) -> Self {
        Self {
            layers: vec![LayerSchedule::constant(p); num_layers],
        }
    }

    pub fn linear(p0: f64, slopes: &[f64]) -> Self {
        Self {
            layers: slopes
                .iter()
                .map(|&slope| LayerSchedule {
                    p0,
                    slope,
                    breakpoints: Vec::new(),
                })
                .collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("schedule has no layers".into()));
        }
        self.layers
            .iter()
            .enumerate()
            .try_for_each(|(i, l)| l.validate(i))
    }

    pub fn probabilities(&self, step: u64) -> Vec<f64> {
        self.layers.iter().map(|l| l.at(step)).collect()
    }

    /// Every breakpoint step across all layers, sorted and deduplicated.
    pub fn breakpoint_steps(&self) -> Vec<u64> {
        let mut steps: Vec<u64> = self
            .layers
            .iter()
            .flat_map(|l| l.breakpoints.iter().map(|&(s, _)| s))
            .collect();
        steps.sort_unstable();
        steps.dedup();
        steps
    }

    /// Parse the schedule text format:
    ///
    /// ```text
    /// # comment
    /// layers 4
    /// linear 0 0.6 -0.0005
    /// breakpoint 1 0 0.55
    /// breakpoint 1 1000 0.3
    /// ```
    ///
    /// `layers` must come first. Layers without directives stay at 0.
    pub fn parse(text: &str) -> Result<Self> {
        let mut layers: Option<Vec<LayerSchedule>> = None;
        let mut has_linear: Vec<bool> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |msg: String| Error::Parse { line: line_no, msg };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let num = |idx: usize| -> Result<f64> {
                let f = fields[idx];
                let v: f64 = f.parse().map_err(|_| err(format!("bad number `{f}`")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(err(format!("non-finite number `{f}`")))
                }
            };
            let int = |idx: usize| -> Result<u64> {
                let f = fields[idx];
                f.parse().map_err(|_| err(format!("bad integer `{f}`")))
            };
            let expect = |n: usize| -> Result<()> {
                if fields.len() == n {
                    Ok(())
                } else {
                    Err(err(format!(
                        "`{}` takes {} arguments, got {}",
                        fields[0],
                        n - 1,
                        fields.len() - 1
                    )))
                }
            };
            if fields[0] == "layers" {
                expect(2)?;
                if layers.is_some() {
                    return Err(err("duplicate `layers` directive".into()));
                }
                let n = int(1)? as usize;
                if n == 0 {
                    return Err(err("`layers` must be positive".into()));
                }
                layers = Some(vec![LayerSchedule::constant(0.0); n]);
                has_linear = vec![false; n];
                continue;
            }
            let Some(ls) = layers.as_mut() else {
                return Err(err("`layers <count>` must precede other directives".into()));
            };
            match fields[0] {
                "linear" => {
                    expect(4)?;
                    let layer = int(1)? as usize;
                    if layer >= ls.len() {
                        return Err(err(format!("layer {layer} out of range (layers {})", ls.len())));
                    }
                    if has_linear[layer] {
                        return Err(err(format!("duplicate `linear` for layer {layer}")));
                    }
                    has_linear[layer] = true;
                    ls[layer].p0 = num(2)?;
                    ls[layer].slope = num(3)?;
                }
                "breakpoint" => {
                    expect(4)?;
                    let layer = int(1)? as usize;
                    if layer >= ls.len() {
                        return Err(err(format!("layer {layer} out of range (layers {})", ls.len())));
                    }
                    let step = int(2)?;
                    let p = num(3)?;
                    if !(0.0..=1.0).contains(&p) {
                        return Err(err(format!("probability {p} outside [0, 1]")));
                    }
                    if let Some(&(last, _)) = ls[layer].breakpoints.last() {
                        if step <= last {
                            return Err(err(format!(
                                "breakpoint step {step} not after {last} for layer {layer}"
                            )));
                        }
                    }
                    ls[layer].breakpoints.push((step, p));
                }
                other => return Err(err(format!("unknown directive `{other}`"))),
            }
        }
        let layers = layers.ok_or(Error::Parse {
            line: text.lines().count().max(1),
            msg: "missing `layers <count>` directive".into(),
        })?;
        Schedule::new(layers)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("layers {}\n", self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(out, "linear {i} {:?} {:?}", l.p0, l.slope);
            for &(s, p) in &l.breakpoints {
                let _ = writeln!(out, "breakpoint {i} {s} {p:?}");
            }
        }
        out
    }

    /// Breakpoint schedule from a mask trace CSV
    /// (`dropout_step,layer,mean_drop_prob`). Dropout step `k` maps to
    /// optimizer step `k * dropout_len`.
    pub fn from_mask_trace(path: &Path, dropout_len: u64) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            dropout_step: u64,
            layer: usize,
            mean_drop_prob: f64,
        }
        let mut reader = csv::Reader::from_path(path)?;
        let mut layers: Vec<LayerSchedule> = Vec::new();
        for row in reader.deserialize() {
            let row: Row = row?;
            if row.layer >= layers.len() {
                layers.resize(row.layer + 1, LayerSchedule::constant(0.0));
            }
            layers[row.layer]
                .breakpoints
                .push((row.dropout_step * dropout_len, row.mean_drop_prob));
        }
        Schedule::new(layers)
    }
}

/// Free-function form of [`LayerSchedule::at`] indexed by layer.
pub fn schedule_probability(s: &Schedule, layer: usize, step: u64) -> Result<f64> {
    s.layers.get(layer).map(|l| l.at(step)).ok_or(Error::Index {
        what: "schedule layer",
        index: layer,
        bound: s.layers.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // 3σ half-width of a binomial proportion.
    fn within_3_sigma(hits: usize, n: usize, p: f64) -> bool {
        let rate = hits as f64 / n as f64;
        (rate - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt()
    }

    #[test]
    fn vanilla_extremes() {
        let mut rng = RngState::new(1, 5);
        let m = vanilla_attention_mask(6, 0.0, &mut rng, DropMode::Scores).unwrap();
        assert_eq!(m, MaskMatrix::None);
        let m = vanilla_attention_mask(6, 1.0, &mut rng, DropMode::Scores).unwrap();
        assert_eq!(m, MaskMatrix::AllDropped);
        assert!(vanilla_attention_mask(6, 1.5, &mut rng, DropMode::Scores).is_err());
    }

    #[test]
    fn vanilla_drop_rate() {
        let mut rng = RngState::new(2, 5);
        let (len, n) = (16, 1000);
        let mut dropped = 0usize;
        for _ in 0..n {
            match vanilla_attention_mask(len, 0.2, &mut rng, DropMode::Weights).unwrap() {
                MaskMatrix::Weights { keep, .. } => {
                    dropped += keep.data().iter().filter(|&&k| k == 0.0).count()
                }
                MaskMatrix::None => {}
                other => panic!("unexpected mask {other:?}"),
            }
        }
        assert!(within_3_sigma(dropped, n * len * len, 0.2));
    }

    #[test]
    fn layerdrop_rates() {
        let mut rng = RngState::new(3, 5);
        let n = 10_000;
        let mut skips = [0usize; 4];
        let mut consts = [0usize; 4];
        for _ in 0..n {
            for (c, s) in skips.iter_mut().zip(layerdrop_decision(4, 0.2, &mut rng).unwrap()) {
                *c += usize::from(s);
            }
            for (c, s) in consts.iter_mut().zip(attn_layerdrop_decision(4, 0.2, &mut rng).unwrap()) {
                *c += usize::from(s);
            }
        }
        for i in 0..4 {
            assert!(within_3_sigma(skips[i], n, 0.2), "block {i}: {}", skips[i]);
            assert!(within_3_sigma(consts[i], n, 0.2), "layer {i}: {}", consts[i]);
        }
        assert_eq!(layerdrop_decision(4, 0.0, &mut rng).unwrap(), vec![false; 4]);
        assert_eq!(layerdrop_decision(4, 1.0, &mut rng).unwrap(), vec![true; 4]);
        assert_eq!(
            attn_layerdrop_plan(&[true, false]),
            vec![BlockPlan::Attend(MaskMatrix::AllDropped), BlockPlan::Attend(MaskMatrix::None)]
        );
        assert_eq!(layerdrop_plan(&[true]), vec![BlockPlan::Skip]);
    }

    #[test]
    fn schedule_examples() {
        let s = Schedule::constant(2, 0.6);
        for step in [0, 10, 100_000] {
            assert_eq!(schedule_probability(&s, 1, step).unwrap(), 0.6);
        }
        let s = Schedule::linear(0.6, &[-0.001]);
        assert_eq!(s.layers[0].at(1000), 0.0);
        assert_eq!(s.layers[0].at(600), 0.0);
        assert!((s.layers[0].at(300) - 0.3).abs() < 1e-15);
        let s = Schedule::new(vec![LayerSchedule {
            p0: 0.0,
            slope: 0.0,
            breakpoints: vec![(0, 0.55), (1000, 0.55)],
        }])
        .unwrap();
        assert_eq!(s.layers[0].at(500), 0.55);
        assert!(schedule_probability(&s, 1, 0).is_err());
    }

    #[test]
    fn breakpoints_interpolate_and_hold() {
        let l = LayerSchedule {
            p0: 0.0,
            slope: 0.0,
            breakpoints: vec![(10, 0.2), (20, 0.6), (40, 0.1)],
        };
        assert_eq!(l.at(0), 0.2);
        assert_eq!(l.at(10), 0.2);
        assert!((l.at(15) - 0.4).abs() < 1e-15);
        assert_eq!(l.at(20), 0.6);
        assert!((l.at(30) - 0.35).abs() < 1e-15);
        assert_eq!(l.at(40), 0.1);
        assert_eq!(l.at(1000), 0.1);
        let bad = LayerSchedule {
            breakpoints: vec![(10, 0.2), (10, 0.3)],
            ..l
        };
        assert!(Schedule::new(vec![bad]).is_err());
    }

    #[test]
    fn parse_round_trip_and_errors() {
        let text = "# demo\nlayers 3\nlinear 0 0.6 -0.0005\nbreakpoint 1 0 0.55\nbreakpoint 1 1000 0.3 # end\n";
        let s = Schedule::parse(text).unwrap();
        assert_eq!(s.layers[0].slope, -0.0005);
        assert_eq!(s.layers[1].breakpoints, vec![(0, 0.55), (1000, 0.3)]);
        assert_eq!(s.layers[2], LayerSchedule::constant(0.0));
        assert_eq!(Schedule::parse(&s.to_text()).unwrap(), s);

        let cases = [
            ("linear 0 0.1 0\n", 1),
            ("layers 2\n\nlinear 2 0.1 0\n", 3),
            ("layers 2\nbreakpoint 0 5 0.1\nbreakpoint 0 5 0.2\n", 3),
            ("layers 2\nbreakpoint 0 5 1.2\n", 2),
            ("layers 2\nlinear 0 x 0\n", 2),
            ("layers 2\nfoo 1\n", 2),
            ("layers 2\nlinear 0 0.1\n", 2),
            ("layers 1\nlinear 0 0.1 0\nlinear 0 0.2 0\n", 3),
        ];
        for (text, line) in cases {
            match Schedule::parse(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn mask_trace_import() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        std::fs::write(
            &path,
            "dropout_step,layer,mean_drop_prob\n0,0,0.5\n0,1,0.4\n1,0,0.45\n1,1,0.42\n",
        )
        .unwrap();
        let s = Schedule::from_mask_trace(&path, 10).unwrap();
        assert_eq!(s.num_layers(), 2);
        assert_eq!(s.layers[0].breakpoints, vec![(0, 0.5), (10, 0.45)]);
        assert_eq!(s.breakpoint_steps(), vec![0, 10]);
    }

    proptest! {
        #[test]
        fn schedule_stays_in_unit_interval(
            p0 in -2.0f64..2.0,
            slope in -0.1f64..0.1,
            step in 0u64..100_000,
        ) {
            let p = LayerSchedule { p0, slope, breakpoints: Vec::new() }.at(step);
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn breakpoints_exact_and_bracketed(
            mut pts in proptest::collection::vec((0u64..10_000, 0.0f64..=1.0), 1..8),
            probe in 0u64..12_000,
        ) {
            pts.sort_by_key(|p| p.0);
            pts.dedup_by_key(|p| p.0);
            let l = LayerSchedule { p0: 0.0, slope: 0.0, breakpoints: pts.clone() };
            for &(s, p) in &pts {
                prop_assert_eq!(l.at(s), p);
            }
            let v = l.at(probe);
            let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            let hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-15 && v <= hi + 1e-15);
        }
    }
}
