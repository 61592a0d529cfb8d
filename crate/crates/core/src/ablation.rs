//! Controlled comparisons of the full model against one removed or altered component.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::data::{dataset_digest, generate_dataset, SyntheticSample};
use crate::error::{Error, Result};
use crate::fcpg::ThresholdMode;
use crate::scan::ConcatMode;
use crate::train::{distractor_activation, evaluate, train, Evaluation, TrainConfig, TraceRow};

/// Data seed offset of the held-out pseudo-change benchmark.
pub const BENCHMARK_SEED_OFFSET: u64 = 1_000_003;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    NoFcpg,
    NoSpm,
    FixedThresholds,
    SingleThreshold,
    ChannelConcat,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        Self::NoFcpg,
        Self::NoSpm,
        Self::FixedThresholds,
        Self::SingleThreshold,
        Self::ChannelConcat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::NoFcpg => "no-fcpg",
            Self::NoSpm => "no-spm",
            Self::FixedThresholds => "fixed-thresholds",
            Self::SingleThreshold => "single-threshold",
            Self::ChannelConcat => "channel-concat",
        }
    }

    /// The variant configuration; everything else, seeds included, is kept.
    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        let enc = &mut c.model.encoder;
        match self {
            Self::NoFcpg => enc.fcpg_enabled = false,
            Self::NoSpm => enc.fcpg.spm = false,
            Self::FixedThresholds => enc.fcpg.thresholds = ThresholdMode::Fixed,
            Self::SingleThreshold => enc.fcpg.thresholds = ThresholdMode::Single,
            Self::ChannelConcat => c.model = c.model.with_concat(ConcatMode::Channel),
        }
        c
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
                Error::Usage(format!("unknown ablation axis {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantResult {
    pub variant: String,
    /// Metrics on the training scenes.
    pub train: Evaluation,
    /// Mean change probability on distractor-only pixels of the benchmark.
    pub distractor_activation: Option<f64>,
    pub train_digest: u64,
    pub benchmark_digest: u64,
}

/// Training scenes and the held-out pseudo-change benchmark of `cfg`.
pub fn ablation_data(cfg: &TrainConfig) -> Result<(Vec<SyntheticSample>, Vec<SyntheticSample>)> {
    let task = cfg.model.task;
    let s = cfg.image_size;
    let train = generate_dataset(task, cfg.samples, s, s, cfg.data_seed, &cfg.distractors)?;
    let bench = generate_dataset(
        task,
        cfg.samples,
        s,
        s,
        cfg.data_seed.wrapping_add(BENCHMARK_SEED_OFFSET),
        &cfg.distractors,
    )?;
    Ok((train, bench))
}

/// Train and score one configuration.
pub fn run_variant(
    name: &str,
    cfg: &TrainConfig,
    train_set: &[SyntheticSample],
    bench: &[SyntheticSample],
    sink: &mut dyn FnMut(&TraceRow) -> Result<()>,
) -> Result<VariantResult> {
    let st = train(cfg, train_set, None, sink)?;
    Ok(VariantResult {
        variant: name.to_string(),
        train: evaluate(&st.model, &st.params, train_set, cfg.batch_size)?,
        distractor_activation: distractor_activation(&st.model, &st.params, bench, cfg.batch_size)?,
        train_digest: dataset_digest(train_set),
        benchmark_digest: dataset_digest(bench),
    })
}

/// Full model first, then the variant, both on the same data and seeds.
pub fn run_ablation(
    cfg: &TrainConfig,
    axis: AblationAxis,
    sink: &mut dyn FnMut(&str, &TraceRow) -> Result<()>,
) -> Result<Vec<VariantResult>> {
    let (train_set, bench) = ablation_data(cfg)?;
    let mut out = Vec::new();
    for (name, c) in [("full", cfg.clone()), (axis.name(), axis.apply(cfg))] {
        let mut s = |r: &TraceRow| sink(name, r);
        out.push(run_variant(name, &c, &train_set, &bench, &mut s)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::TaskKind;

    #[test]
    fn axis_names_round_trip() {
        for a in AblationAxis::ALL {
            assert_eq!(a.name().parse::<AblationAxis>().unwrap(), a);
        }
        assert!(matches!("no-such".parse::<AblationAxis>(), Err(Error::Usage(_))));
    }

    #[test]
    fn variants_keep_seeds() {
        let cfg = TrainConfig::toy(TaskKind::Bcd);
        for a in AblationAxis::ALL {
            let v = a.apply(&cfg);
            assert_eq!((v.seed, v.data_seed), (cfg.seed, cfg.data_seed));
            v.validate().unwrap();
        }
        assert!(!AblationAxis::NoFcpg.apply(&cfg).model.encoder.fcpg_enabled);
    }
}
