//! Two-stage training and evaluation on synthetic scenes.
//!
//! Stage 1 trains everything except the frequency prompt generators. Stage 2
//! freezes backbone and decoder and trains the prompt generators and the head
//! at a lower learning rate.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{augment, make_batch, Batch, DistractorConfig, SyntheticSample};
use crate::error::{Error, Result};
use crate::head::{argmax_maps, HeadOutputs, TaskKind};
use crate::kernels::{use_precision, Precision};
use crate::layers::apply_stat_update;
use crate::loss::{class_weights, task_loss, LossReport, LossWeights, IGNORE};
use crate::metrics::{bda_metrics, binary_metrics, scd_confusion, scd_metrics, ConfusionMatrix, MetricRow};
use crate::model::{Model, ModelConfig};
use crate::optim::{clip_grad_norm, steplr, AdamW};
use crate::params::{Ctx, Mode, ParamGroup, ParamId, ParamStore};
use crate::rng::counter_u64;
use crate::tensor::Tensor;

/// Which stages a run executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageSelect {
    One,
    Two,
    Both,
}

/// Parameter groups updated in each stage.
pub fn stage_groups(stage: u8) -> &'static [ParamGroup] {
    match stage {
        1 => &[ParamGroup::Backbone, ParamGroup::Decoder, ParamGroup::Head],
        _ => &[ParamGroup::Fcpg, ParamGroup::Head],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Synthetic training scenes.
    pub samples: usize,
    /// Side length of each square scene.
    pub image_size: usize,
    pub batch_size: usize,
    /// Total optimizer steps across the selected stages.
    pub max_iters: u64,
    pub lr: f64,
    pub stage2_lr: f64,
    pub weight_decay: f64,
    pub stage: StageSelect,
    /// Fraction of `max_iters` given to stage 1 when both stages run.
    pub stage_split: f64,
    pub seed: u64,
    pub data_seed: u64,
    /// Step schedule period; `None` means a third of the stage-1 steps.
    pub steplr_period: Option<u64>,
    pub steplr_gamma: f64,
    pub augment: bool,
    pub grad_clip: Option<f64>,
    pub class_balance: bool,
    pub distractors: DistractorConfig,
    /// Width of the dense products during training steps.
    #[serde(default)]
    pub precision: Precision,
}

impl TrainConfig {
    /// Desk-scale defaults for `task`.
    pub fn toy(task: TaskKind) -> Self {
        Self {
            model: ModelConfig::toy(task),
            samples: 16,
            image_size: 32,
            batch_size: 4,
            max_iters: 2000,
            lr: 1e-4,
            stage2_lr: 1e-5,
            weight_decay: 5e-4,
            stage: StageSelect::Both,
            stage_split: 0.8,
            seed: 0,
            data_seed: 0,
            steplr_period: None,
            steplr_gamma: 0.5,
            augment: true,
            grad_clip: None,
            class_balance: true,
            distractors: DistractorConfig::default(),
            precision: Precision::F32,
        }
    }

    /// Published full-scale schedule (256² crops, 320k or 400k steps).
    /// Far beyond a CPU budget; kept so the settings remain expressible.
    pub fn full_scale(task: TaskKind) -> Self {
        let (batch, iters) = match task {
            TaskKind::Bcd => (22, 320_000),
            _ => (16, 400_000),
        };
        Self {
            image_size: 256,
            batch_size: batch,
            max_iters: iters,
            ..Self::toy(task)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0 && self.stage2_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.stage_split) {
            return Err(Error::Config(format!("stage split {} outside [0, 1]", self.stage_split)));
        }
        if self.steplr_period == Some(0) {
            return Err(Error::Config("step schedule period must be positive".into()));
        }
        Ok(())
    }

    /// `(stage, steps)` pairs in execution order.
    pub fn plan(&self) -> Vec<(u8, u64)> {
        let s1 = (self.max_iters as f64 * self.stage_split).round() as u64;
        match self.stage {
            StageSelect::One => vec![(1, s1)],
            StageSelect::Two => vec![(2, self.max_iters - s1)],
            StageSelect::Both => vec![(1, s1), (2, self.max_iters - s1)],
        }
    }

    fn stage1_steps(&self) -> u64 {
        (self.max_iters as f64 * self.stage_split).round() as u64
    }

    /// Learning rate of the `k`-th step within `stage`. Stage 1 follows the
    /// step schedule; stage 2 holds its lower rate constant.
    pub fn lr_at(&self, stage: u8, k: u64) -> f64 {
        match stage {
            1 => {
                let period = self.steplr_period.unwrap_or((self.stage1_steps() / 3).max(1));
                steplr(self.lr, k, period, self.steplr_gamma)
            }
            _ => self.stage2_lr,
        }
    }
}

/// Inverse-frequency class weights for every balanced loss term of `task`.
pub fn dataset_weights(task: TaskKind, data: &[SyntheticSample]) -> LossWeights {
    let cat = |f: &dyn Fn(&SyntheticSample) -> Vec<&Vec<usize>>| -> Vec<usize> {
        data.iter().flat_map(|s| f(s).into_iter().flatten().copied().collect::<Vec<_>>()).collect()
    };
    match task {
        TaskKind::Bcd => LossWeights::default(),
        TaskKind::Scd { classes } => LossWeights {
            change: Some(class_weights(&cat(&|s| vec![&s.labels.change]), 2)),
            sem: Some(class_weights(&cat(&|s| vec![&s.labels.sem_t1, &s.labels.sem_t2]), classes + 1)),
            ..Default::default()
        },
        TaskKind::Bda { levels } => LossWeights {
            loc: Some(class_weights(&cat(&|s| vec![&s.labels.loc]), 2)),
            dmg: Some(class_weights(&cat(&|s| vec![&s.labels.dmg]), levels + 1)),
            ..Default::default()
        },
    }
}

/// One line of the loss trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: u64,
    pub stage: u8,
    pub task: &'static str,
    pub lr: f64,
    pub loss: LossReport,
}

impl TraceRow {
    pub fn header(&self) -> String {
        let mut s = String::from("step\tstage\ttask\tlr");
        for (n, _) in &self.loss.components {
            s.push('\t');
            s.push_str(n);
        }
        s.push_str("\ttotal");
        s
    }

    pub fn line(&self) -> String {
        let mut s = format!("{}\t{}\t{}\t{:e}", self.step, self.stage, self.task, self.lr);
        for (_, v) in &self.loss.components {
            s.push_str(&format!("\t{v:.9e}"));
        }
        s.push_str(&format!("\t{:.9e}", self.loss.total));
        s
    }
}

/// Writes trace rows as TSV with a header before the first row.
pub struct TraceWriter<W: Write> {
    out: W,
    started: bool,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out, started: false }
    }

    pub fn write(&mut self, row: &TraceRow) -> std::io::Result<()> {
        if !self.started {
            writeln!(self.out, "{}", row.header())?;
            self.started = true;
        }
        writeln!(self.out, "{}", row.line())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Model, parameters and optimizer of an ongoing run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub step: u64,
    /// Stage currently or last trained (0 before any training).
    pub stage: u8,
    /// Steps taken within `stage`; drives its learning-rate schedule.
    pub stage_step: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let (model, params) = Model::new(&cfg.model, cfg.seed)?;
        Ok(Self {
            model,
            params,
            optimizer: AdamW::new(cfg.weight_decay),
            step: 0,
            stage: 0,
            stage_step: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let (model, _) = Model::new(&ck.model, 0)?;
        Ok(Self {
            model,
            params: ck.params,
            optimizer: ck.optimizer,
            step: ck.step,
            stage: ck.stage,
            stage_step: 0,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.cfg.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            stage: self.stage,
        }
    }
}

/// Batch-order permutation of epoch `e`.
fn epoch_order(n: usize, seed: u64, e: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(e + 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Sample indices of global step `step`.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    (0..batch)
        .map(|i| {
            let pos = step * batch as u64 + i as u64;
            let (e, k) = (pos / n as u64, (pos % n as u64) as usize);
            epoch_order(n, seed, e)[k]
        })
        .collect()
}

/// One optimizer step on `batch`; returns the loss report.
pub fn train_step(
    st: &mut TrainState,
    batch: &Batch,
    weights: &LossWeights,
    stage: u8,
    lr: f64,
    seed: u64,
    grad_clip: Option<f64>,
) -> Result<LossReport> {
    let groups = stage_groups(stage);
    let mut cx = Ctx::new(&st.params, Mode::Train { seed, step: st.step }).with_grad_groups(groups);
    let out = st.model.forward(&mut cx, &batch.pre, &batch.post)?;
    let (loss, report) = task_loss(&mut cx.g, &out.head, &batch.labels, weights)?;
    if !report.total.is_finite() {
        return Err(Error::Data(format!("non-finite loss at step {}", st.step)));
    }
    let bound = cx.bound_params();
    let updates = std::mem::take(&mut cx.stat_updates);
    let grads = cx.g.backward(loss)?;
    let mut list: Vec<(ParamId, Vec<f64>)> = bound
        .into_iter()
        .filter(|&(id, _)| {
            let e = st.params.get(id);
            e.trainable && groups.contains(&e.group)
        })
        .filter_map(|(id, v)| grads.get_raw(v).map(|g| (id, g.to_vec())))
        .collect();
    drop(cx);
    if let Some(c) = grad_clip {
        clip_grad_norm(&mut list, c);
    }
    st.optimizer.step(&mut st.params, &list, lr);
    for u in &updates {
        apply_stat_update(&mut st.params, u);
    }
    st.params.round_to_f32();
    st.step += 1;
    Ok(report)
}

/// Run `steps` steps of `stage`, passing every trace row to `sink`.
pub fn run_stage(
    st: &mut TrainState,
    data: &[SyntheticSample],
    cfg: &TrainConfig,
    stage: u8,
    steps: u64,
    sink: &mut dyn FnMut(&TraceRow) -> Result<()>,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if st.stage + 1 < stage {
        return Err(Error::Usage("stage 2 needs a model that completed stage 1".into()));
    }
    if st.stage != stage {
        st.optimizer = AdamW::new(cfg.weight_decay);
        st.stage = stage;
        st.stage_step = 0;
    }
    let task = st.model.cfg.task;
    let weights = if cfg.class_balance {
        dataset_weights(task, data)
    } else {
        LossWeights::default()
    };
    let bs = cfg.batch_size.min(data.len());
    let _precision = use_precision(cfg.precision);
    for _ in 0..steps {
        let idx = batch_indices(data.len(), bs, cfg.data_seed, st.step);
        let samples: Vec<SyntheticSample> = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                if cfg.augment {
                    augment(data[j].clone(), counter_u64(cfg.seed, st.step, 0xa5, i as u64))
                } else {
                    data[j].clone()
                }
            })
            .collect();
        let refs: Vec<&SyntheticSample> = samples.iter().collect();
        let batch = make_batch(&refs, task)?;
        let lr = cfg.lr_at(stage, st.stage_step);
        let step = st.step;
        let report = train_step(st, &batch, &weights, stage, lr, cfg.seed, cfg.grad_clip)?;
        st.stage_step += 1;
        sink(&TraceRow {
            step,
            stage,
            task: task.name(),
            lr,
            loss: report,
        })?;
    }
    Ok(())
}

/// Run every stage in `cfg.plan()`. Stage 2 alone requires `init`.
pub fn train(
    cfg: &TrainConfig,
    data: &[SyntheticSample],
    init: Option<Checkpoint>,
    sink: &mut dyn FnMut(&TraceRow) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    let mut st = match init {
        Some(ck) => {
            if ck.model.task != cfg.model.task {
                return Err(Error::Config(format!(
                    "checkpoint is for {}, run is for {}",
                    ck.model.task.name(),
                    cfg.model.task.name()
                )));
            }
            TrainState::from_checkpoint(ck)?
        }
        None if cfg.stage == StageSelect::Two => {
            return Err(Error::Usage("stage 2 needs a stage-1 checkpoint".into()));
        }
        None => TrainState::new(cfg)?,
    };
    for (stage, steps) in cfg.plan() {
        run_stage(&mut st, data, cfg, stage, steps, sink)?;
    }
    Ok(st)
}

/// Per-pixel predictions for a batch, flattened in `N, H, W` order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Predictions {
    pub change: Vec<usize>,
    /// Softmax probability of the changed (or building) class.
    pub change_prob: Vec<f64>,
    pub sem_t1: Vec<usize>,
    pub sem_t2: Vec<usize>,
    pub loc: Vec<usize>,
    pub dmg: Vec<usize>,
}

fn positive_prob(t: &Tensor) -> Vec<f64> {
    let s = t.shape();
    let (n, hw) = (s[0], s[2] * s[3]);
    let d = t.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let (a, c) = (d[(b * 2) * hw + p], d[(b * 2 + 1) * hw + p]);
            out.push(1.0 / (1.0 + (a - c).exp()));
        }
    }
    out
}

/// Evaluation-mode forward pass and argmax decoding.
pub fn predict(model: &Model, params: &ParamStore, batch: &Batch) -> Result<Predictions> {
    let mut cx = Ctx::new(params, Mode::Eval).with_grad_groups(&[]);
    let out = model.forward(&mut cx, &batch.pre, &batch.post)?;
    let flat = |v: Vec<Vec<usize>>| v.into_iter().flatten().collect::<Vec<_>>();
    let val = |var| cx.g.value(var);
    let mut p = Predictions::default();
    match out.head {
        HeadOutputs::Bcd { change } => {
            p.change = flat(argmax_maps(val(change)));
            p.change_prob = positive_prob(val(change));
        }
        HeadOutputs::Scd { change, sem_t1, sem_t2 } => {
            p.change = flat(argmax_maps(val(change)));
            p.change_prob = positive_prob(val(change));
            p.sem_t1 = flat(argmax_maps(val(sem_t1)));
            p.sem_t2 = flat(argmax_maps(val(sem_t2)));
        }
        HeadOutputs::Bda { loc, dmg } => {
            p.loc = flat(argmax_maps(val(loc)));
            p.change_prob = positive_prob(val(loc));
            p.dmg = flat(argmax_maps(val(dmg)));
        }
    }
    Ok(p)
}

/// Named metric values plus any degeneracy flags.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub task: &'static str,
    pub metrics: Vec<(String, f64)>,
    pub flags: Vec<String>,
}

impl Evaluation {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn rows(&self, dataset: &str) -> Vec<MetricRow> {
        self.metrics
            .iter()
            .map(|(m, v)| MetricRow::new(dataset, self.task, m, *v))
            .collect()
    }
}

/// Score `model` on `data` in batches of `batch_size`.
pub fn evaluate(model: &Model, params: &ParamStore, data: &[SyntheticSample], batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let task = model.cfg.task;
    let mut all = Predictions::default();
    let mut refs = crate::data::SampleLabels {
        change: vec![],
        sem_t1: vec![],
        sem_t2: vec![],
        loc: vec![],
        dmg: vec![],
    };
    for chunk in data.chunks(batch_size.max(1)) {
        let r: Vec<&SyntheticSample> = chunk.iter().collect();
        let b = make_batch(&r, task)?;
        let p = predict(model, params, &b)?;
        all.change.extend(p.change);
        all.sem_t1.extend(p.sem_t1);
        all.sem_t2.extend(p.sem_t2);
        all.loc.extend(p.loc);
        all.dmg.extend(p.dmg);
        for s in chunk {
            refs.change.extend(&s.labels.change);
            refs.sem_t1.extend(&s.labels.sem_t1);
            refs.sem_t2.extend(&s.labels.sem_t2);
            refs.loc.extend(&s.labels.loc);
            refs.dmg.extend(&s.labels.dmg);
        }
    }
    let mut metrics = Vec::new();
    let mut flags = Vec::new();
    let mut push = |n: &str, v: f64| metrics.push((n.to_string(), v));
    match task {
        TaskKind::Bcd => {
            let m = binary_metrics(&ConfusionMatrix::from_labels(2, &refs.change, &all.change)?);
            push("precision", m.precision);
            push("recall", m.recall);
            push("f1", m.f1);
            push("iou", m.iou);
            if m.degenerate {
                flags.push("binary".into());
            }
        }
        TaskKind::Scd { classes } => {
            let cm = scd_confusion(classes + 1, &all.change, &all.sem_t1, &all.sem_t2, &refs.sem_t1, &refs.sem_t2)?;
            let m = scd_metrics(&cm);
            let b = binary_metrics(&ConfusionMatrix::from_labels(2, &refs.change, &all.change)?);
            push("oa", m.oa);
            push("miou", m.miou);
            push("sek", m.sek);
            push("f1_scd", m.f1_scd);
            push("change_f1", b.f1);
            if m.degenerate {
                flags.push("semantic".into());
            }
        }
        TaskKind::Bda { levels } => {
            let m = bda_metrics(levels, &refs.loc, &all.loc, &refs.dmg, &all.dmg)?;
            push("f1_loc", m.f1_loc);
            for (i, c) in m.per_class.iter().enumerate() {
                match c {
                    Some(v) => push(&format!("f1_level{}", i + 1), *v),
                    None => flags.push(format!("level{} absent", i + 1)),
                }
            }
            push("f1_clf", m.f1_clf);
            push("f1_overall", m.f1_overall);
        }
    }
    debug_assert!(refs.dmg.iter().all(|&d| d == IGNORE || d <= 16));
    Ok(Evaluation {
        task: task.name(),
        metrics,
        flags,
    })
}

/// Mean predicted change probability over pixels where only a pseudo-change
/// distractor acted. `None` when the data contain no such pixel.
pub fn distractor_activation(
    model: &Model,
    params: &ParamStore,
    data: &[SyntheticSample],
    batch_size: usize,
) -> Result<Option<f64>> {
    let (mut sum, mut n) = (0.0, 0usize);
    for chunk in data.chunks(batch_size.max(1)) {
        let r: Vec<&SyntheticSample> = chunk.iter().collect();
        let b = make_batch(&r, model.cfg.task)?;
        let p = predict(model, params, &b)?;
        let mask: Vec<bool> = chunk.iter().flat_map(|s| s.distractor_only()).collect();
        for (&m, &v) in mask.iter().zip(&p.change_prob) {
            if m {
                sum += v;
                n += 1;
            }
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}
