//! Unified prediction head and the task-specific output layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{BatchNorm, Conv2d, Dropout};
use crate::params::{Ctx, ParamBuilder, ParamGroup};
use crate::scan::ConcatMode;
use crate::tensor::Tensor;

/// Feature dropping probability inside the shared head.
pub const HEAD_DROPOUT: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Binary change detection.
    Bcd,
    /// Semantic change detection with `classes` land-cover classes.
    Scd { classes: usize },
    /// Building damage assessment with `levels` damage grades.
    Bda { levels: usize },
}

impl TaskKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskKind::Scd { classes } if classes < 2 => {
                Err(Error::Config(format!("semantic change needs at least 2 classes, got {classes}")))
            }
            TaskKind::Bda { levels } if levels < 2 => {
                Err(Error::Config(format!("damage assessment needs at least 2 levels, got {levels}")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Bcd => "bcd",
            TaskKind::Scd { .. } => "scd",
            TaskKind::Bda { .. } => "bda",
        }
    }

    /// Stable one-byte tag used in checkpoints.
    pub fn tag(&self) -> u8 {
        match self {
            TaskKind::Bcd => 1,
            TaskKind::Scd { .. } => 2,
            TaskKind::Bda { .. } => 3,
        }
    }
}

/// Task logits at single-image resolution `[N, ·, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadOutputs {
    Bcd { change: Var },
    Scd { change: Var, sem_t1: Var, sem_t2: Var },
    Bda { loc: Var, dmg: Var },
}

impl HeadOutputs {
    pub fn task_name(&self) -> &'static str {
        match self {
            HeadOutputs::Bcd { .. } => "bcd",
            HeadOutputs::Scd { .. } => "scd",
            HeadOutputs::Bda { .. } => "bda",
        }
    }

    /// All output variables with their names.
    pub fn named(&self) -> Vec<(&'static str, Var)> {
        match *self {
            HeadOutputs::Bcd { change } => vec![("change", change)],
            HeadOutputs::Scd { change, sem_t1, sem_t2 } => {
                vec![("change", change), ("sem_t1", sem_t1), ("sem_t2", sem_t2)]
            }
            HeadOutputs::Bda { loc, dmg } => vec![("loc", loc), ("dmg", dmg)],
        }
    }
}

/// `Z₁ = dropout(relu(bn(conv3×3 x)))`, `Z₂ = relu(bn(conv3×3 Z₁))`.
#[derive(Clone, Debug)]
pub struct UnifiedHead {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub drop: Dropout,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
}

impl UnifiedHead {
    pub fn new(pb: &mut ParamBuilder, cin: usize, hidden: usize) -> Self {
        Self {
            conv1: Conv2d::new(pb, "conv1", cin, hidden, 3, false),
            bn1: BatchNorm::new(pb, "bn1", hidden),
            drop: Dropout::new(pb, HEAD_DROPOUT),
            conv2: Conv2d::new(pb, "conv2", hidden, hidden / 2, 3, false),
            bn2: BatchNorm::new(pb, "bn2", hidden / 2),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let z = self.conv1.forward(cx, x)?;
        let z = self.bn1.forward(cx, z)?;
        let z = cx.g.relu(z);
        let z = self.drop.forward(cx, z)?;
        let z = self.conv2.forward(cx, z)?;
        let z = self.bn2.forward(cx, z)?;
        Ok(cx.g.relu(z))
    }
}

#[derive(Clone, Debug)]
pub enum TaskLayers {
    Bcd { change: Conv2d },
    Scd { change: Conv2d, sem_t1: Conv2d, sem_t2: Conv2d },
    Bda { loc: Conv2d, dmg: Conv2d },
}

/// Shared head plus the task output convolutions; all in [`ParamGroup::Head`].
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub task: TaskKind,
    pub concat: ConcatMode,
    pub shared: UnifiedHead,
    pub layers: TaskLayers,
}

impl PredictionHead {
    pub fn new(pb: &mut ParamBuilder, task: TaskKind, concat: ConcatMode, cin: usize, hidden: usize) -> Result<Self> {
        task.validate()?;
        if hidden < 2 || !hidden.is_multiple_of(2) {
            return Err(Error::Config(format!("head width {hidden} must be even and at least 2")));
        }
        let c = hidden / 2;
        Ok(pb.in_group(ParamGroup::Head, |pb| {
            pb.scope("head", |pb| {
                let shared = UnifiedHead::new(pb, cin, hidden);
                let layers = match task {
                    TaskKind::Bcd => TaskLayers::Bcd {
                        change: Conv2d::new(pb, "change", c, 2, 1, true),
                    },
                    TaskKind::Scd { classes } => TaskLayers::Scd {
                        change: Conv2d::new(pb, "change", c, 2, 1, true),
                        sem_t1: Conv2d::new(pb, "sem_t1", c, classes + 1, 1, true),
                        sem_t2: Conv2d::new(pb, "sem_t2", c, classes + 1, 1, true),
                    },
                    TaskKind::Bda { levels } => TaskLayers::Bda {
                        loc: Conv2d::new(pb, "loc", c, 2, 1, true),
                        dmg: Conv2d::new(pb, "dmg", c, levels + 1, 1, true),
                    },
                };
                Self {
                    task,
                    concat,
                    shared,
                    layers,
                }
            })
        }))
    }

    /// Left and right halves of a horizontally concatenated plane, or the
    /// plane itself twice in channel-concatenation mode.
    fn halves(&self, cx: &mut Ctx, z: Var) -> Result<(Var, Var)> {
        match self.concat {
            ConcatMode::Horizontal => crate::scan::split_halves_var(&mut cx.g, z),
            ConcatMode::Channel => Ok((z, z)),
        }
    }

    /// Change logits: one 1×1 convolution, averaged over the temporal halves.
    fn change_logits(&self, cx: &mut Ctx, conv: &Conv2d, z: Var) -> Result<Var> {
        let y = conv.forward(cx, z)?;
        match self.concat {
            ConcatMode::Horizontal => {
                let (l, r) = crate::scan::split_halves_var(&mut cx.g, y)?;
                let s = cx.g.add(l, r)?;
                Ok(cx.g.scale(s, 0.5))
            }
            ConcatMode::Channel => Ok(y),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, feat: Var) -> Result<HeadOutputs> {
        let z = self.shared.forward(cx, feat)?;
        match &self.layers {
            TaskLayers::Bcd { change } => Ok(HeadOutputs::Bcd {
                change: self.change_logits(cx, change, z)?,
            }),
            TaskLayers::Scd { change, sem_t1, sem_t2 } => {
                let change = self.change_logits(cx, change, z)?;
                let (l, r) = self.halves(cx, z)?;
                let s1 = sem_t1.forward(cx, l)?;
                let s2 = sem_t2.forward(cx, r)?;
                let p = change_probability(cx, change)?;
                Ok(HeadOutputs::Scd {
                    change,
                    sem_t1: suppress_background(cx, s1, p)?,
                    sem_t2: suppress_background(cx, s2, p)?,
                })
            }
            TaskLayers::Bda { loc, dmg } => {
                let (l, r) = self.halves(cx, z)?;
                Ok(HeadOutputs::Bda {
                    loc: loc.forward(cx, l)?,
                    dmg: dmg.forward(cx, r)?,
                })
            }
        }
    }
}

/// Detached probability of the changed class, `[N, 1, H, W]`.
pub fn change_probability(cx: &mut Ctx, change_logits: Var) -> Result<Var> {
    let p = cx.g.softmax(change_logits)?;
    let p = cx.g.slice(p, 1, 1, 1)?;
    Ok(cx.g.detach(p))
}

/// Multiply the foreground logits (channels `1..`) by the gate `p`; channel 0 passes through.
pub fn suppress_background(cx: &mut Ctx, logits: Var, p: Var) -> Result<Var> {
    let k = cx.g.shape(logits)[1];
    let bg = cx.g.slice(logits, 1, 0, 1)?;
    let fg = cx.g.slice(logits, 1, 1, k - 1)?;
    let fg = cx.g.mul(fg, p)?;
    cx.g.concat(&[bg, fg], 1)
}

/// Per-pixel argmax over axis 1 of `[N, K, H, W]` logits → `N` maps of `H·W` labels.
pub fn argmax_maps(t: &Tensor) -> Vec<Vec<usize>> {
    let s = t.shape();
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    let d = t.data();
    (0..n)
        .map(|b| {
            (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[(b * k + c) * hw + p] > d[(b * k + best) * hw + p] {
                            best = c;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect()
}
