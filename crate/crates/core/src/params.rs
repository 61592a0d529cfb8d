//! Named parameter storage, partitioned into the groups the two-stage
//! training schedule freezes and releases.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Partition of the model's parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Encoder parameters outside the frequency prompt generators.
    Backbone,
    /// Frequency change prompt generator parameters.
    Fcpg,
    Decoder,
    /// Unified prediction head and task-specific output layers.
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Backbone,
        ParamGroup::Fcpg,
        ParamGroup::Decoder,
        ParamGroup::Head,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
    /// `false` for running statistics, which are updated outside the optimizer.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of scalar values in trainable entries of `group`.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group && e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Order-sensitive FNV-1a digest over names and bit patterns of `group`.
    pub fn digest(&self, group: Option<ParamGroup>) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for e in self.entries.iter().filter(|e| group.is_none_or(|g| e.group == g)) {
            feed(e.name.as_bytes());
            for v in e.value.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            e.value.round_to_f32();
        }
    }
}

/// Builds a [`ParamStore`] with hierarchical names and seeded initialization.
pub struct ParamBuilder {
    store: ParamStore,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
    group: ParamGroup,
    next_layer: u64,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
            group: ParamGroup::Backbone,
            next_layer: 0,
        }
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }

    /// Run `f` with `name` pushed onto the naming prefix.
    pub fn scope<T>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.into());
        let r = f(self);
        self.prefix.pop();
        r
    }

    /// Run `f` with parameters assigned to `group`.
    pub fn in_group<T>(&mut self, group: ParamGroup, f: impl FnOnce(&mut Self) -> T) -> T {
        let prev = std::mem::replace(&mut self.group, group);
        let r = f(self);
        self.group = prev;
        r
    }

    /// Stable identifier for stochastic layers (dropout, drop-path).
    pub fn layer_id(&mut self) -> u64 {
        self.next_layer += 1;
        self.next_layer
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.push(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.push(name, value, false)
    }

    fn push(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        let name = self.full_name(name);
        assert!(self.store.find(&name).is_none(), "duplicate parameter {name}");
        self.store.entries.push(ParamEntry {
            name,
            value,
            group: self.group,
            trainable,
        });
        ParamId(self.store.entries.len() - 1)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.gen_range(-bound..=bound))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Whether the forward pass is a training step (stochastic layers active,
/// batch statistics) or an evaluation pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64, step: u64 },
    Eval,
}

/// Pending running-statistics update produced by a batch-norm layer in training mode.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean_buf: ParamId,
    pub var_buf: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Forward-pass context: the record under construction plus bound parameters.
pub struct Ctx<'a> {
    pub g: Graph,
    pub params: &'a ParamStore,
    pub mode: Mode,
    bound: Vec<Option<Var>>,
    grad_groups: Vec<ParamGroup>,
    pub stat_updates: Vec<StatUpdate>,
}

impl<'a> Ctx<'a> {
    /// Context in which every trainable parameter requires a gradient.
    pub fn new(params: &'a ParamStore, mode: Mode) -> Self {
        Self {
            g: Graph::new(),
            params,
            mode,
            bound: vec![None; params.len()],
            grad_groups: ParamGroup::ALL.to_vec(),
            stat_updates: Vec::new(),
        }
    }

    /// Restrict gradient tracking to parameters in `groups`.
    pub fn with_grad_groups(mut self, groups: &[ParamGroup]) -> Self {
        self.grad_groups = groups.to_vec();
        self
    }

    pub fn is_train(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    /// Graph leaf for parameter `id`, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = self.params.get(id);
        let rg = e.trainable && self.grad_groups.contains(&e.group);
        let v = self.g.leaf(e.value.clone(), rg);
        self.bound[id.0] = Some(v);
        v
    }

    /// `(param, var)` for every parameter bound in this pass.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_follow_scopes_and_groups() {
        let mut b = ParamBuilder::new(0);
        b.scope("encoder", |b| {
            b.add("w", Tensor::ones(&[2]));
            b.in_group(ParamGroup::Fcpg, |b| b.scope("fcpg", |b| b.add("alpha", Tensor::scalar(0.1))));
        });
        let s = b.finish();
        assert_eq!(s.get(ParamId(0)).name, "encoder.w");
        assert_eq!(s.get(ParamId(1)).name, "encoder.fcpg.alpha");
        assert_eq!(s.get(ParamId(1)).group, ParamGroup::Fcpg);
        assert_eq!(s.count(ParamGroup::Backbone), 2);
    }

    #[test]
    fn digest_tracks_bit_changes() {
        let mut b = ParamBuilder::new(0);
        let id = b.add("w", Tensor::ones(&[3]));
        let mut s = b.finish();
        let d0 = s.digest(None);
        s.value_mut(id).data_mut()[1] = 1.0 + f64::EPSILON;
        assert_ne!(d0, s.digest(None));
    }

    #[test]
    fn ctx_binds_each_param_once() {
        let mut b = ParamBuilder::new(0);
        let id = b.add("w", Tensor::ones(&[3]));
        let s = b.finish();
        let mut cx = Ctx::new(&s, Mode::Eval);
        let a = cx.p(id);
        assert_eq!(a, cx.p(id));
        assert!(cx.g.needs_grad(a));
        let mut cx = Ctx::new(&s, Mode::Eval).with_grad_groups(&[ParamGroup::Head]);
        let a = cx.p(id);
        assert!(!cx.g.needs_grad(a));
    }
}
