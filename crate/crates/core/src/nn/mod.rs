//! Parameterised layers and the architectural blocks built from them.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`] rather than tensors, so a
//! model is plain data that can be checkpointed, while a [`Session`] binds
//! the stored values to a [`Tape`] for one forward pass.

mod blocks;

use std::cell::{Cell, RefCell};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use blocks::{
    AttentionMode, BlockConfig, Downsample, Epa, KernelMode, MixBlock, Msplck, PaGate, ResidualSource, SkFusion,
    Upsample,
};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, ConvSpec, Gradients, RunningStats, Shape, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatId(usize);

impl StatId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Registry of every learnable tensor and batch-norm state of a model, in
/// creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    stats: Vec<(String, RunningStats)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, stats: RunningStats) -> StatId {
        self.stats.push((name.into(), stats));
        StatId(self.stats.len() - 1)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn stats(&self) -> &[(String, RunningStats)] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [(String, RunningStats)] {
        &mut self.stats
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total element count over all parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Zeroes the weights and bias of `conv`.
    pub fn zero_conv(&mut self, conv: &Conv) {
        for id in std::iter::once(conv.weight).chain(conv.bias) {
            self.params[id.0].value.data_mut().fill(0.0);
        }
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }
}

/// Creates layers inside a store with seeded initialisation and dotted
/// parameter paths.
pub struct Builder<'s> {
    store: &'s mut ParamStore,
    rng: ChaCha8Rng,
    path: Vec<String>,
    trainable: bool,
}

impl<'s> Builder<'s> {
    pub fn new(store: &'s mut ParamStore, seed: u64) -> Self {
        Builder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            path: Vec::new(),
            trainable: true,
        }
    }

    /// Parameters created from here on are registered frozen.
    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn scoped<R>(&mut self, name: impl AsRef<str>, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.path.push(name.as_ref().to_owned());
        let out = f(self);
        self.path.pop();
        out
    }

    fn name(&self, leaf: &str) -> String {
        let mut s = self.path.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, bias zero.
    pub fn conv(&mut self, name: &str, spec: ConvSpec, bias: bool) -> Result<Conv> {
        spec.validate()?;
        let ws = spec.weight_shape();
        let fan_in = (ws.c * ws.h * ws.w) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let w = Tensor::uniform(ws, -bound, bound, &mut self.rng)?;
        let weight = self
            .store
            .add_param(self.name(&format!("{name}.weight")), w, self.trainable);
        let bias = if bias {
            let b = Tensor::zeros(Shape::new(1, spec.out_channels, 1, 1))?;
            Some(
                self.store
                    .add_param(self.name(&format!("{name}.bias")), b, self.trainable),
            )
        } else {
            None
        };
        Ok(Conv { spec, weight, bias })
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Result<BatchNorm> {
        let affine = Shape::new(1, channels, 1, 1);
        let gamma = self.store.add_param(
            self.name(&format!("{name}.gamma")),
            Tensor::ones(affine)?,
            self.trainable,
        );
        let beta = self.store.add_param(
            self.name(&format!("{name}.beta")),
            Tensor::zeros(affine)?,
            self.trainable,
        );
        let stats = self
            .store
            .add_stats(self.name(&format!("{name}.stats")), RunningStats::identity(channels));
        Ok(BatchNorm { gamma, beta, stats })
    }

    pub fn zero(&mut self, conv: &Conv) {
        self.store.zero_conv(conv);
    }
}

/// Binds a store's values to a tape for one forward pass.
///
/// Trainable parameters become tracked leaves when the tape records.
/// Batch-norm state is copied in and handed back by [`Session::into_stats`].
pub struct Session<'t> {
    tape: &'t Tape,
    params: Vec<Var<'t>>,
    stats: RefCell<Vec<RunningStats>>,
    bn_mode: BatchNormMode,
    macs: Cell<u64>,
}

impl<'t> Session<'t> {
    pub fn new(tape: &'t Tape, store: &ParamStore, bn_mode: BatchNormMode) -> Self {
        let params = store
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Session {
            tape,
            params,
            stats: RefCell::new(store.stats.iter().map(|(_, s)| s.clone()).collect()),
            bn_mode,
            macs: Cell::new(0),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn bn_mode(&self) -> BatchNormMode {
        self.bn_mode
    }

    pub fn param(&self, id: ParamId) -> &Var<'t> {
        &self.params[id.0]
    }

    /// Replaces the bound value of one parameter, e.g. with a leaf owned by
    /// a gradient checker.
    pub fn bind(&mut self, id: ParamId, v: Var<'t>) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.shape() != v.shape() {
            return Err(Error::ShapeMismatch {
                op: "Session::bind",
                left: slot.shape(),
                right: v.shape(),
            });
        }
        *slot = v;
        Ok(())
    }

    pub fn input(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Multiply-accumulates performed so far by counted ops.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub(crate) fn count(&self, macs: u64) {
        self.macs.set(self.macs.get() + macs);
    }

    /// `a * gate`, counted as one multiply per output element.
    pub fn gate(&self, a: &Var<'t>, gate: &Var<'t>) -> Result<Var<'t>> {
        let out = a.mul(gate)?;
        self.count(out.shape().numel() as u64);
        Ok(out)
    }

    /// Per-parameter gradients in store order (`None` for frozen ones).
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.params
            .iter()
            .map(|v| {
                v.is_tracked().then(|| {
                    grads
                        .take(v)
                        .unwrap_or_else(|| Tensor::from_parts(v.shape(), vec![0.0; v.shape().numel()]))
                })
            })
            .collect()
    }

    pub fn into_stats(self) -> Vec<RunningStats> {
        self.stats.into_inner()
    }

    /// Writes updated batch-norm state back into `store`.
    pub fn commit_stats(self, store: &mut ParamStore) {
        for ((_, dst), src) in store.stats.iter_mut().zip(self.stats.into_inner()) {
            *dst = src;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    pub fn forward<'t>(&self, s: &Session<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let xs = x.shape();
        if xs.c != self.spec.in_channels {
            return Err(Error::DimMismatch {
                op: "conv2d",
                dim: "input channels",
                expected: self.spec.in_channels,
                actual: xs.c,
            });
        }
        let y = x.conv2d(s.param(self.weight), self.bias.map(|b| s.param(b)), &self.spec)?;
        s.count(self.spec.macs(xs.n, xs.h, xs.w));
        Ok(y)
    }

    pub fn param_count(&self) -> usize {
        self.spec.weight_shape().numel() + self.bias.map_or(0, |_| self.spec.out_channels)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatId,
}

impl BatchNorm {
    pub fn forward<'t>(&self, s: &Session<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let mut stats = s.stats.borrow_mut();
        x.batch_norm(
            s.param(self.gamma),
            s.param(self.beta),
            &mut stats[self.stats.0],
            s.bn_mode,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_paths_and_init_bounds() {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, 1);
        let conv = b
            .scoped("stage0", |b| {
                b.scoped("blk", |b| b.conv("pw", ConvSpec::pointwise(16, 8), true))
            })
            .unwrap();
        assert_eq!(store.param(conv.weight).name, "stage0.blk.pw.weight");
        assert_eq!(store.param(conv.bias.unwrap()).name, "stage0.blk.pw.bias");
        let w = &store.param(conv.weight).value;
        assert!(w.max() <= 0.25 && w.min() >= -0.25);
        assert!(store.param(conv.bias.unwrap()).value.data().iter().all(|&v| v == 0.0));
        assert_eq!(store.count(), conv.param_count());
    }

    #[test]
    fn same_seed_same_weights() {
        let build = |seed| {
            let mut store = ParamStore::new();
            Builder::new(&mut store, seed)
                .conv("c", ConvSpec::new(3, 4, 3), false)
                .unwrap();
            store
        };
        assert_eq!(build(5), build(5));
        assert_ne!(build(5), build(6));
    }

    #[test]
    fn session_tracks_only_trainable() {
        let mut store = ParamStore::new();
        let a = store.add_param("a", Tensor::scalar(1.0), true);
        let b = store.add_param("b", Tensor::scalar(2.0), false);
        let tape = Tape::new();
        let s = Session::new(&tape, &store, BatchNormMode::Train);
        assert!(s.param(a).is_tracked());
        assert!(!s.param(b).is_tracked());
        let loss = s.param(a).mul(s.param(b)).unwrap();
        let mut grads = tape.backward(&loss).unwrap();
        let g = s.param_grads(&mut grads);
        assert_eq!(g[0].as_ref().unwrap().data(), &[2.0]);
        assert!(g[1].is_none());
    }

    #[test]
    fn conv_layer_counts_macs_and_checks_channels() {
        let mut store = ParamStore::new();
        let conv = Builder::new(&mut store, 0)
            .conv("c", ConvSpec::new(2, 3, 3).padding(1), true)
            .unwrap();
        let tape = Tape::no_grad();
        let s = Session::new(&tape, &store, BatchNormMode::Eval);
        let x = s.input(Tensor::ones(Shape::new(1, 2, 4, 4)).unwrap());
        conv.forward(&s, &x).unwrap();
        assert_eq!(s.macs(), 3 * 2 * 9 * 16);
        let bad = s.input(Tensor::ones(Shape::new(1, 5, 4, 4)).unwrap());
        assert!(matches!(
            conv.forward(&s, &bad),
            Err(Error::DimMismatch {
                dim: "input channels",
                expected: 2,
                actual: 5,
                ..
            })
        ));
    }

    #[test]
    fn batch_norm_state_is_committed() {
        let mut store = ParamStore::new();
        let bn = Builder::new(&mut store, 0).batch_norm("bn", 1).unwrap();
        let tape = Tape::no_grad();
        let s = Session::new(&tape, &store, BatchNormMode::Train);
        let x = s.input(Tensor::new(Shape::new(1, 1, 1, 2), vec![1.0, 3.0]).unwrap());
        bn.forward(&s, &x).unwrap();
        s.commit_stats(&mut store);
        assert!((store.stats()[bn.stats.index()].1.mean[0] - 0.2).abs() < 1e-15);
    }
}
