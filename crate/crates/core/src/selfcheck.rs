//! Central-difference checks of every differentiable op, the network
//! blocks, the contrastive loss and the whole network.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::network::{Model, ModelConfig, Preset};
use crate::nn::{
    AttentionMode, BlockConfig, Builder, Downsample, Epa, MixBlock, Msplck, ParamStore, Session, SkFusion, Upsample,
};
use crate::tensor::{concat_channels, BatchNormMode, ConvSpec, GradCheck, RunningStats, Shape, Tape, Tensor, Var};
use crate::training::{contrastive_loss, FrozenExtractor, LossConfig, EXTRACTOR_SEED};

/// Relative tolerance for paths without batch norm.
pub const TOL: f64 = 1e-4;
/// Relative tolerance through batch norm and for whole-network checks.
pub const TOL_BN: f64 = 1e-3;
const EPS: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub worst: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst < self.tol
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        write!(
            f,
            "{verdict} {:<28} max rel err {:.3e} (tol {:.0e})",
            self.name, self.worst, self.tol
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed())
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

fn random(shape: Shape, lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::uniform(shape, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed)).expect("nonzero shape")
}

/// Values in `±[0.2, 1]`, away from the kinks of `abs` and `relu`.
fn off_zero(shape: Shape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.gen_range(0.2..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
    .expect("nonzero shape")
}

/// `sum(v * r)` with fixed random `r`, so every output element matters.
fn weighted_sum<'t>(v: &Var<'t>, seed: u64) -> Result<Var<'t>> {
    let r = v.tape().constant(random(v.shape(), -1.0, 1.0, seed));
    Ok(v.mul(&r)?.sum())
}

fn check<F>(name: &str, tol: f64, inputs: &[Tensor], f: F) -> Result<CheckResult>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let report = GradCheck::default().eps(EPS).tol(tol).run(f, inputs)?;
    Ok(CheckResult {
        name: name.to_owned(),
        worst: report.worst(),
        tol,
    })
}

/// Checks a layer with respect to its inputs and every trainable parameter
/// in `store`.
fn check_layer<F>(
    name: &str,
    tol: f64,
    store: &ParamStore,
    mode: BatchNormMode,
    inputs: &[Tensor],
    f: F,
) -> Result<CheckResult>
where
    F: for<'t> Fn(&Session<'t>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let ids: Vec<_> = store.ids().filter(|&id| store.param(id).trainable).collect();
    let mut all = inputs.to_vec();
    all.extend(ids.iter().map(|&id| store.param(id).value.clone()));
    let k = inputs.len();
    check(name, tol, &all, |tape, v| {
        let mut s = Session::new(tape, store, mode);
        for (&id, var) in ids.iter().zip(&v[k..]) {
            s.bind(id, var.clone())?;
        }
        weighted_sum(&f(&s, &v[..k])?, 99)
    })
}

fn layer<T>(seed: u64, f: impl FnOnce(&mut Builder<'_>) -> Result<T>) -> Result<(ParamStore, T)> {
    let mut store = ParamStore::new();
    let layer = f(&mut Builder::new(&mut store, seed))?;
    // non-trivial affine and running statistics
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0);
    for p in store.params_mut() {
        if p.name.ends_with(".gamma") || p.name.ends_with(".bias") || p.name.ends_with(".beta") {
            for v in p.value.data_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
    }
    for (_, st) in store.stats_mut() {
        let c = st.channels();
        *st = RunningStats::from_parts(
            (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            (0..c).map(|_| rng.gen_range(0.5..2.0)).collect(),
        )?;
    }
    Ok((store, layer))
}

pub fn op_checks() -> Result<Vec<CheckResult>> {
    let x = random(Shape::new(2, 4, 6, 6), -1.0, 1.0, 1);
    let y = random(Shape::new(2, 4, 6, 6), -1.0, 1.0, 2);
    let pos = random(Shape::new(2, 4, 6, 6), 0.5, 1.5, 3);
    let mut out = Vec::new();

    let convs = [
        ("conv3x3", ConvSpec::new(4, 5, 3).padding(1)),
        ("conv5x5 stride 2", ConvSpec::new(4, 6, 5).stride(2).padding(2)),
        ("conv grouped", ConvSpec::new(4, 6, 3).groups(2).padding(1)),
        ("conv pointwise", ConvSpec::pointwise(4, 3)),
        (
            "depthwise dilated 3x3",
            ConvSpec::new(4, 4, 3).groups(4).dilation(3).same(),
        ),
        (
            "depthwise dilated 7x7",
            ConvSpec::new(4, 4, 7).groups(4).dilation(3).same(),
        ),
        (
            "depthwise stride 2",
            ConvSpec::new(4, 4, 3).groups(4).stride(2).padding(1),
        ),
    ];
    for (i, (name, spec)) in convs.into_iter().enumerate() {
        let w = random(spec.weight_shape(), -1.0, 1.0, 10 + i as u64);
        let b = random(Shape::new(1, spec.out_channels, 1, 1), -1.0, 1.0, 20 + i as u64);
        out.push(check(name, TOL, &[x.clone(), w, b], |_, v| {
            weighted_sum(&v[0].conv2d(&v[1], Some(&v[2]), &spec)?, 4)
        })?);
    }

    out.push(check("gelu", TOL, &[x.map(|v| 3.0 * v)], |_, v| {
        weighted_sum(&v[0].gelu(), 5)
    })?);
    out.push(check("sigmoid", TOL, &[x.map(|v| 4.0 * v)], |_, v| {
        weighted_sum(&v[0].sigmoid(), 5)
    })?);
    let kinked = off_zero(x.shape(), 6);
    out.push(check("relu", TOL, &[kinked.clone()], |_, v| {
        weighted_sum(&v[0].relu(), 5)
    })?);
    out.push(check("abs", TOL, &[kinked], |_, v| weighted_sum(&v[0].abs(), 5))?);
    out.push(check("add", TOL, &[x.clone(), y.clone()], |_, v| {
        weighted_sum(&v[0].add(&v[1])?, 5)
    })?);
    out.push(check("sub", TOL, &[x.clone(), y.clone()], |_, v| {
        weighted_sum(&v[0].sub(&v[1])?, 5)
    })?);
    out.push(check("mul", TOL, &[x.clone(), y.clone()], |_, v| {
        weighted_sum(&v[0].mul(&v[1])?, 5)
    })?);
    out.push(check("div", TOL, &[x.clone(), pos], |_, v| {
        weighted_sum(&v[0].div(&v[1])?, 5)
    })?);
    out.push(check("scale, add_scalar", TOL, &[x.clone()], |_, v| {
        weighted_sum(&v[0].scale(-1.5).add_scalar(0.25), 5)
    })?);
    out.push(check("sum, mean", TOL, &[x.clone()], |_, v| {
        Ok(v[0].mul(&v[0])?.sum().add(&v[0].mean().scale(3.0))?)
    })?);
    out.push(check("global average pool", TOL, &[x.clone()], |_, v| {
        weighted_sum(&v[0].gelu().global_avg_pool(), 5)
    })?);
    out.push(check(
        "gate broadcast",
        TOL,
        &[x.clone(), random(Shape::new(2, 4, 1, 1), -1.0, 1.0, 7)],
        |_, v| weighted_sum(&v[0].mul(&v[1])?, 5),
    )?);
    out.push(check("slice, broadcast channels", TOL, &[x.clone()], |_, v| {
        let one = v[0].slice_channels(1, 1)?.broadcast_channels(3)?;
        weighted_sum(&one.mul(&v[0].slice_channels(0, 3)?)?, 5)
    })?);
    out.push(check("concat channels", TOL, &[x.clone(), y.clone()], |_, v| {
        weighted_sum(&concat_channels(&[&v[0], &v[1].gelu(), &v[0]])?, 5)
    })?);
    out.push(check("pixel shuffle", TOL, &[x.clone()], |_, v| {
        weighted_sum(&v[0].pixel_shuffle(2)?, 5)
    })?);
    out.push(check(
        "group softmax",
        TOL,
        &[random(Shape::new(2, 6, 1, 1), -2.0, 2.0, 8)],
        |_, v| weighted_sum(&v[0].group_softmax(2)?, 5),
    )?);

    let gamma = random(Shape::new(1, 4, 1, 1), 0.5, 1.5, 9);
    let beta = random(Shape::new(1, 4, 1, 1), -0.5, 0.5, 10);
    let shifted = x.map(|v| 2.0 * v + 0.3);
    for (name, mode) in [
        ("batch norm train", BatchNormMode::Train),
        ("batch norm eval", BatchNormMode::Eval),
    ] {
        let stats = RunningStats::from_parts(vec![0.1, -0.2, 0.3, 0.0], vec![0.5, 1.5, 2.0, 1.0])?;
        out.push(check(
            name,
            TOL_BN,
            &[shifted.clone(), gamma.clone(), beta.clone()],
            |_, v| {
                let mut st = stats.clone();
                weighted_sum(&v[0].batch_norm(&v[1], &v[2], &mut st, mode)?.gelu(), 5)
            },
        )?);
    }
    Ok(out)
}

pub fn block_checks() -> Result<Vec<CheckResult>> {
    let dim = 8;
    let x = random(Shape::new(2, dim, 8, 8), -1.0, 1.0, 30);
    let train = BatchNormMode::Train;
    let mut out = Vec::new();

    let cfg = BlockConfig::new(dim);
    let (store, m) = layer(31, |b| Msplck::build(b, &cfg))?;
    out.push(check_layer("msplck", TOL_BN, &store, train, &[x.clone()], |s, v| {
        m.forward(s, &v[0])
    })?);
    for attention in AttentionMode::ALL {
        let cfg = BlockConfig {
            attention: *attention,
            ..cfg
        };
        let (store, e) = layer(32, |b| Epa::build(b, &cfg))?;
        out.push(check_layer(
            &format!("epa {attention}"),
            TOL_BN,
            &store,
            train,
            &[x.clone()],
            |s, v| e.forward(s, &v[0]),
        )?);
    }
    let (store, blk) = layer(33, |b| MixBlock::build(b, &cfg))?;
    out.push(check_layer(
        "mix block (train bn)",
        TOL_BN,
        &store,
        train,
        &[x.clone()],
        |s, v| blk.forward(s, &v[0]),
    )?);
    out.push(check_layer(
        "mix block (eval bn)",
        TOL_BN,
        &store,
        BatchNormMode::Eval,
        &[x.clone()],
        |s, v| blk.forward(s, &v[0]),
    )?);

    let (store, sk) = layer(34, |b| SkFusion::build(b, dim))?;
    let y = random(x.shape(), -1.0, 1.0, 35);
    out.push(check_layer(
        "sk fusion",
        TOL,
        &store,
        train,
        &[x.clone(), y],
        |s, v| sk.forward(s, &v[0], &v[1]),
    )?);
    let (store, down) = layer(36, |b| Downsample::build(b, dim))?;
    out.push(check_layer("downsample", TOL, &store, train, &[x.clone()], |s, v| {
        down.forward(s, &v[0])
    })?);
    let (store, up) = layer(37, |b| Upsample::build(b, dim))?;
    out.push(check_layer("upsample", TOL, &store, train, &[x], |s, v| {
        up.forward(s, &v[0])
    })?);

    let head = random(Shape::new(1, 4, 4, 4), -1.0, 1.0, 38);
    let hazy = random(Shape::new(1, 3, 4, 4), 0.0, 1.0, 39);
    out.push(check("soft reconstruction", TOL, &[head, hazy], |_, v| {
        weighted_sum(&crate::network::soft_reconstruct(&v[0], &v[1])?, 5)
    })?);
    Ok(out)
}

/// Gradient of the contrastive term with respect to the output, on 8x8
/// images.
pub fn contrastive_check() -> Result<CheckResult> {
    let ex = FrozenExtractor::new(EXTRACTOR_SEED)?;
    let shape = Shape::new(1, 3, 8, 8);
    let clear = random(shape, 0.0, 1.0, 40);
    let hazy = random(shape, 0.0, 1.0, 41);
    let output = random(shape, 0.0, 1.0, 42);
    let cfg = LossConfig::default();
    check("contrastive loss", TOL_BN, &[output], |tape, v| {
        contrastive_loss(
            &tape.constant(clear.clone()),
            &v[0],
            &tape.constant(hazy.clone()),
            &ex,
            &cfg,
        )
    })
}

/// Whole preset-T network on a 1x3x16x16 input with frozen batch-norm
/// statistics: the input gradient and `samples` randomly chosen parameter
/// elements against central differences.
pub fn end_to_end_check(samples: usize, seed: u64) -> Result<CheckResult> {
    let mut model = Model::build(ModelConfig::preset(Preset::T).with_seed(seed))?;
    {
        // populate the running statistics with a train-mode pass
        let tape = Tape::no_grad();
        let s = Session::new(&tape, model.store(), BatchNormMode::Train);
        model.forward(&s, &s.input(random(Shape::new(2, 3, 16, 16), 0.0, 1.0, seed ^ 1)))?;
        s.commit_stats(model.store_mut());
    }
    let hazy = random(Shape::new(1, 3, 16, 16), 0.0, 1.0, seed ^ 2);
    let loss_of = |model: &Model, tape: &Tape, x: &Tensor| -> Result<f64> {
        let s = Session::new(tape, model.store(), BatchNormMode::Eval);
        Ok(weighted_sum(&model.forward(&s, &s.input(x.clone()))?, seed ^ 3)?.item())
    };

    let input_check = check("end to end (input)", TOL_BN, &[hazy.clone()], |tape, v| {
        let s = Session::new(tape, model.store(), BatchNormMode::Eval);
        weighted_sum(&model.forward(&s, &v[0])?, seed ^ 3)
    })?;

    let tape = Tape::new();
    let s = Session::new(&tape, model.store(), BatchNormMode::Eval);
    let loss = weighted_sum(&model.forward(&s, &s.input(hazy.clone()))?, seed ^ 3)?;
    let mut grads = tape.backward(&loss)?;
    let analytic = s.param_grads(&mut grads);

    let trainable: Vec<(usize, usize)> = model
        .store()
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .map(|(i, p)| (i, p.value.numel()))
        .collect();
    let total: usize = trainable.iter().map(|t| t.1).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
    let mut worst = input_check.worst;
    for flat in rand::seq::index::sample(&mut rng, total, samples.min(total)) {
        let (mut i, mut j) = (0, flat);
        while j >= trainable[i].1 {
            j -= trainable[i].1;
            i += 1;
        }
        let pi = trainable[i].0;
        let orig = model.store().params()[pi].value.data()[j];
        let eval_at = |model: &mut Model, v: f64| -> Result<f64> {
            model.store_mut().params_mut()[pi].value.data_mut()[j] = v;
            loss_of(model, &Tape::no_grad(), &hazy)
        };
        let plus = eval_at(&mut model, orig + EPS)?;
        let minus = eval_at(&mut model, orig - EPS)?;
        model.store_mut().params_mut()[pi].value.data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * EPS);
        let a = analytic[pi].as_ref().expect("trainable").data()[j];
        let err = (a - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    Ok(CheckResult {
        name: format!("end to end preset T ({samples} params)"),
        worst,
        tol: TOL_BN,
    })
}

/// Everything above; `seed` selects the end-to-end parameter sample.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let mut checks = op_checks()?;
    checks.extend(block_checks()?);
    checks.push(contrastive_check()?);
    checks.push(end_to_end_check(32, seed)?);
    Ok(SuiteReport { checks })
}
