//! L1 + contrastive objective, AdamW with cosine annealing and the
//! training loop.

mod loss;

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use loss::{contrastive_loss, l1_loss, total_loss, FrozenExtractor, LossConfig, EXTRACTOR_SEED};

use crate::error::{Error, Result};
use crate::hazegen::PairedSample;
use crate::metrics::{MetricReport, Psnr, SsimOptions};
use crate::network::Model;
use crate::nn::{ParamStore, Session};
use crate::tensor::{BatchNormMode, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moments per parameter, in store order. Frozen
/// parameters have empty moments.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| {
                    if p.trainable {
                        vec![0.0; p.value.numel()]
                    } else {
                        Vec::new()
                    }
                })
                .collect()
        };
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update of every trainable parameter.
/// `grads` is in store order; `None` leaves a parameter untouched.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut OptimizerState,
    opt: &AdamW,
    lr: f64,
) -> Result<()> {
    if grads.len() != store.params().len() {
        return Err(Error::invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.params().len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for (i, (p, g)) in store.params_mut().iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        if !p.trainable {
            continue;
        }
        if g.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                left: p.value.shape(),
                right: g.shape(),
            });
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &g), m), v) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + opt.eps);
            *w -= lr * opt.weight_decay * *w + lr * update;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
    pub crop: usize,
    pub batch: usize,
    pub seed: u64,
    /// Steps between checkpoint writes; 0 writes only at the end.
    pub checkpoint_every: usize,
    /// Steps between training-set PSNR evaluations; 0 evaluates only at
    /// the end.
    pub eval_every: usize,
    pub optimizer: AdamW,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 2e-4,
            lr_min: 2e-6,
            total_steps: 2000,
            crop: 256,
            batch: 2,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            optimizer: AdamW::default(),
        }
    }
}

impl TrainConfig {
    /// Overfitting recipe for a handful of 64x64 pairs with the tiny preset:
    /// 2000 steps of batch 2 on whole images at the default 2e-4 to 2e-6 schedule.
    pub fn smoke(seed: u64) -> Self {
        TrainConfig {
            lr_max: 2e-4,
            lr_min: 2e-6,
            crop: 64,
            seed,
            eval_every: 500,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min < self.lr_max) || !(self.lr_min >= 0.0) {
            return Err(Error::invalid(format!(
                "need 0 <= lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.crop == 0 || self.crop % 4 != 0 {
            return Err(Error::invalid(format!(
                "crop {} must be a positive multiple of 4",
                self.crop
            )));
        }
        if self.batch == 0 || self.total_steps == 0 {
            return Err(Error::invalid("batch and total_steps must be positive"));
        }
        Ok(())
    }
}

/// `lr_min + (lr_max - lr_min) (1 + cos(pi step / total)) / 2`.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::invalid(format!("step {step} outside 0..={}", cfg.total_steps)));
    }
    let phase = std::f64::consts::PI * step as f64 / cfg.total_steps as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + phase.cos()))
}

/// One line of the metrics log: `step lr loss [psnr]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLine {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub psnr: Option<Psnr>,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.step, self.lr, self.loss)?;
        if let Some(p) = self.psnr {
            write!(f, " {p}")?;
        }
        Ok(())
    }
}

/// Passed to the observer after every step.
pub struct StepEvent<'a> {
    pub line: &'a LogLine,
    pub model: &'a Model,
    /// A checkpoint should be written now.
    pub checkpoint_due: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogLine>,
    /// Eval-mode mean PSNR over the full training images after the last step.
    pub final_psnr: Psnr,
    pub final_eval: MetricReport,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|l| l.loss).collect()
    }

    pub fn log_text(&self) -> String {
        self.log.iter().map(|l| format!("{l}\n")).collect()
    }
}

/// Eval-mode scores of the clamped model output against each clear image.
pub fn evaluate(model: &Model, data: &[PairedSample], opts: SsimOptions) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for s in data {
        report.push(s.id.clone(), &model.infer(&s.hazy)?, &s.clear, opts)?;
    }
    Ok(report)
}

/// Shuffled passes over the dataset; each epoch is reshuffled.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize) -> Self {
        Sampler {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn crop_pair(s: &PairedSample, crop: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
    let sh = s.hazy.shape();
    if sh.h < crop || sh.w < crop {
        return Err(Error::invalid(format!(
            "sample {} is {}x{}, smaller than crop {crop}",
            s.id, sh.h, sh.w
        )));
    }
    let y0 = rng.gen_range(0..=sh.h - crop);
    let x0 = rng.gen_range(0..=sh.w - crop);
    Ok((s.hazy.crop(y0, x0, crop, crop)?, s.clear.crop(y0, x0, crop, crop)?))
}

/// Runs `cfg.total_steps` optimisation steps on `model`.
///
/// Each step draws `batch` samples, crops them at a seeded random offset,
/// and applies AdamW at the cosine learning rate of that step. The observer
/// sees each log line and is told when a checkpoint is due; returning an
/// error from it aborts training.
pub fn train(
    model: &mut Model,
    data: &[PairedSample],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    extractor: &FrozenExtractor,
    mut observer: impl FnMut(StepEvent<'_>) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training needs at least one sample"));
    }
    let bn_mode = if cfg.batch >= 2 {
        BatchNormMode::Train
    } else {
        log::warn!("batch size 1: batch norm uses running statistics");
        BatchNormMode::Eval
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = Sampler::new(data.len());
    let mut state = OptimizerState::new(model.store());
    let mut log = Vec::with_capacity(cfg.total_steps);
    let mut last = None;
    for step in 0..cfg.total_steps {
        let lr = cosine_lr(step, cfg)?;
        let mut hazy = Vec::with_capacity(cfg.batch);
        let mut clear = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let (h, c) = crop_pair(&data[sampler.next(&mut rng)], cfg.crop, &mut rng)?;
            hazy.push(h);
            clear.push(c);
        }
        let hazy = Tensor::stack_batch(&hazy.iter().collect::<Vec<_>>())?;
        let clear = Tensor::stack_batch(&clear.iter().collect::<Vec<_>>())?;

        let tape = Tape::new();
        let s = Session::new(&tape, model.store(), bn_mode);
        let (i, j) = (s.input(hazy), s.input(clear));
        let out = model.forward(&s, &i)?;
        let loss = total_loss(&j, &out, &i, extractor, loss_cfg)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step + 1,
                lr,
                loss: value,
            });
        }
        let mut grads = tape.backward(&loss)?;
        let grads = s.param_grads(&mut grads);
        s.commit_stats(model.store_mut());
        adamw_step(model.store_mut(), &grads, &mut state, &cfg.optimizer, lr)?;

        let done = step + 1;
        let final_step = done == cfg.total_steps;
        let psnr = if final_step || (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
            let report = evaluate(model, data, SsimOptions::default())?;
            let p = report.mean_psnr();
            if final_step {
                last = Some(report);
            }
            Some(p)
        } else {
            None
        };
        let line = LogLine {
            step: done,
            lr,
            loss: value,
            psnr,
        };
        log::debug!("{line}");
        observer(StepEvent {
            line: &line,
            model,
            checkpoint_due: final_step || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0),
        })?;
        log.push(line);
    }
    let final_eval = last.expect("the last step always evaluates");
    Ok(TrainReport {
        log,
        final_psnr: final_eval.mean_psnr(),
        final_eval,
    })
}
