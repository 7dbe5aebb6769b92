//! The five-stage U-net built from mix structure blocks.
//!
//! ```text
//! stem -> stage0 -> down -> stage1 -> down -> stage2 -> up -> fuse(stage1)
//!      -> stage3 -> up -> fuse(stage0) -> stage4 -> head -> soft reconstruction
//! ```
//!
//! The head predicts a gain `K` (1 channel) and bias `B` (3 channels) and
//! the output is `K * I - B + I` for hazy input `I`.

mod analysis;
mod checkpoint;
mod config;

pub use analysis::{analyze, count_macs, Analysis, MacLine, Reference, REFERENCES};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{ModelConfig, Preset, DEFAULT_DIMS};

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv, Downsample, MixBlock, ParamStore, Session, SkFusion, Upsample};
use crate::tensor::{BatchNormMode, ConvSpec, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    pub stem: Conv,
    pub stages: [Vec<MixBlock>; 5],
    pub down: [Downsample; 2],
    pub up: [Upsample; 2],
    /// `fuse[0]` joins stage 1's output after the first upsample, `fuse[1]`
    /// joins stage 0's.
    pub fuse: [SkFusion; 2],
    pub head: Conv,
}

impl Model {
    pub fn build(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let d = config.dims;
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, config.seed);
        let stem = b.conv("stem", ConvSpec::new(3, d[0], 3).padding(1), true)?;
        let mut stages: [Vec<MixBlock>; 5] = Default::default();
        let mut down = Vec::new();
        let mut up = Vec::new();
        let mut fuse = Vec::new();
        for i in 0..5 {
            let cfg = config.block(i);
            stages[i] = (0..config.blocks[i])
                .map(|j| b.scoped(format!("stage{i}.{j}"), |b| MixBlock::build(b, &cfg)))
                .collect::<Result<_>>()?;
            match i {
                0 | 1 => down.push(b.scoped(format!("down{i}"), |b| Downsample::build(b, d[i]))?),
                2 | 3 => {
                    up.push(b.scoped(format!("up{}", i - 2), |b| Upsample::build(b, d[i]))?);
                    fuse.push(b.scoped(format!("fuse{}", i - 2), |b| SkFusion::build(b, d[i + 1]))?);
                }
                _ => {}
            }
        }
        let head = b.conv("head", ConvSpec::new(d[4], 4, 3).padding(1), true)?;
        if config.zero_head {
            b.zero(&head);
        }
        Ok(Model {
            config,
            store,
            stem,
            stages,
            down: pair(down),
            up: pair(up),
            fuse: pair(fuse),
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn count_params(&self) -> usize {
        self.store.count()
    }

    pub fn count_macs(&self, h: usize, w: usize) -> Result<u64> {
        count_macs(&self.config, h, w).map(|(total, _)| total)
    }

    /// Differentiable forward pass; the output is not clamped.
    pub fn forward<'t>(&self, s: &Session<'t>, hazy: &Var<'t>) -> Result<Var<'t>> {
        check_input(hazy.value())?;
        let run = |stage: usize, mut x: Var<'t>| -> Result<Var<'t>> {
            for blk in &self.stages[stage] {
                x = blk.forward(s, &x)?;
            }
            Ok(x)
        };
        let skip0 = run(0, self.stem.forward(s, hazy)?)?;
        let skip1 = run(1, self.down[0].forward(s, &skip0)?)?;
        let deep = run(2, self.down[1].forward(s, &skip1)?)?;
        let x = self.fuse[0].forward(s, &skip1, &self.up[0].forward(s, &deep)?)?;
        let x = run(3, x)?;
        let x = self.fuse[1].forward(s, &skip0, &self.up[1].forward(s, &x)?)?;
        let x = run(4, x)?;
        let head = self.head.forward(s, &x)?;
        s.count(hazy.shape().numel() as u64);
        soft_reconstruct(&head, hazy)
    }

    /// Eval-mode dehazing of a batch, clamped to `[0, 1]`.
    pub fn infer(&self, hazy: &Tensor) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let s = Session::new(&tape, &self.store, BatchNormMode::Eval);
        let out = self.forward(&s, &s.input(hazy.clone()))?;
        Ok(out.value().clamp(0.0, 1.0))
    }
}

fn pair<T>(v: Vec<T>) -> [T; 2] {
    v.try_into()
        .unwrap_or_else(|_| unreachable!("two resampling layers per side"))
}

fn check_input(t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.c != 3 {
        return Err(Error::DimMismatch {
            op: "model input",
            dim: "channels",
            expected: 3,
            actual: s.c,
        });
    }
    if s.h % 4 != 0 || s.w % 4 != 0 {
        return Err(Error::invalid(format!(
            "input {}x{} must be divisible by 4 for the two downsamples; pad to {}x{}",
            s.h,
            s.w,
            s.h.div_ceil(4) * 4,
            s.w.div_ceil(4) * 4
        )));
    }
    Ok(())
}

/// `K * I - B + I` from a 4-channel head output (`K` first, then `B`).
pub fn soft_reconstruct<'t>(head: &Var<'t>, hazy: &Var<'t>) -> Result<Var<'t>> {
    if head.shape().c != 4 {
        return Err(Error::DimMismatch {
            op: "soft_reconstruct",
            dim: "head channels",
            expected: 4,
            actual: head.shape().c,
        });
    }
    let k = head.slice_channels(0, 1)?.broadcast_channels(3)?;
    let b = head.slice_channels(1, 3)?;
    k.mul(hazy)?.sub(&b)?.add(hazy)
}
