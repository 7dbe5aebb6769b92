use crate::error::{Error, Result};
use crate::nn::{Builder, Conv, ParamStore, Session};
use crate::tensor::{BatchNormMode, ConvSpec, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of each extractor tap, shallow to deep.
    pub omega: [f64; 4],
    /// Weight of the contrastive term; 0 gives plain L1.
    pub beta_cr: f64,
    /// Added to each contrastive denominator.
    pub eps_den: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            omega: [1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0],
            beta_cr: 0.1,
            eps_den: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.omega.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::invalid(format!(
                "tap weights must be positive, got {:?}",
                self.omega
            )));
        }
        if !(self.beta_cr >= 0.0) || !(self.eps_den >= 0.0) {
            return Err(Error::invalid("beta_cr and eps_den must be non-negative"));
        }
        Ok(())
    }
}

/// Mean absolute difference.
pub fn l1_loss<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "l1_loss",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(a.sub(b)?.abs().mean())
}

pub const EXTRACTOR_SEED: u64 = 0x5eed_cafe;

/// Fixed random conv net used as the feature space of the contrastive term.
///
/// Eight 3x3 conv + GELU layers; layers 3, 5 and 7 have stride 2 and the
/// outputs of layers 2, 4, 6 and 8 are tapped, giving features at full,
/// 1/2, 1/4 and 1/8 resolution. Its parameters are registered frozen.
#[derive(Clone, Debug)]
pub struct FrozenExtractor {
    store: ParamStore,
    layers: Vec<Conv>,
}

impl FrozenExtractor {
    pub const TAPS: [usize; 4] = [1, 3, 5, 7];

    pub fn new(seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, seed).frozen();
        let plan = [
            (3, 8, 1),
            (8, 8, 1),
            (8, 16, 2),
            (16, 16, 1),
            (16, 32, 2),
            (32, 32, 1),
            (32, 64, 2),
            (64, 64, 1),
        ];
        let layers = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| {
                b.conv(
                    &format!("layer{i}"),
                    ConvSpec::new(cin, cout, 3).stride(stride).padding(1),
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        // He-uniform scale keeps activations from shrinking with depth.
        for l in &layers {
            for v in store.param_mut(l.weight).value.data_mut() {
                *v *= 6f64.sqrt();
            }
        }
        Ok(FrozenExtractor { store, layers })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Tapped features of `x`. Gradients reach `x` but never the weights.
    pub fn features<'t>(&self, x: &Var<'t>) -> Result<Vec<Var<'t>>> {
        let s = Session::new(x.tape(), &self.store, BatchNormMode::Eval);
        let mut h = x.clone();
        let mut taps = Vec::with_capacity(4);
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&s, &h)?.gelu();
            if Self::TAPS.contains(&i) {
                taps.push(h.clone());
            }
        }
        Ok(taps)
    }
}

/// `sum_i omega_i * D(R_i(J), R_i(out)) / (D(R_i(I), R_i(out)) + eps_den)`
/// with `D` the mean absolute difference. Clear `J` and hazy `I` are
/// treated as constants.
pub fn contrastive_loss<'t>(
    clear: &Var<'t>,
    output: &Var<'t>,
    hazy: &Var<'t>,
    extractor: &FrozenExtractor,
    cfg: &LossConfig,
) -> Result<Var<'t>> {
    for other in [clear, hazy] {
        if other.shape() != output.shape() {
            return Err(Error::ShapeMismatch {
                op: "contrastive_loss",
                left: output.shape(),
                right: other.shape(),
            });
        }
    }
    let fo = extractor.features(output)?;
    let fp = extractor.features(&clear.detach())?;
    let fn_ = extractor.features(&hazy.detach())?;
    let mut total: Option<Var<'t>> = None;
    for i in 0..4 {
        let num = l1_loss(&fp[i].detach(), &fo[i])?;
        let den = l1_loss(&fn_[i].detach(), &fo[i])?;
        if cfg.eps_den == 0.0 && den.item() == 0.0 {
            return Err(Error::invalid(format!(
                "contrastive denominator at tap {i} is zero; output equals the hazy input (set eps_den > 0)"
            )));
        }
        let term = num.div(&den.add_scalar(cfg.eps_den))?.scale(cfg.omega[i]);
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("four taps"))
}

/// `L1(out, J) + beta_cr * contrastive`; with `beta_cr == 0` this is the L1
/// term itself.
pub fn total_loss<'t>(
    clear: &Var<'t>,
    output: &Var<'t>,
    hazy: &Var<'t>,
    extractor: &FrozenExtractor,
    cfg: &LossConfig,
) -> Result<Var<'t>> {
    let l1 = l1_loss(output, clear)?;
    if cfg.beta_cr == 0.0 {
        return Ok(l1);
    }
    let cr = contrastive_loss(clear, output, hazy, extractor, cfg)?;
    l1.add(&cr.scale(cfg.beta_cr))
}
