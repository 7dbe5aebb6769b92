use std::fmt;
use std::str::FromStr;

use super::{BatchNorm, Builder, Conv, Session};
use crate::error::{Error, Result};
use crate::tensor::{concat_channels, ConvSpec, Var};

/// Arrangement of the attention branches in [`Epa`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionMode {
    /// SPA, CA and PA on the same normalised input, concatenated and fused
    /// by an MLP.
    #[default]
    Parallel,
    /// CA followed by PA, no fusion MLP.
    SerialCaPa,
    /// SPA, then CA, then PA, no fusion MLP.
    SerialSpaCaPa,
}

/// Kernel sizes of the three dilated depth-wise branches in [`Msplck`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KernelMode {
    /// Kernels 7, 5, 3 (extents 19, 13, 7).
    #[default]
    Multiscale,
    All7,
    All13,
    All19,
}

impl KernelMode {
    pub const DILATION: usize = 3;

    /// Kernel size of each branch, widest first.
    pub fn kernels(self) -> [usize; 3] {
        match self {
            KernelMode::Multiscale => [7, 5, 3],
            KernelMode::All7 => [3; 3],
            KernelMode::All13 => [5; 3],
            KernelMode::All19 => [7; 3],
        }
    }
}

/// Channels of the pixel-attention gate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PaGate {
    /// One spatial map shared by every channel.
    #[default]
    Single,
    PerChannel,
}

/// What the attention block's residual adds its update to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ResidualSource {
    /// The block input.
    #[default]
    Input,
    /// The batch-normalised input.
    Normalized,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($ty::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    _ => Err(Error::invalid(format!(
                        "unknown {} {s:?}, expected one of: {}",
                        stringify!($ty),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

text_enum!(AttentionMode { Parallel => "parallel", SerialCaPa => "serial_ca_pa", SerialSpaCaPa => "serial_spa_ca_pa" });
text_enum!(KernelMode { Multiscale => "multiscale", All7 => "all7", All13 => "all13", All19 => "all19" });
text_enum!(PaGate { Single => "1", PerChannel => "dim" });
text_enum!(ResidualSource { Input => "x", Normalized => "xhat" });

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub dim: usize,
    /// Hidden width of the output MLPs as a multiple of `dim`.
    pub mlp_expansion: usize,
    pub attention: AttentionMode,
    pub kernels: KernelMode,
    pub pa_gate: PaGate,
    pub residual: ResidualSource,
    /// Zero the last layer of every output MLP so the block starts as the
    /// identity.
    pub zero_init: bool,
}

impl BlockConfig {
    pub fn new(dim: usize) -> Self {
        BlockConfig {
            dim,
            mlp_expansion: 3,
            attention: AttentionMode::default(),
            kernels: KernelMode::default(),
            pa_gate: PaGate::default(),
            residual: ResidualSource::default(),
            zero_init: false,
        }
    }

    fn hidden(&self) -> usize {
        self.mlp_expansion * self.dim
    }
}

fn expect_channels(op: &'static str, x: &Var<'_>, dim: usize) -> Result<()> {
    if x.shape().c != dim {
        return Err(Error::DimMismatch {
            op,
            dim: "channels",
            expected: dim,
            actual: x.shape().c,
        });
    }
    Ok(())
}

/// Multi-scale parallel large-kernel token mixer.
///
/// `x1 = PW(BN(x))`, `x2 = Conv5(x1)`, three dilated depth-wise convs of
/// `x2` concatenated into `x3`, then `y = x + PW(GELU(PW(x3)))`.
#[derive(Clone, Debug)]
pub struct Msplck {
    pub dim: usize,
    pub norm: BatchNorm,
    pub pw: Conv,
    pub conv5: Conv,
    pub branches: [Conv; 3],
    pub mlp_in: Conv,
    pub mlp_out: Conv,
}

impl Msplck {
    pub fn build(b: &mut Builder<'_>, cfg: &BlockConfig) -> Result<Self> {
        let d = cfg.dim;
        let norm = b.batch_norm("norm", d)?;
        let pw = b.conv("pw", ConvSpec::pointwise(d, d), true)?;
        let conv5 = b.conv("conv5", ConvSpec::new(d, d, 5).same(), true)?;
        let [k0, k1, k2] = cfg.kernels.kernels();
        let mut branch = |i: usize, k: usize| {
            let spec = ConvSpec::new(d, d, k).dilation(KernelMode::DILATION).groups(d).same();
            b.conv(&format!("dw{i}"), spec, true)
        };
        let branches = [branch(0, k0)?, branch(1, k1)?, branch(2, k2)?];
        let mlp_in = b.conv("mlp_in", ConvSpec::pointwise(3 * d, cfg.hidden()), true)?;
        let mlp_out = b.conv("mlp_out", ConvSpec::pointwise(cfg.hidden(), d), true)?;
        if cfg.zero_init {
            b.zero(&mlp_out);
        }
        Ok(Msplck {
            dim: d,
            norm,
            pw,
            conv5,
            branches,
            mlp_in,
            mlp_out,
        })
    }

    /// The concatenated branch output `x3`.
    pub fn mixed<'t>(&self, s: &Session<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        expect_channels("msplck", x, self.dim)?;
        let xhat = self.norm.forward(s, x)?;
        let x2 = self.conv5.forward(s, &self.pw.forward(s, &xhat)?)?;
        let outs = self
            .branches
            .iter()
            .map(|c| c.forward(s, &x2))
            .collect::<Result<Vec<_>>>()?;
        concat_channels(&outs.iter().collect::<Vec<_>>())
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let x3 = self.mixed(s, x)?;
        let update = self.mlp_out.forward(s, &self.mlp_in.forward(s, &x3)?.gelu())?;
        x.add(&update)
    }
}

/// Simple pixel attention: `Conv3(PW(x)) * sigmoid(PW(x))`.
#[derive(Clone, Debug)]
pub struct Spa {
    pub value_pw: Conv,
    pub value_conv: Conv,
    pub gate: Conv,
}

impl Spa {
    fn build(b: &mut Builder<'_>, d: usize) -> Result<Self> {
        Ok(Spa {
            value_pw: b.conv("value_pw", ConvSpec::pointwise(d, d), true)?,
            value_conv: b.conv("value_conv", ConvSpec::new(d, d, 3).same(), true)?,
            gate: b.conv("gate", ConvSpec::pointwise(d, d), true)?,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let v = self.value_conv.forward(s, &self.value_pw.forward(s, x)?)?;
        let g = self.gate.forward(s, x)?.sigmoid();
        s.gate(&v, &g)
    }
}

/// Two point-wise convs with a GELU between, ending in a sigmoid.
#[derive(Clone, Debug)]
pub struct GateMlp {
    pub fc1: Conv,
    pub fc2: Conv,
}

impl GateMlp {
    fn build(b: &mut Builder<'_>, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(GateMlp {
            fc1: b.conv("fc1", ConvSpec::pointwise(d_in, hidden), true)?,
            fc2: b.conv("fc2", ConvSpec::pointwise(hidden, d_out), true)?,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        Ok(self.fc2.forward(s, &self.fc1.forward(s, x)?.gelu())?.sigmoid())
    }
}

/// Outputs of the three attention branches, each shaped like the input.
#[derive(Clone, Debug)]
pub struct AttentionBranches<'t> {
    pub f_s: Var<'t>,
    pub f_c: Var<'t>,
    pub f_p: Var<'t>,
}

/// Attention block combining simple pixel, channel and pixel attention.
#[derive(Clone, Debug)]
pub struct Epa {
    pub dim: usize,
    pub mode: AttentionMode,
    pub residual: ResidualSource,
    pub norm: BatchNorm,
    pub spa: Option<Spa>,
    pub ca: GateMlp,
    pub pa: GateMlp,
    /// Fusion MLP over the concatenated branches, parallel mode only.
    pub mlp: Option<(Conv, Conv)>,
}

impl Epa {
    pub fn build(b: &mut Builder<'_>, cfg: &BlockConfig) -> Result<Self> {
        let d = cfg.dim;
        let norm = b.batch_norm("norm", d)?;
        let spa = match cfg.attention {
            AttentionMode::SerialCaPa => None,
            _ => Some(b.scoped("spa", |b| Spa::build(b, d))?),
        };
        let ca = b.scoped("ca", |b| GateMlp::build(b, d, d, d))?;
        let pa_out = match cfg.pa_gate {
            PaGate::Single => 1,
            PaGate::PerChannel => d,
        };
        let pa = b.scoped("pa", |b| GateMlp::build(b, d, (d / 8).max(1), pa_out))?;
        let mlp = match cfg.attention {
            AttentionMode::Parallel => {
                let fc1 = b.conv("mlp_in", ConvSpec::pointwise(3 * d, cfg.hidden()), true)?;
                let fc2 = b.conv("mlp_out", ConvSpec::pointwise(cfg.hidden(), d), true)?;
                if cfg.zero_init {
                    b.zero(&fc2);
                }
                Some((fc1, fc2))
            }
            _ => None,
        };
        Ok(Epa {
            dim: d,
            mode: cfg.attention,
            residual: cfg.residual,
            norm,
            spa,
            ca,
            pa,
            mlp,
        })
    }

    /// Channel gate `(n, dim, 1, 1)` computed from pooled `x`.
    pub fn ca_gate<'t>(&self, s: &Session<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        self.ca.forward(s, &x.global_avg_pool())
    }

    /// Pixel gate, broadcast to `dim` channels when it has a single one.
    pub fn pa_gate<'t>(&self, s: &Session<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let g = self.pa.forward(s, x)?;
        if g.shape().c == 1 {
            g.broadcast_channels(self.dim)
        } else {
            Ok(g)
        }
    }

    /// Parallel-mode branch outputs on the normalised input.
    pub fn branches<'t>(&self, s: &Session<'t>, xhat: &Var<'t>) -> Result<AttentionBranches<'t>> {
        let spa = self
            .spa
            .as_ref()
            .ok_or_else(|| Error::invalid("attention block has no SPA branch"))?;
        Ok(AttentionBranches {
            f_s: spa.forward(s, xhat)?,
            f_c: s.gate(xhat, &self.ca_gate(s, xhat)?)?,
            f_p: s.gate(xhat, &self.pa_gate(s, xhat)?)?,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        expect_channels("epa", x, self.dim)?;
        let xhat = self.norm.forward(s, x)?;
        let update = match self.mode {
            AttentionMode::Parallel => {
                let br = self.branches(s, &xhat)?;
                let f = concat_channels(&[&br.f_s, &br.f_c, &br.f_p])?;
                let (fc1, fc2) = self.mlp.as_ref().expect("parallel mode has a fusion MLP");
                fc2.forward(s, &fc1.forward(s, &f)?.gelu())?
            }
            AttentionMode::SerialCaPa | AttentionMode::SerialSpaCaPa => {
                let start = match &self.spa {
                    Some(spa) => spa.forward(s, &xhat)?,
                    None => xhat.clone(),
                };
                let c = s.gate(&start, &self.ca_gate(s, &start)?)?;
                s.gate(&c, &self.pa_gate(s, &c)?)?
            }
        };
        match self.residual {
            ResidualSource::Input => x.add(&update),
            ResidualSource::Normalized => xhat.add(&update),
        }
    }

    /// The last conv before each sigmoid gate.
    pub fn gate_convs(&self) -> Vec<&Conv> {
        let mut v: Vec<&Conv> = self.spa.iter().map(|s| &s.gate).collect();
        v.push(&self.ca.fc2);
        v.push(&self.pa.fc2);
        v
    }
}

/// Token mixer followed by attention, shape preserving.
#[derive(Clone, Debug)]
pub struct MixBlock {
    pub msplck: Msplck,
    pub epa: Epa,
}

impl MixBlock {
    pub fn build(b: &mut Builder<'_>, cfg: &BlockConfig) -> Result<Self> {
        Ok(MixBlock {
            msplck: b.scoped("msplck", |b| Msplck::build(b, cfg))?,
            epa: b.scoped("epa", |b| Epa::build(b, cfg))?,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        self.epa.forward(s, &self.msplck.forward(s, x)?)
    }
}

/// Per-channel softmax-weighted blend of a skip branch and the main branch.
#[derive(Clone, Debug)]
pub struct SkFusion {
    pub dim: usize,
    pub fc1: Conv,
    pub fc2: Conv,
}

impl SkFusion {
    pub const REDUCTION: usize = 8;

    pub fn build(b: &mut Builder<'_>, dim: usize) -> Result<Self> {
        let hidden = (dim / Self::REDUCTION).max(4);
        Ok(SkFusion {
            dim,
            fc1: b.conv("fc1", ConvSpec::pointwise(dim, hidden), false)?,
            fc2: b.conv("fc2", ConvSpec::pointwise(hidden, 2 * dim), false)?,
        })
    }

    /// Branch weights `(n, 2*dim, 1, 1)`: skip weights first, then main.
    pub fn weights<'t>(&self, s: &Session<'t>, skip: &Var<'t>, main: &Var<'t>) -> Result<Var<'t>> {
        if skip.shape() != main.shape() {
            return Err(Error::ShapeMismatch {
                op: "sk_fusion",
                left: skip.shape(),
                right: main.shape(),
            });
        }
        expect_channels("sk_fusion", skip, self.dim)?;
        let pooled = skip.add(main)?.global_avg_pool();
        self.fc2
            .forward(s, &self.fc1.forward(s, &pooled)?.relu())?
            .group_softmax(2)
    }

    pub fn forward<'t>(&self, s: &Session<'t>, skip: &Var<'t>, main: &Var<'t>) -> Result<Var<'t>> {
        let w = self.weights(s, skip, main)?;
        let a = s.gate(skip, &w.slice_channels(0, self.dim)?)?;
        let b = s.gate(main, &w.slice_channels(self.dim, self.dim)?)?;
        a.add(&b)
    }
}

/// 3x3 stride-2 conv doubling the channels.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv,
}

impl Downsample {
    pub fn build(b: &mut Builder<'_>, dim: usize) -> Result<Self> {
        Ok(Downsample {
            conv: b.conv("conv", ConvSpec::new(dim, 2 * dim, 3).stride(2).padding(1), true)?,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let sh = x.shape();
        if sh.h % 2 != 0 || sh.w % 2 != 0 {
            return Err(Error::invalid(format!(
                "downsample needs even spatial dims, got {}x{}",
                sh.h, sh.w
            )));
        }
        self.conv.forward(s, x)
    }
}

/// Point-wise conv to `2*dim` channels then a 2x pixel shuffle, halving the
/// channel count.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub conv: Conv,
}

impl Upsample {
    pub fn build(b: &mut Builder<'_>, dim: usize) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::invalid(format!(
                "upsample needs an even channel count, got {dim}"
            )));
        }
        Ok(Upsample {
            conv: b.conv("conv", ConvSpec::pointwise(dim, dim / 2 * 4), true)?,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        self.conv.forward(s, x)?.pixel_shuffle(2)
    }
}
