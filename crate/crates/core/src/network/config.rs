use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv;
use crate::nn::{AttentionMode, BlockConfig, KernelMode, PaGate, ResidualSource};

/// Named model sizes; they differ only in blocks per stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    T,
    S,
    B,
    L,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::T, Preset::S, Preset::B, Preset::L];

    pub fn blocks(self) -> [usize; 5] {
        match self {
            Preset::T => [1, 1, 2, 1, 1],
            Preset::S => [2, 2, 4, 2, 2],
            Preset::B => [4, 4, 8, 4, 4],
            Preset::L => [8, 8, 16, 8, 8],
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Preset::T => "T",
            Preset::S => "S",
            Preset::B => "B",
            Preset::L => "L",
        };
        f.write_str(s)
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "T" => Ok(Preset::T),
            "S" => Ok(Preset::S),
            "B" => Ok(Preset::B),
            "L" => Ok(Preset::L),
            _ => Err(Error::invalid(format!("unknown preset {s:?}, expected T, S, B or L"))),
        }
    }
}

pub const DEFAULT_DIMS: [usize; 5] = [24, 48, 96, 48, 24];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub blocks: [usize; 5],
    pub dims: [usize; 5],
    pub mlp_expansion: usize,
    pub attention: AttentionMode,
    pub kernels: KernelMode,
    pub pa_gate: PaGate,
    pub residual: ResidualSource,
    /// Zero the last layer of every block's output MLPs.
    pub zero_updates: bool,
    /// Zero the reconstruction head so the network starts as the identity.
    pub zero_head: bool,
    pub seed: u64,
}

const KEYS: &[&str] = &[
    "blocks",
    "dims",
    "mlp_expansion",
    "attention",
    "kernels",
    "pa_gate",
    "residual",
    "zero_updates",
    "zero_head",
    "seed",
];

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        ModelConfig {
            blocks: p.blocks(),
            dims: DEFAULT_DIMS,
            mlp_expansion: 3,
            attention: AttentionMode::default(),
            kernels: KernelMode::default(),
            pa_gate: PaGate::default(),
            residual: ResidualSource::default(),
            zero_updates: false,
            zero_head: false,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        if d[0] != d[4] || d[1] != d[3] {
            return Err(Error::invalid(format!(
                "dims must be symmetric (dims[0]==dims[4], dims[1]==dims[3]), got {d:?}"
            )));
        }
        if d[1] != 2 * d[0] || d[2] != 2 * d[1] {
            return Err(Error::invalid(format!(
                "each downsample doubles the width, so dims must look like [d, 2d, 4d, 2d, d], got {d:?}"
            )));
        }
        if d[0] == 0 || self.mlp_expansion == 0 {
            return Err(Error::invalid("dims and mlp_expansion must be positive"));
        }
        Ok(())
    }

    pub fn block(&self, stage: usize) -> BlockConfig {
        BlockConfig {
            dim: self.dims[stage],
            mlp_expansion: self.mlp_expansion,
            attention: self.attention,
            kernels: self.kernels,
            pa_gate: self.pa_gate,
            residual: self.residual,
            zero_init: self.zero_updates,
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "blocks={}\ndims={}\nmlp_expansion={}\nattention={}\nkernels={}\npa_gate={}\nresidual={}\nzero_updates={}\nzero_head={}\nseed={}\n",
            kv::join(&self.blocks),
            kv::join(&self.dims),
            self.mlp_expansion,
            self.attention,
            self.kernels,
            self.pa_gate,
            self.residual,
            self.zero_updates,
            self.zero_head,
            self.seed,
        )
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "blocks" => self.blocks = kv::array(key, v)?,
            "dims" => self.dims = kv::array(key, v)?,
            "mlp_expansion" => self.mlp_expansion = kv::value(key, v)?,
            "attention" => self.attention = v.parse()?,
            "kernels" => self.kernels = v.parse()?,
            "pa_gate" => self.pa_gate = v.parse()?,
            "residual" => self.residual = v.parse()?,
            "zero_updates" => self.zero_updates = kv::value(key, v)?,
            "zero_head" => self.zero_head = kv::value(key, v)?,
            "seed" => self.seed = kv::value(key, v)?,
            _ => return Err(Error::invalid(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    pub fn is_key(key: &str) -> bool {
        KEYS.contains(&key)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::preset(Preset::T);
        for (k, v) in kv::parse(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_and_text_round_trip() {
        assert_eq!(ModelConfig::preset(Preset::S).blocks, [2, 2, 4, 2, 2]);
        let mut cfg = ModelConfig::preset(Preset::L).with_seed(42);
        cfg.attention = AttentionMode::SerialSpaCaPa;
        cfg.kernels = KernelMode::All13;
        cfg.pa_gate = PaGate::PerChannel;
        cfg.zero_head = true;
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn asymmetric_dims_rejected() {
        let mut cfg = ModelConfig::preset(Preset::T);
        cfg.dims = [24, 48, 96, 48, 32];
        assert!(cfg.validate().unwrap_err().to_string().contains("symmetric"));
        assert!(ModelConfig::from_text("colour=red").is_err());
    }
}
