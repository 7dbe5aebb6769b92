//! Closed-form parameter and multiply-accumulate counts.
//!
//! MACs cover convolutions (`Cout * Cin/groups * kh * kw * Hout * Wout`)
//! and elementwise gating products (one per output element). Activations,
//! normalisation, pooling, softmax and additions are not counted.

use std::fmt;

use super::{Model, ModelConfig, Preset};
use crate::error::{Error, Result};
use crate::nn::{AttentionMode, PaGate, SkFusion};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacLine {
    pub component: String,
    pub formula: String,
    pub macs: u64,
}

/// Published size of a named preset (parameters in millions, MACs in
/// billions at 256x256).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reference {
    pub preset: Preset,
    pub params_m: f64,
    pub macs_g: f64,
    pub res: usize,
}

pub const REFERENCES: [Reference; 3] = [
    Reference {
        preset: Preset::S,
        params_m: 3.16,
        macs_g: 22.06,
        res: 256,
    },
    Reference {
        preset: Preset::B,
        params_m: 6.25,
        macs_g: 43.61,
        res: 256,
    },
    Reference {
        preset: Preset::L,
        params_m: 12.42,
        macs_g: 86.7,
        res: 256,
    },
];

pub const TOLERANCE: f64 = 0.10;

struct Sheet {
    lines: Vec<MacLine>,
}

impl Sheet {
    fn add(&mut self, component: String, formula: String, macs: u64) {
        self.lines.push(MacLine {
            component,
            formula,
            macs,
        });
    }
}

fn block_macs(cfg: &ModelConfig, stage: usize, p: u64) -> (u64, u64) {
    let d = cfg.dims[stage] as u64;
    let hid = cfg.mlp_expansion as u64 * d;
    let taps: u64 = cfg.kernels.kernels().iter().map(|&k| (k * k) as u64).sum();
    let msplck = d * d * p + 25 * d * d * p + taps * d * p + 3 * d * hid * p + hid * d * p;

    let r = (d / 8).max(1);
    let pa_out = match cfg.pa_gate {
        PaGate::Single => 1,
        PaGate::PerChannel => d,
    };
    let spa = 11 * d * d * p + d * p;
    let ca = 2 * d * d + d * p;
    let pa = d * r * p + r * pa_out * p + d * p;
    let epa = match cfg.attention {
        AttentionMode::Parallel => spa + ca + pa + 3 * d * hid * p + hid * d * p,
        AttentionMode::SerialCaPa => ca + pa,
        AttentionMode::SerialSpaCaPa => spa + ca + pa,
    };
    (msplck, epa)
}

/// Total MACs for one image at `h x w`, with the per-component sheet.
pub fn count_macs(cfg: &ModelConfig, h: usize, w: usize) -> Result<(u64, Vec<MacLine>)> {
    cfg.validate()?;
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "resolution {h}x{w} must be a positive multiple of 4"
        )));
    }
    let d = cfg.dims.map(|v| v as u64);
    let full = (h * w) as u64;
    let res = [full, full / 4, full / 16, full / 4, full];
    let mut sheet = Sheet { lines: Vec::new() };

    sheet.add("stem".into(), format!("{}*3*9*{full}", d[0]), d[0] * 3 * 9 * full);
    for stage in 0..5 {
        let n = cfg.blocks[stage] as u64;
        let p = res[stage];
        let (m, e) = block_macs(cfg, stage, p);
        sheet.add(
            format!("stage{stage} msplck x{n}"),
            format!("{n}*(26d^2 + sum(k^2)d + 4d*hid)*P, d={}, P={p}", d[stage]),
            n * m,
        );
        sheet.add(
            format!("stage{stage} epa x{n}"),
            format!("{n}*epa({}), P={p}", cfg.attention),
            n * e,
        );
        match stage {
            0 | 1 => {
                let macs = 2 * d[stage] * d[stage] * 9 * res[stage + 1];
                sheet.add(format!("down{stage}"), format!("2d*d*9*P/4, d={}", d[stage]), macs);
            }
            2 | 3 => {
                let i = stage - 2;
                let macs = d[stage] * 2 * d[stage] * p;
                sheet.add(format!("up{i}"), format!("d*2d*P, d={}", d[stage]), macs);
                let dd = d[stage + 1];
                let hid = (dd / SkFusion::REDUCTION as u64).max(4);
                let pout = res[stage + 1];
                sheet.add(
                    format!("fuse{i}"),
                    format!("d*{hid} + {hid}*2d + 2d*P, d={dd}"),
                    dd * hid + hid * 2 * dd + 2 * dd * pout,
                );
            }
            _ => {}
        }
    }
    sheet.add("head".into(), format!("4*{}*9*{full}", d[4]), 4 * d[4] * 9 * full);
    sheet.add("soft reconstruction".into(), format!("3*{full}"), 3 * full);
    let total = sheet.lines.iter().map(|l| l.macs).sum();
    Ok((total, sheet.lines))
}

/// Parameter and MAC counts of a preset compared against its reference.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub preset: Preset,
    pub res: usize,
    pub params: usize,
    pub macs: u64,
    pub lines: Vec<MacLine>,
    pub reference: Option<Reference>,
}

impl Analysis {
    pub fn params_rel_err(&self) -> Option<f64> {
        self.reference
            .map(|r| (self.params as f64 / 1e6 - r.params_m) / r.params_m)
    }

    pub fn macs_rel_err(&self) -> Option<f64> {
        self.reference.map(|r| (self.macs as f64 / 1e9 - r.macs_g) / r.macs_g)
    }

    pub fn params_ok(&self) -> Option<bool> {
        self.params_rel_err().map(|e| e.abs() <= TOLERANCE)
    }

    pub fn macs_ok(&self) -> Option<bool> {
        self.macs_rel_err().map(|e| e.abs() <= TOLERANCE)
    }

    /// True when there is no reference or both counts are in tolerance.
    pub fn passed(&self) -> bool {
        self.params_ok().unwrap_or(true) && self.macs_ok().unwrap_or(true)
    }
}

impl fmt::Display for Analysis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "preset {} at {}x{}", self.preset, self.res, self.res)?;
        writeln!(f, "{:<24} {:>16}  formula", "component", "MACs")?;
        for l in &self.lines {
            writeln!(f, "{:<24} {:>16}  {}", l.component, l.macs, l.formula)?;
        }
        writeln!(f, "params {} ({:.3}M)", self.params, self.params as f64 / 1e6)?;
        writeln!(f, "macs   {} ({:.3}G)", self.macs, self.macs as f64 / 1e9)?;
        if let Some(r) = self.reference {
            let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
            writeln!(
                f,
                "params vs {:.2}M: {:+.1}% {}",
                r.params_m,
                100.0 * self.params_rel_err().unwrap_or(0.0),
                verdict(self.params_ok().unwrap_or(false))
            )?;
            writeln!(
                f,
                "macs   vs {:.2}G at {}: {:+.1}% {}",
                r.macs_g,
                r.res,
                100.0 * self.macs_rel_err().unwrap_or(0.0),
                verdict(self.macs_ok().unwrap_or(false))
            )?;
        }
        Ok(())
    }
}

pub fn analyze(cfg: &ModelConfig, preset: Preset, res: usize) -> Result<Analysis> {
    let model = Model::build(*cfg)?;
    let (macs, lines) = count_macs(cfg, res, res)?;
    let reference = REFERENCES.iter().copied().find(|r| r.preset == preset && r.res == res);
    Ok(Analysis {
        preset,
        res,
        params: model.count_params(),
        macs,
        lines,
        reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn macs_scale_with_area() {
        let cfg = ModelConfig::preset(Preset::S);
        let (a, _) = count_macs(&cfg, 64, 64).unwrap();
        let (b, _) = count_macs(&cfg, 128, 128).unwrap();
        let ratio = b as f64 / a as f64;
        assert!((ratio - 4.0).abs() < 0.01, "{ratio}");
    }

    #[test]
    fn base_is_about_twice_small() {
        let s = count_macs(&ModelConfig::preset(Preset::S), 256, 256).unwrap().0 as f64;
        let b = count_macs(&ModelConfig::preset(Preset::B), 256, 256).unwrap().0 as f64;
        assert!((b / s - 2.0).abs() < 0.1, "{}", b / s);
    }

    #[test]
    fn doubling_width_more_than_doubles_params() {
        let mut wide = ModelConfig::preset(Preset::T);
        wide.dims = wide.dims.map(|d| 2 * d);
        let narrow = Model::build(ModelConfig::preset(Preset::T)).unwrap().count_params();
        let wide = Model::build(wide).unwrap().count_params();
        assert!(wide > 2 * narrow);
    }

    #[test]
    fn bad_resolution_rejected() {
        assert!(count_macs(&ModelConfig::preset(Preset::T), 30, 32).is_err());
    }
}
