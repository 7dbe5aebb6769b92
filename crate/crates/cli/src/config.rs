//! Flat `key=value` run configuration shared by every subcommand.

use std::path::PathBuf;

use dehaze::hazegen::{ClearSource, DatasetConfig, DepthStyle};
use dehaze::kv;
use dehaze::network::{ModelConfig, Preset};
use dehaze::training::{LossConfig, TrainConfig};
use dehaze::{Error, Result};

/// Keys accepted besides the model keys, with their meaning.
pub const KEYS: &[(&str, &str)] = &[
    ("preset", "model size T, S, B or L (default T; analyze defaults to S)"),
    ("seed", "seed for synthesis, initialisation and training (default 0)"),
    ("out", "output directory or file"),
    ("res", "analysis resolution (default 256)"),
    ("count", "synth: number of pairs (default 8)"),
    ("size", "synth: image side (default 64)"),
    ("beta_min", "synth: scattering coefficient range (default 0.5..2.0)"),
    ("beta_max", ""),
    ("airlight_min", "synth: airlight range (default 0.7..1.0)"),
    ("airlight_max", ""),
    (
        "rgb_airlight",
        "synth: independent airlight per channel (default false)",
    ),
    (
        "styles",
        "synth: depth styles cycled over samples (default ramp,blobs,perlin_like)",
    ),
    ("d_max", "synth: maximum depth (default 1)"),
    ("clear_dir", "synth: crop clear images from PPMs in this directory"),
    ("data", "train/eval: dataset directory"),
    ("steps", "train: optimisation steps (default 2000)"),
    ("crop", "train: crop side, multiple of 4 (default 256)"),
    ("batch", "train: batch size (default 2)"),
    ("lr_max", "train: initial learning rate (default 2e-4)"),
    ("lr_min", "train: final learning rate (default 2e-6)"),
    ("eval_every", "train: steps between PSNR evaluations, 0 = end only"),
    ("checkpoint_every", "train: steps between checkpoints, 0 = end only"),
    ("weight_decay", "train: AdamW decoupled weight decay (default 1e-2)"),
    ("beta1", "train: AdamW first-moment decay (default 0.9)"),
    ("beta2", "train: AdamW second-moment decay (default 0.999)"),
    ("adam_eps", "train: AdamW epsilon (default 1e-8)"),
    ("beta_cr", "train: contrastive weight, 0 disables it (default 0.1)"),
    ("omega", "train: tap weights, four values (default 0.0625,0.125,0.25,1)"),
    ("eps_den", "train: contrastive denominator guard (default 1e-7)"),
    ("checkpoint", "eval/infer: checkpoint file"),
    ("input", "infer: input PPM"),
    ("luma", "eval: SSIM on BT.601 luma instead of RGB (default false)"),
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub model: ModelConfig,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub res: usize,
    pub synth: DatasetConfig,
    pub data: Option<PathBuf>,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub luma: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: None,
            model: ModelConfig::preset(Preset::T),
            seed: 0,
            out: None,
            res: 256,
            synth: DatasetConfig::default(),
            data: None,
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            checkpoint: None,
            input: None,
            luma: false,
        }
    }
}

impl RunConfig {
    /// Applies settings in order, except that `preset` goes first so that
    /// explicit model keys refine it.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some((_, v)) = pairs.iter().rev().find(|(k, _)| k == "preset") {
            let p: Preset = v.parse()?;
            cfg.preset = Some(p);
            cfg.model = ModelConfig::preset(p);
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.model.validate()?;
        cfg.loss.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "seed" => {
                self.seed = kv::value(key, v)?;
                self.model.seed = self.seed;
                t.seed = self.seed;
                s.seed = self.seed;
            }
            k if k != "seed" && ModelConfig::is_key(k) => self.model.set(k, v)?,
            "out" => self.out = Some(PathBuf::from(v)),
            "res" => self.res = kv::value(key, v)?,
            "count" => s.count = kv::value(key, v)?,
            "size" => s.size = kv::value(key, v)?,
            "beta_min" => s.beta.0 = kv::value(key, v)?,
            "beta_max" => s.beta.1 = kv::value(key, v)?,
            "airlight_min" => s.airlight.0 = kv::value(key, v)?,
            "airlight_max" => s.airlight.1 = kv::value(key, v)?,
            "rgb_airlight" => s.rgb_airlight = kv::value(key, v)?,
            "styles" => {
                s.styles = v
                    .split(',')
                    .map(|x| x.trim().parse::<DepthStyle>())
                    .collect::<Result<_>>()?
            }
            "d_max" => s.d_max = kv::value(key, v)?,
            "clear_dir" => s.source = ClearSource::Directory(PathBuf::from(v)),
            "data" => self.data = Some(PathBuf::from(v)),
            "steps" => t.total_steps = kv::value(key, v)?,
            "crop" => t.crop = kv::value(key, v)?,
            "batch" => t.batch = kv::value(key, v)?,
            "lr_max" => t.lr_max = kv::value(key, v)?,
            "lr_min" => t.lr_min = kv::value(key, v)?,
            "eval_every" => t.eval_every = kv::value(key, v)?,
            "checkpoint_every" => t.checkpoint_every = kv::value(key, v)?,
            "weight_decay" => t.optimizer.weight_decay = kv::value(key, v)?,
            "beta1" => t.optimizer.beta1 = kv::value(key, v)?,
            "beta2" => t.optimizer.beta2 = kv::value(key, v)?,
            "adam_eps" => t.optimizer.eps = kv::value(key, v)?,
            "beta_cr" => self.loss.beta_cr = kv::value(key, v)?,
            "omega" => self.loss.omega = kv::array(key, v)?,
            "eps_den" => self.loss.eps_den = kv::value(key, v)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "input" => self.input = Some(PathBuf::from(v)),
            "luma" => self.luma = kv::value(key, v)?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Settings that reproduce a training run.
    pub fn train_text(&self) -> String {
        let t = &self.train;
        let l = &self.loss;
        format!(
            "{}steps={}\ncrop={}\nbatch={}\nlr_max={}\nlr_min={}\neval_every={}\ncheckpoint_every={}\nweight_decay={}\nbeta1={}\nbeta2={}\nadam_eps={}\nbeta_cr={}\nomega={}\neps_den={}\n",
            self.model.to_text(),
            t.total_steps,
            t.crop,
            t.batch,
            t.lr_max,
            t.lr_min,
            t.eval_every,
            t.checkpoint_every,
            t.optimizer.weight_decay,
            t.optimizer.beta1,
            t.optimizer.beta2,
            t.optimizer.eps,
            l.beta_cr,
            kv::join(&l.omega),
            l.eps_den,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn preset_applies_before_model_keys() {
        let cfg = RunConfig::from_pairs(&pairs(&[("blocks", "1,1,1,1,1"), ("preset", "s")])).unwrap();
        assert_eq!(cfg.preset, Some(Preset::S));
        assert_eq!(cfg.model.blocks, [1, 1, 1, 1, 1]);
    }

    #[test]
    fn later_settings_win_and_seed_is_shared() {
        let cfg = RunConfig::from_pairs(&pairs(&[("steps", "10"), ("seed", "4"), ("steps", "20")])).unwrap();
        assert_eq!(cfg.train.total_steps, 20);
        assert_eq!((cfg.model.seed, cfg.train.seed, cfg.synth.seed), (4, 4, 4));
    }

    #[test]
    fn unknown_and_malformed_keys_are_errors() {
        assert!(RunConfig::from_pairs(&pairs(&[("stpes", "1")])).is_err());
        assert!(RunConfig::from_pairs(&pairs(&[("omega", "1,2")])).is_err());
        assert!(RunConfig::from_pairs(&pairs(&[("attention", "serial")])).is_err());
    }

    #[test]
    fn every_documented_key_is_accepted() {
        let sample = |k: &str| match k {
            "preset" => "B",
            "styles" => "ramp",
            "omega" => "1,1,1,1",
            "rgb_airlight" | "luma" => "true",
            "out" | "data" | "clear_dir" | "checkpoint" | "input" => "x",
            _ => "1",
        };
        for (k, _) in KEYS {
            RunConfig::from_pairs(&pairs(&[(k, sample(k))])).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }
}
