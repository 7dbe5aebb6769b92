use std::rc::Rc;

use super::tape::Var;
use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalise with batch statistics and update the running estimates.
    Train,
    /// Normalise with the running estimates.
    Eval,
}

/// Per-channel running mean and variance of a batch norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    ready: bool,
}

impl RunningStats {
    /// Statistics that have not seen data; eval-mode use is an error.
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            ready: false,
        }
    }

    /// Explicit zero-mean, unit-variance statistics, usable in eval mode.
    pub fn identity(channels: usize) -> Self {
        RunningStats {
            ready: true,
            ..RunningStats::new(channels)
        }
    }

    pub fn from_parts(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::DimMismatch {
                op: "RunningStats",
                dim: "channels",
                expected: mean.len(),
                actual: var.len(),
            });
        }
        Ok(RunningStats { mean, var, ready: true })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn is_ready(&self) -> bool {
        self.ready
    }
}

impl<'t> Var<'t> {
    /// Batch normalisation with per-channel affine `gamma`, `beta` (each
    /// holding `c` elements). Train mode normalises over `(n, h, w)` with
    /// the biased batch variance and folds the unbiased estimate into
    /// `stats`; eval mode uses `stats` and requires them to be ready.
    pub fn batch_norm(
        &self,
        gamma: &Var<'t>,
        beta: &Var<'t>,
        stats: &mut RunningStats,
        mode: BatchNormMode,
    ) -> Result<Var<'t>> {
        let s = self.shape();
        for (what, v) in [("gamma length", gamma), ("beta length", beta)] {
            if v.shape().numel() != s.c {
                return Err(Error::DimMismatch {
                    op: "batch_norm",
                    dim: what,
                    expected: s.c,
                    actual: v.shape().numel(),
                });
            }
        }
        if stats.channels() != s.c {
            return Err(Error::DimMismatch {
                op: "batch_norm",
                dim: "running stats channels",
                expected: s.c,
                actual: stats.channels(),
            });
        }
        let p = s.plane();
        let m = (s.n * p) as f64;
        let x = self.value().data();
        let (mean, var) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; s.c];
                let mut var = vec![0.0; s.c];
                for c in 0..s.c {
                    let mut sum = 0.0;
                    for n in 0..s.n {
                        sum += self.value().plane(n, c).iter().sum::<f64>();
                    }
                    let mu = sum / m;
                    let mut sq = 0.0;
                    for n in 0..s.n {
                        sq += self
                            .value()
                            .plane(n, c)
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[c] = mu;
                    var[c] = sq / m;
                }
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for c in 0..s.c {
                    stats.mean[c] = (1.0 - BN_MOMENTUM) * stats.mean[c] + BN_MOMENTUM * mean[c];
                    stats.var[c] = (1.0 - BN_MOMENTUM) * stats.var[c] + BN_MOMENTUM * var[c] * unbias;
                }
                stats.ready = true;
                (mean, var)
            }
            BatchNormMode::Eval => {
                if !stats.ready {
                    return Err(Error::StatsUninitialized);
                }
                (stats.mean.clone(), stats.var.clone())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = gamma.value().data();
        let b = beta.value().data();
        let mut xhat = vec![0.0; s.numel()];
        let mut out = vec![0.0; s.numel()];
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * p;
                for i in base..base + p {
                    let h = (x[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + b[c];
                }
            }
        }
        let xhat = Rc::new(Tensor::from_parts(s, xhat));
        let gamma_v = gamma.rc();
        let gamma_shape = gamma.shape();
        let beta_shape = beta.shape();
        Ok(self.tape.record(
            Tensor::from_parts(s, out),
            &[self, gamma, beta],
            Box::new(move |gout, mask| {
                let gd = gout.data();
                let xh = xhat.data();
                let mut dgamma = vec![0.0; s.c];
                let mut dbeta = vec![0.0; s.c];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let base = (n * s.c + c) * p;
                        for i in base..base + p {
                            dgamma[c] += gd[i] * xh[i];
                            dbeta[c] += gd[i];
                        }
                    }
                }
                let gx = mask[0].then(|| {
                    let gam = gamma_v.data();
                    let mut gx = vec![0.0; s.numel()];
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let base = (n * s.c + c) * p;
                            let k = gam[c] * inv_std[c];
                            match mode {
                                BatchNormMode::Train => {
                                    let mean_g = dbeta[c] / m;
                                    let mean_gx = dgamma[c] / m;
                                    for i in base..base + p {
                                        gx[i] = k * (gd[i] - mean_g - xh[i] * mean_gx);
                                    }
                                }
                                BatchNormMode::Eval => {
                                    for i in base..base + p {
                                        gx[i] = k * gd[i];
                                    }
                                }
                            }
                        }
                    }
                    Tensor::from_parts(s, gx)
                });
                vec![
                    gx,
                    mask[1].then(|| Tensor::from_parts(gamma_shape, dgamma)),
                    mask[2].then(|| Tensor::from_parts(beta_shape, dbeta)),
                ]
            }),
        ))
    }
}

/// Per-channel mean and biased variance over `(n, h, w)`.
#[cfg(test)]
pub(crate) fn channel_moments(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = t.shape();
    let m = (s.n * s.plane()) as f64;
    (0..s.c)
        .map(|c| {
            let vals = || (0..s.n).flat_map(move |n| t.plane(n, c).iter().copied());
            let mu = vals().sum::<f64>() / m;
            let var = vals().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
            (mu, var)
        })
        .unzip()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{Shape, Tape};

    fn affine(tape: &Tape, c: usize) -> (Var<'_>, Var<'_>) {
        (
            tape.constant(Tensor::ones(Shape::new(1, c, 1, 1)).unwrap()),
            tape.constant(Tensor::zeros(Shape::new(1, c, 1, 1)).unwrap()),
        )
    }

    #[test]
    fn constant_input_normalises_to_zero() {
        let tape = Tape::no_grad();
        let (g, b) = affine(&tape, 3);
        let x = tape.constant(Tensor::full(Shape::new(2, 3, 4, 4), 5.0).unwrap());
        let mut stats = RunningStats::new(3);
        let y = x.batch_norm(&g, &b, &mut stats, BatchNormMode::Train).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_output_is_standardised() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::no_grad();
        let (g, b) = affine(&tape, 4);
        let x = tape.constant(Tensor::uniform(Shape::new(3, 4, 5, 6), -10.0, 10.0, &mut rng).unwrap());
        let mut stats = RunningStats::new(4);
        let y = x.batch_norm(&g, &b, &mut stats, BatchNormMode::Train).unwrap();
        let (mean, var) = channel_moments(y.value());
        for c in 0..4 {
            assert!(mean[c].abs() < 1e-9, "mean {}", mean[c]);
            // eps shrinks the variance by eps / (var + eps), ~3e-7 here.
            assert!((var[c] - 1.0).abs() < 1e-6, "var {}", var[c]);
        }
    }

    #[test]
    fn eval_requires_updated_stats() {
        let tape = Tape::no_grad();
        let (g, b) = affine(&tape, 2);
        let x = tape.constant(Tensor::ones(Shape::new(1, 2, 2, 2)).unwrap());
        let mut stats = RunningStats::new(2);
        assert!(matches!(
            x.batch_norm(&g, &b, &mut stats, BatchNormMode::Eval),
            Err(Error::StatsUninitialized)
        ));
        x.batch_norm(&g, &b, &mut stats, BatchNormMode::Train).unwrap();
        assert!(x.batch_norm(&g, &b, &mut stats, BatchNormMode::Eval).is_ok());
    }

    #[test]
    fn running_stats_use_momentum() {
        let tape = Tape::no_grad();
        let (g, b) = affine(&tape, 1);
        let x = tape.constant(Tensor::new(Shape::new(1, 1, 1, 2), vec![1.0, 3.0]).unwrap());
        let mut stats = RunningStats::new(1);
        x.batch_norm(&g, &b, &mut stats, BatchNormMode::Train).unwrap();
        assert!((stats.mean[0] - 0.2).abs() < 1e-15);
        // unbiased batch variance is 2
        assert!((stats.var[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn gamma_length_checked() {
        let tape = Tape::no_grad();
        let (g, b) = affine(&tape, 3);
        let x = tape.constant(Tensor::ones(Shape::new(1, 2, 2, 2)).unwrap());
        let mut stats = RunningStats::new(2);
        assert!(matches!(
            x.batch_norm(&g, &b, &mut stats, BatchNormMode::Train),
            Err(Error::DimMismatch {
                dim: "gamma length",
                ..
            })
        ));
    }
}
