use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient checker.
///
/// The error for an element is `|analytic - numeric| / max(1, |numeric|)`;
/// the report holds the maximum per input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many (seeded, randomly chosen) elements per input.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-4,
            tol: 1e-4,
            max_elements: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

impl GradCheck {
    pub fn tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn sample(mut self, max_elements: usize, seed: u64) -> Self {
        self.max_elements = Some(max_elements);
        self.seed = seed;
        self
    }

    /// Checks `f` (which must return a scalar) with respect to every input.
    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        if !loss.shape().is_scalar() {
            return Err(Error::NonScalarLoss(loss.shape()));
        }
        let grads = tape.backward(&loss)?;
        let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();
        drop(grads);

        let eval = |probe: &[Tensor]| -> Result<f64> {
            let tape = Tape::no_grad();
            let vars: Vec<Var<'_>> = probe.iter().map(|t| tape.constant(t.clone())).collect();
            Ok(f(&tape, &vars)?.item())
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut probe: Vec<Tensor> = inputs.to_vec();
        let mut max_rel_error = Vec::with_capacity(inputs.len());
        for (i, input) in inputs.iter().enumerate() {
            let n = input.numel();
            let indices: Vec<usize> = match self.max_elements {
                Some(k) if k < n => {
                    let mut idx = sample(&mut rng, n, k).into_vec();
                    idx.sort_unstable();
                    idx
                }
                _ => (0..n).collect(),
            };
            let mut worst = 0.0f64;
            for j in indices {
                let orig = input.data()[j];
                probe[i].data_mut()[j] = orig + self.eps;
                let plus = eval(&probe)?;
                probe[i].data_mut()[j] = orig - self.eps;
                let minus = eval(&probe)?;
                probe[i].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let err = (analytic[i].data()[j] - numeric).abs() / numeric.abs().max(1.0);
                worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
            }
            max_rel_error.push(worst);
        }
        let passed = max_rel_error.iter().all(|&e| e < self.tol);
        Ok(GradCheckReport {
            max_rel_error,
            tol: self.tol,
            passed,
        })
    }
}

/// [`GradCheck::run`] over every element with the given `eps` and `tol`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    GradCheck::default().eps(eps).tol(tol).run(f, inputs)
}
