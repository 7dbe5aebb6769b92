//! Full-reference image quality: PSNR and SSIM.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Peak signal-to-noise ratio in dB; identical inputs have no finite value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Db(f64),
    Identical,
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(v),
            Psnr::Identical => None,
        }
    }

    /// Numeric value with `Identical` as `+inf`.
    pub fn value(self) -> f64 {
        self.db().unwrap_or(f64::INFINITY)
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v}"),
            Psnr::Identical => f.write_str("inf"),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// `10 log10(max^2 / MSE)` with the MSE over all elements.
pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> Result<Psnr> {
    same_shape("psnr", a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(Psnr::Identical);
    }
    Ok(Psnr::Db(10.0 * (max_val * max_val / mse).log10()))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SsimOptions {
    /// Compare BT.601 luma instead of averaging over RGB channels.
    pub luma: bool,
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = g.iter().sum();
    g.map(|v| v / total)
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window();
    let c1 = (SSIM_K1 * 1.0_f64).powi(2);
    let c2 = (SSIM_K2 * 1.0_f64).powi(2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let aa = filter_valid(&prod(a, a), h, w, &g);
    let bb = filter_valid(&prod(b, b), h, w, &g);
    let ab = filter_valid(&prod(a, b), h, w, &g);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

fn luma(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.c != 3 {
        return Err(Error::DimMismatch {
            op: "ssim luma",
            dim: "channels",
            expected: 3,
            actual: s.c,
        });
    }
    Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, y, x| {
        0.299 * t.at(n, 0, y, x) + 0.587 * t.at(n, 1, y, x) + 0.114 * t.at(n, 2, y, x)
    })
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over valid
/// positions, dynamic range 1, averaged over channels and batch.
pub fn ssim(a: &Tensor, b: &Tensor, opts: SsimOptions) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            s.h, s.w
        )));
    }
    let (a, b) = if opts.luma {
        (luma(a)?, luma(b)?)
    } else {
        (a.clone(), b.clone())
    };
    let s = a.shape();
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            total += ssim_plane(a.plane(n, c), b.plane(n, c), s.h, s.w);
        }
    }
    Ok(total / (s.n * s.c) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub psnr: Psnr,
    pub ssim: f64,
}

/// Per-image scores with dataset means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub images: Vec<ImageScore>,
}

impl MetricReport {
    /// Scores the clamped `output` against `target`.
    pub fn push(&mut self, id: impl Into<String>, output: &Tensor, target: &Tensor, opts: SsimOptions) -> Result<()> {
        let out = output.clamp(0.0, 1.0);
        self.images.push(ImageScore {
            id: id.into(),
            psnr: psnr(&out, target, 1.0)?,
            ssim: ssim(&out, target, opts)?,
        });
        Ok(())
    }

    /// Mean over images with a finite PSNR; `Identical` if there are none.
    pub fn mean_psnr(&self) -> Psnr {
        let finite: Vec<f64> = self.images.iter().filter_map(|s| s.psnr.db()).collect();
        if finite.is_empty() {
            Psnr::Identical
        } else {
            Psnr::Db(finite.iter().sum::<f64>() / finite.len() as f64)
        }
    }

    pub fn mean_ssim(&self) -> f64 {
        self.images.iter().map(|s| s.ssim).sum::<f64>() / self.images.len().max(1) as f64
    }

    /// One `id psnr ssim` line per image, then a `mean` line.
    pub fn lines(&self) -> String {
        let mut out = String::new();
        for s in &self.images {
            out.push_str(&format!("{} {} {}\n", s.id, s.psnr, s.ssim));
        }
        out.push_str(&format!("mean {} {}\n", self.mean_psnr(), self.mean_ssim()));
        out
    }

    pub fn table(&self) -> String {
        let fmt_psnr = |p: Psnr| p.db().map_or_else(|| "inf".to_owned(), |v| format!("{v:.3}"));
        let mut out = format!("{:<12} {:>10} {:>8}\n", "id", "PSNR(dB)", "SSIM");
        for s in &self.images {
            out.push_str(&format!("{:<12} {:>10} {:>8.4}\n", s.id, fmt_psnr(s.psnr), s.ssim));
        }
        out.push_str(&format!(
            "{:<12} {:>10} {:>8.4}\n",
            "mean",
            fmt_psnr(self.mean_psnr()),
            self.mean_ssim()
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(v: f64) -> Tensor {
        Tensor::full(Shape::new(1, 3, 16, 16), v).unwrap()
    }

    #[test]
    fn psnr_arithmetic() {
        let a = full(0.2);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), Psnr::Identical);
        let b = full(0.3);
        let p = psnr(&a, &b, 1.0).unwrap().db().unwrap();
        assert!((p - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        let c = full(0.2 + 0.01);
        assert!((psnr(&a, &c, 1.0).unwrap().value() - 40.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_special_cases() {
        let a = Tensor::from_fn(Shape::new(1, 3, 16, 16), |_, c, y, x| ((c + y * x) % 7) as f64 / 7.0).unwrap();
        assert!((ssim(&a, &a, SsimOptions::default()).unwrap() - 1.0).abs() < 1e-12);
        let c1 = 1e-4;
        let zero_one = ssim(&full(0.0), &full(1.0), SsimOptions::default()).unwrap();
        assert!((zero_one - c1 / (1.0 + c1)).abs() < 1e-12);
        let small = Tensor::zeros(Shape::new(1, 3, 8, 8)).unwrap();
        assert!(ssim(&small, &small, SsimOptions::default()).is_err());
        let y = ssim(&a, &a.map(|v| v * 0.9), SsimOptions { luma: true }).unwrap();
        assert!(y > 0.0 && y < 1.0);
    }

    #[test]
    fn report_formats() {
        let mut r = MetricReport::default();
        r.push("a", &full(0.5), &full(0.5), SsimOptions::default()).unwrap();
        r.push("b", &full(0.6), &full(0.5), SsimOptions::default()).unwrap();
        let lines = r.lines();
        assert!(lines.starts_with("a inf 1\n"));
        assert!((r.mean_psnr().value() - 20.0).abs() < 1e-9);
        assert!(r.table().contains("inf"));
    }
}
