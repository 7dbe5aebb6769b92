//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use dehaze::tensor::{ConvSpec, Tape, Var};
use dehaze::{Result, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: Shape, seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed)).unwrap()
}

/// Direct convolution straight from the definition, zero padding.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
    let xs = x.shape();
    let (kh, kw) = spec.kernel;
    let (s, p, d, g) = (
        spec.stride as isize,
        spec.padding as isize,
        spec.dilation as isize,
        spec.groups,
    );
    let oh = ((xs.h as isize + 2 * p - (d * (kh as isize - 1) + 1)) / s + 1) as usize;
    let ow = ((xs.w as isize + 2 * p - (d * (kw as isize - 1) + 1)) / s + 1) as usize;
    let in_g = spec.in_channels / g;
    let out_g = spec.out_channels / g;
    let mut out = Tensor::zeros(Shape::new(xs.n, spec.out_channels, oh, ow)).unwrap();
    for n in 0..xs.n {
        for co in 0..spec.out_channels {
            let group = co / out_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..in_g {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = oy as isize * s - p + ky as isize * d;
                                let ix = ox as isize * s - p + kx as isize * d;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += w.at(co, ci, ky, kx) * x.at(n, group * in_g + ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(n, co, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// `sum(v * r)` for a fixed random `r`, so every output element carries a
/// distinct weight into the checked gradient.
pub fn weighted_sum<'t>(v: &Var<'t>, seed: u64) -> Result<Var<'t>> {
    let r = uniform(v.shape(), seed);
    v.mul(&v.tape().constant(r)).map(|p| p.sum())
}

pub fn leaf_tape_eval<F>(f: F, inputs: &[Tensor]) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::no_grad();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    f(&tape, &vars).unwrap().item()
}

/// Windowed SSIM from the definition: an explicit 2-D Gaussian kernel laid
/// over every valid position, moments accumulated directly.
pub fn reference_ssim(a: &Tensor, b: &Tensor) -> f64 {
    let s = a.shape();
    let k = 11usize;
    let sigma = 1.5f64;
    let mut kernel = vec![vec![0.0; k]; k];
    let mut z = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            z += *v;
        }
    }
    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..s.n {
        for c in 0..s.c {
            let mut plane_sum = 0.0;
            let mut windows = 0usize;
            for y in 0..=s.h - k {
                for x in 0..=s.w - k {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let w = kernel[i][j] / z;
                            ma += w * a.at(n, c, y + i, x + j);
                            mb += w * b.at(n, c, y + i, x + j);
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let w = kernel[i][j] / z;
                            let (da, db) = (a.at(n, c, y + i, x + j) - ma, b.at(n, c, y + i, x + j) - mb);
                            va += w * da * da;
                            vb += w * db * db;
                            cov += w * da * db;
                        }
                    }
                    plane_sum +=
                        ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    windows += 1;
                }
            }
            total += plane_sum / windows as f64;
            count += 1;
        }
    }
    total / count as f64
}

pub fn reference_psnr(a: &Tensor, b: &Tensor) -> f64 {
    let mut se = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        se += (x - y) * (x - y);
    }
    -10.0 * (se / a.numel() as f64).log10()
}
