//! 2-D convolution: im2col + GEMM for dense and grouped kernels, direct
//! loops for depth-wise kernels.
//!
//! Batch items are processed independently (and in parallel when a rayon
//! pool has more than one worker). Weight gradients are reduced over the
//! batch in item order, so results do not depend on the worker count.

use std::cell::RefCell;
use std::rc::Rc;

use rayon::prelude::*;

use super::tape::Var;
use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Geometry of a convolution. Weights live in a separate `(out, in/groups,
/// kh, kw)` tensor; padding is symmetric zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Square `k x k` kernel, stride 1, no padding, no dilation, dense.
    pub fn new(in_channels: usize, out_channels: usize, k: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec::new(in_channels, out_channels, 1)
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Padding `dilation * (k - 1) / 2`, which preserves spatial size at
    /// stride 1 for odd kernels.
    pub fn same(mut self) -> Self {
        self.padding = self.dilation * (self.kernel.0 - 1) / 2;
        self
    }

    /// Receptive span `dilation * (k - 1) + 1` per axis.
    pub fn extent(&self) -> (usize, usize) {
        (
            self.dilation * (self.kernel.0 - 1) + 1,
            self.dilation * (self.kernel.1 - 1) + 1,
        )
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels / self.groups.max(1),
            self.kernel.0,
            self.kernel.1,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if self.groups == 0 || self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::Groups {
                groups: self.groups,
                in_channels: self.in_channels,
                out_channels: self.out_channels,
            });
        }
        if self.in_channels == 0
            || self.out_channels == 0
            || kh == 0
            || kw == 0
            || self.stride == 0
            || self.dilation == 0
        {
            return Err(Error::invalid(format!("degenerate convolution {self:?}")));
        }
        Ok(())
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (eh, ew) = self.extent();
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < eh || pw < ew {
            return Err(Error::invalid(format!(
                "conv2d: padded input {ph}x{pw} smaller than kernel extent {eh}x{ew}"
            )));
        }
        Ok(((ph - eh) / self.stride + 1, (pw - ew) / self.stride + 1))
    }

    /// Multiply-accumulates for one forward pass:
    /// `n * out * (in / groups) * kh * kw * out_h * out_w`.
    pub fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_hw(h, w).unwrap_or((0, 0));
        (n * self.out_channels * (self.in_channels / self.groups) * self.kernel.0 * self.kernel.1 * oh * ow) as u64
    }

    fn kind(&self) -> Kind {
        let in_g = self.in_channels / self.groups;
        let out_g = self.out_channels / self.groups;
        if in_g == 1 && out_g == 1 {
            Kind::Depthwise
        } else if self.kernel == (1, 1) && self.stride == 1 && self.padding == 0 {
            Kind::Pointwise
        } else {
            Kind::General
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Depthwise,
    Pointwise,
    General,
}

/// Geometry resolved against a concrete input.
#[derive(Clone, Copy)]
struct Geom {
    spec: ConvSpec,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    in_g: usize,
    out_g: usize,
    /// Rows of the im2col matrix: `in_g * kh * kw`.
    k_rows: usize,
}

impl Geom {
    fn new(x: Shape, spec: &ConvSpec) -> Result<Self> {
        spec.validate()?;
        let (oh, ow) = spec.output_hw(x.h, x.w)?;
        let in_g = spec.in_channels / spec.groups;
        Ok(Geom {
            spec: *spec,
            h: x.h,
            w: x.w,
            oh,
            ow,
            in_g,
            out_g: spec.out_channels / spec.groups,
            k_rows: in_g * spec.kernel.0 * spec.kernel.1,
        })
    }

    fn in_plane(&self) -> usize {
        self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns per im2col chunk, sized to keep the column buffer
    /// around 2 MiB.
    fn chunk(&self) -> usize {
        ((1usize << 18) / self.k_rows).max(64).min(self.out_plane())
    }

    /// Output positions `lo..hi` along one axis whose input index
    /// `o * stride + offset - padding` falls inside `0..len`.
    fn valid(&self, offset: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.spec.stride;
        let pad = self.spec.padding;
        let lo = if offset >= pad { 0 } else { (pad - offset).div_ceil(s) };
        let hi = if len + pad <= offset {
            0
        } else {
            ((len - 1 + pad - offset) / s + 1).min(out_len)
        };
        (lo, hi.max(lo))
    }
}

fn check_operands(x: Shape, w: Shape, b: Option<Shape>, spec: &ConvSpec) -> Result<Geom> {
    if x.c != spec.in_channels {
        return Err(Error::DimMismatch {
            op: "conv2d",
            dim: "input channels",
            expected: spec.in_channels,
            actual: x.c,
        });
    }
    let geom = Geom::new(x, spec)?;
    let ws = spec.weight_shape();
    for (dim, expected, actual) in [
        ("weight out_channels", ws.n, w.n),
        ("weight in_channels/groups", ws.c, w.c),
        ("weight kernel rows", ws.h, w.h),
        ("weight kernel cols", ws.w, w.w),
    ] {
        if expected != actual {
            return Err(Error::DimMismatch {
                op: "conv2d",
                dim,
                expected,
                actual,
            });
        }
    }
    if let Some(b) = b {
        if b.numel() != spec.out_channels {
            return Err(Error::DimMismatch {
                op: "conv2d",
                dim: "bias length",
                expected: spec.out_channels,
                actual: b.numel(),
            });
        }
    }
    Ok(geom)
}

/// `C = A * B + beta * C` over strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len() && last(k, n, rsb, csb) < b.len());
    }
    assert!(last(m, n, rsc, 1) < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Fills `col` (`k_rows x (p1-p0)`) with the receptive fields of output
/// positions `p0..p1` for group `g` of one batch item.
fn im2col(geom: &Geom, x: &[f64], g: usize, p0: usize, p1: usize, col: &mut [f64]) {
    let (kh, kw) = geom.spec.kernel;
    let (s, d, pad) = (geom.spec.stride, geom.spec.dilation, geom.spec.padding);
    let pc = p1 - p0;
    for r in 0..geom.k_rows {
        let ci = r / (kh * kw);
        let ky = (r / kw) % kh;
        let kx = r % kw;
        let plane = &x[(g * geom.in_g + ci) * geom.in_plane()..][..geom.in_plane()];
        let dst = &mut col[r * pc..(r + 1) * pc];
        let (lo, hi) = geom.valid(kx * d, geom.w, geom.ow);
        let mut idx = 0;
        let mut p = p0;
        while p < p1 {
            let oy = p / geom.ow;
            let ox0 = p % geom.ow;
            let ox1 = (ox0 + (p1 - p)).min(geom.ow);
            let iy = (oy * s + ky * d) as isize - pad as isize;
            let row = &mut dst[idx..idx + (ox1 - ox0)];
            if iy < 0 || iy >= geom.h as isize {
                row.fill(0.0);
            } else {
                let src = &plane[iy as usize * geom.w..][..geom.w];
                let (a, b) = (lo.clamp(ox0, ox1), hi.clamp(ox0, ox1));
                row[..a - ox0].fill(0.0);
                row[b - ox0..].fill(0.0);
                let inner = &mut row[a - ox0..b - ox0];
                if a < b {
                    let first = a * s + kx * d - pad;
                    if s == 1 {
                        inner.copy_from_slice(&src[first..first + (b - a)]);
                    } else {
                        for (k, slot) in inner.iter_mut().enumerate() {
                            *slot = src[first + k * s];
                        }
                    }
                }
            }
            idx += ox1 - ox0;
            p += ox1 - ox0;
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back into `gx` with accumulation.
fn col2im(geom: &Geom, col: &[f64], g: usize, p0: usize, p1: usize, gx: &mut [f64]) {
    let (kh, kw) = geom.spec.kernel;
    let (s, d, pad) = (geom.spec.stride, geom.spec.dilation, geom.spec.padding);
    let pc = p1 - p0;
    for r in 0..geom.k_rows {
        let ci = r / (kh * kw);
        let ky = (r / kw) % kh;
        let kx = r % kw;
        let in_plane = geom.in_plane();
        let plane = &mut gx[(g * geom.in_g + ci) * in_plane..][..in_plane];
        let src = &col[r * pc..(r + 1) * pc];
        let (lo, hi) = geom.valid(kx * d, geom.w, geom.ow);
        let mut idx = 0;
        let mut p = p0;
        while p < p1 {
            let oy = p / geom.ow;
            let ox0 = p % geom.ow;
            let ox1 = (ox0 + (p1 - p)).min(geom.ow);
            let iy = (oy * s + ky * d) as isize - pad as isize;
            if iy >= 0 && iy < geom.h as isize {
                let dst = &mut plane[iy as usize * geom.w..][..geom.w];
                let (a, b) = (lo.clamp(ox0, ox1), hi.clamp(ox0, ox1));
                if a < b {
                    let first = a * s + kx * d - pad;
                    let seg = &src[idx + a - ox0..idx + b - ox0];
                    if s == 1 {
                        for (o, &v) in dst[first..first + (b - a)].iter_mut().zip(seg) {
                            *o += v;
                        }
                    } else {
                        for (k, &v) in seg.iter().enumerate() {
                            dst[first + k * s] += v;
                        }
                    }
                }
            }
            idx += ox1 - ox0;
            p += ox1 - ox0;
        }
    }
}

thread_local! {
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` on two per-thread buffers of the given lengths. Their contents
/// are stale, so callers must overwrite every element they read.
fn with_scratch<R>(a: usize, b: usize, f: impl FnOnce(&mut [f64], &mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < a + b {
            buf.resize(a + b, 0.0);
        }
        let (x, y) = buf.split_at_mut(a);
        f(x, &mut y[..b])
    })
}

fn depthwise_forward(geom: &Geom, x: &[f64], w: &[f64], out: &mut [f64]) {
    let (kh, kw) = geom.spec.kernel;
    let (s, d, pad) = (geom.spec.stride, geom.spec.dilation, geom.spec.padding);
    let (ip, op) = (geom.in_plane(), geom.out_plane());
    for c in 0..geom.spec.in_channels {
        let xp = &x[c * ip..(c + 1) * ip];
        let kern = &w[c * kh * kw..(c + 1) * kh * kw];
        let outp = &mut out[c * op..(c + 1) * op];
        let (ylo, yhi) = (0, geom.oh);
        for oy in ylo..yhi {
            let orow = &mut outp[oy * geom.ow..(oy + 1) * geom.ow];
            for ky in 0..kh {
                let iy = (oy * s + ky * d) as isize - pad as isize;
                if iy < 0 || iy >= geom.h as isize {
                    continue;
                }
                let xrow = &xp[iy as usize * geom.w..][..geom.w];
                for kx in 0..kw {
                    let wv = kern[ky * kw + kx];
                    let (lo, hi) = geom.valid(kx * d, geom.w, geom.ow);
                    if lo >= hi {
                        continue;
                    }
                    if s == 1 {
                        let src = &xrow[lo + kx * d - pad..hi + kx * d - pad];
                        for (o, &v) in orow[lo..hi].iter_mut().zip(src) {
                            *o += wv * v;
                        }
                    } else {
                        for ox in lo..hi {
                            orow[ox] += wv * xrow[ox * s + kx * d - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorises;
/// the summation order is fixed, keeping results reproducible.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn depthwise_backward(
    geom: &Geom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
) {
    let (kh, kw) = geom.spec.kernel;
    let (s, d, pad) = (geom.spec.stride, geom.spec.dilation, geom.spec.padding);
    let (ip, op) = (geom.in_plane(), geom.out_plane());
    for c in 0..geom.spec.in_channels {
        let xp = &x[c * ip..(c + 1) * ip];
        let gp = &gout[c * op..(c + 1) * op];
        for oy in 0..geom.oh {
            let grow = &gp[oy * geom.ow..(oy + 1) * geom.ow];
            for ky in 0..kh {
                let iy = (oy * s + ky * d) as isize - pad as isize;
                if iy < 0 || iy >= geom.h as isize {
                    continue;
                }
                let iy = iy as usize;
                for kx in 0..kw {
                    let (lo, hi) = geom.valid(kx * d, geom.w, geom.ow);
                    if lo >= hi {
                        continue;
                    }
                    let k = c * kh * kw + ky * kw + kx;
                    // input columns for the stride-1 paths; add before subtracting
                    // since `kx * d` may be smaller than `pad`
                    let (a, b) = if s == 1 {
                        (lo + kx * d - pad, hi + kx * d - pad)
                    } else {
                        (0, 0)
                    };
                    if let Some(gw) = gw.as_deref_mut() {
                        let xrow = &xp[iy * geom.w..][..geom.w];
                        let acc: f64 = if s == 1 {
                            dot(&grow[lo..hi], &xrow[a..b])
                        } else {
                            (lo..hi).map(|ox| grow[ox] * xrow[ox * s + kx * d - pad]).sum()
                        };
                        gw[k] += acc;
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        let wv = w[k];
                        let gxrow = &mut gx[c * ip + iy * geom.w..][..geom.w];
                        if s == 1 {
                            for (o, &g) in gxrow[a..b].iter_mut().zip(&grow[lo..hi]) {
                                *o += wv * g;
                            }
                        } else {
                            for ox in lo..hi {
                                gxrow[ox * s + kx * d - pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn forward_item(geom: &Geom, x: &[f64], w: &[f64], out: &mut [f64]) {
    let op = geom.out_plane();
    let ip = geom.in_plane();
    match geom.spec.kind() {
        Kind::Depthwise => depthwise_forward(geom, x, w, out),
        Kind::Pointwise => {
            for g in 0..geom.spec.groups {
                gemm(
                    geom.out_g,
                    geom.in_g,
                    op,
                    &w[g * geom.out_g * geom.in_g..],
                    (geom.in_g, 1),
                    &x[g * geom.in_g * ip..],
                    (ip, 1),
                    0.0,
                    &mut out[g * geom.out_g * op..],
                    op,
                );
            }
        }
        Kind::General => with_scratch(geom.k_rows * geom.chunk(), 0, |col, _| {
            let chunk = geom.chunk();
            for g in 0..geom.spec.groups {
                let wg = &w[g * geom.out_g * geom.k_rows..];
                let mut p0 = 0;
                while p0 < op {
                    let p1 = (p0 + chunk).min(op);
                    let pc = p1 - p0;
                    im2col(geom, x, g, p0, p1, col);
                    gemm(
                        geom.out_g,
                        geom.k_rows,
                        pc,
                        wg,
                        (geom.k_rows, 1),
                        col,
                        (pc, 1),
                        0.0,
                        &mut out[g * geom.out_g * op + p0..],
                        op,
                    );
                    p0 = p1;
                }
            }
        }),
    }
}

/// Gradients of one batch item: `(d input, d weight)`.
fn backward_item(
    geom: &Geom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let op = geom.out_plane();
    let ip = geom.in_plane();
    let mut gx = need_x.then(|| vec![0.0; geom.spec.in_channels * ip]);
    let mut gw = need_w.then(|| vec![0.0; geom.spec.out_channels * geom.k_rows]);
    match geom.spec.kind() {
        Kind::Depthwise => depthwise_backward(geom, x, w, gout, gx.as_deref_mut(), gw.as_deref_mut()),
        Kind::Pointwise => {
            for g in 0..geom.spec.groups {
                let go = &gout[g * geom.out_g * op..];
                let xg = &x[g * geom.in_g * ip..];
                let wg = &w[g * geom.out_g * geom.in_g..];
                if let Some(gw) = gw.as_deref_mut() {
                    // dW_g += G_g * X_g^T
                    gemm(
                        geom.out_g,
                        op,
                        geom.in_g,
                        go,
                        (op, 1),
                        xg,
                        (1, ip),
                        1.0,
                        &mut gw[g * geom.out_g * geom.in_g..],
                        geom.in_g,
                    );
                }
                if let Some(gx) = gx.as_deref_mut() {
                    // dX_g = W_g^T * G_g
                    gemm(
                        geom.in_g,
                        geom.out_g,
                        op,
                        wg,
                        (1, geom.in_g),
                        go,
                        (op, 1),
                        0.0,
                        &mut gx[g * geom.in_g * ip..],
                        ip,
                    );
                }
            }
        }
        Kind::General => {
            let chunk = geom.chunk();
            let len = geom.k_rows * chunk;
            with_scratch(len, if need_x { len } else { 0 }, |col, dcol| {
                for g in 0..geom.spec.groups {
                    let wg = &w[g * geom.out_g * geom.k_rows..];
                    let mut p0 = 0;
                    while p0 < op {
                        let p1 = (p0 + chunk).min(op);
                        let pc = p1 - p0;
                        let go = &gout[g * geom.out_g * op + p0..];
                        if let Some(gw) = gw.as_deref_mut() {
                            im2col(geom, x, g, p0, p1, col);
                            // dW_g += G_g[:, chunk] * col^T
                            gemm(
                                geom.out_g,
                                pc,
                                geom.k_rows,
                                go,
                                (op, 1),
                                col,
                                (1, pc),
                                1.0,
                                &mut gw[g * geom.out_g * geom.k_rows..],
                                geom.k_rows,
                            );
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            // dcol = W_g^T * G_g[:, chunk]
                            gemm(
                                geom.k_rows,
                                geom.out_g,
                                pc,
                                wg,
                                (1, geom.k_rows),
                                go,
                                (op, 1),
                                0.0,
                                dcol,
                                pc,
                            );
                            col2im(geom, dcol, g, p0, p1, gx);
                        }
                        p0 = p1;
                    }
                }
            });
        }
    }
    (gx, gw)
}

/// Forward convolution of a whole batch.
pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let geom = check_operands(x.shape(), weight.shape(), bias.map(Tensor::shape), spec)?;
    let xs = x.shape();
    let out_shape = Shape::new(xs.n, spec.out_channels, geom.oh, geom.ow);
    let per_in = xs.c * xs.plane();
    let per_out = spec.out_channels * geom.out_plane();
    let mut out = vec![0.0; out_shape.numel()];
    out.par_chunks_mut(per_out).enumerate().for_each(|(n, o)| {
        forward_item(&geom, &x.data()[n * per_in..(n + 1) * per_in], weight.data(), o);
        if let Some(b) = bias {
            for (plane, &bv) in o.chunks_mut(geom.out_plane()).zip(b.data()) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Ok(Tensor::from_parts(out_shape, out))
}

/// Gradients `(d input, d weight, d bias)` for the requested operands.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
    need: [bool; 3],
) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
    let geom = check_operands(x.shape(), weight.shape(), None, spec)?;
    let xs = x.shape();
    let expected = Shape::new(xs.n, spec.out_channels, geom.oh, geom.ow);
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            left: expected,
            right: grad_out.shape(),
        });
    }
    let per_in = xs.c * xs.plane();
    let per_out = spec.out_channels * geom.out_plane();
    let [need_x, need_w, need_b] = need;

    let items: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = if need_x || need_w {
        (0..xs.n)
            .into_par_iter()
            .map(|n| {
                backward_item(
                    &geom,
                    &x.data()[n * per_in..(n + 1) * per_in],
                    weight.data(),
                    &grad_out.data()[n * per_out..(n + 1) * per_out],
                    need_x,
                    need_w,
                )
            })
            .collect()
    } else {
        Vec::new()
    };

    let gx = need_x.then(|| {
        let mut data = Vec::with_capacity(xs.numel());
        for (gx, _) in &items {
            data.extend_from_slice(gx.as_ref().expect("requested"));
        }
        Tensor::from_parts(xs, data)
    });
    let gw = need_w.then(|| {
        let mut acc = vec![0.0; weight.numel()];
        for (_, gw) in &items {
            for (a, v) in acc.iter_mut().zip(gw.as_ref().expect("requested")) {
                *a += v;
            }
        }
        Tensor::from_parts(weight.shape(), acc)
    });
    let gb = need_b.then(|| {
        let mut acc = vec![0.0; spec.out_channels];
        for n in 0..xs.n {
            for (co, a) in acc.iter_mut().enumerate() {
                let start = n * per_out + co * geom.out_plane();
                *a += grad_out.data()[start..start + geom.out_plane()].iter().sum::<f64>();
            }
        }
        Tensor::from_parts(Shape::new(1, spec.out_channels, 1, 1), acc)
    });
    Ok((gx, gw, gb))
}

impl<'t> Var<'t> {
    pub fn conv2d(&self, weight: &Var<'t>, bias: Option<&Var<'t>>, spec: &ConvSpec) -> Result<Var<'t>> {
        let value = conv2d_forward(self.value(), weight.value(), bias.map(|b| b.value()), spec)?;
        let x: Rc<Tensor> = self.rc();
        let w: Rc<Tensor> = weight.rc();
        let spec = *spec;
        let bias_shape = bias.map(|b| b.shape());
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.tape.record(
            value,
            &inputs,
            Box::new(move |g, mask| {
                let need_b = mask.get(2).copied().unwrap_or(false);
                let (gx, gw, gb) =
                    conv2d_backward(&x, &w, &spec, g, [mask[0], mask[1], need_b]).expect("shapes validated in forward");
                let mut out = vec![gx, gw];
                if let Some(bs) = bias_shape {
                    out.push(gb.map(|t| t.reshape(bs).expect("bias numel matches")));
                }
                out
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn unit_filter_counts_neighbours() {
        let x = Tensor::ones(Shape::new(1, 1, 3, 3)).unwrap();
        let w = Tensor::ones(Shape::new(1, 1, 3, 3)).unwrap();
        let spec = ConvSpec::new(1, 1, 3).padding(1);
        let y = conv2d_forward(&x, &w, None, &spec).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at(0, 0, r, c), 4.0);
        }
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn dilated_depthwise_same_padding_keeps_size() {
        let spec = ConvSpec::new(4, 4, 7).dilation(3).groups(4).same();
        assert_eq!(spec.padding, 9);
        assert_eq!(spec.extent(), (19, 19));
        let x = Tensor::ones(Shape::new(1, 4, 10, 12)).unwrap();
        let w = Tensor::ones(spec.weight_shape()).unwrap();
        let y = conv2d_forward(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 10, 12));
    }

    #[test]
    fn stride_two_output_size() {
        let spec = ConvSpec::new(2, 4, 3).stride(2).padding(1);
        assert_eq!(spec.output_hw(8, 8).unwrap(), (4, 4));
        assert_eq!(spec.output_hw(7, 9).unwrap(), (4, 5));
    }

    #[test]
    fn errors_name_the_offending_dim() {
        let spec = ConvSpec::new(3, 4, 3);
        let x = Tensor::zeros(Shape::new(1, 2, 5, 5)).unwrap();
        let w = Tensor::zeros(spec.weight_shape()).unwrap();
        match conv2d_forward(&x, &w, None, &spec) {
            Err(Error::DimMismatch {
                dim,
                expected: 3,
                actual: 2,
                ..
            }) => assert_eq!(dim, "input channels"),
            other => panic!("unexpected {other:?}"),
        }
        let bad = ConvSpec::new(6, 4, 3).groups(4);
        assert!(matches!(bad.validate(), Err(Error::Groups { groups: 4, .. })));
        let x = Tensor::zeros(Shape::new(1, 3, 5, 5)).unwrap();
        let w = Tensor::zeros(Shape::new(4, 3, 3, 1)).unwrap();
        assert!(matches!(
            conv2d_forward(&x, &w, None, &spec),
            Err(Error::DimMismatch {
                dim: "weight kernel cols",
                ..
            })
        ));
    }

    #[test]
    fn bias_gradient_sums_output_gradient() {
        let tape = Tape::new();
        let spec = ConvSpec::new(1, 2, 1);
        let x = tape.constant(Tensor::ones(Shape::new(2, 1, 3, 3)).unwrap());
        let w = tape.leaf(Tensor::ones(spec.weight_shape()).unwrap());
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 2, 1, 1)).unwrap());
        let loss = x.conv2d(&w, Some(&b), &spec).unwrap().sum();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&b).unwrap().data(), &[18.0, 18.0]);
        assert_eq!(grads.get(&w).unwrap().data(), &[18.0, 18.0]);
    }
}
