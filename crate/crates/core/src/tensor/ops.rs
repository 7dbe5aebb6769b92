//! Elementwise, reduction and layout ops with their backward rules.

use super::tape::Var;
use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// How the second operand of a binary op lines up with the first.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Layout {
    Same,
    /// `b` is an `(n,c,1,1)` gate against a full `a`.
    GateRight,
    /// `a` is the gate.
    GateLeft,
}

fn layout(op: &'static str, a: Shape, b: Shape) -> Result<Layout> {
    if a == b {
        return Ok(Layout::Same);
    }
    let gate_of = |full: Shape, gate: Shape| gate.n == full.n && gate.c == full.c && gate.h == 1 && gate.w == 1;
    if gate_of(a, b) {
        Ok(Layout::GateRight)
    } else if gate_of(b, a) {
        Ok(Layout::GateLeft)
    } else {
        Err(Error::ShapeMismatch { op, left: a, right: b })
    }
}

/// Sums each `h*w` plane: the adjoint of broadcasting an `(n,c,1,1)` gate.
fn reduce_planes(g: &Tensor) -> Tensor {
    let s = g.shape();
    let data = g.data().chunks(s.plane()).map(|p| p.iter().sum()).collect();
    Tensor::from_parts(Shape::new(s.n, s.c, 1, 1), data)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

/// The tanh term of the GELU approximation, through a single `exp`
/// (noticeably cheaper than libm's `tanh`).
fn gelu_tanh(x: f64) -> f64 {
    let z = GELU_K * (x + GELU_C * x * x * x);
    let t = 1.0 - 2.0 / ((2.0 * z.abs()).exp() + 1.0);
    t.copysign(z)
}

fn gelu_grad_scalar(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    fn unary(&self, value: Tensor, grad: impl Fn(&Tensor) -> Tensor + 'static) -> Var<'t> {
        self.tape
            .record(value, &[self], Box::new(move |g, _| vec![Some(grad(g))]))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.add_sub(other, 1.0, "add")
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.add_sub(other, -1.0, "sub")
    }

    fn add_sub(&self, other: &Var<'t>, sign: f64, op: &'static str) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let lay = layout(op, a.shape(), b.shape())?;
        let value = match lay {
            Layout::Same => a.zip_map(b, |x, y| x + sign * y)?,
            Layout::GateRight => {
                let p = a.shape().plane();
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x + sign * b.data()[i / p])
                    .collect();
                Tensor::from_parts(a.shape(), data)
            }
            Layout::GateLeft => {
                let p = b.shape().plane();
                let data = b
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| a.data()[i / p] + sign * y)
                    .collect();
                Tensor::from_parts(b.shape(), data)
            }
        };
        Ok(self.tape.record(
            value,
            &[self, other],
            Box::new(move |g, mask| {
                let ga = mask[0].then(|| match lay {
                    Layout::GateLeft => reduce_planes(g),
                    _ => g.clone(),
                });
                let gb = mask[1].then(|| {
                    let gb = match lay {
                        Layout::GateRight => reduce_planes(g),
                        _ => g.clone(),
                    };
                    if sign < 0.0 {
                        gb.map(|v| -v)
                    } else {
                        gb
                    }
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise product; either operand may be an `(n,c,1,1)` gate.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.rc(), other.rc());
        let lay = layout("mul", a.shape(), b.shape())?;
        let (full, gate) = match lay {
            Layout::GateLeft => (&b, &a),
            _ => (&a, &b),
        };
        let value = match lay {
            Layout::Same => a.zip_map(&b, |x, y| x * y)?,
            _ => {
                let p = full.shape().plane();
                let gd = gate.data();
                let data = full.data().iter().enumerate().map(|(i, &x)| x * gd[i / p]).collect();
                Tensor::from_parts(full.shape(), data)
            }
        };
        Ok(self.tape.record(
            value,
            &[self, other],
            Box::new(move |g, mask| {
                // d(a*b)/da = b, broadcast or reduced as the layout requires.
                let times = |x: &Tensor, y: &Tensor| -> Tensor {
                    if x.shape() == y.shape() {
                        x.zip_map(y, |u, v| u * v).expect("same shape")
                    } else {
                        let (full, gate) = if x.shape().plane() >= y.shape().plane() {
                            (x, y)
                        } else {
                            (y, x)
                        };
                        let p = full.shape().plane();
                        let data = full
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(i, &u)| u * gate.data()[i / p])
                            .collect();
                        Tensor::from_parts(full.shape(), data)
                    }
                };
                let ga = mask[0].then(|| {
                    let t = times(g, &b);
                    if lay == Layout::GateLeft {
                        reduce_planes(&t)
                    } else {
                        t
                    }
                });
                let gb = mask[1].then(|| {
                    let t = times(g, &a);
                    if lay == Layout::GateRight {
                        reduce_planes(&t)
                    } else {
                        t
                    }
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise quotient of identically shaped operands.
    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.rc(), other.rc());
        let value = a.zip_map(&b, |x, y| x / y).map_err(|_| Error::ShapeMismatch {
            op: "div",
            left: a.shape(),
            right: b.shape(),
        })?;
        Ok(self.tape.record(
            value,
            &[self, other],
            Box::new(move |g, mask| {
                let ga = mask[0].then(|| g.zip_map(&b, |gv, y| gv / y).expect("same shape"));
                let gb = mask[1].then(|| {
                    let data = g
                        .data()
                        .iter()
                        .zip(a.data())
                        .zip(b.data())
                        .map(|((&gv, &x), &y)| -gv * x / (y * y))
                        .collect();
                    Tensor::from_parts(g.shape(), data)
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        self.unary(self.value().map(|v| v * k), move |g| g.map(|v| v * k))
    }

    pub fn add_scalar(&self, k: f64) -> Var<'t> {
        self.unary(self.value().map(|v| v + k), |g| g.clone())
    }

    /// `|x|` with subgradient 0 at 0.
    pub fn abs(&self) -> Var<'t> {
        let x = self.rc();
        self.unary(self.value().map(f64::abs), move |g| {
            g.zip_map(&x, |gv, v| {
                gv * if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .expect("same shape")
        })
    }

    pub fn relu(&self) -> Var<'t> {
        let x = self.rc();
        self.unary(self.value().map(|v| v.max(0.0)), move |g| {
            g.zip_map(&x, |gv, v| if v > 0.0 { gv } else { 0.0 })
                .expect("same shape")
        })
    }

    /// Tanh-approximated GELU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&self) -> Var<'t> {
        let x = self.rc();
        // the backward pass reuses the tanh values
        let t = x.map(gelu_tanh);
        let y = x.zip_map(&t, |v, t| 0.5 * v * (1.0 + t)).expect("same shape");
        self.unary(y, move |g| {
            let d = x.zip_map(&t, gelu_grad_scalar).expect("same shape");
            g.zip_map(&d, |gv, dv| gv * dv).expect("same shape")
        })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let x = self.rc();
        self.unary(self.value().map(sigmoid_scalar), move |g| {
            g.zip_map(&x, |gv, v| {
                let s = sigmoid_scalar(v);
                gv * s * (1.0 - s)
            })
            .expect("same shape")
        })
    }

    /// Sum of all elements as a 1x1x1x1 var.
    pub fn sum(&self) -> Var<'t> {
        let shape = self.shape();
        self.unary(Tensor::scalar(self.value().sum()), move |g| {
            Tensor::from_parts(shape, vec![g.data()[0]; shape.numel()])
        })
    }

    pub fn mean(&self) -> Var<'t> {
        let shape = self.shape();
        let inv = 1.0 / shape.numel() as f64;
        self.unary(Tensor::scalar(self.value().sum() * inv), move |g| {
            Tensor::from_parts(shape, vec![g.data()[0] * inv; shape.numel()])
        })
    }

    /// Per-channel spatial mean, `(n,c,h,w) -> (n,c,1,1)`.
    pub fn global_avg_pool(&self) -> Var<'t> {
        let shape = self.shape();
        let p = shape.plane();
        let inv = 1.0 / p as f64;
        let data = self
            .value()
            .data()
            .chunks(p)
            .map(|c| c.iter().sum::<f64>() * inv)
            .collect();
        let value = Tensor::from_parts(Shape::new(shape.n, shape.c, 1, 1), data);
        self.unary(value, move |g| {
            let mut out = Vec::with_capacity(shape.numel());
            for &gv in g.data() {
                out.extend(std::iter::repeat(gv * inv).take(p));
            }
            Tensor::from_parts(shape, out)
        })
    }

    /// Channels `[start, start+len)`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if len == 0 || start + len > s.c {
            return Err(Error::invalid(format!(
                "slice_channels {start}..{} out of range for {s}",
                start + len
            )));
        }
        let p = s.plane();
        let mut data = Vec::with_capacity(s.n * len * p);
        for n in 0..s.n {
            let base = (n * s.c + start) * p;
            data.extend_from_slice(&self.value().data()[base..base + len * p]);
        }
        let value = Tensor::from_parts(s.with_c(len), data);
        Ok(self.unary(value, move |g| {
            let mut out = vec![0.0; s.numel()];
            for n in 0..s.n {
                let src = n * len * p;
                let dst = (n * s.c + start) * p;
                out[dst..dst + len * p].copy_from_slice(&g.data()[src..src + len * p]);
            }
            Tensor::from_parts(s, out)
        }))
    }

    /// Repeats a single-channel map across `c` channels.
    pub fn broadcast_channels(&self, c: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.c != 1 {
            return Err(Error::DimMismatch {
                op: "broadcast_channels",
                dim: "channels",
                expected: 1,
                actual: s.c,
            });
        }
        let p = s.plane();
        let mut data = Vec::with_capacity(s.n * c * p);
        for n in 0..s.n {
            let plane = self.value().plane(n, 0);
            for _ in 0..c {
                data.extend_from_slice(plane);
            }
        }
        let value = Tensor::from_parts(s.with_c(c), data);
        Ok(self.unary(value, move |g| {
            let mut out = vec![0.0; s.numel()];
            for n in 0..s.n {
                let dst = &mut out[n * p..(n + 1) * p];
                for ch in 0..c {
                    let src = &g.data()[(n * c + ch) * p..(n * c + ch + 1) * p];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
            Tensor::from_parts(s, out)
        }))
    }

    /// `(n, c*r*r, h, w) -> (n, c, h*r, w*r)`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Var<'t>> {
        let value = pixel_shuffle_tensor(self.value(), r)?;
        Ok(self.unary(value, move |g| {
            pixel_unshuffle_tensor(g, r).expect("valid shuffle shape")
        }))
    }

    /// Softmax across `groups` equal channel blocks: for each position and
    /// channel `k` in a block, the values at `k, k+c/groups, ...` are
    /// normalised against each other.
    pub fn group_softmax(&self, groups: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if groups == 0 || s.c % groups != 0 {
            return Err(Error::invalid(format!(
                "group_softmax: {groups} groups do not divide {} channels",
                s.c
            )));
        }
        let block = (s.c / groups) * s.plane();
        let mut out = vec![0.0; s.numel()];
        let x = self.value().data();
        let per_n = s.c * s.plane();
        for n in 0..s.n {
            for k in 0..block {
                let idx = |gi: usize| n * per_n + gi * block + k;
                let m = (0..groups).map(|gi| x[idx(gi)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..groups).map(|gi| (x[idx(gi)] - m).exp()).sum();
                for gi in 0..groups {
                    out[idx(gi)] = (x[idx(gi)] - m).exp() / z;
                }
            }
        }
        let value = Tensor::from_parts(s, out);
        let saved = value.clone();
        Ok(self.unary(value, move |g| {
            let y = saved.data();
            let gd = g.data();
            let mut gx = vec![0.0; s.numel()];
            for n in 0..s.n {
                for k in 0..block {
                    let idx = |gi: usize| n * per_n + gi * block + k;
                    let dot: f64 = (0..groups).map(|gi| gd[idx(gi)] * y[idx(gi)]).sum();
                    for gi in 0..groups {
                        gx[idx(gi)] = y[idx(gi)] * (gd[idx(gi)] - dot);
                    }
                }
            }
            Tensor::from_parts(s, gx)
        }))
    }
}

/// Concatenates along channels. All inputs must share `n`, `h` and `w`.
pub fn concat_channels<'t>(inputs: &[&Var<'t>]) -> Result<Var<'t>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels of zero inputs"))?;
    let s0 = first.shape();
    for v in &inputs[1..] {
        let s = v.shape();
        if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: s0,
                right: s,
            });
        }
    }
    let channels: Vec<usize> = inputs.iter().map(|v| v.shape().c).collect();
    let total: usize = channels.iter().sum();
    let p = s0.plane();
    let out_shape = s0.with_c(total);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..s0.n {
        for (v, &c) in inputs.iter().zip(&channels) {
            let start = n * c * p;
            data.extend_from_slice(&v.value().data()[start..start + c * p]);
        }
    }
    let tape = first.tape;
    Ok(tape.record(
        Tensor::from_parts(out_shape, data),
        inputs,
        Box::new(move |g, mask| {
            let mut offset = 0;
            channels
                .iter()
                .zip(mask)
                .map(|(&c, &needed)| {
                    let start = offset;
                    offset += c;
                    needed.then(|| {
                        let mut out = Vec::with_capacity(s0.n * c * p);
                        for n in 0..s0.n {
                            let base = (n * total + start) * p;
                            out.extend_from_slice(&g.data()[base..base + c * p]);
                        }
                        Tensor::from_parts(Shape::new(s0.n, c, s0.h, s0.w), out)
                    })
                })
                .collect()
        }),
    ))
}

/// Tensor-level sub-pixel rearrangement:
/// `out[n, c, y*r+i, x*r+j] = in[n, c*r*r + i*r + j, y, x]`.
pub fn pixel_shuffle_tensor(t: &Tensor, r: usize) -> Result<Tensor> {
    let s = t.shape();
    if r == 0 || s.c % (r * r) != 0 {
        return Err(Error::invalid(format!(
            "pixel_shuffle: {} channels not divisible by r^2 = {}",
            s.c,
            r * r
        )));
    }
    let oc = s.c / (r * r);
    let out_shape = Shape::new(s.n, oc, s.h * r, s.w * r);
    let mut out = vec![0.0; s.numel()];
    let src = t.data();
    for n in 0..s.n {
        for c in 0..oc {
            for i in 0..r {
                for j in 0..r {
                    let ic = c * r * r + i * r + j;
                    for y in 0..s.h {
                        let in_row = ((n * s.c + ic) * s.h + y) * s.w;
                        let out_row = ((n * oc + c) * out_shape.h + y * r + i) * out_shape.w;
                        for x in 0..s.w {
                            out[out_row + x * r + j] = src[in_row + x];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Inverse of [`pixel_shuffle_tensor`].
pub fn pixel_unshuffle_tensor(t: &Tensor, r: usize) -> Result<Tensor> {
    let s = t.shape();
    if r == 0 || s.h % r != 0 || s.w % r != 0 {
        return Err(Error::invalid(format!(
            "pixel_unshuffle: {}x{} not divisible by r = {r}",
            s.h, s.w
        )));
    }
    let (h, w) = (s.h / r, s.w / r);
    let oc = s.c * r * r;
    let out_shape = Shape::new(s.n, oc, h, w);
    let mut out = vec![0.0; s.numel()];
    let src = t.data();
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..r {
                for j in 0..r {
                    let oc_idx = c * r * r + i * r + j;
                    for y in 0..h {
                        let in_row = ((n * s.c + c) * s.h + y * r + i) * s.w;
                        let out_row = ((n * oc + oc_idx) * h + y) * w;
                        for x in 0..w {
                            out[out_row + x] = src[in_row + x * r + j];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(shape: Shape, data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn gelu_and_sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        assert_eq!(x.gelu().item(), 0.0);
        assert_eq!(x.sigmoid().item(), 0.5);
    }

    #[test]
    fn sigmoid_stays_open_interval_for_moderate_inputs() {
        let tape = Tape::no_grad();
        let x = tape.constant(t(Shape::new(1, 1, 1, 5), &[-30.0, -5.0, 0.0, 5.0, 30.0]));
        for &v in x.sigmoid().value().data() {
            assert!(v > 0.0 && v < 1.0, "{v}");
        }
    }

    #[test]
    fn gap_of_known_values() {
        let tape = Tape::no_grad();
        let x = tape.constant(t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(x.global_avg_pool().item(), 2.5);
        let seven = tape.constant(Tensor::full(Shape::new(2, 3, 4, 5), 7.0).unwrap());
        assert!(seven
            .global_avg_pool()
            .value()
            .data()
            .iter()
            .all(|&v| (v - 7.0).abs() < 1e-15));
    }

    #[test]
    fn gate_broadcast_replicates_per_channel() {
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::ones(Shape::new(1, 2, 2, 2)).unwrap());
        let g = tape.constant(t(Shape::new(1, 2, 1, 1), &[0.25, 4.0]));
        let y = x.mul(&g).unwrap();
        assert_eq!(y.value().data(), &[0.25, 0.25, 0.25, 0.25, 4.0, 4.0, 4.0, 4.0]);
        // Gate on the left gives the same result.
        assert_eq!(g.mul(&x).unwrap().value(), y.value());
    }

    #[test]
    fn mismatched_shapes_are_errors() {
        let tape = Tape::no_grad();
        let a = tape.constant(Tensor::ones(Shape::new(1, 2, 2, 2)).unwrap());
        let b = tape.constant(Tensor::ones(Shape::new(1, 2, 2, 1)).unwrap());
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { op: "add", .. })));
        let c = tape.constant(Tensor::ones(Shape::new(1, 2, 3, 2)).unwrap());
        assert!(concat_channels(&[&a, &c]).is_err());
        assert!(a.pixel_shuffle(2).is_err());
    }

    #[test]
    fn add_passes_gradient_unchanged() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::ones(Shape::new(1, 1, 2, 2)).unwrap());
        let b = tape.leaf(Tensor::ones(Shape::new(1, 1, 2, 2)).unwrap());
        let w = tape.constant(t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]));
        let loss = a.add(&b).unwrap().mul(&w).unwrap().sum();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&a).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(grads.get(&b).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn sum_and_square_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(t(Shape::new(1, 1, 1, 3), &[1.0, -2.0, 3.5]));
        let grads = tape.backward(&x.sum()).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
        let tape = Tape::new();
        let x = tape.leaf(t(Shape::new(1, 1, 1, 3), &[1.0, -2.0, 3.5]));
        let grads = tape.backward(&x.mul(&x).unwrap().sum()).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0, -4.0, 7.0]);
    }

    #[test]
    fn concat_of_one_is_identity_and_channels_add_up() {
        let tape = Tape::no_grad();
        let a = tape.constant(
            Tensor::from_fn(Shape::new(2, 3, 2, 2), |n, c, y, x| {
                (n * 100 + c * 10 + y * 2 + x) as f64
            })
            .unwrap(),
        );
        assert_eq!(concat_channels(&[&a]).unwrap().value(), a.value());
        let cat = concat_channels(&[&a, &a, &a]).unwrap();
        assert_eq!(cat.shape(), Shape::new(2, 9, 2, 2));
        for k in 0..3 {
            assert_eq!(cat.slice_channels(3 * k, 3).unwrap().value(), a.value());
        }
    }

    #[test]
    fn pixel_shuffle_shapes() {
        let tape = Tape::no_grad();
        let x =
            tape.constant(Tensor::from_fn(Shape::new(1, 4, 2, 2), |_, c, y, x| (c * 4 + y * 2 + x) as f64).unwrap());
        let y = x.pixel_shuffle(2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        let mut sorted = y.value().data().to_vec();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, (0..16).map(f64::from).collect::<Vec<_>>());
        assert_eq!(x.pixel_shuffle(1).unwrap().value(), x.value());
    }

    #[test]
    fn group_softmax_rows_sum_to_one() {
        let tape = Tape::no_grad();
        let x = tape.constant(t(Shape::new(1, 4, 1, 1), &[1.0, -3.0, 0.5, 2.0]));
        let y = x.group_softmax(2).unwrap();
        let d = y.value().data();
        assert!((d[0] + d[2] - 1.0).abs() < 1e-15);
        assert!((d[1] + d[3] - 1.0).abs() < 1e-15);
        assert!(d[0] > d[2]);
    }

    #[test]
    fn broadcast_channels_repeats_plane() {
        let tape = Tape::no_grad();
        let x = tape.constant(t(Shape::new(1, 1, 1, 2), &[1.0, 2.0]));
        let y = x.broadcast_channels(3).unwrap();
        assert_eq!(y.value().data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }
}
