//! Differentiable tensor operations.

use super::{Tensor, Var};
use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn};

fn scalar(v: f64) -> Tensor {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn as_2d(t: &Tensor, cols: usize) -> ArrayView2<'_, f64> {
    let rows = t.len() / cols;
    t.view()
        .into_shape((rows, cols))
        .expect("tensor must be in standard layout")
}

fn standard(t: Tensor) -> Tensor {
    if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    }
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

const TANH_CLAMP: f64 = 7.905_311_107_635_498;
const TANH_NUM: [f64; 7] = [
    4.893_524_558_917_86e-3,
    6.372_619_288_754_36e-4,
    1.485_722_357_179_79e-5,
    5.122_297_090_371_14e-8,
    -8.604_671_522_137_35e-11,
    2.000_187_904_824_77e-13,
    -2.760_768_477_423_55e-16,
];
const TANH_DEN: [f64; 4] = [
    4.893_525_185_543_85e-3,
    2.268_434_632_439e-3,
    1.185_347_056_866_54e-4,
    1.198_258_394_667_02e-6,
];

/// Rational approximation of `tanh`.
#[inline]
fn rational_tanh_value(z: f64) -> f64 {
    let z = z.clamp(-TANH_CLAMP, TANH_CLAMP);
    let z2 = z * z;
    let mut p = TANH_NUM[6];
    for k in (0..6).rev() {
        p = p * z2 + TANH_NUM[k];
    }
    let q = ((TANH_DEN[3] * z2 + TANH_DEN[2]) * z2 + TANH_DEN[1]) * z2 + TANH_DEN[0];
    z * p / q
}

/// [`rational_tanh_value`] and its exact derivative.
#[inline]
fn rational_tanh(z: f64) -> (f64, f64) {
    if z.abs() >= TANH_CLAMP {
        return (rational_tanh_value(z), 0.0);
    }
    rational_tanh_inner(z)
}

#[inline]
fn rational_tanh_inner(z: f64) -> (f64, f64) {
    let z2 = z * z;
    let mut p = TANH_NUM[6];
    let mut dp = 6.0 * TANH_NUM[6];
    for k in (0..6).rev() {
        p = p * z2 + TANH_NUM[k];
        if k > 0 {
            dp = dp * z2 + k as f64 * TANH_NUM[k];
        }
    }
    let mut q = TANH_DEN[3];
    let mut dq = 3.0 * TANH_DEN[3];
    for k in (0..3).rev() {
        q = q * z2 + TANH_DEN[k];
        if k > 0 {
            dq = dq * z2 + k as f64 * TANH_DEN[k];
        }
    }
    // numerator is z * p(z^2), so its derivative is p + 2 z^2 p'(z^2)
    let num = z * p;
    let dnum = p + 2.0 * z2 * dp;
    let dden = 2.0 * z * dq;
    (num / q, (dnum * q - num * dden) / (q * q))
}

#[inline]
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + rational_tanh_value(GELU_A * (x + GELU_B * x * x * x)))
}

#[inline]
fn gelu_grad_scalar(x: f64) -> f64 {
    let (t, dt) = rational_tanh(GELU_A * (x + GELU_B * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * dt * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
}

/// Elementwise map over a tensor, using a flat loop when the layout allows it.
pub(crate) fn map1(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    match a.as_slice() {
        Some(xs) => {
            let v: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
            ArrayD::from_shape_vec(a.raw_dim(), v).unwrap()
        }
        None => a.mapv(f),
    }
}

/// Elementwise combination of two equally shaped tensors.
pub(crate) fn map2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    match (a.as_slice(), b.as_slice()) {
        (Some(xs), Some(ys)) => {
            let v: Vec<f64> = xs.iter().zip(ys).map(|(&x, &y)| f(x, y)).collect();
            ArrayD::from_shape_vec(a.raw_dim(), v).unwrap()
        }
        _ => ndarray::Zip::from(a).and(b).map_collect(|&x, &y| f(x, y)),
    }
}

impl<'g> Var<'g> {
    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let value = {
            let (a, b) = (self.value(), other.value());
            assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
            map2(&a, &b, |x, y| x + y)
        };
        self.graph.op(&[self, other], value, |g, _, _| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let value = {
            let (a, b) = (self.value(), other.value());
            assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
            map2(&a, &b, |x, y| x - y)
        };
        self.graph.op(&[self, other], value, |g, _, _| {
            vec![Some(g.clone()), Some(map1(g, |x| -x))]
        })
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let value = {
            let (a, b) = (self.value(), other.value());
            assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
            map2(&a, &b, |x, y| x * y)
        };
        self.graph.op(&[self, other], value, |g, p, _| {
            vec![Some(map2(g, p[1], |x, y| x * y)), Some(map2(g, p[0], |x, y| x * y))]
        })
    }

    /// `self + other` where `other`'s shape is a suffix of `self`'s shape.
    pub fn add_suffix(self, other: Var<'g>) -> Var<'g> {
        let value = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            assert!(
                sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
                "add_suffix: {sb:?} is not a suffix of {sa:?}"
            );
            &*a + &*b
        };
        self.graph.op(&[self, other], value, |g, p, _| {
            let bs = p[1].len();
            let gb = as_2d(g, bs.max(1)).sum_axis(Axis(0));
            let gb = gb.into_shape(p[1].raw_dim()).unwrap();
            vec![Some(g.clone()), Some(gb)]
        })
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let value = map1(&self.value(), |x| x * c);
        self.graph.op(&[self], value, move |g, _, _| vec![Some(map1(g, |x| x * c))])
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let value = &*self.value() + c;
        self.graph.op(&[self], value, |g, _, _| vec![Some(g.clone())])
    }

    /// Adds a constant tensor of identical shape.
    pub fn add_const(self, c: &Tensor) -> Var<'g> {
        let value = {
            let a = self.value();
            assert_eq!(a.shape(), c.shape(), "add_const: shape mismatch");
            &*a + c
        };
        self.graph.op(&[self], value, |g, _, _| vec![Some(g.clone())])
    }

    /// Multiplies by a constant tensor of identical shape.
    pub fn mul_const(self, c: &Tensor) -> Var<'g> {
        let value = {
            let a = self.value();
            assert_eq!(a.shape(), c.shape(), "mul_const: shape mismatch");
            &*a * c
        };
        let c = c.clone();
        self.graph.op(&[self], value, move |g, _, _| vec![Some(g * &c)])
    }

    pub fn sum(self) -> Var<'g> {
        let value = scalar(self.value().sum());
        self.graph.op(&[self], value, |g, p, _| {
            let gv = *g.iter().next().unwrap();
            vec![Some(ArrayD::from_elem(p[0].raw_dim(), gv))]
        })
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn square(self) -> Var<'g> {
        let value = self.value().mapv(|x| x * x);
        self.graph
            .op(&[self], value, |g, p, _| vec![Some(g * &p[0].mapv(|x| 2.0 * x))])
    }

    pub fn log(self) -> Var<'g> {
        let value = self.value().mapv(f64::ln);
        self.graph.op(&[self], value, |g, p, _| vec![Some(g / p[0])])
    }

    /// `x ln x` with the convention `0 ln 0 = 0`; inputs must be nonnegative.
    pub fn xlogx(self) -> Var<'g> {
        let value = self.value().mapv(|x| if x > 0.0 { x * x.ln() } else { 0.0 });
        self.graph.op(&[self], value, |g, p, _| {
            let d = p[0].mapv(|x| if x > 0.0 { x.ln() + 1.0 } else { 0.0 });
            vec![Some(g * &d)]
        })
    }

    pub fn exp(self) -> Var<'g> {
        let value = self.value().mapv(f64::exp);
        self.graph.op(&[self], value, |g, _, out| vec![Some(g * out)])
    }

    pub fn relu(self) -> Var<'g> {
        let value = map1(&self.value(), |x| x.max(0.0));
        self.graph.op(&[self], value, |g, p, _| {
            vec![Some(map2(g, p[0], |d, x| if x > 0.0 { d } else { 0.0 }))]
        })
    }

    /// GELU (tanh approximation).
    pub fn gelu(self) -> Var<'g> {
        let value = map1(&self.value(), gelu_scalar);
        self.graph.op(&[self], value, |g, p, _| {
            vec![Some(map2(g, p[0], |d, x| d * gelu_grad_scalar(x)))]
        })
    }

    /// Mean squared difference against a constant target.
    pub fn mse(self, target: &Tensor) -> Var<'g> {
        let (value, n) = {
            let a = self.value();
            assert_eq!(a.shape(), target.shape(), "mse: shape mismatch");
            let n = a.len() as f64;
            let s: f64 = a.iter().zip(target.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            (scalar(s / n), n)
        };
        let target = target.clone();
        self.graph.op(&[self], value, move |g, p, _| {
            let gv = *g.iter().next().unwrap();
            vec![Some((p[0] - &target) * (2.0 * gv / n))]
        })
    }

    /// Softmax along the last axis.
    pub fn softmax_last(self) -> Var<'g> {
        let value = {
            let a = self.value();
            let d = *a.shape().last().unwrap();
            let mut out = standard(a.clone());
            for row in out.as_slice_mut().unwrap().chunks_mut(d) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            out
        };
        self.graph.op(&[self], value, |g, _, out| {
            let d = *out.shape().last().unwrap();
            let mut gx = standard(g.clone());
            let o = out.as_slice().unwrap();
            for (gr, orow) in gx.as_slice_mut().unwrap().chunks_mut(d).zip(o.chunks(d)) {
                let dot: f64 = gr.iter().zip(orow).map(|(a, b)| a * b).sum();
                for (gi, &oi) in gr.iter_mut().zip(orow) {
                    *gi = oi * (*gi - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// `x @ w + b` over the last axis; `w` is `[in, out]`, `b` is `[out]`.
    pub fn linear(self, w: Var<'g>, b: Var<'g>) -> Var<'g> {
        let value = {
            let (x, wv, bv) = (self.value(), w.value(), b.value());
            let (din, dout) = (wv.shape()[0], wv.shape()[1]);
            assert_eq!(*x.shape().last().unwrap(), din, "linear: input width");
            let w2 = wv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut y = as_2d(&x, din).dot(&w2);
            y += &bv.view().into_shape(dout).unwrap();
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = dout;
            y.into_shape(IxDyn(&shape)).unwrap()
        };
        self.graph.op(&[self, w, b], value, |g, p, _| {
            let (x, w) = (p[0], p[1]);
            let (din, dout) = (w.shape()[0], w.shape()[1]);
            let g2 = as_2d(g, dout);
            let x2 = as_2d(x, din);
            let w2 = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let gx = g2.dot(&w2.t()).into_shape(x.raw_dim()).unwrap();
            let gw = x2.t().dot(&g2).into_dyn();
            let gb = g2.sum_axis(Axis(0)).into_dyn();
            vec![Some(gx), Some(gw), Some(gb)]
        })
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Var<'g> {
        let (value, xhat, inv_std) = {
            let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
            let d = *x.shape().last().unwrap();
            let x2 = as_2d(&x, d);
            let rows = x2.nrows();
            let mut xhat = Array2::<f64>::zeros((rows, d));
            let mut inv_std = vec![0.0; rows];
            for (r, row) in x2.outer_iter().enumerate() {
                let mean = row.sum() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for (o, &v) in xhat.row_mut(r).iter_mut().zip(row.iter()) {
                    *o = (v - mean) * is;
                }
            }
            let gm = gm.view().into_shape(d).unwrap();
            let bt = bt.view().into_shape(d).unwrap();
            let y = &xhat * &gm + &bt;
            (y.into_shape(x.raw_dim()).unwrap(), xhat, inv_std)
        };
        self.graph.op(&[self, gamma, beta], value, move |g, p, _| {
            let d = xhat.ncols();
            let g2 = as_2d(g, d);
            let gm = p[1].view().into_shape(d).unwrap();
            let ggamma = (&g2 * &xhat).sum_axis(Axis(0)).into_dyn();
            let gbeta = g2.sum_axis(Axis(0)).into_dyn();
            let mut gx = Array2::<f64>::zeros(xhat.raw_dim());
            for r in 0..xhat.nrows() {
                let gh: Vec<f64> = g2.row(r).iter().zip(gm.iter()).map(|(a, b)| a * b).collect();
                let xh = xhat.row(r);
                let mean_gh = gh.iter().sum::<f64>() / d as f64;
                let mean_ghx = gh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    gx[[r, j]] = inv_std[r] * (gh[j] - mean_gh - xh[j] * mean_ghx);
                }
            }
            let gx = gx.into_shape(p[0].raw_dim()).unwrap();
            vec![Some(gx), Some(ggamma), Some(gbeta)]
        })
    }

    /// Mean over one axis (the axis is removed).
    pub fn mean_axis(self, axis: usize) -> Var<'g> {
        let (value, n) = {
            let x = self.value();
            let n = x.shape()[axis];
            (x.mean_axis(Axis(axis)).unwrap(), n)
        };
        self.graph.op(&[self], value, move |g, p, _| {
            let expanded = g.clone().insert_axis(Axis(axis));
            let gx = expanded.broadcast(p[0].raw_dim()).unwrap().to_owned() / n as f64;
            vec![Some(gx)]
        })
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn slice_last(self, start: usize, len: usize) -> Var<'g> {
        let value = {
            let x = self.value();
            let d = *x.shape().last().unwrap();
            let x2 = as_2d(&x, d);
            let y = x2.slice(ndarray::s![.., start..start + len]).to_owned();
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = len;
            y.into_shape(IxDyn(&shape)).unwrap()
        };
        self.graph.op(&[self], value, move |g, p, _| {
            let d = *p[0].shape().last().unwrap();
            let mut gx = Array2::<f64>::zeros((p[0].len() / d, d));
            gx.slice_mut(ndarray::s![.., start..start + len])
                .assign(&as_2d(g, len));
            vec![Some(gx.into_shape(p[0].raw_dim()).unwrap())]
        })
    }

    /// Per-pixel channel mixing on `[N, C_in, ...]`: `y[n,o] = Σ_c w[o,c] x[n,c] + b[o]`.
    pub fn channel_linear(self, w: Var<'g>, b: Var<'g>) -> Var<'g> {
        let value = {
            let (x, wv, bv) = (self.value(), w.value(), b.value());
            channel_linear_forward(&x, &wv, &bv)
        };
        self.graph.op(&[self, w, b], value, |g, p, _| {
            let (x, w) = (p[0], p[1]);
            let (cout, cin) = (w.shape()[0], w.shape()[1]);
            let n = x.shape()[0];
            let plane: usize = x.shape()[2..].iter().product();
            let xs = x.as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let ws = w.as_slice().unwrap();
            let mut gx = vec![0.0; xs.len()];
            let mut gw = vec![0.0; cout * cin];
            let mut gb = vec![0.0; cout];
            for ni in 0..n {
                for start in (0..plane).step_by(LINEAR_TILE) {
                    let end = (start + LINEAR_TILE).min(plane);
                    for o in 0..cout {
                        let gb0 = (ni * cout + o) * plane;
                        let go = &gs[gb0 + start..gb0 + end];
                        gb[o] += go.iter().sum::<f64>();
                        for c in 0..cin {
                            let xb = (ni * cin + c) * plane;
                            gw[o * cin + c] += dot(go, &xs[xb + start..xb + end]);
                            axpy(ws[o * cin + c], go, &mut gx[xb + start..xb + end]);
                        }
                    }
                }
            }
            vec![
                Some(ArrayD::from_shape_vec(x.raw_dim(), gx).unwrap()),
                Some(ArrayD::from_shape_vec(w.raw_dim(), gw).unwrap()),
                Some(ArrayD::from_shape_vec(IxDyn(&[cout]), gb).unwrap()),
            ]
        })
    }

    /// Scaled dot-product multi-head self-attention over `[P, T, D]` inputs.
    pub fn attention(self, k: Var<'g>, v: Var<'g>, heads: usize) -> Var<'g> {
        let q = self;
        let (value, probs) = {
            let (qv, kv, vv) = (q.value(), k.value(), v.value());
            attention_forward(&qv, &kv, &vv, heads)
        };
        q.graph.op(&[q, k, v], value, move |g, p, _| {
            let (gq, gk, gv) = attention_backward(g, p[0], p[1], p[2], &probs, heads);
            vec![Some(gq), Some(gk), Some(gv)]
        })
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut s = acc[0] + acc[1] + acc[2] + acc[3];
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const LINEAR_TILE: usize = 512;

pub(crate) fn channel_linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (cout, cin) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.shape()[1], cin, "channel_linear: channel count");
    let n = x.shape()[0];
    let plane: usize = x.shape()[2..].iter().product();
    let xs = x.as_slice().expect("standard layout");
    let ws = w.as_slice().unwrap();
    let bs = b.as_slice().unwrap();
    let mut y = Vec::with_capacity(n * cout * plane);
    for _ in 0..n {
        for &bo in bs {
            y.extend(std::iter::repeat(bo).take(plane));
        }
    }
    for ni in 0..n {
        for start in (0..plane).step_by(LINEAR_TILE) {
            let end = (start + LINEAR_TILE).min(plane);
            for o in 0..cout {
                let base = (ni * cout + o) * plane;
                let yo = &mut y[base + start..base + end];
                let mut c = 0;
                while c + 2 <= cin {
                    let x0 = &xs[(ni * cin + c) * plane + start..(ni * cin + c) * plane + end];
                    let x1 = &xs[(ni * cin + c + 1) * plane + start..(ni * cin + c + 1) * plane + end];
                    let (w0, w1) = (ws[o * cin + c], ws[o * cin + c + 1]);
                    for ((yi, a), b) in yo.iter_mut().zip(x0).zip(x1) {
                        *yi += w0 * a + w1 * b;
                    }
                    c += 2;
                }
                if c < cin {
                    let xb = (ni * cin + c) * plane;
                    axpy(ws[o * cin + c], &xs[xb + start..xb + end], yo);
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[1] = cout;
    ArrayD::from_shape_vec(IxDyn(&shape), y).unwrap()
}

fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> (Tensor, Vec<f64>) {
    let (p, t, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    assert_eq!(d % heads, 0, "attention: width not divisible by heads");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qs, ks, vs) = (q.as_slice().unwrap(), k.as_slice().unwrap(), v.as_slice().unwrap());
    let mut out = vec![0.0; p * t * d];
    let mut probs = vec![0.0; p * heads * t * t];
    for pi in 0..p {
        for h in 0..heads {
            let a = &mut probs[(pi * heads + h) * t * t..(pi * heads + h + 1) * t * t];
            for i in 0..t {
                let qi = &qs[(pi * t + i) * d + h * dh..(pi * t + i) * d + (h + 1) * dh];
                let row = &mut a[i * t..(i + 1) * t];
                for j in 0..t {
                    let kj = &ks[(pi * t + j) * d + h * dh..(pi * t + j) * d + (h + 1) * dh];
                    row[j] = dot(qi, kj) * scale;
                }
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - m).exp();
                    s += *r;
                }
                for r in row.iter_mut() {
                    *r /= s;
                }
                let oi = &mut out[(pi * t + i) * d + h * dh..(pi * t + i) * d + (h + 1) * dh];
                for j in 0..t {
                    let vj = &vs[(pi * t + j) * d + h * dh..(pi * t + j) * d + (h + 1) * dh];
                    axpy(row[j], vj, oi);
                }
            }
        }
    }
    (
        ArrayD::from_shape_vec(q.raw_dim(), out).unwrap(),
        probs,
    )
}

fn attention_backward(
    g: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[f64],
    heads: usize,
) -> (Tensor, Tensor, Tensor) {
    let (p, t, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qs, ks, vs) = (q.as_slice().unwrap(), k.as_slice().unwrap(), v.as_slice().unwrap());
    let gs = g.as_slice().unwrap();
    let mut gq = vec![0.0; qs.len()];
    let mut gk = vec![0.0; ks.len()];
    let mut gv = vec![0.0; vs.len()];
    let mut ga = vec![0.0; t];
    let idx = |pi: usize, i: usize, h: usize| (pi * t + i) * d + h * dh;
    for pi in 0..p {
        for h in 0..heads {
            let a = &probs[(pi * heads + h) * t * t..(pi * heads + h + 1) * t * t];
            for i in 0..t {
                let go = &gs[idx(pi, i, h)..idx(pi, i, h) + dh];
                let arow = &a[i * t..(i + 1) * t];
                for j in 0..t {
                    let o = idx(pi, j, h);
                    axpy(arow[j], go, &mut gv[o..o + dh]);
                    ga[j] = dot(go, &vs[o..o + dh]);
                }
                let s: f64 = ga.iter().zip(arow).map(|(x, y)| x * y).sum();
                let qo = idx(pi, i, h);
                for j in 0..t {
                    let ds = arow[j] * (ga[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let ko = idx(pi, j, h);
                    axpy(ds, &ks[ko..ko + dh], &mut gq[qo..qo + dh]);
                    axpy(ds, &qs[qo..qo + dh], &mut gk[ko..ko + dh]);
                }
            }
        }
    }
    (
        ArrayD::from_shape_vec(q.raw_dim(), gq).unwrap(),
        ArrayD::from_shape_vec(k.raw_dim(), gk).unwrap(),
        ArrayD::from_shape_vec(v.raw_dim(), gv).unwrap(),
    )
}
