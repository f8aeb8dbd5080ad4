//! Elementwise, reduction, shape and matrix ops.

use super::graph::{Graph, Var};
use super::linalg::gemm;
use crate::tensor::Tensor;

fn same_shape(g: &Graph, a: Var, b: Var, op: &str) {
    assert_eq!(
        g.shape(a),
        g.shape(b),
        "{op}: shapes {:?} and {:?} differ",
        g.shape(a),
        g.shape(b)
    );
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "add");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.op(v, &[a, b], |g, _, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "sub");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.op(v, &[a, b], |g, _, _| vec![Some(g.clone()), Some(g.scale(-1.0))])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "mul");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.op(v, &[a, b], |g, xs, _| {
            vec![
                Some(g.zip_map(xs[1], |g, y| g * y)),
                Some(g.zip_map(xs[0], |g, x| g * x)),
            ]
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "div");
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.op(v, &[a, b], |g, xs, out| {
            let ga = g.zip_map(xs[1], |g, y| g / y);
            let gb = Tensor::from_fn(g.shape().to_vec(), |i| -g.data()[i] * out.data()[i] / xs[1].data()[i]);
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.op(v, &[a], move |g, _, _| vec![Some(g.scale(s))])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.op(v, &[a], |g, _, _| vec![Some(g.clone())])
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 - x);
        self.op(v, &[a], |g, _, _| vec![Some(g.scale(-1.0))])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.op(v, &[a], |g, xs, _| {
            vec![Some(g.zip_map(xs[0], |g, x| if x > 0.0 { g } else { 0.0 }))]
        })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.op(v, &[a], |g, xs, _| vec![Some(g.zip_map(xs[0], |g, x| g * sigmoid(x)))])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.op(v, &[a], |g, _, out| {
            vec![Some(g.zip_map(out, |g, y| g * y * (1.0 - y)))]
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.op(v, &[a], |g, _, out| vec![Some(g.zip_map(out, |g, y| g * y))])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.op(v, &[a], |g, xs, _| vec![Some(g.zip_map(xs[0], |g, x| g / x))])
    }

    /// Elementwise `|a|`; the subgradient at zero is taken as 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.op(v, &[a], |g, xs, _| {
            vec![Some(g.zip_map(xs[0], |g, x| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            }))]
        })
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.op(v, &[a], |g, xs, _| vec![Some(g.zip_map(xs[0], |g, x| 2.0 * g * x))])
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.op(v, &[a], move |g, xs, _| {
            vec![Some(g.zip_map(xs[0], |g, x| if x > lo && x < hi { g } else { 0.0 }))]
        })
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let shape = self.shape(a).to_vec();
        self.op(v, &[a], move |g, _, _| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums the last axis: `[.., m] -> [..]`.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let m = *shape.last().expect("sum_last on scalar");
        let out_shape = shape[..shape.len() - 1].to_vec();
        let src = self.value(a).data();
        let data: Vec<f64> = src.chunks(m.max(1)).map(|c| c.iter().sum()).collect();
        let v = Tensor::new(out_shape, data);
        self.op(v, &[a], move |g, _, _| {
            let mut out = Vec::with_capacity(g.len() * m);
            for &gv in g.data() {
                out.extend(std::iter::repeat_n(gv, m));
            }
            vec![Some(Tensor::new(shape.clone(), out))]
        })
    }

    /// `[a, b, c] -> [a, c]`, summing the middle axis.
    pub fn sum_middle(&mut self, x: Var, dims: [usize; 3]) -> Var {
        let [a, b, c] = dims;
        assert_eq!(self.value(x).len(), a * b * c, "sum_middle dims");
        let src = self.value(x).data();
        let mut out = vec![0.0; a * c];
        for i in 0..a {
            let o = &mut out[i * c..(i + 1) * c];
            for j in 0..b {
                let row = &src[(i * b + j) * c..(i * b + j + 1) * c];
                for (y, v) in o.iter_mut().zip(row) {
                    *y += v;
                }
            }
        }
        let in_shape = self.shape(x).to_vec();
        self.op(Tensor::new(vec![a, c], out), &[x], move |g, _, _| {
            let gd = g.data();
            let mut gx = vec![0.0; a * b * c];
            for i in 0..a {
                for j in 0..b {
                    gx[(i * b + j) * c..(i * b + j + 1) * c].copy_from_slice(&gd[i * c..(i + 1) * c]);
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), gx))]
        })
    }

    /// `[n, m] -> [n * s, m]`, each row repeated `s` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, s: usize) -> Var {
        let (n, m) = self.value(x).dims2();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * s * m);
        for i in 0..n {
            for _ in 0..s {
                out.extend_from_slice(&src[i * m..(i + 1) * m]);
            }
        }
        self.op(Tensor::new(vec![n * s, m], out), &[x], move |g, _, _| {
            let gd = g.data();
            let mut gx = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..s {
                    let row = &gd[(i * s + j) * m..(i * s + j + 1) * m];
                    for (y, v) in gx[i * m..(i + 1) * m].iter_mut().zip(row) {
                        *y += v;
                    }
                }
            }
            vec![Some(Tensor::new(vec![n, m], gx))]
        })
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let in_shape = self.shape(x).to_vec();
        let v = self.value(x).clone().reshape(shape);
        self.op(v, &[x], move |g, _, _| vec![Some(g.clone().reshape(in_shape.clone()))])
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.value(p).dims2();
                assert_eq!(r, n, "concat_cols row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..n {
                out[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.op(Tensor::new(vec![n, total], out), parts, move |g, _, _| {
            let gd = g.data();
            let mut off = 0;
            widths
                .iter()
                .map(|&w| {
                    let mut gp = vec![0.0; n * w];
                    for i in 0..n {
                        gp[i * w..(i + 1) * w].copy_from_slice(&gd[i * total + off..i * total + off + w]);
                    }
                    off += w;
                    Some(Tensor::new(vec![n, w], gp))
                })
                .collect()
        })
    }

    /// Columns `[start, start + len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, m) = self.value(x).dims2();
        assert!(start + len <= m, "slice_cols out of range");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&src[i * m + start..i * m + start + len]);
        }
        self.op(Tensor::new(vec![n, len], out), &[x], move |g, _, _| {
            let gd = g.data();
            let mut gx = vec![0.0; n * m];
            for i in 0..n {
                gx[i * m + start..i * m + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
            }
            vec![Some(Tensor::new(vec![n, m], gx))]
        })
    }

    /// Concatenates tensors along the leading axis; trailing shapes must agree.
    pub fn concat_leading(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            assert_eq!(&self.shape(p)[1..], &tail[..], "concat_leading trailing shape");
            lead += self.shape(p)[0];
            sizes.push(self.value(p).len());
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let part_shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        self.op(Tensor::new(shape, data), parts, move |g, _, _| {
            let mut off = 0;
            sizes
                .iter()
                .zip(&part_shapes)
                .map(|(&n, s)| {
                    let t = Tensor::new(s.clone(), g.data()[off..off + n].to_vec());
                    off += n;
                    Some(t)
                })
                .collect()
        })
    }

    /// Entry `i` of the leading axis: `[n, ...] -> [...]`.
    pub fn index_leading(&mut self, x: Var, i: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(i < shape[0], "index_leading out of range");
        let tail = shape[1..].to_vec();
        let stride: usize = tail.iter().product();
        let v = Tensor::new(tail, self.value(x).data()[i * stride..(i + 1) * stride].to_vec());
        self.op(v, &[x], move |g, _, _| {
            let mut gx = Tensor::zeros(shape.clone());
            gx.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(g.data());
            vec![Some(gx)]
        })
    }

    /// Adds a `[m]` bias to every row of `[n, m]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (n, m) = self.value(x).dims2();
        assert_eq!(self.value(bias).len(), m, "add_bias width");
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(m) {
            for (y, bv) in row.iter_mut().zip(&b) {
                *y += bv;
            }
        }
        let bshape = self.shape(bias).to_vec();
        self.op(out, &[x, bias], move |g, _, _| {
            let mut gb = vec![0.0; m];
            for row in g.data().chunks(m) {
                for (acc, v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            let _ = n;
            vec![Some(g.clone()), Some(Tensor::new(bshape.clone(), gb))]
        })
    }

    /// Scales row `i` of `[n, m]` by `s[i]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Var {
        let (n, m) = self.value(x).dims2();
        assert_eq!(self.value(s).len(), n, "mul_rows length");
        let sv = self.value(s).data();
        let mut out = self.value(x).clone();
        for (row, &k) in out.data_mut().chunks_mut(m).zip(sv) {
            for y in row.iter_mut() {
                *y *= k;
            }
        }
        let s_shape = self.shape(s).to_vec();
        self.op(out, &[x, s], move |g, xs, _| {
            let gd = g.data();
            let xd = xs[0].data();
            let sd = xs[1].data();
            let mut gx = vec![0.0; n * m];
            let mut gs = vec![0.0; n];
            for i in 0..n {
                for j in 0..m {
                    gx[i * m + j] = gd[i * m + j] * sd[i];
                    gs[i] += gd[i * m + j] * xd[i * m + j];
                }
            }
            vec![
                Some(Tensor::new(vec![n, m], gx)),
                Some(Tensor::new(s_shape.clone(), gs)),
            ]
        })
    }

    /// Matrix product `[n, k] · [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.value(a).dims2();
        let (k2, m) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let need_a = self.requires_grad(a);
        let need_b = self.requires_grad(b);
        self.op(Tensor::new(vec![n, m], out), &[a, b], move |g, xs, _| {
            let ga = need_a.then(|| {
                let mut ga = vec![0.0; n * k];
                gemm(n, m, k, g.data(), false, xs[1].data(), true, &mut ga, false);
                Tensor::new(vec![n, k], ga)
            });
            let gb = need_b.then(|| {
                let mut gb = vec![0.0; k * m];
                gemm(k, n, m, xs[0].data(), true, g.data(), false, &mut gb, false);
                Tensor::new(vec![k, m], gb)
            });
            vec![ga, gb]
        })
    }

    /// `x · w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    /// Exclusive prefix sum along the last axis of `[n, s]`: `y[i, j] = Σ_{l<j} x[i, l]`.
    pub fn exclusive_cumsum(&mut self, x: Var) -> Var {
        let (n, s) = self.value(x).dims2();
        let src = self.value(x).data();
        let mut out = vec![0.0; n * s];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..s {
                out[i * s + j] = acc;
                acc += src[i * s + j];
            }
        }
        self.op(Tensor::new(vec![n, s], out), &[x], move |g, _, _| {
            let gd = g.data();
            let mut gx = vec![0.0; n * s];
            for i in 0..n {
                // d y[j] / d x[l] = 1 for l < j, so gx[l] = Σ_{j>l} g[j].
                let mut acc = 0.0;
                for l in (0..s).rev() {
                    gx[i * s + l] = acc;
                    acc += gd[i * s + l];
                }
            }
            vec![Some(Tensor::new(vec![n, s], gx))]
        })
    }

    /// Positional encoding of every row of `[n, d]`:
    /// `[x, sin(2⁰πx), cos(2⁰πx), …, sin(2^{B−1}πx), cos(2^{B−1}πx)]`.
    pub fn positional_encoding(&mut self, x: Var, bands: usize, include_input: bool) -> Var {
        let (n, d) = self.value(x).dims2();
        let width = crate::fields::encoded_dim(d, bands, include_input);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * width);
        for row in src.chunks(d) {
            crate::fields::encode_into(row, bands, include_input, &mut out);
        }
        self.op(Tensor::new(vec![n, width], out), &[x], move |g, xs, _| {
            let gd = g.data();
            let xd = xs[0].data();
            let mut gx = vec![0.0; n * d];
            for i in 0..n {
                let grow = &gd[i * width..(i + 1) * width];
                let mut off = 0;
                if include_input {
                    for c in 0..d {
                        gx[i * d + c] += grow[c];
                    }
                    off = d;
                }
                for b in 0..bands {
                    let freq = (1u64 << b) as f64 * std::f64::consts::PI;
                    for c in 0..d {
                        let v = xd[i * d + c] * freq;
                        let gs = grow[off + 2 * (b * d + c)];
                        let gc = grow[off + 2 * (b * d + c) + 1];
                        gx[i * d + c] += freq * (gs * v.cos() - gc * v.sin());
                    }
                }
            }
            vec![Some(Tensor::new(vec![n, d], gx))]
        })
    }
}
