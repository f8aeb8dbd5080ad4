//! Convolution, transposed convolution and batch normalization.
//!
//! Everything is expressed on 5-D `[N, C, D, H, W]` tensors; 2-D layers run
//! with a unit depth axis and a unit kernel depth.

use super::graph::{Graph, Var};
use super::linalg::gemm;
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_size: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub dilation: [usize; 3],
}

impl ConvGeometry {
    pub fn out_size(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = self.dilation[a] * (self.kernel[a] - 1) + 1;
            let padded = self.in_size[a] + 2 * self.pad[a];
            assert!(padded >= span, "kernel larger than padded input on axis {a}");
            out[a] = (padded - span) / self.stride[a] + 1;
        }
        out
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn in_volume(&self) -> usize {
        self.in_size.iter().product()
    }

    /// For every kernel tap and output voxel, the input voxel it reads (or `None` for padding).
    fn tap_index(&self, tap: [usize; 3], out: [usize; 3]) -> Option<usize> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let p = (out[a] * self.stride[a] + tap[a] * self.dilation[a]) as isize - self.pad[a] as isize;
            if p < 0 || p >= self.in_size[a] as isize {
                return None;
            }
            idx[a] = p as usize;
        }
        Some((idx[0] * self.in_size[1] + idx[1]) * self.in_size[2] + idx[2])
    }

    /// `x: [C, in]` to columns `[C * taps, out]`.
    fn vol2col(&self, x: &[f64], channels: usize) -> Vec<f64> {
        let out = self.out_size();
        let p_out: usize = out.iter().product();
        let taps = self.kernel_volume();
        let vin = self.in_volume();
        let mut cols = vec![0.0; channels * taps * p_out];
        let k = self.kernel;
        for c in 0..channels {
            let xc = &x[c * vin..(c + 1) * vin];
            let mut tap = 0;
            for a in 0..k[0] {
                for b in 0..k[1] {
                    for e in 0..k[2] {
                        let row = &mut cols[(c * taps + tap) * p_out..(c * taps + tap + 1) * p_out];
                        let mut o = 0;
                        for od in 0..out[0] {
                            for oh in 0..out[1] {
                                for ow in 0..out[2] {
                                    if let Some(i) = self.tap_index([a, b, e], [od, oh, ow]) {
                                        row[o] = xc[i];
                                    }
                                    o += 1;
                                }
                            }
                        }
                        tap += 1;
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`vol2col`](Self::vol2col): accumulates columns back into `x: [C, in]`.
    fn col2vol(&self, cols: &[f64], channels: usize, x: &mut [f64]) {
        let out = self.out_size();
        let p_out: usize = out.iter().product();
        let taps = self.kernel_volume();
        let vin = self.in_volume();
        let k = self.kernel;
        for c in 0..channels {
            let xc = &mut x[c * vin..(c + 1) * vin];
            let mut tap = 0;
            for a in 0..k[0] {
                for b in 0..k[1] {
                    for e in 0..k[2] {
                        let row = &cols[(c * taps + tap) * p_out..(c * taps + tap + 1) * p_out];
                        let mut o = 0;
                        for od in 0..out[0] {
                            for oh in 0..out[1] {
                                for ow in 0..out[2] {
                                    if let Some(i) = self.tap_index([a, b, e], [od, oh, ow]) {
                                        xc[i] += row[o];
                                    }
                                    o += 1;
                                }
                            }
                        }
                        tap += 1;
                    }
                }
            }
        }
    }
}

fn dims5(t: &Tensor) -> [usize; 5] {
    let s = t.shape();
    assert_eq!(s.len(), 5, "expected [N, C, D, H, W], got {s:?}");
    [s[0], s[1], s[2], s[3], s[4]]
}

fn sum_batches(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

impl Graph {
    /// Cross-correlation of `x: [N, C, D, H, W]` with `w: [O, C, kd, kh, kw]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
        dilation: [usize; 3],
    ) -> Var {
        let [n, c, d, h, wd] = dims5(self.value(x));
        let [o, c2, kd, kh, kw] = dims5(self.value(w));
        assert_eq!(c, c2, "conv3d channel mismatch: input {c}, weight {c2}");
        let geom = ConvGeometry {
            in_size: [d, h, wd],
            kernel: [kd, kh, kw],
            stride,
            pad,
            dilation,
        };
        let out = geom.out_size();
        let p_out: usize = out.iter().product();
        let p_in = d * h * wd;
        let ck = c * geom.kernel_volume();

        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let per_item: Vec<Vec<f64>> = par::map_range(n, |i| {
            let cols = geom.vol2col(&xv[i * c * p_in..(i + 1) * c * p_in], c);
            let mut y = vec![0.0; o * p_out];
            gemm(o, ck, p_out, wv, false, &cols, false, &mut y, false);
            y
        });
        let mut data: Vec<f64> = per_item.into_iter().flatten().collect();
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (ch, plane) in data.chunks_mut(p_out).enumerate() {
                let bb = bv[ch % o];
                plane.iter_mut().for_each(|v| *v += bb);
            }
        }
        let value = Tensor::new(vec![n, o, out[0], out[1], out[2]], data);
        let need_x = self.requires_grad(x);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        self.op(value, &inputs, move |g, xs, _| {
            let xv = xs[0].data();
            let wv = xs[1].data();
            let gd = g.data();
            let parts: Vec<(Vec<f64>, Option<Vec<f64>>)> = par::map_range(n, |i| {
                let cols = geom.vol2col(&xv[i * c * p_in..(i + 1) * c * p_in], c);
                let gy = &gd[i * o * p_out..(i + 1) * o * p_out];
                let mut gw = vec![0.0; o * ck];
                gemm(o, p_out, ck, gy, false, &cols, true, &mut gw, false);
                let gx = need_x.then(|| {
                    let mut gcols = vec![0.0; ck * p_out];
                    gemm(ck, o, p_out, wv, true, gy, false, &mut gcols, false);
                    let mut gx = vec![0.0; c * p_in];
                    geom.col2vol(&gcols, c, &mut gx);
                    gx
                });
                (gw, gx)
            });
            let mut gws = Vec::with_capacity(n);
            let mut gx_all = need_x.then(|| Vec::with_capacity(n * c * p_in));
            for (gw, gx) in parts {
                gws.push(gw);
                if let (Some(all), Some(gx)) = (gx_all.as_mut(), gx) {
                    all.extend(gx);
                }
            }
            let gw = Tensor::new(vec![o, c, kd, kh, kw], sum_batches(gws, o * ck));
            let mut res = vec![gx_all.map(|v| Tensor::new(vec![n, c, d, h, wd], v)), Some(gw)];
            if has_bias {
                let mut gb = vec![0.0; o];
                for (ch, plane) in gd.chunks(p_out).enumerate() {
                    gb[ch % o] += plane.iter().sum::<f64>();
                }
                res.push(Some(Tensor::new(vec![o], gb)));
            }
            res
        })
    }

    /// 2-D convolution of `x: [N, C, H, W]` with `w: [O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize, dilation: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [N, C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O, C, k, k]");
        let x5 = self.reshape(x, vec![xs[0], xs[1], 1, xs[2], xs[3]]);
        let w5 = self.reshape(w, vec![ws[0], ws[1], 1, ws[2], ws[3]]);
        let y = self.conv3d(
            x5,
            w5,
            bias,
            [1, stride, stride],
            [0, pad, pad],
            [1, dilation, dilation],
        );
        let ys = self.shape(y).to_vec();
        self.reshape(y, vec![ys[0], ys[1], ys[3], ys[4]])
    }

    /// Transposed 3-D convolution, `w: [C_in, C_out, k, k, k]`; output extent per axis is
    /// `(in − 1)·stride − 2·pad + k + output_padding`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, stride: usize, pad: usize, output_padding: usize) -> Var {
        let [n, cin, d, h, wd] = dims5(self.value(x));
        let [cin2, cout, kd, kh, kw] = dims5(self.value(w));
        assert_eq!(cin, cin2, "conv_transpose3d channel mismatch");
        assert!(output_padding < stride);
        let out_axis = |i: usize, k: usize| (i - 1) * stride + k + output_padding - 2 * pad;
        let out = [out_axis(d, kd), out_axis(h, kh), out_axis(wd, kw)];
        // The transposed conv is the adjoint of this forward conv (output -> input).
        let geom = ConvGeometry {
            in_size: out,
            kernel: [kd, kh, kw],
            stride: [stride; 3],
            pad: [pad; 3],
            dilation: [1; 3],
        };
        assert_eq!(geom.out_size(), [d, h, wd], "transposed conv geometry");
        let p_in = d * h * wd;
        let p_out: usize = out.iter().product();
        let ck = cout * geom.kernel_volume();

        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let per_item: Vec<Vec<f64>> = par::map_range(n, |i| {
            let mut cols = vec![0.0; ck * p_in];
            gemm(
                ck,
                cin,
                p_in,
                wv,
                true,
                &xv[i * cin * p_in..(i + 1) * cin * p_in],
                false,
                &mut cols,
                false,
            );
            let mut y = vec![0.0; cout * p_out];
            geom.col2vol(&cols, cout, &mut y);
            y
        });
        let value = Tensor::new(
            vec![n, cout, out[0], out[1], out[2]],
            per_item.into_iter().flatten().collect(),
        );
        let need_x = self.requires_grad(x);
        self.op(value, &[x, w], move |g, xs, _| {
            let xv = xs[0].data();
            let wv = xs[1].data();
            let gd = g.data();
            let parts: Vec<(Vec<f64>, Option<Vec<f64>>)> = par::map_range(n, |i| {
                let gcols = geom.vol2col(&gd[i * cout * p_out..(i + 1) * cout * p_out], cout);
                let xi = &xv[i * cin * p_in..(i + 1) * cin * p_in];
                let mut gw = vec![0.0; cin * ck];
                gemm(cin, p_in, ck, xi, false, &gcols, true, &mut gw, false);
                let gx = need_x.then(|| {
                    let mut gx = vec![0.0; cin * p_in];
                    gemm(cin, ck, p_in, wv, false, &gcols, false, &mut gx, false);
                    gx
                });
                (gw, gx)
            });
            let mut gws = Vec::with_capacity(n);
            let mut gx_all = need_x.then(|| Vec::with_capacity(n * cin * p_in));
            for (gw, gx) in parts {
                gws.push(gw);
                if let (Some(all), Some(gx)) = (gx_all.as_mut(), gx) {
                    all.extend(gx);
                }
            }
            vec![
                gx_all.map(|v| Tensor::new(vec![n, cin, d, h, wd], v)),
                Some(Tensor::new(vec![cin, cout, kd, kh, kw], sum_batches(gws, cin * ck))),
            ]
        })
    }

    /// Per-channel batch normalization of `x: [N, C, ...]`.
    ///
    /// In training mode the batch statistics are used and the updated running
    /// statistics `(mean, var)` are returned; otherwise the running statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
        momentum: f64,
    ) -> (Var, Option<(Tensor, Tensor)>) {
        let shape = self.shape(x).to_vec();
        assert!(shape.len() >= 2);
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let m = (n * s) as f64;
        let xv = self.value(x).data();
        let at = move |i: usize, ch: usize, j: usize| (i * c + ch) * s + j;

        let training = self.training();
        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += xv[at(i, ch, 0)..at(i, ch, 0) + s].iter().sum::<f64>();
                }
                mean[ch] = acc / m;
                let mut sq = 0.0;
                for i in 0..n {
                    sq += xv[at(i, ch, 0)..at(i, ch, 0) + s]
                        .iter()
                        .map(|v| (v - mean[ch]) * (v - mean[ch]))
                        .sum::<f64>();
                }
                var[ch] = sq / m;
            }
            (mean, var)
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                for j in 0..s {
                    let k = at(i, ch, j);
                    xhat[k] = (xv[k] - mean[ch]) * inv_std[ch];
                    out[k] = gv[ch] * xhat[k] + bv[ch];
                }
            }
        }
        let updated = training.then(|| {
            let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let rm = Tensor::from_fn(vec![c], |ch| {
                (1.0 - momentum) * running_mean.data()[ch] + momentum * mean[ch]
            });
            let rv = Tensor::from_fn(vec![c], |ch| {
                (1.0 - momentum) * running_var.data()[ch] + momentum * var[ch] * unbiased
            });
            (rm, rv)
        });
        let y = self.op(Tensor::new(shape.clone(), out), &[x, gamma, beta], move |g, xs, _| {
            let gd = g.data();
            let gamma = xs[1].data();
            let mut gx = vec![0.0; gd.len()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for ch in 0..c {
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for i in 0..n {
                    for j in 0..s {
                        let k = at(i, ch, j);
                        sum_g += gd[k];
                        sum_gx += gd[k] * xhat[k];
                    }
                }
                ggamma[ch] = sum_gx;
                gbeta[ch] = sum_g;
                let scale = gamma[ch] * inv_std[ch];
                for i in 0..n {
                    for j in 0..s {
                        let k = at(i, ch, j);
                        gx[k] = if training {
                            scale * (gd[k] - sum_g / m - xhat[k] * sum_gx / m)
                        } else {
                            scale * gd[k]
                        };
                    }
                }
            }
            vec![
                Some(Tensor::new(shape.clone(), gx)),
                Some(Tensor::new(vec![c], ggamma)),
                Some(Tensor::new(vec![c], gbeta)),
            ]
        });
        (y, updated)
    }
}
