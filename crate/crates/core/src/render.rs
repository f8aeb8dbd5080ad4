//! Ray sampling and differentiable alpha compositing.
//!
//! Opacity follows the unit-spacing convention: a sample of density `σ` has opacity
//! `1 − exp(−σ)`, so densities absorb the sample spacing. Static and dynamic samples are mixed
//! per sample by the blend weight `b`, both in the density that drives transmittance and in the
//! color term.
//!
//! Two interchangeable compositors exist. [`Compositor::Fast`] composes tape primitives;
//! [`Compositor::Reference`] walks each ray sequentially with a hand-derived backward pass.

use nalgebra::Vector3;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::camera::Ray;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Densities below this accumulated opacity leave expected geometry undefined (reported as 0).
pub const MIN_ACCUMULATION: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    /// Ray parameters, strictly increasing within `[t_near, t_far]`.
    pub positions: Vec<f64>,
    pub points: Vec<Vector3<f64>>,
    pub jittered: bool,
}

/// `n` samples in equal bins over `[t_near, t_far]`: bin midpoints, or one uniform draw per bin
/// when `jitter` is set.
pub fn sample_ray(ray: &Ray, n: usize, jitter: bool, rng: &mut impl Rng) -> RaySamples {
    assert!(n >= 2, "at least two samples per ray");
    let step = (ray.t_far - ray.t_near) / n as f64;
    let positions: Vec<f64> = (0..n)
        .map(|i| {
            let u = if jitter { rng.random::<f64>() } else { 0.5 };
            ray.t_near + (i as f64 + u) * step
        })
        .collect();
    let points = positions.iter().map(|&s| ray.at(s)).collect();
    RaySamples {
        positions,
        points,
        jittered: jitter,
    }
}

/// Transmittance reaching each sample `i`: `exp(−Σ_{j<i} (s_j (1 − b_j) + d_j b_j))` for static
/// density `s`, dynamic density `d` and blend weight `b`.
pub fn blended_transmittance(sigma_static: &[f64], sigma_dynamic: &[f64], blend: &[f64]) -> Result<Vec<f64>> {
    let n = sigma_static.len();
    if sigma_dynamic.len() != n || blend.len() != n {
        return Err(Error::shape(format!(
            "transmittance inputs differ in length: {n}, {}, {}",
            sigma_dynamic.len(),
            blend.len()
        )));
    }
    let mut acc = 0.0_f64;
    Ok((0..n)
        .map(|j| {
            let t = (-acc).exp();
            acc += sigma_static[j] * (1.0 - blend[j]) + sigma_dynamic[j] * blend[j];
            t
        })
        .collect())
}

/// Composited colors of one ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendedColors {
    pub blend: [f64; 3],
    pub static_only: [f64; 3],
    pub dynamic_only: [f64; 3],
    pub alpha: f64,
}

/// Sequential blended compositing of one ray; colors are row-major `[S, 3]`.
pub fn composite_blended(
    sigma_static: &[f64],
    color_static: &[f64],
    sigma_dynamic: &[f64],
    color_dynamic: &[f64],
    blend: &[f64],
) -> Result<BlendedColors> {
    let n = sigma_static.len();
    if color_static.len() != 3 * n || color_dynamic.len() != 3 * n {
        return Err(Error::shape("color arrays must hold three values per sample"));
    }
    let tau = blended_transmittance(sigma_static, sigma_dynamic, blend)?;
    let mut out = BlendedColors {
        blend: [0.0; 3],
        static_only: [0.0; 3],
        dynamic_only: [0.0; 3],
        alpha: 0.0,
    };
    for j in 0..n {
        let a_s = 1.0 - (-sigma_static[j]).exp();
        let a_d = 1.0 - (-sigma_dynamic[j]).exp();
        let mixed = sigma_static[j] * (1.0 - blend[j]) + sigma_dynamic[j] * blend[j];
        for c in 0..3 {
            let cs = color_static[3 * j + c];
            let cd = color_dynamic[3 * j + c];
            out.blend[c] += tau[j] * ((1.0 - blend[j]) * a_s * cs + blend[j] * a_d * cd);
            out.static_only[c] += tau[j] * a_s * cs;
            out.dynamic_only[c] += tau[j] * a_d * cd;
        }
        out.alpha += tau[j] * (1.0 - (-mixed).exp());
    }
    Ok(out)
}

/// Dynamic-only compositing of `q` values per sample (row-major `[S, q]`) with transmittance
/// `exp(−Σ_{j<i} σ_j)`. Returns the composited values and the accumulated opacity.
pub fn composite_dynamic(sigma: &[f64], values: &[f64], q: usize) -> Result<(Vec<f64>, f64)> {
    if values.len() != q * sigma.len() {
        return Err(Error::shape("values must hold q entries per sample"));
    }
    let mut out = vec![0.0; q];
    let mut acc = 0.0_f64;
    let mut alpha_acc = 0.0;
    for (j, &s) in sigma.iter().enumerate() {
        let w = (-acc).exp() * (1.0 - (-s).exp());
        for (o, v) in out.iter_mut().zip(&values[q * j..q * (j + 1)]) {
            *o += w * v;
        }
        alpha_acc += w;
        acc += s;
    }
    Ok((out, alpha_acc))
}

/// Expected value of per-sample quantities under the dynamic compositing weights, normalized by
/// the accumulated opacity (zero when nothing is hit).
pub fn expected_dynamic(sigma: &[f64], values: &[f64], q: usize) -> Result<(Vec<f64>, f64)> {
    let (mut out, acc) = composite_dynamic(sigma, values, q)?;
    let inv = if acc >= MIN_ACCUMULATION { 1.0 / acc } else { 0.0 };
    for o in &mut out {
        *o *= inv;
    }
    Ok((out, acc))
}

/// Ray-batch outputs of blended compositing: colors `[R, 3]`, opacity `[R]`.
#[derive(Clone, Copy, Debug)]
pub struct BlendOutput {
    pub blend: Var,
    pub static_only: Var,
    pub dynamic_only: Var,
    pub alpha: Var,
}

/// Ray-batch outputs of dynamic compositing: values `[R, Q]`, opacity `[R]`.
#[derive(Clone, Copy, Debug)]
pub struct DynamicOutput {
    pub values: Var,
    pub alpha: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Compositor {
    #[default]
    Fast,
    Reference,
}

impl Compositor {
    pub fn as_str(self) -> &'static str {
        match self {
            Compositor::Fast => "fast",
            Compositor::Reference => "reference",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fast" => Some(Compositor::Fast),
            "reference" => Some(Compositor::Reference),
            _ => None,
        }
    }

    /// Densities and blend weights are `[R, S]`; colors are `[R·S, 3]`.
    pub fn blend(self, g: &mut Graph, sigma_s: Var, color_s: Var, sigma_d: Var, color_d: Var, b: Var) -> BlendOutput {
        match self {
            Compositor::Fast => blend_fast(g, sigma_s, color_s, sigma_d, color_d, b),
            Compositor::Reference => blend_reference(g, sigma_s, color_s, sigma_d, color_d, b),
        }
    }

    /// `sigma: [R, S]`, `values: [R·S, Q]`.
    pub fn dynamic(self, g: &mut Graph, sigma: Var, values: Var) -> DynamicOutput {
        match self {
            Compositor::Fast => dynamic_fast(g, sigma, values),
            Compositor::Reference => dynamic_reference(g, sigma, values),
        }
    }

    /// Opacity-normalized expectation of `values: [R·S, Q]`.
    pub fn expected(self, g: &mut Graph, sigma: Var, values: Var) -> DynamicOutput {
        let out = self.dynamic(g, sigma, values);
        let inv = guarded_reciprocal(g, out.alpha);
        DynamicOutput {
            values: g.mul_rows(out.values, inv),
            alpha: out.alpha,
        }
    }
}

fn guarded_reciprocal(g: &mut Graph, x: Var) -> Var {
    let v = g.value(x).map(|a| if a >= MIN_ACCUMULATION { 1.0 / a } else { 0.0 });
    g.op(v, &[x], |grad, _, out| vec![Some(grad.zip_map(out, |g, y| -g * y * y))])
}

fn rows_cols(g: &Graph, sigma: Var) -> (usize, usize) {
    g.value(sigma).dims2()
}

/// Weighted sum over samples: `weights: [R, S]`, `values: [R·S, Q]` to `[R, Q]`.
fn weighted_sum(g: &mut Graph, weights: Var, values: Var) -> Var {
    let (r, s) = rows_cols(g, weights);
    let q = g.shape(values)[1];
    let flat = g.reshape(weights, vec![r * s]);
    let scaled = g.mul_rows(values, flat);
    g.sum_middle(scaled, [r, s, q])
}

fn opacity(g: &mut Graph, sigma: Var) -> Var {
    let n = g.neg(sigma);
    let e = g.exp(n);
    g.one_minus(e)
}

fn transmittance(g: &mut Graph, density: Var) -> Var {
    let c = g.exclusive_cumsum(density);
    let n = g.neg(c);
    g.exp(n)
}

fn blend_fast(g: &mut Graph, sigma_s: Var, color_s: Var, sigma_d: Var, color_d: Var, b: Var) -> BlendOutput {
    let one_minus_b = g.one_minus(b);
    let ds = g.mul(sigma_s, one_minus_b);
    let dd = g.mul(sigma_d, b);
    let mixed = g.add(ds, dd);
    let tau = transmittance(g, mixed);
    let a_s = opacity(g, sigma_s);
    let a_d = opacity(g, sigma_d);
    let w_s = g.mul(tau, a_s);
    let w_d = g.mul(tau, a_d);
    let wb_s = g.mul(w_s, one_minus_b);
    let wb_d = g.mul(w_d, b);
    let cb_s = weighted_sum(g, wb_s, color_s);
    let cb_d = weighted_sum(g, wb_d, color_d);
    let a_mixed = opacity(g, mixed);
    let wa = g.mul(tau, a_mixed);
    BlendOutput {
        blend: g.add(cb_s, cb_d),
        static_only: weighted_sum(g, w_s, color_s),
        dynamic_only: weighted_sum(g, w_d, color_d),
        alpha: g.sum_last(wa),
    }
}

fn dynamic_fast(g: &mut Graph, sigma: Var, values: Var) -> DynamicOutput {
    let tau = transmittance(g, sigma);
    let a = opacity(g, sigma);
    let w = g.mul(tau, a);
    DynamicOutput {
        values: weighted_sum(g, w, values),
        alpha: g.sum_last(w),
    }
}

/// Packs `[R, 10]` = blend(3), static(3), dynamic(3), alpha(1) per ray.
fn blend_reference(g: &mut Graph, sigma_s: Var, color_s: Var, sigma_d: Var, color_d: Var, b: Var) -> BlendOutput {
    let (r, s) = rows_cols(g, sigma_s);
    let mut packed = Vec::with_capacity(r * 10);
    {
        let ss = g.value(sigma_s).data();
        let cs = g.value(color_s).data();
        let sd = g.value(sigma_d).data();
        let cd = g.value(color_d).data();
        let bb = g.value(b).data();
        for i in 0..r {
            let rs = i * s..(i + 1) * s;
            let rc = 3 * i * s..3 * (i + 1) * s;
            let o = composite_blended(&ss[rs.clone()], &cs[rc.clone()], &sd[rs.clone()], &cd[rc], &bb[rs])
                .expect("consistent ray shapes");
            packed.extend_from_slice(&o.blend);
            packed.extend_from_slice(&o.static_only);
            packed.extend_from_slice(&o.dynamic_only);
            packed.push(o.alpha);
        }
    }
    let out = g.op(
        Tensor::new(vec![r, 10], packed),
        &[sigma_s, color_s, sigma_d, color_d, b],
        move |grad, xs, _| {
            let (ss, cs, sd, cd, bb) = (xs[0].data(), xs[1].data(), xs[2].data(), xs[3].data(), xs[4].data());
            let gd = grad.data();
            let mut g_ss = vec![0.0; r * s];
            let mut g_sd = vec![0.0; r * s];
            let mut g_b = vec![0.0; r * s];
            let mut g_cs = vec![0.0; 3 * r * s];
            let mut g_cd = vec![0.0; 3 * r * s];
            let mut tau = vec![0.0; s];
            let mut contrib = vec![0.0; s];
            for i in 0..r {
                let gb = &gd[10 * i..10 * i + 3];
                let gs = &gd[10 * i + 3..10 * i + 6];
                let gdy = &gd[10 * i + 6..10 * i + 9];
                let ga = gd[10 * i + 9];
                let mut acc = 0.0_f64;
                for j in 0..s {
                    let k = i * s + j;
                    tau[j] = (-acc).exp();
                    acc += ss[k] * (1.0 - bb[k]) + sd[k] * bb[k];
                }
                // contrib[j]: the loss sensitivity carried by sample j, before multiplying by τ_j.
                for j in 0..s {
                    let k = i * s + j;
                    let (es, ed) = ((-ss[k]).exp(), (-sd[k]).exp());
                    let (a_s, a_d) = (1.0 - es, 1.0 - ed);
                    let mixed = ss[k] * (1.0 - bb[k]) + sd[k] * bb[k];
                    let em = (-mixed).exp();
                    let mut e = ga * (1.0 - em);
                    let mut d_ss = ga * em * (1.0 - bb[k]);
                    let mut d_sd = ga * em * bb[k];
                    let mut d_b = ga * em * (sd[k] - ss[k]);
                    for c in 0..3 {
                        let (csv, cdv) = (cs[3 * k + c], cd[3 * k + c]);
                        e += gb[c] * ((1.0 - bb[k]) * a_s * csv + bb[k] * a_d * cdv)
                            + gs[c] * a_s * csv
                            + gdy[c] * a_d * cdv;
                        d_ss += (gb[c] * (1.0 - bb[k]) + gs[c]) * es * csv;
                        d_sd += (gb[c] * bb[k] + gdy[c]) * ed * cdv;
                        d_b += gb[c] * (a_d * cdv - a_s * csv);
                        g_cs[3 * k + c] = tau[j] * a_s * (gb[c] * (1.0 - bb[k]) + gs[c]);
                        g_cd[3 * k + c] = tau[j] * a_d * (gb[c] * bb[k] + gdy[c]);
                    }
                    contrib[j] = tau[j] * e;
                    g_ss[k] = tau[j] * d_ss;
                    g_sd[k] = tau[j] * d_sd;
                    g_b[k] = tau[j] * d_b;
                }
                // Each mixed density dims every later sample.
                let mut later = 0.0;
                for j in (0..s).rev() {
                    let k = i * s + j;
                    g_ss[k] -= later * (1.0 - bb[k]);
                    g_sd[k] -= later * bb[k];
                    g_b[k] -= later * (sd[k] - ss[k]);
                    later += contrib[j];
                }
            }
            vec![
                Some(Tensor::new(vec![r, s], g_ss)),
                Some(Tensor::new(vec![r * s, 3], g_cs)),
                Some(Tensor::new(vec![r, s], g_sd)),
                Some(Tensor::new(vec![r * s, 3], g_cd)),
                Some(Tensor::new(vec![r, s], g_b)),
            ]
        },
    );
    let blend = g.slice_cols(out, 0, 3);
    let static_only = g.slice_cols(out, 3, 3);
    let dynamic_only = g.slice_cols(out, 6, 3);
    let a = g.slice_cols(out, 9, 1);
    BlendOutput {
        blend,
        static_only,
        dynamic_only,
        alpha: g.reshape(a, vec![r]),
    }
}

/// Packs `[R, Q + 1]` = values then opacity.
fn dynamic_reference(g: &mut Graph, sigma: Var, values: Var) -> DynamicOutput {
    let (r, s) = rows_cols(g, sigma);
    let q = g.shape(values)[1];
    let mut packed = Vec::with_capacity(r * (q + 1));
    {
        let sv = g.value(sigma).data();
        let vv = g.value(values).data();
        for i in 0..r {
            let (o, a) = composite_dynamic(&sv[i * s..(i + 1) * s], &vv[i * s * q..(i + 1) * s * q], q)
                .expect("consistent ray shapes");
            packed.extend(o);
            packed.push(a);
        }
    }
    let out = g.op(
        Tensor::new(vec![r, q + 1], packed),
        &[sigma, values],
        move |grad, xs, _| {
            let (sv, vv, gd) = (xs[0].data(), xs[1].data(), grad.data());
            let mut g_s = vec![0.0; r * s];
            let mut g_v = vec![0.0; r * s * q];
            for i in 0..r {
                let go = &gd[i * (q + 1)..i * (q + 1) + q];
                let ga = gd[i * (q + 1) + q];
                let mut acc = 0.0_f64;
                let mut contrib = vec![0.0; s];
                for j in 0..s {
                    let k = i * s + j;
                    let tau = (-acc).exp();
                    let e = (-sv[k]).exp();
                    let w = tau * (1.0 - e);
                    let mut sens = ga;
                    for c in 0..q {
                        sens += go[c] * vv[k * q + c];
                        g_v[k * q + c] = w * go[c];
                    }
                    contrib[j] = w * sens;
                    g_s[k] = tau * e * sens;
                    acc += sv[k];
                }
                let mut later = 0.0;
                for j in (0..s).rev() {
                    g_s[i * s + j] -= later;
                    later += contrib[j];
                }
            }
            vec![
                Some(Tensor::new(vec![r, s], g_s)),
                Some(Tensor::new(vec![r * s, q], g_v)),
            ]
        },
    );
    let values = g.slice_cols(out, 0, q);
    let a = g.slice_cols(out, q, 1);
    DynamicOutput {
        values,
        alpha: g.reshape(a, vec![r]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::GradCheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ray(t_near: f64, t_far: f64) -> Ray {
        Ray {
            origin: Vector3::zeros(),
            direction: Vector3::z(),
            t_near,
            t_far,
            pixel: (0, 0),
            time: 0.0,
        }
    }

    #[test]
    fn midpoint_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_ray(&ray(1.0, 3.0), 2, false, &mut rng);
        assert_eq!(s.positions, vec![1.5, 2.5]);
        assert_eq!(s.points[1], Vector3::new(0.0, 0.0, 2.5));
    }

    #[test]
    fn jittered_samples_increase_and_center_on_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = ray(2.0, 6.0);
        let mut sums = [0.0; 4];
        let draws = 10_000;
        for _ in 0..draws {
            let s = sample_ray(&r, 4, true, &mut rng);
            assert!(s.positions.windows(2).all(|w| w[0] < w[1]));
            for (acc, p) in sums.iter_mut().zip(&s.positions) {
                *acc += p;
            }
        }
        for (i, acc) in sums.iter().enumerate() {
            let mid = 2.0 + i as f64 + 0.5;
            assert!((acc / draws as f64 - mid).abs() < 0.01 * mid);
        }
    }

    #[test]
    fn blended_transmittance_special_cases() {
        assert_eq!(
            blended_transmittance(&[0.0; 3], &[0.0; 3], &[0.3; 3]).unwrap(),
            vec![1.0; 3]
        );
        let sd = [0.2, 0.5, 1.0];
        let t = blended_transmittance(&[9.0; 3], &sd, &[1.0; 3]).unwrap();
        let expect = [1.0, (-0.2f64).exp(), (-0.7f64).exp()];
        for (a, b) in t.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(blended_transmittance(&[0.0; 2], &[0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn opaque_dynamic_sample_gives_its_color() {
        let o = composite_blended(&[0.0], &[0.1, 0.2, 0.3], &[20.0], &[0.7, 0.8, 0.9], &[1.0]).unwrap();
        for (a, b) in o.blend.iter().zip([0.7, 0.8, 0.9]) {
            assert!((a - b).abs() < 1e-6);
        }
        let empty = composite_blended(&[0.0; 2], &[0.5; 6], &[0.0; 2], &[0.5; 6], &[0.5; 2]).unwrap();
        assert_eq!(empty.blend, [0.0; 3]);
        assert_eq!(empty.alpha, 0.0);
    }

    #[test]
    fn expected_geometry_of_single_opaque_sample() {
        let (x, acc) = expected_dynamic(&[20.0], &[1.0, 2.0, 3.0], 3).unwrap();
        assert_eq!(x, vec![1.0, 2.0, 3.0]);
        assert!(acc > 0.999);
        let (z, acc) = expected_dynamic(&[0.0, 0.0], &[1.0, 2.0], 1).unwrap();
        assert_eq!((z[0], acc), (0.0, 0.0));
    }

    fn random_batch(rng: &mut impl Rng, r: usize, s: usize) -> Vec<Tensor> {
        vec![
            Tensor::from_fn(vec![r, s], |_| rng.random_range(0.0..1.5)),
            Tensor::from_fn(vec![r * s, 3], |_| rng.random_range(0.0..1.0)),
            Tensor::from_fn(vec![r, s], |_| rng.random_range(0.0..1.5)),
            Tensor::from_fn(vec![r * s, 3], |_| rng.random_range(0.0..1.0)),
            Tensor::from_fn(vec![r, s], |_| rng.random_range(0.05..0.95)),
        ]
    }

    fn blend_loss(c: Compositor, g: &mut Graph, v: &[Var]) -> Var {
        let o = c.blend(g, v[0], v[1], v[2], v[3], v[4]);
        let w = g.constant(Tensor::from_fn(vec![3, 3], |i| 0.3 + 0.1 * i as f64));
        let parts = [o.blend, o.static_only, o.dynamic_only];
        let mut total = g.sum(o.alpha);
        for p in parts {
            let m = g.matmul(p, w);
            let sq = g.square(m);
            let s = g.sum(sq);
            total = g.add(total, s);
        }
        total
    }

    #[test]
    fn compositors_agree_and_pass_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = random_batch(&mut rng, 3, 8);
        let mut values = Vec::new();
        for c in [Compositor::Fast, Compositor::Reference] {
            let report = GradCheck::default().run(&inputs, None, |g, v| blend_loss(c, g, v));
            assert!(report.passed(), "{c:?}: {report:?}");
            let mut g = Graph::new();
            let v: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
            let l = blend_loss(c, &mut g, &v);
            let grads = g.backward(l);
            values.push((
                g.value(l).item(),
                v.iter().map(|&x| grads.get(x).unwrap().clone()).collect::<Vec<_>>(),
            ));
        }
        assert!((values[0].0 - values[1].0).abs() < 1e-12);
        for (a, b) in values[0].1.iter().zip(&values[1].1) {
            assert!(a.zip_map(b, |x, y| x - y).max_abs() < 1e-12);
        }
    }

    #[test]
    fn dynamic_compositors_pass_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![
            Tensor::from_fn(vec![2, 6], |_| rng.random_range(0.0..1.5)),
            Tensor::from_fn(vec![12, 4], |_| rng.random_range(-1.0..1.0)),
        ];
        for c in [Compositor::Fast, Compositor::Reference] {
            let report = GradCheck::default().run(&inputs, None, |g, v| {
                let o = c.expected(g, v[0], v[1]);
                let sq = g.square(o.values);
                let a = g.sum(sq);
                let b = g.sum(o.alpha);
                g.add(a, b)
            });
            assert!(report.passed(), "{c:?}: {report:?}");
        }
    }
}
