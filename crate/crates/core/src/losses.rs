//! Training objectives and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp applied to blend weights before the logarithm.
pub const BLEND_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossTerm {
    Reconstruction,
    Photometric,
    Occlusion,
    BlendEntropy,
    Cycle,
    FlowMin,
    SpatialSmooth,
    TemporalSmooth,
    Geometric,
    Depth,
}

impl LossTerm {
    pub const ALL: [LossTerm; 10] = [
        LossTerm::Reconstruction,
        LossTerm::Photometric,
        LossTerm::Occlusion,
        LossTerm::BlendEntropy,
        LossTerm::Cycle,
        LossTerm::FlowMin,
        LossTerm::SpatialSmooth,
        LossTerm::TemporalSmooth,
        LossTerm::Geometric,
        LossTerm::Depth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Reconstruction => "rec",
            LossTerm::Photometric => "pho",
            LossTerm::Occlusion => "occ",
            LossTerm::BlendEntropy => "blend",
            LossTerm::Cycle => "cycle",
            LossTerm::FlowMin => "flow_min",
            LossTerm::SpatialSmooth => "smooth_spatial",
            LossTerm::TemporalSmooth => "smooth_temporal",
            LossTerm::Geometric => "geo",
            LossTerm::Depth => "depth",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rec: f64,
    pub pho: f64,
    pub cycle: f64,
    pub occ: f64,
    pub blend: f64,
    pub flow_min: f64,
    pub smooth_spatial: f64,
    pub smooth_temporal: f64,
    pub geo: f64,
    pub depth: f64,
    /// Steps over which the geometric and depth weights fall linearly to zero.
    pub decay_steps: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 1.0,
            pho: 1.0,
            cycle: 0.1,
            occ: 0.1,
            blend: 1e-3,
            flow_min: 0.01,
            smooth_spatial: 0.1,
            smooth_temporal: 0.1,
            geo: 0.02,
            depth: 0.04,
            decay_steps: 12_500,
        }
    }
}

impl LossWeights {
    pub fn zeros() -> Self {
        Self {
            rec: 0.0,
            pho: 0.0,
            cycle: 0.0,
            occ: 0.0,
            blend: 0.0,
            flow_min: 0.0,
            smooth_spatial: 0.0,
            smooth_temporal: 0.0,
            geo: 0.0,
            depth: 0.0,
            decay_steps: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in LossTerm::ALL {
            let w = self.base(t);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config {
                    key: format!("weight_{}", t.name()),
                    message: format!("weight must be finite and non-negative, got {w}"),
                });
            }
        }
        if self.decay_steps == 0 {
            return Err(Error::Config {
                key: "decay_steps".into(),
                message: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    pub fn base(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Reconstruction => self.rec,
            LossTerm::Photometric => self.pho,
            LossTerm::Occlusion => self.occ,
            LossTerm::BlendEntropy => self.blend,
            LossTerm::Cycle => self.cycle,
            LossTerm::FlowMin => self.flow_min,
            LossTerm::SpatialSmooth => self.smooth_spatial,
            LossTerm::TemporalSmooth => self.smooth_temporal,
            LossTerm::Geometric => self.geo,
            LossTerm::Depth => self.depth,
        }
    }

    /// Weight in effect at `step`.
    pub fn at(&self, term: LossTerm, step: usize) -> f64 {
        let w = self.base(term);
        match term {
            LossTerm::Geometric | LossTerm::Depth => w * (1.0 - step as f64 / self.decay_steps.max(1) as f64).max(0.0),
            _ => w,
        }
    }
}

fn check_shape(g: &Graph, v: Var, expect: &[usize], what: &str) -> Result<()> {
    if g.shape(v) != expect {
        return Err(Error::shape(format!(
            "{what}: expected {expect:?}, got {:?}",
            g.shape(v)
        )));
    }
    Ok(())
}

/// Mean over rays of the squared color error.
pub fn l_rec(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let s = g.shape(pred).to_vec();
    check_shape(g, target, &s, "reconstruction target")?;
    let d = g.sub(pred, target);
    let sq = g.square(d);
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / s[0].max(1) as f64))
}

/// `Σ_k mean_r Ŵ_k(r) ‖Ĉ_k(r) − C(r)‖²` over the neighbor renders `warped[k]: [R, 3]` and their
/// composited confidences `occ[k]: [R]`.
pub fn l_pho(g: &mut Graph, warped: &[Var], target: Var, occ: &[Var]) -> Result<Var> {
    if warped.len() != occ.len() {
        return Err(Error::shape(format!(
            "{} neighbor renders but {} confidence maps",
            warped.len(),
            occ.len()
        )));
    }
    let r = g.shape(target)[0];
    let mut total = g.constant(Tensor::scalar(0.0));
    for (&c, &w) in warped.iter().zip(occ) {
        check_shape(g, c, &[r, 3], "neighbor render")?;
        check_shape(g, w, &[r], "neighbor confidence")?;
        let d = g.sub(c, target);
        let sq = g.square(d);
        let err = g.sum_last(sq);
        let we = g.mul(err, w);
        let s = g.sum(we);
        let m = g.scale(s, 1.0 / r.max(1) as f64);
        total = g.add(total, m);
    }
    Ok(total)
}

fn mean_all(g: &mut Graph, parts: &[Var]) -> Var {
    let n: usize = parts.iter().map(|&p| g.value(p).len()).sum();
    let mut total = g.constant(Tensor::scalar(0.0));
    for &p in parts {
        let s = g.sum(p);
        total = g.add(total, s);
    }
    g.scale(total, 1.0 / n.max(1) as f64)
}

/// Mean of `|w − 1|` over every confidence sample.
pub fn l_occ_reg(g: &mut Graph, w: &[Var]) -> Var {
    let dev: Vec<Var> = w
        .iter()
        .map(|&x| {
            let d = g.one_minus(x);
            g.abs(d)
        })
        .collect();
    mean_all(g, &dev)
}

/// Mean of `−b log b` with `b` clamped to `[1e-7, 1]` inside the logarithm.
pub fn l_blend_entropy(g: &mut Graph, b: Var) -> Var {
    let c = g.clamp(b, BLEND_EPS, 1.0);
    let l = g.ln(c);
    let e = g.mul(b, l);
    let m = g.mean(e);
    g.neg(m)
}

/// One neighbor's cycle term: flow to the neighbor at the sample, the neighbor's flow back at
/// the displaced point, and the confidence weights.
#[derive(Clone, Copy, Debug)]
pub struct CyclePair {
    pub forward: Var,
    pub backward: Var,
    pub weight: Var,
}

/// `Σ_k mean w ‖f_{t→k}(x) + f_{k→t}(x + f_{t→k})‖₁`.
pub fn l_cycle(g: &mut Graph, pairs: &[CyclePair]) -> Result<Var> {
    let mut total = g.constant(Tensor::scalar(0.0));
    for p in pairs {
        let s = g.shape(p.forward).to_vec();
        check_shape(g, p.backward, &s, "cycle backward flow")?;
        check_shape(g, p.weight, &s[..1], "cycle weight")?;
        let sum = g.add(p.forward, p.backward);
        let a = g.abs(sum);
        let l1 = g.sum_last(a);
        let w = g.mul(l1, p.weight);
        let m = g.mean(w);
        total = g.add(total, m);
    }
    Ok(total)
}

/// Mean L1 flow magnitude over every point and direction.
pub fn l_flow_min(g: &mut Graph, flows: &[Var]) -> Var {
    let norms: Vec<Var> = flows
        .iter()
        .map(|&f| {
            let a = g.abs(f);
            g.sum_last(a)
        })
        .collect();
    mean_all(g, &norms)
}

/// Weighted L1 difference between flows at adjacent samples of the same ray, with weights
/// `exp(−2‖x_j − x_{j+1}‖)`. `flows[i]: [R·S, 3]`, `points: [R·S, 3]`.
pub fn l_flow_smooth_spatial(g: &mut Graph, flows: &[Var], points: &Tensor, samples: usize) -> Result<Var> {
    let n = points.shape()[0];
    if samples < 2 || !n.is_multiple_of(samples) {
        return Err(Error::shape(format!("{n} points do not split into rays of {samples}")));
    }
    let rays = n / samples;
    let pd = points.data();
    let mut weights = Vec::with_capacity(rays * (samples - 1));
    for r in 0..rays {
        for j in 0..samples - 1 {
            let a = (r * samples + j) * 3;
            let d2: f64 = (0..3).map(|c| (pd[a + c] - pd[a + 3 + c]).powi(2)).sum();
            weights.push((-2.0 * d2.sqrt()).exp());
        }
    }
    let pairs = weights.len();
    let mut total = g.constant(Tensor::scalar(0.0));
    for &f in flows {
        check_shape(g, f, &[n, 3], "spatial smoothness flow")?;
        let fv = g.value(f).data().to_vec();
        let w = weights.clone();
        let mut value = 0.0;
        for r in 0..rays {
            for j in 0..samples - 1 {
                let a = (r * samples + j) * 3;
                let l1: f64 = (0..3).map(|c| (fv[a + c] - fv[a + 3 + c]).abs()).sum();
                value += w[r * (samples - 1) + j] * l1;
            }
        }
        let term = g.op(Tensor::scalar(value), &[f], move |grad, xs, _| {
            let fv = xs[0].data();
            let gs = grad.item();
            let mut gf = vec![0.0; fv.len()];
            for r in 0..rays {
                for j in 0..samples - 1 {
                    let a = (r * samples + j) * 3;
                    let wt = w[r * (samples - 1) + j];
                    for c in 0..3 {
                        let d = fv[a + c] - fv[a + 3 + c];
                        let s = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gf[a + c] += gs * wt * s;
                        gf[a + 3 + c] -= gs * wt * s;
                    }
                }
            }
            vec![Some(Tensor::new(vec![n, 3], gf))]
        });
        total = g.add(total, term);
    }
    Ok(g.scale(total, 1.0 / (pairs * flows.len().max(1)).max(1) as f64))
}

/// Mean of `‖f_{t→t+1} + f_{t→t−1}‖²`.
pub fn l_flow_smooth_temporal(g: &mut Graph, fwd: Var, bwd: Var) -> Result<Var> {
    let s = g.shape(fwd).to_vec();
    check_shape(g, bwd, &s, "temporal smoothness backward flow")?;
    let sum = g.add(fwd, bwd);
    let sq = g.square(sum);
    let per = g.sum_last(sq);
    Ok(g.mean(per))
}

/// Projects `points: [R, 3]` through `camera`; rows behind the camera read zero and are flagged.
pub fn project_points(g: &mut Graph, camera: &Camera, points: Var) -> (Var, Vec<bool>) {
    let (r, _) = g.value(points).dims2();
    let pd = g.value(points).data();
    let mut out = vec![0.0; r * 2];
    let mut jac = vec![[0.0; 6]; r];
    let mut behind = vec![false; r];
    for i in 0..r {
        let x = nalgebra::Vector3::new(pd[3 * i], pd[3 * i + 1], pd[3 * i + 2]);
        match camera.project_with_jacobian(&x) {
            Some((uv, j)) => {
                out[2 * i] = uv[0];
                out[2 * i + 1] = uv[1];
                jac[i] = [j[(0, 0)], j[(0, 1)], j[(0, 2)], j[(1, 0)], j[(1, 1)], j[(1, 2)]];
            }
            None => behind[i] = true,
        }
    }
    let y = g.op(Tensor::new(vec![r, 2], out), &[points], move |grad, _, _| {
        let gd = grad.data();
        let mut gp = vec![0.0; r * 3];
        for i in 0..r {
            for c in 0..3 {
                gp[3 * i + c] = gd[2 * i] * jac[i][c] + gd[2 * i + 1] * jac[i][3 + c];
            }
        }
        vec![Some(Tensor::new(vec![r, 3], gp))]
    });
    (y, behind)
}

/// Reprojection target for one neighbor: `target = p_t + u_{t→k}` per ray, `[R, 2]`.
#[derive(Clone, Debug)]
pub struct GeoTarget {
    pub flow: Var,
    pub camera: Camera,
    pub target: Tensor,
}

/// `Σ_k mean_r ‖project(cam_k, X̂ + F̂_k) − (p_t + u_k)‖₁`; rays whose displaced point falls
/// behind the neighbor camera contribute zero.
pub fn l_geo(g: &mut Graph, point: Var, neighbors: &[GeoTarget]) -> Result<Var> {
    let (r, _) = g.value(point).dims2();
    let mut total = g.constant(Tensor::scalar(0.0));
    for nb in neighbors {
        check_shape(g, nb.flow, &[r, 3], "expected flow")?;
        if nb.target.shape() != [r, 2] {
            return Err(Error::shape(format!("reprojection target must be [{r}, 2]")));
        }
        let moved = g.add(point, nb.flow);
        let (proj, behind) = project_points(g, &nb.camera, moved);
        let mut target = nb.target.clone();
        for (i, &b) in behind.iter().enumerate() {
            if b {
                target.data_mut()[2 * i] = 0.0;
                target.data_mut()[2 * i + 1] = 0.0;
            }
        }
        let t = g.constant(target);
        let d = g.sub(proj, t);
        let a = g.abs(d);
        let l1 = g.sum_last(a);
        let s = g.sum(l1);
        let m = g.scale(s, 1.0 / r.max(1) as f64);
        total = g.add(total, m);
    }
    Ok(total)
}

/// Least-squares scale and shift aligning `pseudo` to `pred`; shift only when `pseudo` is
/// constant.
pub fn depth_alignment(pred: &[f64], pseudo: &[f64]) -> (f64, f64) {
    let n = pred.len() as f64;
    let mp = pseudo.iter().sum::<f64>() / n;
    let mq = pred.iter().sum::<f64>() / n;
    let var: f64 = pseudo.iter().map(|d| (d - mp) * (d - mp)).sum();
    let scale_ref = pseudo.iter().map(|d| d * d).sum::<f64>().max(1e-300);
    if var <= 1e-12 * scale_ref {
        return (0.0, mq);
    }
    let cov: f64 = pseudo.iter().zip(pred).map(|(d, q)| (d - mp) * (q - mq)).sum();
    let s = cov / var;
    (s, mq - s * mp)
}

/// `mean |D̂ − (s·D + o)|` with `(s, o)` the least-squares alignment of the pseudo-depth `D` to
/// the rendered depth `D̂: [R]`. The alignment is differentiated through.
pub fn l_depth(g: &mut Graph, pred: Var, pseudo: &[f64]) -> Result<Var> {
    let r = g.value(pred).len();
    if pseudo.len() != r || r == 0 {
        return Err(Error::shape(format!(
            "pseudo-depth has {} rays, render has {r}",
            pseudo.len()
        )));
    }
    let pv = g.value(pred).data().to_vec();
    let (s, o) = depth_alignment(&pv, pseudo);
    let resid: Vec<f64> = pv.iter().zip(pseudo).map(|(q, d)| q - (s * d + o)).collect();
    let value = resid.iter().map(|x| x.abs()).sum::<f64>() / r as f64;
    let d = pseudo.to_vec();
    let degenerate = s == 0.0 && {
        let m = d.iter().sum::<f64>() / r as f64;
        d.iter().all(|x| (x - m).abs() <= 1e-6 * m.abs().max(1.0))
    };
    Ok(g.op(Tensor::scalar(value), &[pred], move |grad, _, _| {
        // The residual is (I − P) D̂ with P the projection onto span{D, 1}; P is symmetric.
        let n = r as f64;
        let sign: Vec<f64> = resid.iter().map(|x| x.signum() * (*x != 0.0) as i32 as f64).collect();
        let ms = sign.iter().sum::<f64>() / n;
        let mut gp: Vec<f64> = sign.iter().map(|x| x - ms).collect();
        if !degenerate {
            let md = d.iter().sum::<f64>() / n;
            let var: f64 = d.iter().map(|x| (x - md) * (x - md)).sum();
            let cov: f64 = d.iter().zip(&sign).map(|(x, y)| (x - md) * y).sum();
            for (gi, x) in gp.iter_mut().zip(&d) {
                *gi -= (x - md) * cov / var;
            }
        }
        let k = grad.item() / n;
        vec![Some(Tensor::new(vec![r], gp.into_iter().map(|v| v * k).collect()))]
    }))
}

/// Per-term values and the weighted total.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub step: usize,
    /// Unweighted values; `None` for terms that were not evaluated.
    pub terms: [Option<f64>; 10],
    /// Weights in effect at `step`.
    pub weights: [f64; 10],
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, term: LossTerm) -> Option<f64> {
        self.terms[term.index()]
    }

    pub fn weight(&self, term: LossTerm) -> f64 {
        self.weights[term.index()]
    }

    /// First evaluated term with a non-finite value.
    pub fn non_finite(&self) -> Option<(LossTerm, f64)> {
        LossTerm::ALL
            .into_iter()
            .find_map(|t| self.get(t).filter(|v| !v.is_finite()).map(|v| (t, v)))
    }
}

/// `Σ weight_i(step) · term_i` over the supplied terms, in [`LossTerm::ALL`] order.
pub fn total_loss(g: &mut Graph, terms: &[(LossTerm, Var)], weights: &LossWeights, step: usize) -> (Var, LossReport) {
    let mut report = LossReport {
        step,
        terms: [None; 10],
        weights: LossTerm::ALL.map(|t| weights.at(t, step)),
        total: 0.0,
    };
    let mut ordered: Vec<(LossTerm, Var)> = terms.to_vec();
    ordered.sort_by_key(|(t, _)| *t);
    let mut total = g.constant(Tensor::scalar(0.0));
    for (t, v) in ordered {
        let value = g.value(v).item();
        report.terms[t.index()] = Some(value);
        let w = report.weights[t.index()];
        let wv = g.scale(v, w);
        total = g.add(total, wv);
    }
    report.total = g.value(total).item();
    (total, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::GradCheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(g: &mut Graph, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn reconstruction_examples() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![2, 3], vec![0.6, 0.5, 0.5, 0.1, 0.2, 0.3]));
        let t = g.constant(Tensor::new(vec![2, 3], vec![0.5, 0.5, 0.5, 0.0, 0.2, 0.3]));
        let l = l_rec(&mut g, p, t).unwrap();
        assert!((scalar(&mut g, l) - 0.01).abs() < 1e-15);
        let z = l_rec(&mut g, p, p).unwrap();
        assert_eq!(scalar(&mut g, z), 0.0);
    }

    #[test]
    fn blend_entropy_examples() {
        let mut g = Graph::new();
        let inv_e = (-1.0f64).exp();
        for (b, expect) in [(1.0, 0.0), (0.0, 0.0), (inv_e, inv_e)] {
            let v = g.constant(Tensor::new(vec![1], vec![b]));
            let l = l_blend_entropy(&mut g, v);
            assert!((scalar(&mut g, l) - expect).abs() < 1e-15, "b = {b}");
        }
    }

    #[test]
    fn flow_examples() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::from_fn(vec![4, 3], |i| if i % 3 == 0 { 1.0 } else { 0.0 }));
        let m = l_flow_min(&mut g, &[f, f]);
        assert_eq!(scalar(&mut g, m), 1.0);
        let t = l_flow_smooth_temporal(&mut g, f, f).unwrap();
        assert_eq!(scalar(&mut g, t), 4.0);
        let nf = g.neg(f);
        let z = l_flow_smooth_temporal(&mut g, f, nf).unwrap();
        assert_eq!(scalar(&mut g, z), 0.0);
    }

    #[test]
    fn spatial_smoothness_matches_manual_three_sample_ray() {
        let mut g = Graph::new();
        let pts = Tensor::new(vec![3, 3], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.5, 0.0, 0.0, 2.5]);
        let f = g.constant(Tensor::new(
            vec![3, 3],
            vec![0.0, 0.0, 0.0, 0.1, -0.2, 0.0, 0.1, 0.0, 0.3],
        ));
        let l = l_flow_smooth_spatial(&mut g, &[f], &pts, 3).unwrap();
        let expect = ((-1.0f64).exp() * 0.3 + (-2.0f64).exp() * 0.5) / 2.0;
        assert!((scalar(&mut g, l) - expect).abs() < 1e-15);
    }

    #[test]
    fn depth_loss_is_affine_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d: Vec<f64> = (0..16).map(|_| rng.random_range(1.0..5.0)).collect();
        let mut g = Graph::new();
        let exact = g.constant(Tensor::new(vec![16], d.iter().map(|x| 2.0 * x + 3.0).collect()));
        let l = l_depth(&mut g, exact, &d).unwrap();
        assert!(scalar(&mut g, l) < 1e-9);
        let same = g.constant(Tensor::new(vec![16], d.clone()));
        let l = l_depth(&mut g, same, &d).unwrap();
        assert_eq!(scalar(&mut g, l), 0.0);
        let pred = g.constant(Tensor::from_fn(vec![16], |_| rng.random_range(1.0..5.0)));
        let a = l_depth(&mut g, pred, &d).unwrap();
        let d2: Vec<f64> = d.iter().map(|x| 0.3 * x - 7.0).collect();
        let b = l_depth(&mut g, pred, &d2).unwrap();
        assert!((scalar(&mut g, a) - scalar(&mut g, b)).abs() < 1e-9);
    }

    #[test]
    fn depth_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d: Vec<f64> = (0..12).map(|_| rng.random_range(1.0..5.0)).collect();
        let pred = Tensor::from_fn(vec![12], |_| rng.random_range(1.0..5.0));
        let report = GradCheck::default().run(&[pred], None, |g, v| l_depth(g, v[0], &d).unwrap());
        assert!(report.passed(), "{report:?}");
        let flat = vec![2.0; 12];
        let pred = Tensor::from_fn(vec![12], |_| rng.random_range(1.0..5.0));
        let report = GradCheck::default().run(&[pred], None, |g, v| l_depth(g, v[0], &flat).unwrap());
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn decay_is_linear_and_reaches_zero() {
        let w = LossWeights {
            decay_steps: 100,
            ..LossWeights::default()
        };
        assert_eq!(w.at(LossTerm::Geometric, 0), w.geo);
        assert!((w.at(LossTerm::Depth, 25) - 0.75 * w.depth).abs() < 1e-15);
        assert_eq!(w.at(LossTerm::Geometric, 100), 0.0);
        assert_eq!(w.at(LossTerm::Depth, 1000), 0.0);
        assert_eq!(w.at(LossTerm::Reconstruction, 1000), w.rec);
    }

    #[test]
    fn total_is_weighted_sum() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.5));
        let b = g.constant(Tensor::scalar(2.0));
        let w = LossWeights {
            rec: 2.0,
            geo: 0.1,
            decay_steps: 10,
            ..LossWeights::zeros()
        };
        let (t, report) = total_loss(
            &mut g,
            &[(LossTerm::Geometric, b), (LossTerm::Reconstruction, a)],
            &w,
            5,
        );
        assert_eq!(g.value(t).item(), 2.0 * 0.5 + 0.05 * 2.0);
        assert_eq!(report.total, g.value(t).item());
        assert_eq!(report.get(LossTerm::Depth), None);
    }
}
