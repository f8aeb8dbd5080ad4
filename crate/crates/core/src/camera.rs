//! Pinhole cameras, plane-induced homographies, projection and ray generation.
//!
//! Pixel `(row, col)` covers the continuous image square `[col, col + 1) × [row, row + 1)`
//! and its center sits at `(col + 0.5, row + 0.5)`. Projections return continuous
//! coordinates `(x, y)` in that convention.

use std::sync::Arc;

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};

use crate::autodiff::SparseMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const ROTATION_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    /// Intrinsics in pixels.
    pub k: Matrix3<f64>,
    /// World-to-camera rotation.
    pub r: Matrix3<f64>,
    /// World-to-camera translation.
    pub t: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    /// Depth bounds along the principal axis.
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Self {
            k,
            r,
            t,
            width,
            height,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll. The camera y axis points
    /// down in the image, x to the right, z forward.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: (f64, f64),
        principal: (f64, f64),
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("eye coincides with target".into()))?;
        let x = z
            .cross(&(-up))
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("up vector parallel to view axis".into()))?;
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -r * eye;
        let k = Matrix3::new(focal.0, 0.0, principal.0, 0.0, focal.1, principal.1, 0.0, 0.0, 1.0);
        Self::new(k, r, t, width, height, near, far)
    }

    pub fn validate(&self) -> Result<()> {
        let rrt = self.r * self.r.transpose() - Matrix3::identity();
        if rrt.amax() >= ROTATION_TOL || (self.r.determinant() - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidCamera("R is not a proper rotation".into()));
        }
        let k = &self.k;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::InvalidCamera("K is not upper-triangular".into()));
        }
        if k[(2, 2)] != 1.0 {
            return Err(Error::InvalidCamera("K[2,2] must be 1".into()));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidCamera(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("empty image".into()));
        }
        if !self.t.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite translation".into()));
        }
        Ok(())
    }

    pub fn k_inverse(&self) -> Result<Matrix3<f64>> {
        self.k.try_inverse().ok_or(Error::Singular("intrinsic matrix"))
    }

    /// Camera center in world coordinates, `−Rᵀt`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    /// Principal (viewing) axis in world coordinates: the third row of `R`.
    pub fn axis(&self) -> Vector3<f64> {
        self.r.row(2).transpose()
    }

    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r * x + self.t
    }

    /// Depth of a world point along the principal axis.
    pub fn depth_of(&self, x: &Vector3<f64>) -> f64 {
        self.r.row(2).dot(&x.transpose()) + self.t[2]
    }

    /// `π(K(R·X + t))`, or an out-of-frustum error when the point is not in front of the camera.
    pub fn project(&self, x: &Vector3<f64>) -> Result<Vector2<f64>> {
        let p = self.k * self.to_camera(x);
        if p[2] <= 0.0 {
            return Err(Error::OutOfFrustum(format!(
                "point at camera depth {} is not in front of the camera",
                p[2]
            )));
        }
        Ok(Vector2::new(p[0] / p[2], p[1] / p[2]))
    }

    /// Projection and its Jacobian with respect to the world point.
    pub fn project_with_jacobian(&self, x: &Vector3<f64>) -> Option<(Vector2<f64>, Matrix2x3<f64>)> {
        let a = self.k * self.r;
        let p = a * x + self.k * self.t;
        if p[2] <= 0.0 {
            return None;
        }
        let iz = 1.0 / p[2];
        let uv = Vector2::new(p[0] * iz, p[1] * iz);
        // d(p0/p2)/dx = (a0 - uv0 a2) / p2, likewise for the second row.
        let mut j = Matrix2x3::zeros();
        for c in 0..3 {
            j[(0, c)] = (a[(0, c)] - uv[0] * a[(2, c)]) * iz;
            j[(1, c)] = (a[(1, c)] - uv[1] * a[(2, c)]) * iz;
        }
        Some((uv, j))
    }

    /// Same camera with intrinsics scaled by `factor` (continuous coordinates scale exactly).
    pub fn scaled(&self, factor: f64) -> Camera {
        let s = Matrix3::new(factor, 0.0, 0.0, 0.0, factor, 0.0, 0.0, 0.0, 1.0);
        Camera {
            k: s * self.k,
            width: ((self.width as f64 * factor).ceil() as usize).max(1),
            height: ((self.height as f64 * factor).ceil() as usize).max(1),
            ..self.clone()
        }
    }
}

/// Continuous image coordinates of a pixel center.
pub fn pixel_center(row: usize, col: usize) -> Vector2<f64> {
    Vector2::new(col as f64 + 0.5, row as f64 + 0.5)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit direction.
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
    pub pixel: (usize, usize),
    /// Normalized frame time in `[0, 1]`.
    pub time: f64,
}

impl Ray {
    pub fn at(&self, s: f64) -> Vector3<f64> {
        self.origin + self.direction * s
    }

    /// Cosine between the ray and the camera axis: camera depth per unit of ray length.
    pub fn depth_per_unit(&self, cam: &Camera) -> f64 {
        self.direction.dot(&cam.axis())
    }
}

/// Rays through pixel centers. `t_near`/`t_far` are chosen so that samples span the camera's
/// `[near, far]` depth range.
pub fn generate_rays(cam: &Camera, pixels: &[(usize, usize)], time: f64) -> Result<Vec<Ray>> {
    let k_inv = cam.k_inverse()?;
    let rt = cam.r.transpose();
    let origin = cam.center();
    let axis = cam.axis();
    pixels
        .iter()
        .map(|&(row, col)| {
            if row >= cam.height || col >= cam.width {
                return Err(Error::invalid(format!(
                    "pixel ({row}, {col}) outside {}x{} image",
                    cam.height, cam.width
                )));
            }
            let c = pixel_center(row, col);
            let direction = (rt * k_inv * Vector3::new(c[0], c[1], 1.0)).normalize();
            let cos = direction.dot(&axis);
            Ok(Ray {
                origin,
                direction,
                t_near: cam.near / cos,
                t_far: cam.far / cos,
                pixel: (row, col),
                time,
            })
        })
        .collect()
}

/// A world-space plane `{X : n·X = offset}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl Plane {
    /// The plane at camera depth `depth` of `cam`.
    pub fn fronto_parallel(cam: &Camera, depth: f64) -> Plane {
        let n = cam.axis();
        Plane {
            normal: n,
            offset: depth + n.dot(&cam.center()),
        }
    }
}

/// Homography taking `reference` pixel coordinates to `src` pixel coordinates for points
/// on `plane`, normalized so that `H[2,2] = 1`.
pub fn plane_induced_homography(src: &Camera, reference: &Camera, plane: &Plane) -> Result<Matrix3<f64>> {
    let c_ref = reference.center();
    let c_src = src.center();
    // Signed distance of the reference center to the plane.
    let dist = plane.offset - plane.normal.dot(&c_ref);
    if dist.abs() < 1e-12 {
        return Err(Error::Singular("plane passes through the reference center"));
    }
    let k_ref_inv = reference.k_inverse()?;
    // X = C_ref + s·Rᵀ_ref K⁻¹_ref p with n·X = offset gives s = dist / (n·Rᵀ K⁻¹ p), so the
    // source camera sees R_src (Rᵀ_ref K⁻¹ p + (C_ref − C_src) nᵀ Rᵀ_ref K⁻¹ p / dist).
    let m = src.k
        * src.r
        * (Matrix3::identity() + (c_ref - c_src) * plane.normal.transpose() / dist)
        * reference.r.transpose()
        * k_ref_inv;
    normalize_homography(m)
}

/// Homography for the fronto-parallel plane at `depth` in the reference camera:
/// `K_src R_src (I + (C_ref − C_src) n_refᵀ / d) R_refᵀ K_ref⁻¹`.
///
/// The commonly printed form of this expression writes `K_refᵀ` where the inverse is
/// required, and uses camera centers `C` for the translation terms.
pub fn plane_homography(src: &Camera, reference: &Camera, depth: f64) -> Result<Matrix3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::invalid(format!("plane depth must be positive, got {depth}")));
    }
    let n = reference.axis();
    let m = src.k
        * src.r
        * (Matrix3::identity() + (reference.center() - src.center()) * n.transpose() / depth)
        * reference.r.transpose()
        * reference.k_inverse()?;
    normalize_homography(m)
}

fn normalize_homography(m: Matrix3<f64>) -> Result<Matrix3<f64>> {
    let h22 = m[(2, 2)];
    if h22.abs() < 1e-15 * m.amax().max(1.0) {
        return Err(Error::Singular("homography with H[2,2] = 0"));
    }
    Ok(m / h22)
}

pub fn apply_homography(h: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let q = h * Vector3::new(p[0], p[1], 1.0);
    Vector2::new(q[0] / q[2], q[1] / q[2])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PlaneSpacing {
    UniformDepth,
    #[default]
    UniformDisparity,
}

impl PlaneSpacing {
    pub fn as_str(self) -> &'static str {
        match self {
            PlaneSpacing::UniformDepth => "uniform_depth",
            PlaneSpacing::UniformDisparity => "uniform_disparity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uniform_depth" => Some(PlaneSpacing::UniformDepth),
            "uniform_disparity" => Some(PlaneSpacing::UniformDisparity),
            _ => None,
        }
    }
}

/// Strictly increasing sweep depths spanning `[near, far]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthPlaneSet {
    depths: Vec<f64>,
    spacing: PlaneSpacing,
    near: f64,
    far: f64,
}

impl DepthPlaneSet {
    pub fn new(near: f64, far: f64, count: usize, spacing: PlaneSpacing) -> Result<Self> {
        if !(near > 0.0 && near < far) {
            return Err(Error::invalid(format!("need 0 < near < far, got {near}, {far}")));
        }
        if count < 2 {
            return Err(Error::invalid("at least two depth planes are required"));
        }
        let last = (count - 1) as f64;
        let depths = (0..count)
            .map(|j| {
                let a = j as f64 / last;
                match spacing {
                    PlaneSpacing::UniformDepth => near + a * (far - near),
                    PlaneSpacing::UniformDisparity => 1.0 / (1.0 / near + a * (1.0 / far - 1.0 / near)),
                }
            })
            .collect();
        Ok(Self {
            depths,
            spacing,
            near,
            far,
        })
    }

    pub fn for_camera(cam: &Camera, count: usize, spacing: PlaneSpacing) -> Result<Self> {
        Self::new(cam.near, cam.far, count, spacing)
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn spacing(&self) -> PlaneSpacing {
        self.spacing
    }

    /// Continuous plane index of a camera depth and its derivative with respect to depth.
    pub fn index_of(&self, depth: f64) -> (f64, f64) {
        let last = (self.depths.len() - 1) as f64;
        match self.spacing {
            PlaneSpacing::UniformDepth => {
                let s = last / (self.far - self.near);
                ((depth - self.near) * s, s)
            }
            PlaneSpacing::UniformDisparity => {
                let span = 1.0 / self.near - 1.0 / self.far;
                let s = last / span;
                ((1.0 / self.near - 1.0 / depth) * s, s / (depth * depth))
            }
        }
    }
}

/// Bilinear taps for continuous grid-index coordinates `(x, y)` on an `h × w` grid, or
/// `None` when the sample falls outside `[0, w−1] × [0, h−1]`.
pub(crate) fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> Option<[(usize, f64); 4]> {
    const EDGE: f64 = 1e-9;
    if !(x >= -EDGE && y >= -EDGE && x <= (w - 1) as f64 + EDGE && y <= (h - 1) as f64 + EDGE) {
        return None;
    }
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    Some([
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ])
}

/// Inverse-warp sampling map: output pixel `p` of an `out_h × out_w` grid reads the source
/// grid at `H·p`. Also returns the per-output validity mask.
pub fn warp_map(h: &Matrix3<f64>, src_hw: (usize, usize), out_hw: (usize, usize)) -> Result<(SparseMap, Vec<bool>)> {
    if h.determinant().abs() < 1e-14 * h.amax().powi(3).max(1e-300) {
        return Err(Error::Singular("warp homography"));
    }
    let (sh, sw) = src_hw;
    let (oh, ow) = out_hw;
    let mut map = SparseMap::new(sh * sw);
    let mut mask = Vec::with_capacity(oh * ow);
    for row in 0..oh {
        for col in 0..ow {
            let q = h * Vector3::new(col as f64 + 0.5, row as f64 + 0.5, 1.0);
            let taps = (q[2] > 0.0)
                .then(|| bilinear_taps(q[0] / q[2] - 0.5, q[1] / q[2] - 0.5, sh, sw))
                .flatten();
            match taps {
                Some(t) => {
                    map.push_row(t.into_iter().filter(|&(_, w)| w != 0.0));
                    mask.push(true);
                }
                None => {
                    map.push_row(std::iter::empty());
                    mask.push(false);
                }
            }
        }
    }
    Ok((map, mask))
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult {
    /// `C × h × w` warped values, zero where invalid.
    pub values: Tensor,
    pub mask: Vec<bool>,
}

/// Inverse-warps a `C × h × w` grid through `h` with bilinear sampling.
pub fn warp_image(features: &Tensor, h: &Matrix3<f64>) -> Result<WarpResult> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("warp_image expects C×h×w, got {s:?}")));
    }
    let (c, hh, ww) = (s[0], s[1], s[2]);
    let (map, mask) = warp_map(h, (hh, ww), (hh, ww))?;
    let values = Tensor::new(vec![c, hh, ww], map.apply(features.data(), c));
    Ok(WarpResult { values, mask })
}

/// Shared warp map for use inside a graph.
pub fn warp_map_shared(
    h: &Matrix3<f64>,
    src_hw: (usize, usize),
    out_hw: (usize, usize),
) -> Result<(Arc<SparseMap>, Vec<bool>)> {
    warp_map(h, src_hw, out_hw).map(|(m, k)| (Arc::new(m), k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_camera(rng: &mut impl Rng) -> Camera {
        let eye = Vector3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        );
        let target = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 4.0);
        Camera::look_at(
            eye,
            target,
            Vector3::new(0.0, -1.0, 0.0),
            (rng.random_range(20.0..40.0), rng.random_range(20.0..40.0)),
            (rng.random_range(14.0..18.0), rng.random_range(10.0..14.0)),
            32,
            24,
            1.0,
            8.0,
        )
        .unwrap()
    }

    #[test]
    fn identical_cameras_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cam = test_camera(&mut rng);
        for d in [0.5, 2.0, 7.0] {
            let h = plane_homography(&cam, &cam, d).unwrap();
            assert!((h - Matrix3::identity()).amax() < 1e-12);
        }
    }

    #[test]
    fn shared_center_gives_pure_rotation_homography() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = test_camera(&mut rng);
        let mut b = test_camera(&mut rng);
        // Same center, different orientation.
        b.t = -(b.r * a.center());
        let h = plane_homography(&b, &a, 3.3).unwrap();
        let expect = b.k * b.r * a.r.transpose() * a.k.try_inverse().unwrap();
        let expect = expect / expect[(2, 2)];
        assert!((h - expect).amax() < 1e-10);
    }

    #[test]
    fn rejects_nonpositive_depth_and_bad_cameras() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cam = test_camera(&mut rng);
        assert!(plane_homography(&cam, &cam, 0.0).is_err());
        assert!(plane_homography(&cam, &cam, -1.0).is_err());
        let mut bad = cam.clone();
        bad.k[(0, 0)] = -1.0;
        assert!(bad.validate().is_err());
        let mut bad = cam.clone();
        bad.r[(0, 0)] += 0.01;
        assert!(bad.validate().is_err());
        let mut bad = cam;
        bad.near = 9.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn optical_axis_point_projects_to_principal_point() {
        let k = Matrix3::new(1.0, 0.0, 3.0, 0.0, 1.0, 2.0, 0.0, 0.0, 1.0);
        let cam = Camera::new(k, Matrix3::identity(), Vector3::zeros(), 6, 4, 0.1, 10.0).unwrap();
        let p = cam.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(p, Vector2::new(3.0, 2.0));
        assert!(matches!(
            cam.project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::OutOfFrustum(_))
        ));
        assert!(cam.project(&Vector3::new(1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn principal_pixel_ray_follows_the_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cam = test_camera(&mut rng);
        cam.k[(0, 2)] = 15.5;
        cam.k[(1, 2)] = 11.5;
        let ray = &generate_rays(&cam, &[(11, 15)], 0.0).unwrap()[0];
        assert!((ray.direction - cam.axis()).amax() < 1e-9);
        assert!((ray.t_near - cam.near).abs() < 1e-9);
        assert!(generate_rays(&cam, &[(24, 0)], 0.0).is_err());
    }

    #[test]
    fn project_jacobian_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cam = test_camera(&mut rng);
        let x = Vector3::new(0.2, -0.1, 3.0);
        let (_, j) = cam.project_with_jacobian(&x).unwrap();
        for c in 0..3 {
            let mut e = Vector3::zeros();
            e[c] = 1e-6;
            let d = (cam.project(&(x + e)).unwrap() - cam.project(&(x - e)).unwrap()) / 2e-6;
            assert!((d[0] - j[(0, c)]).abs() < 1e-6);
            assert!((d[1] - j[(1, c)]).abs() < 1e-6);
        }
    }

    #[test]
    fn disparity_planes_are_increasing_and_invert() {
        for spacing in [PlaneSpacing::UniformDepth, PlaneSpacing::UniformDisparity] {
            let planes = DepthPlaneSet::new(1.0, 6.0, 9, spacing).unwrap();
            let d = planes.depths();
            assert!(d.windows(2).all(|w| w[0] < w[1]));
            assert!((d[0] - 1.0).abs() < 1e-12 && (d[8] - 6.0).abs() < 1e-12);
            for (j, &depth) in d.iter().enumerate() {
                assert!((planes.index_of(depth).0 - j as f64).abs() < 1e-9);
            }
            let (i0, di) = planes.index_of(2.0);
            let (i1, _) = planes.index_of(2.0 + 1e-6);
            assert!(((i1 - i0) / 1e-6 - di).abs() < 1e-4);
        }
        assert!(DepthPlaneSet::new(1.0, 6.0, 1, PlaneSpacing::UniformDepth).is_err());
    }

    #[test]
    fn identity_warp_is_exact() {
        let f = Tensor::from_fn(vec![2, 5, 7], |i| (i as f64 * 0.7).sin());
        let w = warp_image(&f, &Matrix3::identity()).unwrap();
        assert_eq!(w.values, f);
        assert!(w.mask.iter().all(|&m| m));
    }

    #[test]
    fn integer_translation_shifts_interior() {
        let f = Tensor::from_fn(vec![1, 6, 8], |i| i as f64);
        // Output pixel (r, c) reads source (r + 1, c + 2).
        let h = Matrix3::new(1.0, 0.0, 2.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0);
        let w = warp_image(&f, &h).unwrap();
        for r in 0..6 {
            for c in 0..8 {
                let v = w.values.data()[r * 8 + c];
                if r + 1 < 6 && c + 2 < 8 {
                    assert_eq!(v, f.data()[(r + 1) * 8 + c + 2]);
                    assert!(w.mask[r * 8 + c]);
                } else {
                    assert_eq!(v, 0.0);
                    assert!(!w.mask[r * 8 + c]);
                }
            }
        }
    }

    #[test]
    fn singular_warp_is_rejected() {
        let f = Tensor::zeros(vec![1, 3, 3]);
        let h = Matrix3::new(1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(warp_image(&f, &h), Err(Error::Singular(_))));
    }
}
