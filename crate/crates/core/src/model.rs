//! The full model: two encoding-volume pipelines, the static and dynamic fields, and ray-batch
//! rendering against a scene.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::camera::{generate_rays, Camera, DepthPlaneSet, Ray};
use crate::config::TrainConfig;
use crate::data_io::SceneBundle;
use crate::error::{Error, Result};
use crate::fields::{
    encode_directions, gather_colors, ColorSource, DynamicField, DynamicSample, StaticField, StaticSample,
};
use crate::params::ParamStore;
use crate::render::{sample_ray, BlendOutput, Compositor};
use crate::tensor::Tensor;
use crate::trainer::{select_keyframes, select_neighbors};
use crate::volumes::{sample_volume, EncodingVolume, View, VolumeEncoder, VolumeGrid, VolumeKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RenderMode {
    #[default]
    Blend,
    StaticOnly,
    DynamicOnly,
}

impl RenderMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "blend" => Some(RenderMode::Blend),
            "static" => Some(RenderMode::StaticOnly),
            "dynamic" => Some(RenderMode::DynamicOnly),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RenderMode::Blend => "blend",
            RenderMode::StaticOnly => "static",
            RenderMode::DynamicOnly => "dynamic",
        }
    }
}

/// Frame index mapped to `[0, 1]`.
pub fn normalized_time(t: f64, frames: usize) -> f64 {
    if frames <= 1 {
        0.0
    } else {
        t / (frames - 1) as f64
    }
}

/// Everything the fields are conditioned on for one target time and reference camera.
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub geometry: EncodingVolume,
    pub motion: EncodingVolume,
    pub keyframes: Vec<usize>,
    pub neighbors: Vec<usize>,
    pub keyframe_sources: Vec<ColorSource>,
    pub neighbor_sources: Vec<ColorSource>,
    pub frames: usize,
}

impl Conditioning {
    /// Copies the volumes into another graph as constants.
    pub fn transfer(&self, from: &Graph, to: &mut Graph) -> Conditioning {
        let mut c = self.clone();
        c.geometry.values = to.constant(from.value(self.geometry.values).clone());
        c.motion.values = to.constant(from.value(self.motion.values).clone());
        c
    }
}

/// Points and field outputs for a batch of rays at the target time.
#[derive(Clone, Debug)]
pub struct RayEval {
    pub rays: usize,
    pub samples: usize,
    /// `[R·S, 3]` sample positions.
    pub points: Var,
    /// `[R·S, 1]` ray parameters of the samples.
    pub positions: Var,
    pub dir_enc: Var,
    pub time: f64,
    pub stat: StaticSample,
    pub dynm: DynamicSample,
    /// `[R, S]` views of the densities and blend weights.
    pub sigma_static: Var,
    pub sigma_dynamic: Var,
    pub blend: Var,
}

pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub geometry: VolumeEncoder,
    pub motion: VolumeEncoder,
    pub static_field: StaticField,
    pub dynamic_field: DynamicField,
}

/// Neighbors of `t`; at sequence ends where clipping leaves fewer than two, the nearest
/// remaining frames are added.
pub fn conditioning_neighbors(t: usize, n: usize, radius: usize) -> Vec<usize> {
    let mut out = select_neighbors(t, n, radius);
    let mut reach = radius + 1;
    while out.len() < 2 && reach < n {
        for c in [t.checked_sub(reach), Some(t + reach)].into_iter().flatten() {
            if c < n && out.len() < 2 {
                out.push(c);
            }
        }
        reach += 1;
    }
    out.sort_unstable();
    out
}

impl Model {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let k = config.keyframes;
        let m = config.neighbor_slots();
        let f = config.volume_channels;
        let norm = config.norm();
        let geometry = VolumeEncoder::new(&mut store, VolumeKind::Geometry, k, f, norm, &mut rng);
        let motion = VolumeEncoder::new(&mut store, VolumeKind::Motion, m, f, norm, &mut rng);
        let static_field = StaticField::new(&mut store, f + 3 * k, config.field(), &mut rng);
        let dynamic_field = DynamicField::new(&mut store, f + 3 * m, config.field(), &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            geometry,
            motion,
            static_field,
            dynamic_field,
        })
    }

    /// Builds the geometry volume from the scene's keyframes and the motion volume from the
    /// neighbors of frame `t`, both in the frustum of `reference`.
    pub fn condition(&self, g: &mut Graph, scene: &SceneBundle, t: usize, reference: &Camera) -> Result<Conditioning> {
        let n = scene.len();
        if t >= n {
            return Err(Error::invalid(format!("time {t} outside a {n}-frame scene")));
        }
        let keyframes = select_keyframes(n, self.config.keyframes)?;
        let neighbors = conditioning_neighbors(t, n, self.config.neighbor_radius);
        if neighbors.len() < 2 {
            return Err(Error::invalid(format!("frame {t} has fewer than two neighbors")));
        }
        let planes = DepthPlaneSet::for_camera(reference, self.config.depth_planes, self.config.spacing()?)?;
        let grid = VolumeGrid::new(reference, planes)?;
        let views = |g: &mut Graph, idx: &[usize]| -> Vec<View> {
            idx.iter()
                .map(|&i| View {
                    image: g.constant(scene.frames[i].clone()),
                    camera: scene.cameras[i].clone(),
                })
                .collect()
        };
        let f = self.config.volume_channels;
        let geometry = if self.config.use_geometry_volume {
            let v = views(g, &keyframes);
            self.geometry.build(g, &self.store, &v, &grid)?
        } else {
            EncodingVolume::zeros(g, VolumeKind::Geometry, grid.clone(), f)
        };
        let motion = if self.config.use_motion_volume {
            let v = views(g, &neighbors);
            self.motion.build(g, &self.store, &v, &grid)?
        } else {
            EncodingVolume::zeros(g, VolumeKind::Motion, grid, f)
        };
        let sources = |idx: &[usize]| -> Vec<ColorSource> {
            idx.iter()
                .map(|&i| ColorSource {
                    image: Arc::new(scene.frames[i].clone()),
                    camera: scene.cameras[i].clone(),
                })
                .collect()
        };
        Ok(Conditioning {
            geometry,
            motion,
            keyframe_sources: sources(&keyframes),
            neighbor_sources: sources(&neighbors),
            keyframes,
            neighbors,
            frames: n,
        })
    }

    fn static_conditioning(&self, g: &mut Graph, cond: &Conditioning, points: Var) -> Var {
        let (feat, _) = sample_volume(g, &cond.geometry, points);
        let (colors, _) = gather_colors(g, &cond.keyframe_sources, self.config.keyframes, points);
        g.concat_cols(&[feat, colors])
    }

    fn dynamic_conditioning(&self, g: &mut Graph, cond: &Conditioning, points: Var) -> Var {
        let (feat, _) = sample_volume(g, &cond.motion, points);
        let (colors, _) = gather_colors(g, &cond.neighbor_sources, self.config.neighbor_slots(), points);
        g.concat_cols(&[feat, colors])
    }

    /// Dynamic field at arbitrary points and normalized time, conditioned on `cond`.
    pub fn eval_dynamic_at(
        &self,
        g: &mut Graph,
        cond: &Conditioning,
        points: Var,
        dir_enc: Var,
        time: f64,
    ) -> DynamicSample {
        let p = g.shape(points)[0];
        let c = self.dynamic_conditioning(g, cond, points);
        let tv = g.constant(Tensor::full(vec![p, 1], time));
        self.dynamic_field.eval(g, &self.store, points, dir_enc, tv, c)
    }

    /// Samples every ray and evaluates both fields at the samples.
    pub fn evaluate(
        &self,
        g: &mut Graph,
        cond: &Conditioning,
        rays: &[Ray],
        jitter: bool,
        rng: &mut impl Rng,
    ) -> Result<RayEval> {
        let r = rays.len();
        if r == 0 {
            return Err(Error::invalid("empty ray batch"));
        }
        let s = self.config.samples_per_ray;
        let mut pts = Vec::with_capacity(r * s * 3);
        let mut pos = Vec::with_capacity(r * s);
        let mut dirs = Vec::with_capacity(r * 3);
        for ray in rays {
            let rs = sample_ray(ray, s, jitter, rng);
            for (p, x) in rs.points.iter().zip(&rs.positions) {
                pts.extend_from_slice(p.as_slice());
                pos.push(*x);
            }
            dirs.extend_from_slice(ray.direction.as_slice());
        }
        let time = rays[0].time;
        let points = g.constant(Tensor::new(vec![r * s, 3], pts));
        let positions = g.constant(Tensor::new(vec![r * s, 1], pos));
        let dirs = g.constant(Tensor::new(vec![r, 3], dirs));
        let dir_enc = encode_directions(g, self.static_field.config(), dirs, s);

        let sc = self.static_conditioning(g, cond, points);
        let stat = self.static_field.eval(g, &self.store, points, dir_enc, sc);
        let dynm = self.eval_dynamic_at(g, cond, points, dir_enc, time);
        let sigma_static = g.reshape(stat.sigma, vec![r, s]);
        let sigma_dynamic = g.reshape(dynm.sigma, vec![r, s]);
        let blend = g.reshape(stat.blend, vec![r, s]);
        Ok(RayEval {
            rays: r,
            samples: s,
            points,
            positions,
            dir_enc,
            time,
            stat,
            dynm,
            sigma_static,
            sigma_dynamic,
            blend,
        })
    }

    pub fn composite(&self, g: &mut Graph, eval: &RayEval, compositor: Compositor) -> BlendOutput {
        compositor.blend(
            g,
            eval.sigma_static,
            eval.stat.color,
            eval.sigma_dynamic,
            eval.dynm.color,
            eval.blend,
        )
    }

    /// Renders every pixel of `camera` at frame time `t` of `scene` in evaluation mode.
    pub fn render_view(&self, scene: &SceneBundle, t: usize, camera: &Camera, chunk: usize) -> Result<RenderedView> {
        let mut g0 = Graph::inference();
        let cond = self.condition(&mut g0, scene, t, camera)?;
        let (h, w) = (camera.height, camera.width);
        let pixels: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect();
        let time = normalized_time(t as f64, scene.len());
        let compositor = self.config.compositor_kind()?;
        let mut out = [vec![0.0; 3 * h * w], vec![0.0; 3 * h * w], vec![0.0; 3 * h * w]];
        let mut alpha = vec![0.0; h * w];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for block in pixels.chunks(chunk.max(1)) {
            let mut g = Graph::inference();
            let c = cond.transfer(&g0, &mut g);
            let rays = generate_rays(camera, block, time)?;
            let eval = self.evaluate(&mut g, &c, &rays, false, &mut rng)?;
            let o = self.composite(&mut g, &eval, compositor);
            for (img, v) in out.iter_mut().zip([o.blend, o.static_only, o.dynamic_only]) {
                let d = g.value(v).data();
                for (i, &(y, x)) in block.iter().enumerate() {
                    for ch in 0..3 {
                        img[ch * h * w + y * w + x] = d[3 * i + ch];
                    }
                }
            }
            let a = g.value(o.alpha).data();
            for (i, &(y, x)) in block.iter().enumerate() {
                alpha[y * w + x] = a[i];
            }
        }
        let [blend, static_only, dynamic_only] = out.map(|d| Tensor::new(vec![3, h, w], d));
        Ok(RenderedView {
            blend,
            static_only,
            dynamic_only,
            alpha: Tensor::new(vec![h, w], alpha),
        })
    }
}

#[derive(Clone, Debug)]
pub struct RenderedView {
    pub blend: Tensor,
    pub static_only: Tensor,
    pub dynamic_only: Tensor,
    pub alpha: Tensor,
}

impl RenderedView {
    pub fn image(&self, mode: RenderMode) -> &Tensor {
        match mode {
            RenderMode::Blend => &self.blend,
            RenderMode::StaticOnly => &self.static_only,
            RenderMode::DynamicOnly => &self.dynamic_only,
        }
    }
}
