//! Static and dynamic radiance-field decoders, positional encoding and per-point conditioning.

/// Width of the encoding of a `dim`-vector with `bands` frequency bands.
pub fn encoded_dim(dim: usize, bands: usize, include_input: bool) -> usize {
    dim * (2 * bands + usize::from(include_input))
}

/// Appends `[v, sin(2⁰πv), cos(2⁰πv), …, sin(2^{B−1}πv), cos(2^{B−1}πv)]` to `out`.
pub fn encode_into(v: &[f64], bands: usize, include_input: bool, out: &mut Vec<f64>) {
    if include_input {
        out.extend_from_slice(v);
    }
    for b in 0..bands {
        let freq = (1u64 << b) as f64 * std::f64::consts::PI;
        for &x in v {
            let (s, c) = (x * freq).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
}

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::camera::{bilinear_taps, Camera};
use crate::params::{he_uniform, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::volumes::{sample_volume, EncodingVolume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PositionalEncoding {
    pub bands: usize,
    pub include_input: bool,
}

impl PositionalEncoding {
    pub fn new(bands: usize) -> Self {
        Self {
            bands,
            include_input: true,
        }
    }

    pub fn output_dim(&self, in_dim: usize) -> usize {
        encoded_dim(in_dim, self.bands, self.include_input)
    }

    pub fn encode(&self, v: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.output_dim(v.len()));
        encode_into(v, self.bands, self.include_input, &mut out);
        out
    }

    /// Encodes every row of `[n, d]`.
    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        g.positional_encoding(x, self.bands, self.include_input)
    }
}

/// An image `[3, H, W]` and the camera that captured it.
#[derive(Clone, Debug)]
pub struct ColorSource {
    pub image: Arc<Tensor>,
    pub camera: Camera,
}

/// Bilinear image colors at the projections of `points: [P, 3]` into each source, laid out as
/// `[P, 3·slots]`; missing slots and out-of-frustum projections read zero. The second value flags,
/// per source and point, projections that missed the image.
pub fn gather_colors(g: &mut Graph, sources: &[ColorSource], slots: usize, points: Var) -> (Var, Vec<Vec<bool>>) {
    assert!(sources.len() <= slots, "more color sources than slots");
    let (p, _) = g.value(points).dims2();
    let pts = g.value(points).data().to_vec();
    let width = 3 * slots;
    let mut out = vec![0.0; p * width];
    // Per (point, source): the color's derivative wrt the point, [3 colors][3 coords].
    let mut jac = vec![[[0.0; 3]; 3]; p * sources.len()];
    let mut missed = vec![vec![false; p]; sources.len()];
    for (s, src) in sources.iter().enumerate() {
        let img = src.image.data();
        let (h, w) = (src.image.shape()[1], src.image.shape()[2]);
        for i in 0..p {
            let x = nalgebra::Vector3::new(pts[3 * i], pts[3 * i + 1], pts[3 * i + 2]);
            let hit = src
                .camera
                .project_with_jacobian(&x)
                .and_then(|(uv, j)| bilinear_taps(uv[0] - 0.5, uv[1] - 0.5, h, w).map(|t| (uv, j, t)));
            let Some((uv, juv, taps)) = hit else {
                missed[s][i] = true;
                continue;
            };
            for c in 0..3 {
                out[i * width + 3 * s + c] = taps.iter().map(|&(k, wt)| wt * img[c * h * w + k]).sum();
            }
            // Bilinear partials wrt the index coordinates.
            let (x0, y0) = (taps[0].0 % w, taps[0].0 / w);
            let (fx, fy) = (uv[0] - 0.5 - x0 as f64, uv[1] - 0.5 - y0 as f64);
            let (inner_x, inner_y) = (w > 1, h > 1);
            for c in 0..3 {
                let v = |k: usize| img[c * h * w + taps[k].0];
                let dx = if inner_x {
                    (1.0 - fy) * (v(1) - v(0)) + fy * (v(3) - v(2))
                } else {
                    0.0
                };
                let dy = if inner_y {
                    (1.0 - fx) * (v(2) - v(0)) + fx * (v(3) - v(1))
                } else {
                    0.0
                };
                for a in 0..3 {
                    jac[i * sources.len() + s][c][a] = dx * juv[(0, a)] + dy * juv[(1, a)];
                }
            }
        }
    }
    let n_src = sources.len();
    let y = g.op(Tensor::new(vec![p, width], out), &[points], move |grad, _, _| {
        let gd = grad.data();
        let mut gp = vec![0.0; p * 3];
        for i in 0..p {
            for s in 0..n_src {
                let j = &jac[i * n_src + s];
                for c in 0..3 {
                    let gv = gd[i * width + 3 * s + c];
                    for a in 0..3 {
                        gp[3 * i + a] += gv * j[c][a];
                    }
                }
            }
        }
        vec![Some(Tensor::new(vec![p, 3], gp))]
    });
    (y, missed)
}

/// Volume features at `points` followed by each source's sampled color: `[P, F + 3·slots]`.
pub fn gather_conditioning(
    g: &mut Graph,
    points: Var,
    sources: &[ColorSource],
    slots: usize,
    volume: &EncodingVolume,
) -> Var {
    let (feat, _) = sample_volume(g, volume, points);
    let (colors, _) = gather_colors(g, sources, slots, points);
    g.concat_cols(&[feat, colors])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldConfig {
    pub width: usize,
    pub position_bands: usize,
    pub direction_bands: usize,
    /// Scale applied to the linear flow head.
    pub max_flow: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            width: 256,
            position_bands: 10,
            direction_bands: 4,
            max_flow: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

impl Dense {
    fn new(
        store: &mut ParamStore,
        group: ParamGroup,
        name: &str,
        fan_in: usize,
        out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let prefix = format!("{}.{name}", group.name());
        Self {
            weight: store.add(
                format!("{prefix}.weight"),
                group,
                he_uniform(vec![fan_in, out], fan_in, rng),
            ),
            bias: store.add(format!("{prefix}.bias"), group, Tensor::zeros(vec![out])),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Conditioned trunk shared by both fields: `h₀ = LR₀(cond)`, `h₁ = LR₁(PE(x))`,
/// `hᵢ₊₁ = LRᵢ₊₁(hᵢ + h₀)` up to `h₆`, and a view branch `LR₇([PE(d), h₆])` feeding the color head.
#[derive(Clone, Debug)]
struct Trunk {
    cond: Dense,
    position: Dense,
    hidden: Vec<Dense>,
    view: Dense,
    color: Dense,
    config: FieldConfig,
}

struct TrunkOut {
    features: Var,
    color: Var,
}

impl Trunk {
    fn new(
        store: &mut ParamStore,
        group: ParamGroup,
        cond_dim: usize,
        config: FieldConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let w = config.width;
        let pe_x = encoded_dim(3, config.position_bands, true);
        let pe_d = encoded_dim(3, config.direction_bands, true);
        Self {
            cond: Dense::new(store, group, "lr0", cond_dim, w, rng),
            position: Dense::new(store, group, "lr1", pe_x, w, rng),
            hidden: (2..=6)
                .map(|i| Dense::new(store, group, &format!("lr{i}"), w, w, rng))
                .collect(),
            view: Dense::new(store, group, "lr7", pe_d + w, w, rng),
            color: Dense::new(store, group, "color", w, 3, rng),
            config,
        }
    }

    /// Hidden activations `h₁..h₆`, optionally with the conditioning branch zeroed.
    fn hidden(&self, g: &mut Graph, store: &ParamStore, x: Var, cond: Var, zero_cond: bool) -> Vec<Var> {
        let c = self.cond.apply(g, store, cond);
        let mut h0 = g.relu(c);
        if zero_cond {
            h0 = g.scale(h0, 0.0);
        }
        let pe = g.positional_encoding(x, self.config.position_bands, true);
        let h1 = self.position.apply(g, store, pe);
        let mut h = g.relu(h1);
        let mut out = vec![h];
        for layer in &self.hidden {
            let s = g.add(h, h0);
            let y = layer.apply(g, store, s);
            h = g.relu(y);
            out.push(h);
        }
        out
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, dir_enc: Var, cond: Var) -> TrunkOut {
        let features = *self.hidden(g, store, x, cond, false).last().expect("trunk depth");
        let v_in = g.concat_cols(&[dir_enc, features]);
        let v = self.view.apply(g, store, v_in);
        let v = g.relu(v);
        let c = self.color.apply(g, store, v);
        let color = g.sigmoid(c);
        TrunkOut { features, color }
    }
}

/// Encodes unit view directions `[R, 3]` and repeats each row for `samples` points.
pub fn encode_directions(g: &mut Graph, config: &FieldConfig, dirs: Var, samples: usize) -> Var {
    let e = g.positional_encoding(dirs, config.direction_bands, true);
    g.repeat_rows(e, samples)
}

/// Per-point static outputs; `sigma` and `blend` are `[P]`, `color` is `[P, 3]`.
#[derive(Clone, Copy, Debug)]
pub struct StaticSample {
    pub sigma: Var,
    pub color: Var,
    pub blend: Var,
}

/// Per-point dynamic outputs; `flow_fwd`/`flow_bwd` are `[P, 3]`, `occ_fwd`/`occ_bwd` are `[P]`.
#[derive(Clone, Copy, Debug)]
pub struct DynamicSample {
    pub sigma: Var,
    pub color: Var,
    pub flow_fwd: Var,
    pub flow_bwd: Var,
    pub occ_fwd: Var,
    pub occ_bwd: Var,
}

fn column(g: &mut Graph, x: Var, i: usize) -> Var {
    let c = g.slice_cols(x, i, 1);
    let n = g.shape(c)[0];
    g.reshape(c, vec![n])
}

#[derive(Clone, Debug)]
pub struct StaticField {
    trunk: Trunk,
    sigma: Dense,
    blend: Dense,
    pub cond_dim: usize,
}

impl StaticField {
    /// `cond_dim` is the volume channel count plus three per keyframe.
    pub fn new(store: &mut ParamStore, cond_dim: usize, config: FieldConfig, rng: &mut impl Rng) -> Self {
        let group = ParamGroup::StaticField;
        let trunk = Trunk::new(store, group, cond_dim, config, rng);
        Self {
            sigma: Dense::new(store, group, "sigma", config.width, 1, rng),
            blend: Dense::new(store, group, "blend", config.width, 1, rng),
            trunk,
            cond_dim,
        }
    }

    pub fn config(&self) -> &FieldConfig {
        &self.trunk.config
    }

    pub fn eval(&self, g: &mut Graph, store: &ParamStore, x: Var, dir_enc: Var, cond: Var) -> StaticSample {
        let t = self.trunk.forward(g, store, x, dir_enc, cond);
        let s = self.sigma.apply(g, store, t.features);
        let s = g.softplus(s);
        let b = self.blend.apply(g, store, t.features);
        let b = g.sigmoid(b);
        StaticSample {
            sigma: column(g, s, 0),
            color: t.color,
            blend: column(g, b, 0),
        }
    }

    /// Hidden activations `h₁..h₆` for probing conditioning reach.
    pub fn hidden_activations(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        cond: Var,
        zero_cond: bool,
    ) -> Vec<Var> {
        self.trunk.hidden(g, store, x, cond, zero_cond)
    }
}

#[derive(Clone, Debug)]
pub struct DynamicField {
    trunk: Trunk,
    sigma: Dense,
    flow: Dense,
    occ: Dense,
    /// Conditioning width excluding the appended time column.
    pub cond_dim: usize,
}

impl DynamicField {
    /// `cond_dim` is the volume channel count plus three per neighbor slot; the normalized time
    /// is appended as one more conditioning input.
    pub fn new(store: &mut ParamStore, cond_dim: usize, config: FieldConfig, rng: &mut impl Rng) -> Self {
        let group = ParamGroup::DynamicField;
        let trunk = Trunk::new(store, group, cond_dim + 1, config, rng);
        Self {
            sigma: Dense::new(store, group, "sigma", config.width, 1, rng),
            flow: Dense::new(store, group, "flow", config.width, 6, rng),
            occ: Dense::new(store, group, "occ", config.width, 2, rng),
            trunk,
            cond_dim,
        }
    }

    pub fn config(&self) -> &FieldConfig {
        &self.trunk.config
    }

    pub fn flow_head(&self) -> (ParamId, ParamId) {
        (self.flow.weight, self.flow.bias)
    }

    /// `time: [P, 1]` normalized frame times.
    pub fn eval(&self, g: &mut Graph, store: &ParamStore, x: Var, dir_enc: Var, time: Var, cond: Var) -> DynamicSample {
        let cond = g.concat_cols(&[cond, time]);
        let t = self.trunk.forward(g, store, x, dir_enc, cond);
        let s = self.sigma.apply(g, store, t.features);
        let s = g.softplus(s);
        let f = self.flow.apply(g, store, t.features);
        let f = g.scale(f, self.trunk.config.max_flow);
        let w = self.occ.apply(g, store, t.features);
        let w = g.sigmoid(w);
        DynamicSample {
            sigma: column(g, s, 0),
            color: t.color,
            flow_fwd: g.slice_cols(f, 0, 3),
            flow_bwd: g.slice_cols(f, 3, 3),
            occ_fwd: column(g, w, 0),
            occ_bwd: column(g, w, 1),
        }
    }

    pub fn hidden_activations(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        time: Var,
        cond: Var,
        zero_cond: bool,
    ) -> Vec<Var> {
        let cond = g.concat_cols(&[cond, time]);
        self.trunk.hidden(g, store, x, cond, zero_cond)
    }
}
