//! Learned feature extraction, plane-sweep cost volumes and their 3D regularization.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, SparseMap, Var};
use crate::camera::{self, Camera, DepthPlaneSet};
use crate::error::{Error, Result};
use crate::params::{he_uniform, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Feature maps are computed at this fraction of the image resolution.
pub const FEATURE_STRIDE: usize = 4;
pub const FEATURE_CHANNELS: usize = 32;

/// Normalization hyperparameters shared by every conv block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum ConvKind {
    Plane {
        stride: usize,
        pad: usize,
        dilation: usize,
    },
    Volume {
        stride: usize,
    },
    /// Transposed volume conv, `k = 3`, `pad = 1`.
    VolumeUp {
        stride: usize,
    },
}

/// Convolution (no bias), batch normalization and an optional ReLU.
#[derive(Clone, Debug)]
struct ConvBlock {
    kind: ConvKind,
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    relu: bool,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        group: ParamGroup,
        name: &str,
        kind: ConvKind,
        cin: usize,
        cout: usize,
        kernel: usize,
        relu: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let (shape, fan_in) = match kind {
            ConvKind::Plane { .. } => (vec![cout, cin, kernel, kernel], cin * kernel * kernel),
            ConvKind::Volume { .. } => (vec![cout, cin, kernel, kernel, kernel], cin * kernel.pow(3)),
            ConvKind::VolumeUp { .. } => (vec![cin, cout, kernel, kernel, kernel], cin * kernel.pow(3)),
        };
        let prefix = format!("{}.{name}", group.name());
        Self {
            kind,
            weight: store.add(format!("{prefix}.weight"), group, he_uniform(shape, fan_in, rng)),
            gamma: store.add(format!("{prefix}.bn.gamma"), group, Tensor::ones(vec![cout])),
            beta: store.add(format!("{prefix}.bn.beta"), group, Tensor::zeros(vec![cout])),
            running_mean: store.add_buffer(format!("{prefix}.bn.running_mean"), group, Tensor::zeros(vec![cout])),
            running_var: store.add_buffer(format!("{prefix}.bn.running_var"), group, Tensor::ones(vec![cout])),
            relu,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, norm: NormConfig, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = match self.kind {
            ConvKind::Plane { stride, pad, dilation } => g.conv2d(x, w, None, stride, pad, dilation),
            ConvKind::Volume { stride } => g.conv3d(x, w, None, [stride; 3], [1; 3], [1; 3]),
            ConvKind::VolumeUp { stride } => g.conv_transpose3d(x, w, stride, 1, stride - 1),
        };
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let (y, stats) = g.batch_norm(
            y,
            gamma,
            beta,
            store.value(self.running_mean),
            store.value(self.running_var),
            norm.eps,
            norm.momentum,
        );
        if let Some((mean, var)) = stats {
            g.queue_buffer_update(self.running_mean, mean);
            g.queue_buffer_update(self.running_var, var);
        }
        if self.relu {
            g.relu(y)
        } else {
            y
        }
    }
}

/// Eight-layer 2D CNN mapping `3 × H × W` images to `32 × ⌈H/4⌉ × ⌈W/4⌉` features.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    blocks: Vec<ConvBlock>,
    pub norm: NormConfig,
}

impl FeatureExtractor {
    pub fn new(store: &mut ParamStore, group: ParamGroup, norm: NormConfig, rng: &mut impl Rng) -> Self {
        // (in, out, kernel, stride, dilation)
        const LAYERS: [(usize, usize, usize, usize, usize); 8] = [
            (3, 8, 3, 1, 1),
            (8, 8, 3, 1, 1),
            (8, 16, 5, 2, 2),
            (16, 16, 3, 1, 1),
            (16, 16, 3, 1, 1),
            (16, 32, 5, 2, 2),
            (32, 32, 3, 1, 1),
            (32, 32, 3, 1, 1),
        ];
        let blocks = LAYERS
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, k, stride, dilation))| {
                let pad = dilation * (k - 1) / 2;
                let kind = ConvKind::Plane { stride, pad, dilation };
                ConvBlock::new(store, group, &format!("conv{i}"), kind, cin, cout, k, true, rng)
            })
            .collect();
        Self { blocks, norm }
    }

    /// `images: [N, 3, H, W]` to `[N, 32, ⌈H/4⌉, ⌈W/4⌉]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: Var) -> Result<Var> {
        let s = g.shape(images);
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape(format!(
                "feature extractor expects [N, 3, H, W], got {s:?}"
            )));
        }
        Ok(self
            .blocks
            .iter()
            .fold(images, |x, b| b.forward(g, store, self.norm, x)))
    }
}

/// 3D U-Net over a cost volume, followed by a `1×1×1` projection to the output channels.
#[derive(Clone, Debug)]
pub struct CostRegularizer {
    down: Vec<ConvBlock>,
    up: Vec<ConvBlock>,
    proj_weight: ParamId,
    proj_bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub norm: NormConfig,
}

impl CostRegularizer {
    pub fn new(
        store: &mut ParamStore,
        group: ParamGroup,
        in_channels: usize,
        out_channels: usize,
        norm: NormConfig,
        rng: &mut impl Rng,
    ) -> Self {
        const DOWN: [(usize, usize, usize); 7] = [
            (0, 8, 1),
            (8, 16, 2),
            (16, 16, 1),
            (16, 32, 2),
            (32, 32, 1),
            (32, 64, 2),
            (64, 64, 1),
        ];
        const UP: [(usize, usize, usize); 4] = [(64, 32, 2), (32, 16, 2), (16, 8, 2), (8, 32, 1)];
        let down = DOWN
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| {
                let cin = if i == 0 { in_channels } else { cin };
                let kind = ConvKind::Volume { stride };
                ConvBlock::new(store, group, &format!("down{i}"), kind, cin, cout, 3, true, rng)
            })
            .collect();
        let up = UP
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| {
                let kind = ConvKind::VolumeUp { stride };
                ConvBlock::new(store, group, &format!("up{i}"), kind, cin, cout, 3, false, rng)
            })
            .collect();
        let prefix = group.name();
        let proj_weight = store.add(
            format!("{prefix}.proj.weight"),
            group,
            he_uniform(vec![out_channels, 32, 1, 1, 1], 32, rng),
        );
        let proj_bias = store.add(format!("{prefix}.proj.bias"), group, Tensor::zeros(vec![out_channels]));
        Self {
            down,
            up,
            proj_weight,
            proj_bias,
            in_channels,
            out_channels,
            norm,
        }
    }

    pub fn projection_weight(&self) -> ParamId {
        self.proj_weight
    }

    pub fn projection_bias(&self) -> ParamId {
        self.proj_bias
    }

    /// `cost: [1, C_in, D, h, w]` to `[1, C_out, D, h, w]`; every spatial extent must be a
    /// multiple of 8.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, cost: Var) -> Result<Var> {
        let s = g.shape(cost).to_vec();
        if s.len() != 5 || s[0] != 1 || s[1] != self.in_channels {
            return Err(Error::shape(format!(
                "regularizer expects [1, {}, D, h, w], got {s:?}",
                self.in_channels
            )));
        }
        if s[2..].iter().any(|&n| n == 0 || n % 8 != 0) {
            return Err(Error::shape(format!(
                "regularizer extents must be multiples of 8, got {:?}",
                &s[2..]
            )));
        }
        let coarsest: usize = s[2..].iter().map(|n| n / 8).product();
        if g.training() && coarsest < 2 {
            return Err(Error::shape(format!(
                "volume {:?} leaves one value per channel at the coarsest level; use more depth planes or larger images",
                &s[2..]
            )));
        }
        let norm = self.norm;
        let mut skips = Vec::with_capacity(7);
        let mut x = cost;
        for b in &self.down {
            x = b.forward(g, store, norm, x);
            skips.push(x);
        }
        for (i, skip) in [4usize, 2, 0].into_iter().enumerate() {
            let y = self.up[i].forward(g, store, norm, x);
            x = g.add(y, skips[skip]);
        }
        x = self.up[3].forward(g, store, norm, x);
        let w = g.param(store, self.proj_weight);
        let b = g.param(store, self.proj_bias);
        Ok(g.conv3d(x, w, Some(b), [1; 3], [0; 3], [1; 3]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeKind {
    Geometry,
    Motion,
}

/// A sweep of one view: `[C, D, h, w]` values with a `D·h·w` validity mask.
#[derive(Clone, Debug)]
pub struct SweepVolume {
    pub values: Var,
    pub mask: Arc<Vec<bool>>,
}

/// Sampling map taking a `src_hw` feature grid of `src` onto the `out_hw` grid of every depth
/// plane of `reference`, stacked plane-major. Both cameras are at feature resolution.
pub fn sweep_map(
    src: &Camera,
    reference: &Camera,
    planes: &DepthPlaneSet,
    src_hw: (usize, usize),
    out_hw: (usize, usize),
) -> Result<(Arc<SparseMap>, Arc<Vec<bool>>)> {
    let mut map = SparseMap::new(src_hw.0 * src_hw.1);
    let mut mask = Vec::with_capacity(planes.len() * out_hw.0 * out_hw.1);
    for &d in planes.depths() {
        let h = camera::plane_homography(src, reference, d)?;
        let (m, k) = camera::warp_map(&h, src_hw, out_hw)?;
        for q in 0..m.out_len() {
            map.push_row(m.row(q));
        }
        mask.extend(k);
    }
    Ok((Arc::new(map), Arc::new(mask)))
}

/// Warps `features: [C, h, w]` of `src` onto every depth plane of `reference`.
///
/// Depth slice `j` equals `warp_image(features, plane_homography(src, reference, depths[j]))`
/// when `out_hw` is the source grid size.
pub fn build_sweep_volume(
    g: &mut Graph,
    features: Var,
    src: &Camera,
    reference: &Camera,
    planes: &DepthPlaneSet,
    out_hw: (usize, usize),
) -> Result<SweepVolume> {
    let s = g.shape(features).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("sweep expects [C, h, w], got {s:?}")));
    }
    let (map, mask) = sweep_map(src, reference, planes, (s[1], s[2]), out_hw)?;
    let values = g.resample(features, map, &[planes.len(), out_hw.0, out_hw.1]);
    Ok(SweepVolume { values, mask })
}

/// Per-voxel, per-channel population variance over the views valid at that voxel.
///
/// Computed as `Σ_{i<j} (x_i − x_j)² / n²` over values sorted per voxel, which makes the result
/// exactly zero for identical views and bit-identical under any permutation of the views.
/// Voxels seen by fewer than two views are zero; the returned flags mark voxels seen by none.
pub fn aggregate_variance(g: &mut Graph, sweeps: &[SweepVolume]) -> Result<(Var, Vec<bool>)> {
    if sweeps.len() < 2 {
        return Err(Error::invalid("variance aggregation needs at least two views"));
    }
    let shape = g.shape(sweeps[0].values).to_vec();
    let vox = sweeps[0].mask.len();
    for s in sweeps {
        if g.shape(s.values) != shape.as_slice() || s.mask.len() != vox {
            return Err(Error::shape("sweep volumes differ in shape"));
        }
    }
    let channels = shape[0];
    if channels * vox != g.value(sweeps[0].values).len() {
        return Err(Error::shape("sweep mask does not match volume size"));
    }
    let masks: Vec<Arc<Vec<bool>>> = sweeps.iter().map(|s| s.mask.clone()).collect();
    let unseen: Vec<bool> = (0..vox).map(|v| masks.iter().all(|m| !m[v])).collect();
    let inputs: Vec<Var> = sweeps.iter().map(|s| s.values).collect();
    let values: Vec<&[f64]> = inputs.iter().map(|&v| g.value(v).data()).collect();

    let mut out = vec![0.0; channels * vox];
    let mut buf: Vec<f64> = Vec::with_capacity(sweeps.len());
    for c in 0..channels {
        for v in 0..vox {
            let k = c * vox + v;
            buf.clear();
            buf.extend((0..values.len()).filter(|&i| masks[i][v]).map(|i| values[i][k]));
            out[k] = pairwise_variance(&mut buf);
        }
    }
    let var = g.op(Tensor::new(shape.clone(), out), &inputs, move |grad, xs, _| {
        let gd = grad.data();
        let mut grads: Vec<Vec<f64>> = xs.iter().map(|x| vec![0.0; x.len()]).collect();
        for c in 0..channels {
            for v in 0..vox {
                let k = c * vox + v;
                let valid: Vec<usize> = (0..xs.len()).filter(|&i| masks[i][v]).collect();
                let n = valid.len() as f64;
                if valid.len() < 2 {
                    continue;
                }
                for &i in &valid {
                    let d: f64 = valid.iter().map(|&j| xs[i].data()[k] - xs[j].data()[k]).sum();
                    grads[i][k] = gd[k] * 2.0 * d / (n * n);
                }
            }
        }
        grads.into_iter().map(|d| Some(Tensor::new(shape.clone(), d))).collect()
    });
    Ok((var, unseen))
}

fn pairwise_variance(vals: &mut [f64]) -> f64 {
    let n = vals.len();
    if n < 2 {
        return 0.0;
    }
    vals.sort_by(f64::total_cmp);
    let mut acc = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = vals[i] - vals[j];
            acc += d * d;
        }
    }
    acc / (n * n) as f64
}

/// Bilinear downsampling map from an `H × W` image to its `⌈H/4⌉ × ⌈W/4⌉` feature grid, reading
/// each feature cell at its continuous center.
pub fn downsample_map(hw: (usize, usize)) -> Arc<SparseMap> {
    let (h, w) = hw;
    let (fh, fw) = (h.div_ceil(FEATURE_STRIDE), w.div_ceil(FEATURE_STRIDE));
    let s = FEATURE_STRIDE as f64;
    let mut map = SparseMap::new(h * w);
    for r in 0..fh {
        for c in 0..fw {
            let x = ((c as f64 + 0.5) * s - 0.5).min((w - 1) as f64);
            let y = ((r as f64 + 0.5) * s - 0.5).min((h - 1) as f64);
            let taps = camera::bilinear_taps(x, y, h, w).expect("feature cell inside image");
            map.push_row(taps.into_iter().filter(|&(_, wt)| wt != 0.0));
        }
    }
    Arc::new(map)
}

/// Feature-space grid for a reference camera, padded up to multiples of 8.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeGrid {
    /// Reference camera at feature resolution.
    pub camera: Camera,
    pub planes: DepthPlaneSet,
    /// Unpadded feature extent.
    pub hw: (usize, usize),
    /// Padded extent used by the regularizer.
    pub padded_hw: (usize, usize),
}

impl VolumeGrid {
    pub fn new(reference: &Camera, planes: DepthPlaneSet) -> Result<Self> {
        if !planes.len().is_multiple_of(8) {
            return Err(Error::invalid(format!(
                "depth plane count must be a multiple of 8, got {}",
                planes.len()
            )));
        }
        let camera = reference.scaled(1.0 / FEATURE_STRIDE as f64);
        let hw = (
            reference.height.div_ceil(FEATURE_STRIDE),
            reference.width.div_ceil(FEATURE_STRIDE),
        );
        let padded_hw = (hw.0.next_multiple_of(8), hw.1.next_multiple_of(8));
        Ok(Self {
            camera,
            planes,
            hw,
            padded_hw,
        })
    }

    pub fn depth(&self) -> usize {
        self.planes.len()
    }
}

/// A regularized `[F, D, h, w]` feature grid aligned with a reference frustum.
#[derive(Clone, Debug)]
pub struct EncodingVolume {
    pub values: Var,
    pub kind: VolumeKind,
    pub grid: VolumeGrid,
}

impl EncodingVolume {
    pub fn channels(&self, g: &Graph) -> usize {
        g.shape(self.values)[0]
    }

    /// An all-zero volume (ablation of the corresponding conditioning).
    pub fn zeros(g: &mut Graph, kind: VolumeKind, grid: VolumeGrid, channels: usize) -> Self {
        let values = g.constant(Tensor::zeros(vec![channels, grid.depth(), grid.hw.0, grid.hw.1]));
        Self { values, kind, grid }
    }
}

/// One conditioning view: an image `[3, H, W]` and its camera.
#[derive(Clone, Debug)]
pub struct View {
    pub image: Var,
    pub camera: Camera,
}

/// Weights of one encoding-volume pipeline.
#[derive(Clone, Debug)]
pub struct VolumeEncoder {
    pub kind: VolumeKind,
    pub extractor: FeatureExtractor,
    pub regularizer: CostRegularizer,
    /// Number of color slots concatenated onto the cost volume.
    pub slots: usize,
}

impl VolumeEncoder {
    pub fn new(
        store: &mut ParamStore,
        kind: VolumeKind,
        slots: usize,
        out_channels: usize,
        norm: NormConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let (eg, rg) = match kind {
            VolumeKind::Geometry => (ParamGroup::GeometryExtractor, ParamGroup::GeometryRegularizer),
            VolumeKind::Motion => (ParamGroup::MotionExtractor, ParamGroup::MotionRegularizer),
        };
        let extractor = FeatureExtractor::new(store, eg, norm, rng);
        let regularizer = CostRegularizer::new(store, rg, FEATURE_CHANNELS + 3 * slots, out_channels, norm, rng);
        Self {
            kind,
            extractor,
            regularizer,
            slots,
        }
    }

    /// Cost volume `[32 + 3·slots, D, h₈, w₈]` over the padded grid: feature variance followed by
    /// the swept colors of each view, zero for empty slots.
    pub fn cost_volume(&self, g: &mut Graph, store: &ParamStore, views: &[View], grid: &VolumeGrid) -> Result<Var> {
        if views.len() < 2 {
            return Err(Error::invalid(format!(
                "an encoding volume needs at least two views, got {}",
                views.len()
            )));
        }
        if views.len() > self.slots {
            return Err(Error::invalid(format!(
                "{} views exceed the {} conditioning slots",
                views.len(),
                self.slots
            )));
        }
        let (h, w) = (g.shape(views[0].image)[1], g.shape(views[0].image)[2]);
        for v in views {
            let s = g.shape(v.image);
            if s != [3, h, w] {
                return Err(Error::shape(format!(
                    "view images differ in shape: {s:?} vs [3, {h}, {w}]"
                )));
            }
            if v.camera.width != w || v.camera.height != h {
                return Err(Error::shape("view camera does not match its image"));
            }
        }
        let images: Vec<Var> = views.iter().map(|v| g.reshape(v.image, vec![1, 3, h, w])).collect();
        let batch = g.concat_leading(&images);
        let feats = self.extractor.forward(g, store, batch)?;
        let (fh, fw) = (g.shape(feats)[2], g.shape(feats)[3]);
        let down = downsample_map((h, w));
        let (d, ph, pw) = (grid.depth(), grid.padded_hw.0, grid.padded_hw.1);

        let mut sweeps = Vec::with_capacity(views.len());
        let mut colors = Vec::with_capacity(self.slots);
        for (i, v) in views.iter().enumerate() {
            let src = v.camera.scaled(1.0 / FEATURE_STRIDE as f64);
            let (map, mask) = sweep_map(&src, &grid.camera, &grid.planes, (fh, fw), grid.padded_hw)?;
            let f = g.index_leading(feats, i);
            let values = g.resample(f, map.clone(), &[d, ph, pw]);
            sweeps.push(SweepVolume { values, mask });
            let small = g.resample(v.image, down.clone(), &[fh, fw]);
            colors.push(g.resample(small, map, &[d, ph, pw]));
        }
        let (var, _) = aggregate_variance(g, &sweeps)?;
        let mut parts = vec![var];
        parts.extend(colors);
        if self.slots > views.len() {
            let pad = g.constant(Tensor::zeros(vec![3 * (self.slots - views.len()), d, ph, pw]));
            parts.push(pad);
        }
        Ok(g.concat_leading(&parts))
    }

    /// Extract, sweep, aggregate and regularize, cropping the result back to the unpadded grid.
    pub fn build(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        views: &[View],
        grid: &VolumeGrid,
    ) -> Result<EncodingVolume> {
        let cost = self.cost_volume(g, store, views, grid)?;
        let s = g.shape(cost).to_vec();
        let cost = g.reshape(cost, vec![1, s[0], s[1], s[2], s[3]]);
        let reg = self.regularizer.forward(g, store, cost)?;
        let f = self.regularizer.out_channels;
        let reg = g.reshape(reg, vec![f, s[1], s[2], s[3]]);
        let values = crop(g, reg, grid.hw);
        Ok(EncodingVolume {
            values,
            kind: self.kind,
            grid: grid.clone(),
        })
    }
}

/// Crops `[C, D, H, W]` to `[C, D, h, w]` from the origin.
fn crop(g: &mut Graph, x: Var, hw: (usize, usize)) -> Var {
    let s = g.shape(x).to_vec();
    let (d, ph, pw) = (s[1], s[2], s[3]);
    if (ph, pw) == hw {
        return x;
    }
    let mut map = SparseMap::new(d * ph * pw);
    for z in 0..d {
        for r in 0..hw.0 {
            for c in 0..hw.1 {
                map.push_row([((z * ph + r) * pw + c, 1.0)]);
            }
        }
    }
    g.resample(x, Arc::new(map), &[d, hw.0, hw.1])
}

/// Linear interpolation setup along one axis of extent `n`: lower index, fraction, whether the
/// coordinate was clamped, and whether the coordinate derivative passes through.
fn axis_lerp(coord: f64, n: usize) -> (usize, usize, f64, bool, bool) {
    const EDGE: f64 = 1e-9;
    if n == 1 {
        return (0, 0, 0.0, coord.abs() > EDGE, false);
    }
    let hi = (n - 1) as f64;
    let clamped = coord < -EDGE || coord > hi + EDGE;
    let c = coord.clamp(0.0, hi);
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1, c - i0 as f64, clamped, !clamped)
}

/// Trilinear lookup of points `[P, 3]` in `vol`, differentiable in both the volume values and
/// the point coordinates. Points outside the frustum read the edge-clamped value and are flagged;
/// points at or behind the reference camera plane read zeros.
pub fn sample_volume(g: &mut Graph, vol: &EncodingVolume, points: Var) -> (Var, Vec<bool>) {
    let vs = g.shape(vol.values).to_vec();
    let (f, d, h, w) = (vs[0], vs[1], vs[2], vs[3]);
    let (p, _) = g.value(points).dims2();
    let cam = vol.grid.camera.clone();
    let planes = vol.grid.planes.clone();
    let pts = g.value(points).data().to_vec();
    let vox = d * h * w;

    struct Tap {
        corners: [(usize, f64); 8],
        /// d(value weights)/d(coords) folded with d(coords)/dX, per corner: [8][3].
        dweights: [[f64; 3]; 8],
    }
    let mut taps: Vec<Option<Tap>> = Vec::with_capacity(p);
    let mut oob = vec![false; p];
    for i in 0..p {
        let x = nalgebra::Vector3::new(pts[3 * i], pts[3 * i + 1], pts[3 * i + 2]);
        let Some((uv, juv)) = cam.project_with_jacobian(&x) else {
            oob[i] = true;
            taps.push(None);
            continue;
        };
        let z = cam.depth_of(&x);
        let (iz, diz) = planes.index_of(z);
        let coords = [iz, uv[1] - 0.5, uv[0] - 0.5];
        let ext = [d, h, w];
        // Rows: d coord / dX for (depth, row, col).
        let rz = cam.r.row(2);
        let jac = [
            [diz * rz[0], diz * rz[1], diz * rz[2]],
            [juv[(1, 0)], juv[(1, 1)], juv[(1, 2)]],
            [juv[(0, 0)], juv[(0, 1)], juv[(0, 2)]],
        ];
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut fr = [0.0; 3];
        let mut pass = [false; 3];
        for a in 0..3 {
            let (i0, i1, t, clamped, through) = axis_lerp(coords[a], ext[a]);
            lo[a] = i0;
            hi[a] = i1;
            fr[a] = t;
            pass[a] = through;
            oob[i] |= clamped;
        }
        let mut corners = [(0usize, 0.0); 8];
        let mut dweights = [[0.0; 3]; 8];
        for (k, corner) in corners.iter_mut().enumerate() {
            let pick = [(k >> 2) & 1, (k >> 1) & 1, k & 1];
            let idx = [0, 1, 2].map(|a| if pick[a] == 1 { hi[a] } else { lo[a] });
            let wts = [0, 1, 2].map(|a| if pick[a] == 1 { fr[a] } else { 1.0 - fr[a] });
            *corner = ((idx[0] * h + idx[1]) * w + idx[2], wts[0] * wts[1] * wts[2]);
            for a in 0..3 {
                if !pass[a] {
                    continue;
                }
                let sign = if pick[a] == 1 { 1.0 } else { -1.0 };
                let others: f64 = (0..3).filter(|&b| b != a).map(|b| wts[b]).product();
                let dw = sign * others;
                for (c, slot) in dweights[k].iter_mut().enumerate() {
                    *slot += dw * jac[a][c];
                }
            }
        }
        taps.push(Some(Tap { corners, dweights }));
    }

    let vv = g.value(vol.values).data();
    let mut out = vec![0.0; p * f];
    for (i, tap) in taps.iter().enumerate() {
        let Some(tap) = tap else { continue };
        for ch in 0..f {
            out[i * f + ch] = tap.corners.iter().map(|&(j, wt)| wt * vv[ch * vox + j]).sum();
        }
    }
    let taps = Arc::new(taps);
    let y = g.op(
        Tensor::new(vec![p, f], out),
        &[vol.values, points],
        move |grad, xs, _| {
            let gd = grad.data();
            let vv = xs[0].data();
            let mut gv = vec![0.0; vv.len()];
            let mut gp = vec![0.0; p * 3];
            for (i, tap) in taps.iter().enumerate() {
                let Some(tap) = tap else { continue };
                for ch in 0..f {
                    let gval = gd[i * f + ch];
                    if gval == 0.0 {
                        continue;
                    }
                    for (k, &(j, wt)) in tap.corners.iter().enumerate() {
                        let v = vv[ch * vox + j];
                        gv[ch * vox + j] += wt * gval;
                        for c in 0..3 {
                            gp[3 * i + c] += gval * v * tap.dweights[k][c];
                        }
                    }
                }
            }
            vec![
                Some(Tensor::new(xs[0].shape().to_vec(), gv)),
                Some(Tensor::new(vec![p, 3], gp)),
            ]
        },
    );
    (y, oob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::GradCheck;
    use crate::camera::PlaneSpacing;
    use nalgebra::{Matrix3, Vector3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn camera(w: usize, h: usize) -> Camera {
        let k = Matrix3::new(20.0, 0.0, w as f64 / 2.0, 0.0, 20.0, h as f64 / 2.0, 0.0, 0.0, 1.0);
        Camera::new(k, Matrix3::identity(), Vector3::zeros(), w, h, 1.0, 5.0).unwrap()
    }

    #[test]
    fn extractor_quarters_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let ex = FeatureExtractor::new(
            &mut store,
            ParamGroup::GeometryExtractor,
            NormConfig::default(),
            &mut rng,
        );
        let mut g = Graph::inference();
        let img = g.constant(Tensor::from_fn(vec![1, 3, 64, 48], |i| (i as f64 * 0.01).sin()));
        let out = ex.forward(&mut g, &store, img).unwrap();
        assert_eq!(g.shape(out), &[1, 32, 16, 12]);
    }

    #[test]
    fn regularizer_preserves_extent_and_rejects_odd_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let reg = CostRegularizer::new(
            &mut store,
            ParamGroup::GeometryRegularizer,
            5,
            8,
            NormConfig::default(),
            &mut rng,
        );
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(vec![1, 5, 16, 16, 16], |i| {
            ((i * 7919) % 13) as f64 / 13.0
        }));
        let y = reg.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 16, 16, 16]);
        let bad = g.constant(Tensor::zeros(vec![1, 5, 8, 12, 8]));
        assert!(reg.forward(&mut g, &store, bad).is_err());
    }

    #[test]
    fn zero_projection_gives_zero_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let reg = CostRegularizer::new(
            &mut store,
            ParamGroup::MotionRegularizer,
            4,
            8,
            NormConfig::default(),
            &mut rng,
        );
        store.set_value(reg.projection_weight(), Tensor::zeros(vec![8, 32, 1, 1, 1]));
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(vec![1, 4, 8, 8, 16], |i| (i as f64).cos()));
        let y = reg.forward(&mut g, &store, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let degenerate = g.constant(Tensor::zeros(vec![1, 4, 8, 8, 8]));
        assert!(reg.forward(&mut g, &store, degenerate).is_err());
    }

    #[test]
    fn two_view_variance_is_quarter_squared_difference() {
        let mut g = Graph::new();
        let a = Tensor::from_fn(vec![2, 1, 2, 2], |i| i as f64 * 0.3);
        let b = Tensor::from_fn(vec![2, 1, 2, 2], |i| 1.0 - i as f64 * 0.1);
        let mask = Arc::new(vec![true; 4]);
        let sa = SweepVolume {
            values: g.constant(a.clone()),
            mask: mask.clone(),
        };
        let sb = SweepVolume {
            values: g.constant(b.clone()),
            mask,
        };
        let (v, _) = aggregate_variance(&mut g, &[sa, sb]).unwrap();
        for ((x, y), z) in a.data().iter().zip(b.data()).zip(g.value(v).data()) {
            assert_eq!(*z, (x - y) * (x - y) / 4.0);
        }
    }

    #[test]
    fn variance_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs: Vec<Tensor> = (0..3)
            .map(|_| Tensor::from_fn(vec![2, 2, 2, 2], |_| rng.random_range(-1.0..1.0)))
            .collect();
        let masks: Vec<Arc<Vec<bool>>> = (0..3)
            .map(|i| Arc::new((0..8).map(|v| (v + i) % 4 != 0).collect()))
            .collect();
        let report = GradCheck::default().run(&inputs, None, |g, vars| {
            let sweeps: Vec<SweepVolume> = vars
                .iter()
                .zip(&masks)
                .map(|(&values, m)| SweepVolume {
                    values,
                    mask: m.clone(),
                })
                .collect();
            let (v, _) = aggregate_variance(g, &sweeps).unwrap();
            let s = g.square(v);
            g.sum(s)
        });
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn sweep_of_reference_view_repeats_features() {
        let cam = camera(8, 8);
        let planes = DepthPlaneSet::new(1.0, 5.0, 4, PlaneSpacing::UniformDisparity).unwrap();
        let mut g = Graph::new();
        let f = Tensor::from_fn(vec![3, 8, 8], |i| (i as f64 * 0.37).sin());
        let fv = g.constant(f.clone());
        let sweep = build_sweep_volume(&mut g, fv, &cam, &cam, &planes, (8, 8)).unwrap();
        let v = g.value(sweep.values).data();
        for c in 0..3 {
            for j in 0..4 {
                for q in 0..64 {
                    assert_eq!(v[(c * 4 + j) * 64 + q], f.data()[c * 64 + q]);
                }
            }
        }
        assert!(sweep.mask.iter().all(|&m| m));
    }

    fn test_volume(g: &mut Graph, values: Tensor) -> EncodingVolume {
        let cam = camera(32, 32);
        let planes = DepthPlaneSet::new(1.0, 5.0, 8, PlaneSpacing::UniformDepth).unwrap();
        let grid = VolumeGrid::new(&cam, planes).unwrap();
        EncodingVolume {
            values: g.variable(values),
            kind: VolumeKind::Geometry,
            grid,
        }
    }

    /// World point at the center of voxel `(depth index, row, col)` for the test grid.
    fn voxel_center(vol: &EncodingVolume, z: usize, r: usize, c: usize) -> Vector3<f64> {
        let depth = vol.grid.planes.depths()[z];
        let cam = &vol.grid.camera;
        let k_inv = cam.k.try_inverse().unwrap();
        let ray = k_inv * Vector3::new(c as f64 + 0.5, r as f64 + 0.5, 1.0);
        ray * (depth / ray[2])
    }

    #[test]
    fn voxel_centers_and_midpoints_sample_exactly() {
        let mut g = Graph::new();
        let vals = Tensor::from_fn(vec![2, 8, 8, 8], |i| i as f64);
        let vol = test_volume(&mut g, vals.clone());
        let x = voxel_center(&vol, 3, 2, 5);
        let pts = g.constant(Tensor::new(vec![1, 3], x.as_slice().to_vec()));
        let (s, oob) = sample_volume(&mut g, &vol, pts);
        assert!(!oob[0]);
        for ch in 0..2 {
            let expect = vals.data()[ch * 512 + (3 * 8 + 2) * 8 + 5];
            assert!((g.value(s).data()[ch] - expect).abs() < 1e-9);
        }
        let mid = (voxel_center(&vol, 3, 2, 5) + voxel_center(&vol, 3, 2, 6)) / 2.0;
        let pts = g.constant(Tensor::new(vec![1, 3], mid.as_slice().to_vec()));
        let (s, _) = sample_volume(&mut g, &vol, pts);
        let expect = (vals.data()[(3 * 8 + 2) * 8 + 5] + vals.data()[(3 * 8 + 2) * 8 + 6]) / 2.0;
        assert!((g.value(s).data()[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn out_of_frustum_points_are_flagged() {
        let mut g = Graph::new();
        let vol = test_volume(&mut g, Tensor::ones(vec![1, 8, 8, 8]));
        let pts = g.constant(Tensor::new(
            vec![3, 3],
            vec![0.0, 0.0, 9.0, 0.0, 0.0, -1.0, 0.1, 0.0, 2.0],
        ));
        let (s, oob) = sample_volume(&mut g, &vol, pts);
        assert_eq!(oob, vec![true, true, false]);
        assert_eq!(g.value(s).data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn volume_sampling_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vals = Tensor::from_fn(vec![2, 8, 8, 8], |_| rng.random_range(-1.0..1.0));
        let pts = Tensor::from_fn(vec![4, 3], |i| match i % 3 {
            2 => 1.7 + 0.61 * (i / 3) as f64,
            _ => 0.13 * ((i * 5) % 7) as f64 - 0.37,
        });
        let mut g0 = Graph::new();
        let grid = test_volume(&mut g0, vals.clone()).grid;
        let report = GradCheck::default().run(&[vals, pts], Some(64), |g, vars| {
            let vol = EncodingVolume {
                values: vars[0],
                kind: VolumeKind::Geometry,
                grid: grid.clone(),
            };
            let (s, _) = sample_volume(g, &vol, vars[1]);
            let s2 = g.square(s);
            g.sum(s2)
        });
        assert!(report.passed(), "{report:?}");
    }
}
