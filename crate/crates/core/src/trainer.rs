//! Frame selection, the optimization loop, checkpoints and leave-one-out evaluation.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::camera::{generate_rays, pixel_center, Camera};
use crate::config::TrainConfig;
use crate::data_io::SceneBundle;
use crate::error::{Error, Result};
use crate::losses::{self, CyclePair, GeoTarget, LossReport, LossTerm};
use crate::metrics::{self, EvalOptions, MetricReport, MetricRow};
use crate::model::{normalized_time, Model, RenderMode};
use crate::params::{Adam, ParamGroup};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &str = "ZESTCKPT 1";

/// `K` frames spread evenly over `n`: stride `⌊n/K⌋`, zero-based indices `stride·j − 1`.
pub fn select_keyframes(n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("keyframe count must be positive"));
    }
    if n < k {
        return Err(Error::invalid(format!(
            "sequence has {n} frames but {k} keyframes were requested; lower the keyframe count to at most {n}"
        )));
    }
    let stride = n / k;
    Ok((1..=k).map(|j| stride * j - 1).collect())
}

/// Frames within `radius` of `t`, excluding `t`, clipped to the sequence.
pub fn select_neighbors(t: usize, n: usize, radius: usize) -> Vec<usize> {
    let lo = t.saturating_sub(radius);
    let hi = (t + radius).min(n.saturating_sub(1));
    (lo..=hi).filter(|&i| i != t).collect()
}

/// Deterministic per-step generator.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Model plus optimizer state.
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub step: usize,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let model = Model::new(config)?;
        let adam = Adam::new(config.adam(), &model.store);
        Ok(Self { model, adam, step: 0 })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.model.config
    }

    /// Replaces the run settings while keeping the architecture and weights.
    pub fn reconfigure(&mut self, config: &TrainConfig) -> Result<()> {
        config.validate()?;
        if config.architecture() != self.model.config.architecture() {
            return Err(Error::Config {
                key: "architecture".into(),
                message: format!(
                    "checkpoint has {}, configuration asks for {}",
                    self.model.config.architecture(),
                    config.architecture()
                ),
            });
        }
        self.model.config = config.clone();
        self.adam.config = config.adam();
        Ok(())
    }
}

/// One batch: target frame `t` of a scene and the pixels to supervise.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub time: usize,
    pub pixels: Vec<(usize, usize)>,
}

/// Uniform non-keyframe target time and uniform pixels of that frame.
pub fn sample_batch(scene: &SceneBundle, config: &TrainConfig, rng: &mut impl Rng) -> Result<Batch> {
    let n = scene.len();
    let keys = select_keyframes(n, config.keyframes)?;
    let mut candidates: Vec<usize> = (0..n).filter(|t| !keys.contains(t)).collect();
    if candidates.is_empty() {
        candidates = (0..n).collect();
    }
    let time = candidates[rng.random_range(0..candidates.len())];
    let (h, w) = scene.hw();
    let pixels = (0..config.ray_batch)
        .map(|_| (rng.random_range(0..h), rng.random_range(0..w)))
        .collect();
    Ok(Batch { time, pixels })
}

fn pixel_colors(frame: &Tensor, pixels: &[(usize, usize)]) -> Tensor {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let d = frame.data();
    Tensor::from_fn(vec![pixels.len(), 3], |i| {
        let (y, x) = pixels[i / 3];
        d[(i % 3) * h * w + y * w + x]
    })
}

/// Forward pass and all loss terms for one batch; returns the graph, the total and the report.
pub fn batch_loss(
    model: &Model,
    scene: &SceneBundle,
    batch: &Batch,
    step: usize,
    rng: &mut impl Rng,
) -> Result<(Graph, crate::autodiff::Var, LossReport)> {
    let cfg = &model.config;
    let compositor = cfg.compositor_kind()?;
    let n = scene.len();
    let t = batch.time;
    let cam = &scene.cameras[t];
    let time = normalized_time(t as f64, n);
    let mut g = Graph::new();
    let cond = model.condition(&mut g, scene, t, cam)?;
    let rays = generate_rays(cam, &batch.pixels, time)?;
    let eval = model.evaluate(&mut g, &cond, &rays, cfg.jitter, rng)?;
    let out = model.composite(&mut g, &eval, compositor);
    let (r, s) = (eval.rays, eval.samples);

    let mut terms = Vec::new();
    let target = g.constant(pixel_colors(&scene.frames[t], &batch.pixels));
    terms.push((LossTerm::Reconstruction, losses::l_rec(&mut g, out.blend, target)?));

    let d = eval.dynm;
    let mut warped = Vec::new();
    let mut weights = Vec::new();
    let mut pairs = Vec::new();
    let mut geo = Vec::new();
    for k in [t.wrapping_sub(1), t + 1] {
        if k >= n {
            continue;
        }
        let forward = k > t;
        let (flow, occ) = if forward {
            (d.flow_fwd, d.occ_fwd)
        } else {
            (d.flow_bwd, d.occ_bwd)
        };
        let moved = g.add(eval.points, flow);
        let dk = model.eval_dynamic_at(&mut g, &cond, moved, eval.dir_enc, normalized_time(k as f64, n));
        let back = if forward { dk.flow_bwd } else { dk.flow_fwd };
        let sigma_k = g.reshape(dk.sigma, vec![r, s]);
        warped.push(compositor.dynamic(&mut g, sigma_k, dk.color).values);
        let occ_col = g.reshape(occ, vec![r * s, 1]);
        let w_hat = compositor.dynamic(&mut g, sigma_k, occ_col).values;
        weights.push(g.reshape(w_hat, vec![r]));
        pairs.push(CyclePair {
            forward: flow,
            backward: back,
            weight: occ,
        });
        if let Some(u) = scene.flow_between(t, k) {
            let (_, w) = scene.hw();
            let ud = u.data();
            let target = Tensor::from_fn(vec![r, 2], |i| {
                let (y, x) = batch.pixels[i / 2];
                pixel_center(y, x)[i % 2] + ud[(y * w + x) * 2 + i % 2]
            });
            let f_hat = compositor.expected(&mut g, eval.sigma_dynamic, flow).values;
            geo.push(GeoTarget {
                flow: f_hat,
                camera: scene.cameras[k].clone(),
                target,
            });
        }
    }
    if !warped.is_empty() {
        terms.push((LossTerm::Photometric, losses::l_pho(&mut g, &warped, target, &weights)?));
        terms.push((LossTerm::Cycle, losses::l_cycle(&mut g, &pairs)?));
    }
    terms.push((LossTerm::Occlusion, losses::l_occ_reg(&mut g, &[d.occ_fwd, d.occ_bwd])));
    terms.push((LossTerm::BlendEntropy, losses::l_blend_entropy(&mut g, eval.blend)));
    terms.push((LossTerm::FlowMin, losses::l_flow_min(&mut g, &[d.flow_fwd, d.flow_bwd])));
    let pts = g.value(eval.points).clone();
    terms.push((
        LossTerm::SpatialSmooth,
        losses::l_flow_smooth_spatial(&mut g, &[d.flow_fwd, d.flow_bwd], &pts, s)?,
    ));
    terms.push((
        LossTerm::TemporalSmooth,
        losses::l_flow_smooth_temporal(&mut g, d.flow_fwd, d.flow_bwd)?,
    ));
    if !geo.is_empty() {
        let x_hat = compositor.expected(&mut g, eval.sigma_dynamic, eval.points).values;
        terms.push((LossTerm::Geometric, losses::l_geo(&mut g, x_hat, &geo)?));
    }
    if let Some(depth) = scene.depth.as_ref().map(|v| &v[t]) {
        let (_, w) = scene.hw();
        let pseudo: Vec<f64> = rays
            .iter()
            .map(|ray| depth.data()[ray.pixel.0 * w + ray.pixel.1] / ray.depth_per_unit(cam))
            .collect();
        let d_hat = compositor.expected(&mut g, eval.sigma_dynamic, eval.positions).values;
        let d_hat = g.reshape(d_hat, vec![r]);
        terms.push((LossTerm::Depth, losses::l_depth(&mut g, d_hat, &pseudo)?));
    }
    let (total, report) = losses::total_loss(&mut g, &terms, &cfg.loss_weights(), step);
    Ok((g, total, report))
}

/// One optimizer step on `batch`.
pub fn train_step(state: &mut TrainState, scene: &SceneBundle, batch: &Batch) -> Result<LossReport> {
    let mut rng = step_rng(state.model.config.seed ^ 0x5eed, state.step);
    let (mut g, total, report) = batch_loss(&state.model, scene, batch, state.step, &mut rng)?;
    if let Some((term, value)) = report.non_finite() {
        return Err(Error::NonFinite {
            term: term.name().into(),
            value,
            step: state.step,
        });
    }
    if !report.total.is_finite() {
        return Err(Error::NonFinite {
            term: "total".into(),
            value: report.total,
            step: state.step,
        });
    }
    let grads = g.backward(total);
    let updates: Vec<_> = g
        .bound_params()
        .filter_map(|(id, v)| grads.get(v).map(|gr| (id, gr.clone())))
        .collect();
    state.adam.update(&mut state.model.store, &updates);
    for (id, value) in g.take_buffer_updates() {
        state.model.store.set_value(id, value);
    }
    state.step += 1;
    Ok(report)
}

/// Which scene and frame each step trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub scene_id: String,
    pub time: usize,
    pub report: LossReport,
}

pub type StepCallback<'a> = Box<dyn FnMut(&LogEntry) + 'a>;

#[derive(Default)]
pub struct FitOptions<'a> {
    pub checkpoint_dir: Option<PathBuf>,
    pub on_step: Option<StepCallback<'a>>,
}

/// Trains until `state.step` reaches `config.total_steps`, sampling a scene uniformly per step.
pub fn fit_state(state: &mut TrainState, scenes: &[SceneBundle], opts: &mut FitOptions) -> Result<Vec<LogEntry>> {
    if scenes.is_empty() {
        return Err(Error::invalid("no training scenes"));
    }
    for s in scenes {
        s.validate()?;
    }
    let mut log = Vec::new();
    while state.step < state.model.config.total_steps {
        let cfg = state.model.config.clone();
        let mut rng = step_rng(cfg.seed, state.step);
        let si = rng.random_range(0..scenes.len());
        let batch = sample_batch(&scenes[si], &cfg, &mut rng)?;
        let step = state.step;
        let report = train_step(state, &scenes[si], &batch)?;
        let entry = LogEntry {
            step,
            scene_id: scenes[si].scene_id.clone(),
            time: batch.time,
            report,
        };
        if let Some(cb) = opts.on_step.as_mut() {
            cb(&entry);
        }
        log.push(entry);
        if let Some(dir) = &opts.checkpoint_dir {
            if state.step.is_multiple_of(cfg.checkpoint_every) || state.step == cfg.total_steps {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                save_checkpoint(state, &dir.join(format!("step_{:07}.ckpt", state.step)))?;
                save_checkpoint(state, &dir.join("latest.ckpt"))?;
            }
        }
    }
    Ok(log)
}

/// Scene-agnostic training from a fresh initialization.
pub fn fit(scenes: &[SceneBundle], config: &TrainConfig) -> Result<(TrainState, Vec<LogEntry>)> {
    let mut state = TrainState::new(config)?;
    let log = fit_state(&mut state, scenes, &mut FitOptions::default())?;
    Ok((state, log))
}

/// Continues training `state` on one scene for `steps` more steps.
pub fn finetune(state: &mut TrainState, scene: &SceneBundle, steps: usize) -> Result<Vec<LogEntry>> {
    let mut cfg = state.model.config.clone();
    cfg.total_steps = state.step + steps;
    state.reconfigure(&cfg)?;
    fit_state(state, std::slice::from_ref(scene), &mut FitOptions::default())
}

fn write_f64s(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Text header (format tag, step, config hash, parameter manifest, embedded config) followed by
/// little-endian `f64` parameter values and both optimizer moments.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let cfg = &state.model.config;
    let toml = cfg.to_toml();
    let mut head = String::new();
    head.push_str(CHECKPOINT_MAGIC);
    head.push('\n');
    head.push_str(&format!("step {}\n", state.step));
    head.push_str(&format!("adam_step {}\n", state.adam.step));
    head.push_str(&format!("seed {}\n", cfg.seed));
    head.push_str(&format!("config_hash {}\n", cfg.hash()));
    head.push_str(&format!("config_bytes {}\n", toml.len()));
    for e in state.model.store.entries() {
        let shape: Vec<String> = e.value.shape().iter().map(|d| d.to_string()).collect();
        head.push_str(&format!("param {} {} {}\n", e.name, shape.join(","), e.group.name()));
    }
    head.push_str("end\n");
    let mut buf = head.into_bytes();
    buf.extend_from_slice(toml.as_bytes());
    for e in state.model.store.entries() {
        write_f64s(&mut buf, &e.value);
    }
    for m in state.adam.first_moment.iter().chain(&state.adam.second_moment) {
        write_f64s(&mut buf, m);
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rd = BufReader::new(file);
    let mut line = String::new();
    let mut read_line = |rd: &mut BufReader<std::fs::File>| -> Result<String> {
        line.clear();
        rd.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        Ok(line.trim_end_matches('\n').to_string())
    };
    let bad = |m: String| Error::format(path, m);
    if read_line(&mut rd)? != CHECKPOINT_MAGIC {
        return Err(bad(format!("missing {CHECKPOINT_MAGIC:?} header")));
    }
    let mut fields = std::collections::HashMap::new();
    let mut params = Vec::new();
    loop {
        let l = read_line(&mut rd)?;
        if l == "end" {
            break;
        }
        if l.is_empty() {
            return Err(bad("truncated header".into()));
        }
        let parts: Vec<&str> = l.split(' ').collect();
        match parts.as_slice() {
            ["param", name, shape, group] => params.push((name.to_string(), shape.to_string(), group.to_string())),
            [key, value] => {
                fields.insert(key.to_string(), value.to_string());
            }
            _ => return Err(bad(format!("malformed header line {l:?}"))),
        }
    }
    let num = |k: &str| -> Result<usize> {
        fields
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("missing or invalid {k}")))
    };
    let mut toml = vec![0u8; num("config_bytes")?];
    rd.read_exact(&mut toml).map_err(|e| Error::io(path, e))?;
    let toml = String::from_utf8(toml).map_err(|_| bad("config is not UTF-8".into()))?;
    let config = TrainConfig::from_toml_str(&toml)?;
    if fields.get("config_hash") != Some(&config.hash()) {
        return Err(bad("config hash does not match embedded config".into()));
    }
    let mut state = TrainState::new(&config)?;
    let entries = state.model.store.entries().to_vec();
    if entries.len() != params.len() {
        return Err(bad(format!(
            "{} parameters stored, model has {}",
            params.len(),
            entries.len()
        )));
    }
    for (e, (name, shape, _)) in entries.iter().zip(&params) {
        let s: Vec<String> = e.value.shape().iter().map(|d| d.to_string()).collect();
        if &e.name != name || &s.join(",") != shape {
            return Err(bad(format!(
                "parameter {name} [{shape}] does not match model {} [{}]",
                e.name,
                s.join(",")
            )));
        }
    }
    let mut payload = Vec::new();
    rd.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    let total: usize = entries.iter().map(|e| e.value.len()).sum::<usize>() * 3;
    if payload.len() != total * 8 {
        return Err(bad(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            total * 8
        )));
    }
    let mut vals = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    let mut read = |like: &Tensor| Tensor::new(like.shape().to_vec(), vals.by_ref().take(like.len()).collect());
    let ids: Vec<_> = state.model.store.ids().collect();
    for (id, e) in ids.iter().zip(&entries) {
        let v = read(&e.value);
        state.model.store.set_value(*id, v);
    }
    for i in 0..entries.len() {
        state.adam.first_moment[i] = read(&entries[i].value);
    }
    for i in 0..entries.len() {
        state.adam.second_moment[i] = read(&entries[i].value);
    }
    state.step = num("step")?;
    state.adam.step = num("adam_step")? as u64;
    Ok(state)
}

/// Parameter groups whose gradient from the reconstruction term alone is non-zero.
pub fn groups_reached_by_reconstruction(
    state: &TrainState,
    scene: &SceneBundle,
    batch: &Batch,
) -> Result<Vec<ParamGroup>> {
    let mut cfg = state.model.config.clone();
    cfg.zero_loss_weights();
    cfg.weight_rec = 1.0;
    let mut model = Model::new(&cfg)?;
    model.store = state.model.store.clone();
    let mut rng = step_rng(cfg.seed, 0);
    let (g, total, _) = batch_loss(&model, scene, batch, 0, &mut rng)?;
    let grads = g.backward(total);
    let mut reached: Vec<ParamGroup> = g
        .bound_params()
        .filter(|(_, v)| grads.get(*v).is_some_and(|t| t.max_abs() > 0.0))
        .map(|(id, _)| model.store.entry(id).group)
        .collect();
    reached.sort();
    reached.dedup();
    Ok(reached)
}

/// Renders frame `t` of `scene` from `camera`.
pub fn render(model: &Model, scene: &SceneBundle, t: usize, camera: &Camera, mode: RenderMode) -> Result<Tensor> {
    Ok(model.render_view(scene, t, camera, 512)?.image(mode).clone())
}

/// Frames used for evaluation: every non-keyframe.
pub fn evaluation_frames(n: usize, keyframes: usize) -> Result<Vec<usize>> {
    let keys = select_keyframes(n, keyframes)?;
    Ok((0..n).filter(|t| !keys.contains(t)).collect())
}

/// Renders each evaluation frame from its own camera and scores it against the frame.
pub fn evaluate_scene(
    model: &Model,
    scene: &SceneBundle,
    frames: &[usize],
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let mut renders = Vec::with_capacity(frames.len());
    let mut targets = Vec::with_capacity(frames.len());
    for &t in frames {
        renders.push(render(model, scene, t, &scene.cameras[t], RenderMode::Blend)?);
        targets.push(scene.frames[t].clone());
    }
    metrics::evaluate_sequence(&renders, &targets, opts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldAudit {
    pub eval_scene: String,
    /// Scene ids that contributed at least one training step.
    pub trained_on: Vec<String>,
}

impl FoldAudit {
    pub fn leaked(&self) -> bool {
        self.trained_on.contains(&self.eval_scene)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossValReport {
    pub rows: Vec<(String, MetricRow)>,
    pub mean: MetricRow,
    pub audit: Vec<FoldAudit>,
}

impl CrossValReport {
    pub fn table(&self) -> String {
        let mut rows = self.rows.clone();
        rows.push(("mean".into(), self.mean));
        metrics::format_table("scene", &rows)
    }
}

/// Leave-one-out: for each scene, train on the others and evaluate on it.
pub fn cross_validate(scenes: &[SceneBundle], config: &TrainConfig, opts: &EvalOptions) -> Result<CrossValReport> {
    if scenes.len() < 2 {
        return Err(Error::invalid("cross-validation needs at least two scenes"));
    }
    let mut rows = Vec::new();
    let mut audit = Vec::new();
    for (i, eval) in scenes.iter().enumerate() {
        let train: Vec<SceneBundle> = scenes
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, s)| s.clone())
            .collect();
        let (state, log) = fit(&train, config)?;
        let mut trained_on: Vec<String> = log.iter().map(|e| e.scene_id.clone()).collect();
        trained_on.sort();
        trained_on.dedup();
        audit.push(FoldAudit {
            eval_scene: eval.scene_id.clone(),
            trained_on,
        });
        let frames = evaluation_frames(eval.len(), config.keyframes)?;
        let report = evaluate_scene(&state.model, eval, &frames, opts)?;
        rows.push((eval.scene_id.clone(), report.mean));
    }
    let mean = MetricRow::mean(&rows.iter().map(|(_, r)| *r).collect::<Vec<_>>());
    Ok(CrossValReport { rows, mean, audit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_synthetic, SyntheticSceneSpec};

    #[test]
    fn keyframe_examples() {
        assert_eq!(select_keyframes(24, 8).unwrap(), vec![2, 5, 8, 11, 14, 17, 20, 23]);
        assert_eq!(select_keyframes(8, 8).unwrap(), (0..8).collect::<Vec<_>>());
        let err = select_keyframes(7, 8).unwrap_err().to_string();
        assert!(err.contains("lower"), "{err}");
    }

    #[test]
    fn neighbor_examples() {
        assert_eq!(select_neighbors(5, 12, 2), vec![3, 4, 6, 7]);
        assert_eq!(select_neighbors(0, 12, 2), vec![1, 2]);
        assert_eq!(select_neighbors(11, 12, 2), vec![9, 10]);
    }

    fn tiny() -> (TrainConfig, SceneBundle) {
        let cfg = TrainConfig {
            keyframes: 3,
            neighbor_radius: 1,
            samples_per_ray: 6,
            ray_batch: 8,
            depth_planes: 16,
            field_width: 16,
            total_steps: 2,
            ..TrainConfig::toy()
        };
        let spec = SyntheticSceneSpec {
            frames: 6,
            height: 16,
            width: 20,
            ..SyntheticSceneSpec::toy()
        };
        (cfg, generate_synthetic(&spec, 4).unwrap())
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let (mut cfg, scene) = tiny();
        cfg.zero_loss_weights();
        let (state, _) = fit(std::slice::from_ref(&scene), &cfg).unwrap();
        let fresh = TrainState::new(&cfg).unwrap();
        for (a, b) in state.model.store.entries().iter().zip(fresh.model.store.entries()) {
            if a.trainable {
                assert_eq!(a.value, b.value, "{}", a.name);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact_and_resumes() {
        let (mut cfg, scene) = tiny();
        cfg.total_steps = 3;
        let (full, log_full) = fit(std::slice::from_ref(&scene), &cfg).unwrap();

        let mut short = cfg.clone();
        short.total_steps = 1;
        let (state, _) = fit(std::slice::from_ref(&scene), &short).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&state, &p).unwrap();
        let mut back = load_checkpoint(&p).unwrap();
        for (a, b) in state.model.store.entries().iter().zip(back.model.store.entries()) {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(back.step, 1);
        back.reconfigure(&cfg).unwrap();
        let log = fit_state(&mut back, std::slice::from_ref(&scene), &mut FitOptions::default()).unwrap();
        assert_eq!(
            log.iter().map(|e| e.report.total).collect::<Vec<_>>(),
            log_full[1..].iter().map(|e| e.report.total).collect::<Vec<_>>()
        );
        for (a, b) in full.model.store.entries().iter().zip(back.model.store.entries()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn reconstruction_gradient_reaches_all_groups() {
        let (cfg, scene) = tiny();
        let state = TrainState::new(&cfg).unwrap();
        let batch = sample_batch(&scene, &cfg, &mut step_rng(1, 0)).unwrap();
        let reached = groups_reached_by_reconstruction(&state, &scene, &batch).unwrap();
        assert_eq!(reached, ParamGroup::ALL.to_vec());
    }
}
