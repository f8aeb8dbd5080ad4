use zest_core::data_io::{crop_chw, load_renders, load_scene, save_render, save_scene};
use zest_core::metrics::{self, EvalOptions};
use zest_core::model::RenderMode;
use zest_core::synthetic::{SyntheticScene, SyntheticSceneSpec};
use zest_core::trainer::{self, evaluation_frames, load_checkpoint, save_checkpoint};
use zest_core::TrainConfig;

fn config() -> TrainConfig {
    TrainConfig {
        keyframes: 3,
        neighbor_radius: 1,
        samples_per_ray: 6,
        ray_batch: 16,
        depth_planes: 16,
        field_width: 16,
        total_steps: 3,
        ..TrainConfig::toy()
    }
}

#[test]
fn synthesize_train_render_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSceneSpec {
        frames: 6,
        height: 20,
        width: 24,
        ..SyntheticSceneSpec::toy()
    };
    let scene = SyntheticScene::new(spec, 7).unwrap();
    save_scene(&scene.bundle(), &dir.path().join("scene")).unwrap();
    let bundle = load_scene(&dir.path().join("scene")).unwrap();
    assert_eq!(bundle.original_hw, (20, 24));
    assert_eq!(bundle.hw(), (20, 24));

    let (state, log) = trainer::fit(std::slice::from_ref(&bundle), &config()).unwrap();
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|e| e.report.total.is_finite()));

    let ckpt = dir.path().join("model.ckpt");
    save_checkpoint(&state, &ckpt).unwrap();
    let restored = load_checkpoint(&ckpt).unwrap();

    let frames = evaluation_frames(bundle.len(), 3).unwrap();
    let (h, w) = bundle.original_hw;
    let renders: Vec<_> = frames
        .iter()
        .map(|&t| {
            let img = trainer::render(&restored.model, &bundle, t, &bundle.cameras[t], RenderMode::Blend).unwrap();
            let direct = trainer::render(&state.model, &bundle, t, &bundle.cameras[t], RenderMode::Blend).unwrap();
            assert_eq!(img.data(), direct.data());
            crop_chw(&img, h, w)
        })
        .collect();
    assert!(renders
        .iter()
        .all(|r| r.shape() == [3, 20, 24] && r.data().iter().all(|v| (0.0..=1.0).contains(v))));

    let out = dir.path().join("renders");
    save_render(&renders, &out).unwrap();
    let loaded = load_renders(&out).unwrap();
    assert_eq!(loaded.len(), frames.len());
    let targets: Vec<_> = frames.iter().map(|&t| crop_chw(&bundle.frames[t], h, w)).collect();
    let rep = metrics::evaluate_sequence(&loaded, &targets, &EvalOptions::new()).unwrap();
    assert_eq!(rep.frames.len(), frames.len());
    assert!(rep.mean.psnr.is_finite() && rep.mean.ssim.is_finite());
}
