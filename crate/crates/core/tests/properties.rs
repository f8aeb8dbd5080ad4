use nalgebra::{Matrix3, Vector2, Vector3};
use proptest::prelude::*;

use zest_core::autodiff::Graph;
use zest_core::camera::{apply_homography, plane_homography, plane_induced_homography, Camera, Plane};
use zest_core::losses;
use zest_core::metrics;
use zest_core::model::conditioning_neighbors;
use zest_core::render::blended_transmittance;
use zest_core::tensor::Tensor;
use zest_core::trainer::{select_keyframes, select_neighbors};
use zest_core::volumes::{aggregate_variance, SweepVolume};

fn camera() -> impl Strategy<Value = Camera> {
    (
        prop::array::uniform3(-1.0f64..1.0),
        prop::array::uniform2(-0.5f64..0.5),
        30.0f64..80.0,
        -0.2f64..0.2,
    )
        .prop_map(|(eye, tgt, f, roll)| {
            Camera::look_at(
                Vector3::from(eye),
                Vector3::new(tgt[0], tgt[1], 5.0),
                Vector3::new(roll, -1.0, 0.0),
                (f, f),
                (32.0, 24.0),
                64,
                48,
                1.0,
                12.0,
            )
            .unwrap()
        })
}

fn image(h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.0f64..1.0, 3 * h * w).prop_map(move |v| Tensor::new(vec![3, h, w], v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn homographies_of_one_plane_compose_to_identity(a in camera(), b in camera(), d in 1.5f64..11.0) {
        let plane = Plane::fronto_parallel(&a, d);
        let m = plane_induced_homography(&a, &b, &plane).unwrap() * plane_induced_homography(&b, &a, &plane).unwrap();
        prop_assert!((m / m[(2, 2)] - Matrix3::identity()).amax() < 1e-8);
    }

    #[test]
    fn same_camera_homography_is_identity(a in camera(), d in 1.5f64..11.0, u in 0.0f64..64.0, v in 0.0f64..48.0) {
        let h = plane_homography(&a, &a, d).unwrap();
        let p = Vector2::new(u, v);
        prop_assert!((apply_homography(&h, &p) - p).norm() < 1e-9);
    }

    #[test]
    fn transmittance_starts_at_one_and_never_increases(
        rows in prop::collection::vec((0.0f64..5.0, 0.0f64..5.0, 0.0f64..1.0), 1..32)
    ) {
        let ss: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let sd: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let b: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let tau = blended_transmittance(&ss, &sd, &b).unwrap();
        prop_assert_eq!(tau[0], 1.0);
        prop_assert!(tau.windows(2).all(|p| p[1] <= p[0] && p[1] >= 0.0));
    }

    #[test]
    fn depth_loss_is_affine_invariant(
        depths in prop::collection::vec((0.5f64..10.0, 0.5f64..10.0), 4..32),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let pred: Vec<f64> = depths.iter().map(|d| d.0).collect();
        let pseudo: Vec<f64> = depths.iter().map(|d| d.1).collect();
        let moved: Vec<f64> = pseudo.iter().map(|d| scale * d + shift).collect();
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![pred.len()], pred));
        let a = losses::l_depth(&mut g, p, &pseudo).unwrap();
        let b = losses::l_depth(&mut g, p, &moved).unwrap();
        prop_assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-8);
    }

    #[test]
    fn variance_is_permutation_invariant(
        vals in prop::collection::vec(-3.0f64..3.0, 4 * 2 * 8),
        masks in prop::collection::vec(any::<bool>(), 4 * 8),
    ) {
        let build = |order: &[usize], g: &mut Graph| -> Vec<SweepVolume> {
            order
                .iter()
                .map(|&i| SweepVolume {
                    values: g.constant(Tensor::new(vec![2, 2, 2, 2], vals[i * 16..(i + 1) * 16].to_vec())),
                    mask: masks[i * 8..(i + 1) * 8].to_vec().into(),
                })
                .collect()
        };
        let mut g = Graph::new();
        let fwd = build(&[0, 1, 2, 3], &mut g);
        let rev = build(&[3, 1, 0, 2], &mut g);
        let (a, _) = aggregate_variance(&mut g, &fwd).unwrap();
        let (b, _) = aggregate_variance(&mut g, &rev).unwrap();
        prop_assert_eq!(g.value(a).data(), g.value(b).data());
        prop_assert!(g.value(a).data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn keyframes_are_sorted_distinct_and_in_range(n in 1usize..200, k in 1usize..20) {
        match select_keyframes(n, k) {
            Ok(keys) => {
                prop_assert_eq!(keys.len(), k);
                prop_assert!(keys.windows(2).all(|p| p[0] < p[1]));
                prop_assert!(*keys.last().unwrap() < n);
            }
            Err(_) => prop_assert!(n < k),
        }
    }

    #[test]
    fn neighbors_exclude_target_and_stay_in_window(t in 0usize..50, extra in 1usize..50, r in 1usize..5) {
        let n = t + extra;
        let nb = select_neighbors(t, n, r);
        prop_assert!(!nb.contains(&t));
        prop_assert!(nb.iter().all(|&k| k < n && k.abs_diff(t) <= r));
        prop_assert_eq!(nb.len(), (t.saturating_sub(r)..=(t + r).min(n - 1)).count() - 1);
        let cond = conditioning_neighbors(t, n, r);
        prop_assert!(!cond.contains(&t));
        prop_assert!(cond.len() >= 2.min(n - 1));
        prop_assert!(nb.iter().all(|k| cond.contains(k)));
    }

    #[test]
    fn metrics_are_symmetric(a in image(8, 9), b in image(8, 9)) {
        prop_assert_eq!(metrics::psnr(&a, &b, 1.0).unwrap(), metrics::psnr(&b, &a, 1.0).unwrap());
        let (x, y) = (metrics::ssim(&a, &b).unwrap(), metrics::ssim(&b, &a).unwrap());
        prop_assert!((x - y).abs() < 1e-12);
        prop_assert!(x <= 1.0 + 1e-12);
    }

    #[test]
    fn regularizers_are_nonnegative(
        w in prop::collection::vec(0.0f64..1.0, 1..64),
        flows in prop::collection::vec(-2.0f64..2.0, 3..96),
    ) {
        let mut g = Graph::new();
        let wv = g.constant(Tensor::new(vec![w.len()], w.clone()));
        let occ = losses::l_occ_reg(&mut g, &[wv]);
        let ent = losses::l_blend_entropy(&mut g, wv);
        let rows = flows.len() / 3;
        let fv = g.constant(Tensor::new(vec![rows, 3], flows[..rows * 3].to_vec()));
        let fm = losses::l_flow_min(&mut g, &[fv]);
        for v in [occ, ent, fm] {
            prop_assert!(g.value(v).item() >= 0.0);
        }
    }
}
