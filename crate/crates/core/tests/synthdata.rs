use ofl_core::geometry::norm;
use ofl_core::pyramid::PyramidGeometry;
use ofl_core::synth::{
    check_consistency, downsample_gt, generate_scene, Occluder, OccluderKind, SceneConfig,
};
use proptest::prelude::*;

fn with_occluder(kind: OccluderKind, coverage: f64, seed: u64) -> SceneConfig {
    SceneConfig {
        occluder: Some(Occluder { kind, coverage }),
        seed,
        ..SceneConfig::default()
    }
}

#[test]
fn realized_coverage_tracks_target() {
    for kind in [OccluderKind::HalfSpace, OccluderKind::Sphere] {
        for target in [0.1, 0.2, 0.35] {
            for seed in 0..20 {
                let pair = generate_scene(&with_occluder(kind, target, seed)).unwrap();
                let f = pair.occluded_fraction();
                assert!(
                    (f - target).abs() <= 0.1,
                    "{kind:?} target {target} seed {seed}: {f}"
                );
            }
        }
    }
}

#[test]
fn no_occluder_means_fully_visible() {
    for seed in 0..10 {
        let pair = generate_scene(&SceneConfig {
            occluder: None,
            seed,
            ..SceneConfig::default()
        })
        .unwrap();
        assert_eq!(pair.occluded_fraction(), 0.0);
        assert_eq!(pair.q.len(), pair.p.len());
    }
}

#[test]
fn downsampled_truth_is_a_gather() {
    for seed in 0..10 {
        let pair = generate_scene(&SceneConfig {
            seed,
            ..SceneConfig::default()
        })
        .unwrap();
        let pyr = PyramidGeometry::build(&pair.p.positions, 3, 8).unwrap();
        let gt = downsample_gt(&pair, &pyr).unwrap();
        assert_eq!(gt[0].flow, pair.gt_flow);
        assert_eq!(gt[0].occlusion, pair.gt_occlusion);
        for (l, level) in pyr.levels.iter().enumerate() {
            for (i, &root) in level.root_indices.iter().enumerate() {
                assert_eq!(gt[l].flow.0[i], pair.gt_flow.0[root]);
                assert_eq!(gt[l].occlusion.0[i], pair.gt_occlusion.0[root]);
            }
        }
    }
}

#[test]
fn constant_flow_is_constant_at_every_level() {
    let pair = generate_scene(&SceneConfig {
        max_rotation: 0.0,
        max_translation: 0.3,
        objects: 1,
        occluder: None,
        seed: 4,
        ..SceneConfig::default()
    })
    .unwrap();
    let t = pair.gt_flow.0[0];
    let pyr = PyramidGeometry::build(&pair.p.positions, 3, 8).unwrap();
    for level in downsample_gt(&pair, &pyr).unwrap() {
        assert!(level.flow.0.iter().all(|f| *f == t));
    }
}

fn config() -> impl Strategy<Value = SceneConfig> {
    (
        64usize..300,
        1usize..6,
        0.0..30f64,
        0.0..0.8f64,
        prop_oneof![
            Just(None),
            Just(Some(OccluderKind::HalfSpace)),
            Just(Some(OccluderKind::Sphere))
        ],
        0.0..0.5f64,
        prop_oneof![Just(0.0), 0.0..0.01f64],
        any::<bool>(),
        any::<u64>(),
    )
        .prop_map(
            |(points, objects, rot, t, kind, coverage, noise, features, seed)| SceneConfig {
                points,
                objects,
                max_rotation: rot.to_radians(),
                max_translation: t,
                occluder: kind.map(|kind| Occluder { kind, coverage }),
                noise_sigma: noise,
                features,
                shuffle: true,
                seed,
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn labels_agree_with_geometry(cfg in config()) {
        let pair = match generate_scene(&cfg) {
            Ok(p) => p,
            // an occluder that leaves too few points is rejected, not mislabeled
            Err(_) => return Ok(()),
        };
        prop_assert!(check_consistency(&pair, cfg.match_radius()).is_empty());
        prop_assert!(pair.gt_occlusion.0.iter().all(|&o| o == 0.0 || o == 1.0));
    }

    #[test]
    fn flow_respects_motion_bound(cfg in config()) {
        if let Ok(pair) = generate_scene(&cfg) {
            let bound = cfg.flow_bound();
            for f in &pair.gt_flow.0 {
                prop_assert!(norm(f) <= bound, "{} > {}", norm(f), bound);
            }
        }
    }

    #[test]
    fn same_seed_same_scene(cfg in config()) {
        let a = generate_scene(&cfg);
        let b = generate_scene(&cfg);
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "nondeterministic generation"),
        }
    }
}
