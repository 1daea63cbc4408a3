use proptest::prelude::*;

use lookaround_core::detector::{entropy, normalized_logits};
use lookaround_core::harness::{run_episode, RunConfig, SceneSpec};
use lookaround_core::metrics::{evaluate_map50, GroundTruthBox, Prediction};
use lookaround_core::planner::{astar, octile, path_cost, NavGraph};
use lookaround_core::policy::{
    action_probs, log_prob_grad, Features, LearnedPolicyParams, N_FEATURES,
};
use lookaround_core::reconcile::{decode_rle, encode_rle};
use lookaround_core::scene::{generate_scene, Scene};
use lookaround_core::{BBox, CameraModel, Cell, Pixel, SceneGenConfig};

fn features() -> impl Strategy<Value = Vec<Features>> {
    prop::collection::vec(prop::array::uniform6(-2.0f64..2.0), 1..10)
}

fn small_run(seed_scene: u64) -> RunConfig {
    RunConfig {
        scene: SceneSpec::Generate(SceneGenConfig {
            dims: [40, 40, 14],
            n_objects: 3 + (seed_scene % 3) as usize,
            footprint: [2, 4],
            height: [3, 8],
            ..SceneGenConfig::default()
        }),
        camera: CameraModel {
            width: 20,
            height: 20,
            ..CameraModel::default()
        },
        steps: 30,
        n_replanning: 8,
        map_k: 16,
        candidates: 8,
        ..RunConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_logits_lie_in_the_simplex(x in prop::collection::vec(-800.0f64..800.0, 1..12)) {
        let p = normalized_logits(&x).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        let h = entropy(&p);
        prop_assert!(h >= -1e-12 && h <= (x.len() as f64).ln() + 1e-9);
    }

    #[test]
    fn rle_round_trips(pixels in prop::collection::btree_set((0u32..16, 0u32..12), 0..100)) {
        let cam = CameraModel { width: 16, height: 12, ..CameraModel::default() };
        let mut mask: Vec<Pixel> = pixels.iter().map(|&(u, v)| Pixel(u, v)).collect();
        mask.sort_by_key(|p| (p.1, p.0));
        let runs = encode_rle(&mask, &cam);
        let mut back = decode_rle(&runs, &cam);
        back.sort_by_key(|p| (p.1, p.0));
        prop_assert_eq!(back, mask);
    }

    #[test]
    fn astar_paths_are_valid_and_bounded(
        free in prop::collection::vec(prop::bool::weighted(0.8), 144),
        s in (0usize..12, 0usize..12),
        g in (0usize..12, 0usize..12),
    ) {
        let graph = NavGraph::from_free(12, 12, 1.0, free);
        if let Ok(p) = astar(&graph, Cell(s.0, s.1), Cell(g.0, g.1)) {
            prop_assert_eq!(p.cells.first().copied(), Some(Cell(s.0, s.1)));
            prop_assert_eq!(p.cells.last().copied(), Some(Cell(g.0, g.1)));
            let walked = path_cost(&graph, &p.cells).unwrap();
            prop_assert!((walked - p.cost).abs() < 1e-9);
            prop_assert!(p.cost + 1e-9 >= octile(Cell(s.0, s.1), Cell(g.0, g.1)));
        }
    }

    #[test]
    fn policy_score_function_has_zero_mean(feats in features(), w in prop::array::uniform6(-3.0f64..3.0), t in 0.2f64..4.0) {
        let params = LearnedPolicyParams { weights: w.to_vec(), temperature: t, ..LearnedPolicyParams::default() };
        let p = action_probs(&params, &feats);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let mut mean = [0.0; N_FEATURES];
        for (a, pa) in p.iter().enumerate() {
            for (m, g) in mean.iter_mut().zip(log_prob_grad(&params, &feats, a)) {
                *m += pa * g;
            }
        }
        prop_assert!(mean.iter().all(|m| m.abs() < 1e-9));
    }

    #[test]
    fn map_is_a_fraction_and_perfect_predictions_score_one(
        boxes in prop::collection::vec((0.0f64..50.0, 0.0f64..50.0, 1.0f64..10.0, 1.0f64..10.0, 0u32..3, 0u32..4), 1..12),
        scores in prop::collection::vec(0.0f64..1.0, 12),
    ) {
        let gts: Vec<GroundTruthBox> = boxes
            .iter()
            .map(|&(x, y, w, h, c, f)| GroundTruthBox { frame_id: f, class: c, bbox: BBox::new(x, y, x + w, y + h) })
            .collect();
        let exact: Vec<Prediction> = gts
            .iter()
            .zip(&scores)
            .map(|(g, &s)| Prediction { frame_id: g.frame_id, class: g.class, score: s, bbox: g.bbox })
            .collect();
        prop_assert!((evaluate_map50(&exact, &gts).unwrap().map - 1.0).abs() < 1e-12);
        let shifted: Vec<Prediction> = exact
            .iter()
            .map(|p| Prediction { bbox: BBox::new(p.bbox.x_min + 3.0, p.bbox.y_min, p.bbox.x_max + 3.0, p.bbox.y_max), ..p.clone() })
            .collect();
        let m = evaluate_map50(&shifted, &gts).unwrap().map;
        prop_assert!((0.0..=1.0).contains(&m));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scenes_round_trip_through_their_file_format(seed in any::<u64>(), n in 0usize..6) {
        let cfg = SceneGenConfig { dims: [30, 30, 12], n_objects: n, ..SceneGenConfig::default() };
        let scene = generate_scene(&cfg, seed).unwrap();
        let back = Scene::load(&scene.save()).unwrap();
        prop_assert_eq!(back.save(), scene.save());
        prop_assert_eq!(back.objects().len(), n);
    }

    #[test]
    fn episode_invariants(seed in 0u64..1000) {
        let cfg = small_run(seed);
        let ep = run_episode(&cfg, seed).unwrap();
        prop_assert!(ep.frames.len() <= cfg.steps);
        prop_assert!(ep.ended_early || ep.frames.len() == cfg.steps);
        // Frame ids are consecutive and every pose stands on a walkable cell.
        for (k, f) in ep.frames.iter().enumerate() {
            prop_assert_eq!(f.frame_id as usize, k);
            prop_assert!(ep.scene.walkable(f.pose.cell(&ep.scene).unwrap()));
        }
        // Everything the agent has seen as free is walkable in the scene.
        for c in ep.explored.free_cells() {
            prop_assert!(ep.scene.walkable(c));
        }
        for l in ep.dataset.labels() {
            prop_assert!(ep.map.instance(l.u).is_ok());
            prop_assert!(l.mask.len() >= cfg.min_mask_pixels);
        }
    }
}
