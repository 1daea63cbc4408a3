//! Seeded end-to-end episodes: explore, detect, fuse, reconcile, fine-tune
//! and evaluate. Also ablation sweeps and metric reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{softmax, Detection, Detector, DetectorProfile};
use crate::disagreement::{assemble_policy_input, build_disagreement_map, total_score, ScoreKind};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Cell};
use crate::head::{self, evaluate_head, HeadHyper, HeadParams, TrainSample};
use crate::metrics::{evaluate_map, GroundTruthBox, Prediction};
use crate::planner::{astar, build_nav_graph, follow, snap_goal};
use crate::policy::{
    apply_gradient, frontier_goal, greedy_goal_avoiding, learned_choice, policy_gradient,
    random_goal, sample_candidates, ActionMode, Baseline, ExploredMap, GoalAction, GreedyParams,
    LearnedPolicyParams, PolicyKind, Transition,
};
use crate::reconcile::{reconcile, Provenance, PseudoDataset};
use crate::rng;
use crate::scene::{generate_scene, Scene, SceneGenConfig};
use crate::sensor::{raycast_frame, AgentPose, CameraModel, FrameObservation};
use crate::voxel_map::SemanticVoxelMap;

pub const SCHEMA_VERSION: u32 = 1;

const TAG_SCENE: u64 = 1;
const TAG_START: u64 = 2;
const TAG_POLICY: u64 = 3;
const TAG_DETECT: u64 = 4;
const TAG_HOLDOUT: u64 = 5;
const TAG_HEAD: u64 = 6;
const TAG_TRAIN: u64 = 7;

/// Either a saved scene file or generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SceneSpec {
    Path(PathBuf),
    Generate(SceneGenConfig),
}

/// Four rooms, sixteen objects.
pub fn default_scene_config() -> SceneGenConfig {
    SceneGenConfig {
        dims: [96, 96, 24],
        n_objects: 16,
        room_grid: [2, 2],
        door_width: 8,
        footprint: [3, 6],
        height: [4, 12],
        clearance: 2,
        ..SceneGenConfig::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Holdout frames as a fraction of the step budget.
    pub holdout_fraction: f64,
    /// Unseen scenes the holdout frames are spread over.
    pub holdout_scenes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            holdout_fraction: 0.25,
            holdout_scenes: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    #[serde(flatten)]
    pub hyper: HeadHyper,
    pub proj_dim: usize,
    /// Standard deviation of the initial weights, times `1/sqrt(dim)`.
    pub init_scale: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            hyper: HeadHyper {
                lr: 0.05,
                epochs: 30,
                ..HeadHyper::default()
            },
            proj_dim: 8,
            init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub detector: DetectorProfile,
    pub camera: CameraModel,
    pub camera_height: f64,
    pub policy: PolicyKind,
    pub score: ScoreKind,
    pub steps: usize,
    pub n_replanning: usize,
    pub seeds: Vec<u64>,
    pub eval: EvalConfig,
    pub finetune: FinetuneConfig,
    pub greedy: GreedyParams,
    pub learned: LearnedPolicyParams,
    /// Sample learned actions instead of taking the argmax.
    pub learned_sampling: bool,
    /// Candidate goals offered to the learned policy per decision.
    pub candidates: usize,
    /// Side of the disagreement map grid.
    pub map_k: usize,
    /// Metres around the agent marked known without the camera.
    pub proximity_radius: f64,
    pub min_mask_pixels: usize,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: SceneSpec::Generate(default_scene_config()),
            detector: DetectorProfile::default(),
            camera: CameraModel::default(),
            camera_height: 0.5,
            policy: PolicyKind::Random,
            score: ScoreKind::Entropy,
            steps: 300,
            n_replanning: 40,
            seeds: vec![0],
            eval: EvalConfig::default(),
            finetune: FinetuneConfig::default(),
            greedy: GreedyParams::default(),
            learned: LearnedPolicyParams::default(),
            learned_sampling: false,
            candidates: 64,
            map_k: 64,
            proximity_radius: 0.5,
            min_mask_pixels: crate::reconcile::DEFAULT_MIN_MASK_PIXELS,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    /// Checks everything but the step budget; `run_episode` accepts zero steps.
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.learned.validate()?;
        self.finetune.hyper.validate()?;
        let iou = self.eval.iou_threshold;
        if !(iou > 0.0 && iou < 1.0) {
            return Err(Error::InvalidConfig(
                "iou_threshold must lie in (0, 1)".into(),
            ));
        }
        if self.n_replanning == 0 {
            return Err(Error::InvalidConfig("n_replanning must be > 0".into()));
        }
        if self.map_k == 0 || self.candidates == 0 {
            return Err(Error::InvalidConfig(
                "map_k and candidates must be > 0".into(),
            ));
        }
        if !(self.eval.holdout_fraction >= 0.0) {
            return Err(Error::InvalidConfig("holdout_fraction must be >= 0".into()));
        }
        Ok(())
    }

    pub fn scene_for(&self, seed: u64) -> Result<Scene> {
        match &self.scene {
            SceneSpec::Path(p) => Scene::load(&std::fs::read(p)?),
            SceneSpec::Generate(c) => generate_scene(c, rng::derive(seed, &[TAG_SCENE])),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub step: usize,
    pub goal: [f64; 2],
    pub snapped: Cell,
    pub path_cost: f64,
    pub frames: usize,
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub seed: u64,
    pub scene: Scene,
    pub frames: Vec<FrameObservation>,
    pub detections: Vec<Detection>,
    pub map: SemanticVoxelMap,
    pub explored: ExploredMap,
    pub log: Vec<DecisionRecord>,
    pub transitions: Vec<Transition>,
    pub dataset: PseudoDataset,
    pub ended_early: bool,
}

struct Recorder<'a> {
    config: &'a RunConfig,
    scene: &'a Scene,
    detector: &'a Detector,
    det_seed: u64,
    frames: Vec<FrameObservation>,
    detections: Vec<Detection>,
    map: SemanticVoxelMap,
    explored: ExploredMap,
}

impl Recorder<'_> {
    fn absorb(&mut self, obs: FrameObservation) {
        self.explored.update(&obs);
        self.explored.mark_proximity(
            self.scene,
            &obs.pose,
            self.config.proximity_radius,
            obs.frame_id,
        );
        for d in self.detector.detect(self.scene, &obs, self.det_seed) {
            if d.mask.len() < self.config.min_mask_pixels {
                continue;
            }
            self.map.insert_detection(&d, &obs);
            self.detections.push(d);
        }
        self.frames.push(obs);
    }

    fn next_frame(&self) -> u32 {
        self.frames.len() as u32
    }
}

/// Detector seed used for an episode seed.
pub fn detection_seed(seed: u64) -> u64 {
    rng::derive(seed, &[TAG_DETECT])
}

/// Runs one exploration episode and reconciles its frames. Output is a
/// pure function of `(config, seed)`.
pub fn run_episode(config: &RunConfig, seed: u64) -> Result<Episode> {
    run_rollout(config, seed, 0)
}

/// Like [`run_episode`], but with the policy's random stream picked by
/// `rollout`; scene, start and detector noise depend on `seed` only.
pub fn run_rollout(config: &RunConfig, seed: u64, rollout: u64) -> Result<Episode> {
    config.validate()?;
    let scene = config.scene_for(seed)?;
    let detector = Detector::new(config.detector.clone())?;
    if detector.profile().n_classes != scene.n_classes() {
        return Err(Error::InvalidConfig(format!(
            "detector has {} classes, scene has {}",
            detector.profile().n_classes,
            scene.n_classes()
        )));
    }
    let cam = config.camera;
    let mut rec = Recorder {
        config,
        scene: &scene,
        detector: &detector,
        det_seed: detection_seed(seed),
        frames: Vec::new(),
        detections: Vec::new(),
        map: SemanticVoxelMap::new(scene.voxel_size(), scene.n_classes()),
        explored: ExploredMap::for_scene(&scene),
    };
    let mut log = Vec::new();
    let mut transitions = Vec::new();
    let mut ended_early = false;

    if config.steps > 0 {
        let mut start_rng = rng::stream(seed, &[TAG_START]);
        let cells: Vec<Cell> = scene.walkable_cells().collect();
        if cells.is_empty() {
            return Err(Error::NoFreeCells);
        }
        let start = cells[start_rng.random_range(0..cells.len())];
        let heading = start_rng.random_range(0.0..std::f64::consts::TAU);
        let mut pose = AgentPose::at_cell(&scene, start, heading, config.camera_height);
        let mut policy_rng = rng::stream(seed, &[TAG_POLICY, rollout]);
        let turn = cam.hfov_deg.to_radians();
        let extent = scene.extent();
        let mut visited: Vec<[f64; 2]> = Vec::new();

        rec.absorb(raycast_frame(&scene, &pose, &cam, 0)?);
        let mut taken = 1;
        while taken < config.steps {
            rec.map.resolve_instances();
            let before = total_score(&rec.map, config.score);
            let h = build_disagreement_map(&rec.map, config.score, config.map_k, extent);
            let mut choice = None;
            let goal = match config.policy {
                PolicyKind::Random => random_goal(&rec.explored, &mut policy_rng),
                PolicyKind::Frontier => frontier_goal(&rec.explored, &pose),
                PolicyKind::Greedy => {
                    greedy_goal_avoiding(&h, &rec.explored, &pose, &config.greedy, &visited)
                }
                PolicyKind::Learned => {
                    let cands =
                        sample_candidates(&rec.explored, config.candidates, &mut policy_rng);
                    let input = assemble_policy_input(&h, &rec.explored, &pose);
                    let mode = if config.learned_sampling {
                        ActionMode::Sample
                    } else {
                        ActionMode::Greedy
                    };
                    learned_choice(&config.learned, &input, &cands, mode, &mut policy_rng).map(
                        |(k, feats)| {
                            choice = Some((k, feats));
                            GoalAction { target: cands[k] }
                        },
                    )
                }
            };
            let goal = match goal {
                Ok(g) => g,
                Err(Error::ExplorationComplete) => {
                    ended_early = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            visited.push(goal.target);
            let graph = build_nav_graph(&rec.explored);
            let here = pose.cell(&scene).ok_or(Error::OutOfBounds {
                x: pose.position[0],
                y: pose.position[1],
            })?;
            let snapped = snap_goal(&graph, &goal, here)?;
            let path = astar(&graph, here, snapped)?;
            let budget = config.n_replanning.min(config.steps - taken);
            let step = taken;
            let mut n_frames = 0;
            if path.cells.len() > 1 {
                let out = follow(&scene, pose, &path.cells, budget, &cam, rec.next_frame());
                n_frames = out.frames.len();
                for obs in out.frames {
                    rec.absorb(obs);
                }
                pose = out.pose;
            }
            if n_frames == 0 {
                // Nothing to walk: look around instead.
                pose = pose.rotated(turn);
                let obs = raycast_frame(&scene, &pose, &cam, rec.next_frame())?;
                rec.absorb(obs);
                n_frames = 1;
            }
            taken += n_frames;
            rec.map.resolve_instances();
            let reward = total_score(&rec.map, config.score) - before;
            if let Some((action, features)) = choice {
                transitions.push(Transition {
                    features,
                    action,
                    reward,
                });
            }
            log.push(DecisionRecord {
                step,
                goal: goal.target,
                snapped,
                path_cost: path.cost,
                frames: n_frames,
                reward,
            });
        }
    }

    rec.map.resolve_instances();
    let dataset = reconcile_frames(config, seed, &scene, &rec.map, &rec.frames)?;
    let Recorder {
        frames,
        detections,
        map,
        explored,
        ..
    } = rec;
    Ok(Episode {
        seed,
        scene,
        frames,
        detections,
        map,
        explored,
        log,
        transitions,
        dataset,
        ended_early,
    })
}

fn reconcile_frames(
    config: &RunConfig,
    seed: u64,
    scene: &Scene,
    map: &SemanticVoxelMap,
    frames: &[FrameObservation],
) -> Result<PseudoDataset> {
    let poses: Vec<(u32, AgentPose)> = frames.iter().map(|f| (f.frame_id, f.pose)).collect();
    reconcile(
        scene,
        map,
        &poses,
        &config.camera,
        config.min_mask_pixels,
        Provenance {
            seed,
            policy: config.policy.to_string(),
            score: config.score.to_string(),
        },
    )
}

/// What `explore` saves: enough to rebuild the episode's observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub schema_version: u32,
    pub seed: u64,
    pub config: RunConfig,
    pub poses: Vec<(u32, AgentPose)>,
    pub decisions: Vec<DecisionRecord>,
    pub ended_early: bool,
}

impl EpisodeLog {
    pub fn from_json(s: &str) -> Result<Self> {
        let log: EpisodeLog = serde_json::from_str(s)?;
        if log.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema_version {}",
                log.schema_version
            )));
        }
        Ok(log)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}

/// Re-renders and re-detects the logged poses, then reconciles. Gives the
/// same dataset as the live episode.
pub fn reconcile_log(log: &EpisodeLog) -> Result<PseudoDataset> {
    let config = &log.config;
    config.validate()?;
    let scene = config.scene_for(log.seed)?;
    let detector = Detector::new(config.detector.clone())?;
    let mut rec = Recorder {
        config,
        scene: &scene,
        detector: &detector,
        det_seed: detection_seed(log.seed),
        frames: Vec::new(),
        detections: Vec::new(),
        map: SemanticVoxelMap::new(scene.voxel_size(), scene.n_classes()),
        explored: ExploredMap::for_scene(&scene),
    };
    for &(id, pose) in &log.poses {
        rec.absorb(raycast_frame(&scene, &pose, &config.camera, id)?);
    }
    rec.map.resolve_instances();
    reconcile_frames(config, log.seed, &scene, &rec.map, &rec.frames)
}

impl Episode {
    /// Trajectory log as JSON lines.
    pub fn trajectory_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.log {
            s.push_str(&serde_json::to_string(r).expect("serializable"));
            s.push('\n');
        }
        s
    }

    pub fn to_log(&self, config: &RunConfig) -> EpisodeLog {
        EpisodeLog {
            schema_version: SCHEMA_VERSION,
            seed: self.seed,
            config: config.clone(),
            poses: self.frames.iter().map(|f| (f.frame_id, f.pose)).collect(),
            decisions: self.log.clone(),
            ended_early: self.ended_early,
        }
    }

    pub fn map_json(&self) -> String {
        serde_json::to_string(&self.map.dump()).expect("serializable")
    }

    pub fn dataset_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.dataset.write_jsonl(&mut buf).expect("in-memory write");
        buf
    }

    /// Dominant ground-truth object under a mask in one of this episode's frames.
    pub fn dominant_object(&self, frame_id: u32, mask: &[crate::geometry::Pixel]) -> Option<u32> {
        dominant_object(&self.frames[frame_id as usize], mask)
    }
}

pub fn dominant_object(obs: &FrameObservation, mask: &[crate::geometry::Pixel]) -> Option<u32> {
    let mut counts = BTreeMap::<u32, usize>::new();
    for &p in mask {
        if let Some(id) = obs.hit(p).gt_id() {
            *counts.entry(id).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(id, _)| id)
}

/// Ground-truth boxes of every object showing at least `min_pixels` pixels.
pub fn ground_truth_boxes(
    scene: &Scene,
    obs: &FrameObservation,
    min_pixels: usize,
    frame_key: u32,
) -> Vec<GroundTruthBox> {
    obs.visible
        .keys()
        .filter_map(|&gt| {
            let px = obs.object_pixels(gt);
            if px.len() < min_pixels {
                return None;
            }
            Some(GroundTruthBox {
                frame_id: frame_key,
                class: scene.object(gt)?.class_id,
                bbox: BBox::enclosing(&px)?.pixel_extent(),
            })
        })
        .collect()
}

fn nan_mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

mod nan_as_null {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer};

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }

    pub fn deserialize_map<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<String, f64>, D::Error> {
        let m = BTreeMap::<String, Option<f64>>::deserialize(d)?;
        Ok(m.into_iter()
            .map(|(k, v)| (k, v.unwrap_or(f64::NAN)))
            .collect())
    }
}

/// Per-seed metrics. Undefined values are NaN (`null` in JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFragment {
    pub seed: u64,
    pub n_frames: usize,
    pub n_detections: usize,
    pub n_instances: usize,
    pub n_labels: usize,
    pub ended_early: bool,
    #[serde(deserialize_with = "nan_as_null::deserialize")]
    pub explored_fraction: f64,
    #[serde(deserialize_with = "nan_as_null::deserialize")]
    pub total_disagreement: f64,
    #[serde(deserialize_with = "nan_as_null::deserialize")]
    pub total_entropy: f64,
    /// Per-view detector class accuracy.
    #[serde(deserialize_with = "nan_as_null::deserialize")]
    pub raw_accuracy: f64,
    /// Pseudo-label class accuracy.
    #[serde(deserialize_with = "nan_as_null::deserialize")]
    pub reconciled_accuracy: f64,
    #[serde(deserialize_with = "nan_as_null::deserialize")]
    pub map50_raw: f64,
    #[serde(deserialize_with = "nan_as_null::deserialize")]
    pub map50_reconciled: f64,
    /// Holdout detector boxes classified by the raw detector.
    #[serde(deserialize_with = "nan_as_null::deserialize")]
    pub map50_holdout_detector: f64,
    /// Holdout detector boxes classified by the fine-tuned head.
    #[serde(deserialize_with = "nan_as_null::deserialize")]
    pub map50_holdout_head: f64,
    #[serde(deserialize_with = "nan_as_null::deserialize")]
    pub head_accuracy_untrained: f64,
    #[serde(deserialize_with = "nan_as_null::deserialize")]
    pub head_accuracy_raw: f64,
    #[serde(deserialize_with = "nan_as_null::deserialize")]
    pub head_accuracy: f64,
}

/// Training samples from reconciled pseudo-labels.
pub fn reconciled_samples(ep: &Episode, detector: &Detector) -> Vec<TrainSample> {
    let seed = detection_seed(ep.seed);
    ep.dataset
        .labels()
        .map(|l| TrainSample {
            feature: detector.region_feature(
                &ep.scene,
                &ep.frames[l.frame_id as usize],
                &l.mask,
                seed,
            ),
            label: l.class,
            soft: l.lambda_bar.clone(),
            u: l.u,
            frame_id: l.frame_id,
        })
        .collect()
}

/// Training samples from per-view detections; no cross-view association.
pub fn raw_samples(ep: &Episode) -> Vec<TrainSample> {
    ep.detections
        .iter()
        .enumerate()
        .map(|(k, d)| TrainSample {
            feature: d.feature.clone(),
            label: d.class,
            soft: softmax(&d.logits),
            u: u32::MAX - k as u32,
            frame_id: d.frame_id,
        })
        .collect()
}

/// Rebuilds training samples for a saved dataset by regenerating its scene
/// from `config` and re-rendering each frame from the stored pose. With
/// `raw`, samples come from fresh detections instead of the pseudo-labels.
pub fn dataset_samples(
    config: &RunConfig,
    dataset: &PseudoDataset,
    raw: bool,
) -> Result<Vec<TrainSample>> {
    let seed = dataset.provenance.seed;
    let scene = config.scene_for(seed)?;
    let detector = Detector::new(config.detector.clone())?;
    let det_seed = detection_seed(seed);
    let mut out = Vec::new();
    let mut k = 0u32;
    for f in &dataset.frames {
        let obs = raycast_frame(&scene, &f.pose, &dataset.camera, f.frame_id)?;
        if raw {
            for d in detector.detect(&scene, &obs, det_seed) {
                if d.mask.len() < config.min_mask_pixels {
                    continue;
                }
                out.push(TrainSample {
                    soft: softmax(&d.logits),
                    feature: d.feature,
                    label: d.class,
                    u: u32::MAX - k,
                    frame_id: d.frame_id,
                });
                k += 1;
            }
        } else {
            for l in &f.labels {
                out.push(TrainSample {
                    feature: detector.region_feature(&scene, &obs, &l.mask, det_seed),
                    label: l.class,
                    soft: l.lambda_bar.clone(),
                    u: l.u,
                    frame_id: l.frame_id,
                });
            }
        }
    }
    Ok(out)
}

/// Frames from unseen scenes: head samples `(feature, class)`, detector
/// boxes and ground-truth boxes.
pub struct Holdout {
    pub samples: Vec<(Vec<f64>, u32)>,
    pub detections: Vec<(u32, Detection)>,
    pub ground_truth: Vec<GroundTruthBox>,
}

pub fn build_holdout(config: &RunConfig, seed: u64, detector: &Detector) -> Result<Holdout> {
    let n_frames = (config.eval.holdout_fraction * config.steps as f64).ceil() as usize;
    let n_scenes = config.eval.holdout_scenes.max(1);
    let mut out = Holdout {
        samples: Vec::new(),
        detections: Vec::new(),
        ground_truth: Vec::new(),
    };
    for s in 0..n_scenes {
        let scene_seed = rng::derive(seed, &[TAG_HOLDOUT, s as u64]);
        let scene = config.scene_for(scene_seed)?;
        let det_seed = rng::derive(scene_seed, &[TAG_DETECT]);
        let cells: Vec<Cell> = scene.walkable_cells().collect();
        let mut r = rng::stream(scene_seed, &[TAG_START]);
        let per_scene = n_frames / n_scenes + usize::from(s < n_frames % n_scenes);
        for f in 0..per_scene {
            let c = cells[r.random_range(0..cells.len())];
            let heading = r.random_range(0.0..std::f64::consts::TAU);
            let pose = AgentPose::at_cell(&scene, c, heading, config.camera_height);
            let obs = raycast_frame(&scene, &pose, &config.camera, f as u32)?;
            let key = (s * 1_000_000 + f) as u32;
            for gt in ground_truth_boxes(&scene, &obs, config.min_mask_pixels, key) {
                out.ground_truth.push(gt);
            }
            for &gt in obs.visible.keys() {
                if obs.object_pixels(gt).len() < config.min_mask_pixels {
                    continue;
                }
                let class = scene.object(gt).map(|o| o.class_id).unwrap_or(0);
                out.samples.push((
                    detector.object_feature(&scene, gt, f as u32, det_seed),
                    class,
                ));
            }
            for d in detector.detect(&scene, &obs, det_seed) {
                if d.mask.len() >= config.min_mask_pixels {
                    out.detections.push((key, d));
                }
            }
        }
    }
    Ok(out)
}

fn head_predictions(params: &HeadParams, dets: &[(u32, Detection)]) -> Result<Vec<Prediction>> {
    dets.iter()
        .map(|(key, d)| {
            let (logits, _) = head::forward(params, &d.feature)?;
            let p = softmax(&logits);
            let class = crate::detector::argmax(&p);
            Ok(Prediction {
                frame_id: *key,
                class: class as u32,
                score: p[class],
                bbox: d.bbox.pixel_extent(),
            })
        })
        .collect()
}

fn map_or_nan(preds: &[Prediction], gts: &[GroundTruthBox], thr: f64) -> f64 {
    evaluate_map(preds, gts, thr)
        .map(|r| r.map)
        .unwrap_or(f64::NAN)
}

/// Trains a head from `init` or returns `init` unchanged when there is nothing to learn from.
pub fn train_or_keep(
    init: &HeadParams,
    samples: &[TrainSample],
    hyper: &HeadHyper,
    seed: u64,
) -> Result<HeadParams> {
    if samples.is_empty() {
        return Ok(init.clone());
    }
    Ok(head::train(init, samples, hyper, seed)?.0)
}

/// Initial head weights for a seed.
pub fn head_init(config: &RunConfig, detector: &Detector, seed: u64) -> HeadParams {
    let p = detector.profile();
    let ft = &config.finetune;
    HeadParams::init(
        p.n_classes,
        p.feature_dim,
        ft.proj_dim,
        ft.init_scale,
        rng::derive(seed, &[TAG_HEAD]),
    )
}

/// Output of fine-tuning on a saved dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRun {
    pub schema_version: u32,
    pub seed: u64,
    pub raw: bool,
    pub hyper: HeadHyper,
    pub n_samples: usize,
    #[serde(deserialize_with = "nan_as_null::deserialize")]
    pub holdout_accuracy_untrained: f64,
    #[serde(deserialize_with = "nan_as_null::deserialize")]
    pub holdout_accuracy: f64,
    pub params: HeadParams,
}

/// Trains a head on a saved dataset and scores it on the holdout frames of
/// the dataset's episode seed. `seed` drives initialisation and shuffling.
pub fn finetune_dataset(
    config: &RunConfig,
    dataset: &PseudoDataset,
    raw: bool,
    seed: u64,
) -> Result<(FinetuneRun, Vec<head::EpochLog>)> {
    config.validate()?;
    let detector = Detector::new(config.detector.clone())?;
    let samples = dataset_samples(config, dataset, raw)?;
    let init = head_init(config, &detector, seed);
    let hyper = config.finetune.hyper;
    let (params, curve) = head::train(&init, &samples, &hyper, rng::derive(seed, &[TAG_HEAD, 1]))?;
    let holdout = build_holdout(config, dataset.provenance.seed, &detector)?;
    let acc = |p: &HeadParams| {
        evaluate_head(p, &holdout.samples)
            .map(|e| e.accuracy)
            .unwrap_or(f64::NAN)
    };
    let run = FinetuneRun {
        schema_version: SCHEMA_VERSION,
        seed,
        raw,
        hyper,
        n_samples: samples.len(),
        holdout_accuracy_untrained: acc(&init),
        holdout_accuracy: acc(&params),
        params,
    };
    Ok((run, curve))
}

pub fn evaluate_episode(config: &RunConfig, ep: &Episode) -> Result<MetricsFragment> {
    let detector = Detector::new(config.detector.clone())?;
    let thr = config.eval.iou_threshold;
    let class_of = |gt: u32| ep.scene.object(gt).map(|o| o.class_id);

    let raw_accuracy = nan_mean(
        ep.detections
            .iter()
            .map(|d| f64::from(class_of(d.hidden_gt_id) == Some(d.class))),
    );
    let reconciled_accuracy = nan_mean(ep.dataset.labels().map(|l| {
        let gt = ep.dominant_object(l.frame_id, &l.mask);
        f64::from(gt.and_then(class_of) == Some(l.class))
    }));

    let mut gts = Vec::new();
    for obs in &ep.frames {
        gts.extend(ground_truth_boxes(
            &ep.scene,
            obs,
            config.min_mask_pixels,
            obs.frame_id,
        ));
    }
    let raw_preds: Vec<Prediction> = ep
        .detections
        .iter()
        .map(|d| Prediction {
            frame_id: d.frame_id,
            class: d.class,
            score: d.score(),
            bbox: d.bbox.pixel_extent(),
        })
        .collect();
    let rec_preds: Vec<Prediction> = ep
        .dataset
        .labels()
        .map(|l| Prediction {
            frame_id: l.frame_id,
            class: l.class,
            score: l.lambda_bar.iter().copied().fold(0.0, f64::max),
            bbox: l.bbox.pixel_extent(),
        })
        .collect();

    let ft = &config.finetune;
    let init = head_init(config, &detector, ep.seed);
    let train_seed = rng::derive(ep.seed, &[TAG_HEAD, 1]);
    let reconciled = train_or_keep(
        &init,
        &reconciled_samples(ep, &detector),
        &ft.hyper,
        train_seed,
    )?;
    let raw = train_or_keep(&init, &raw_samples(ep), &ft.hyper, train_seed)?;

    let holdout = build_holdout(config, ep.seed, &detector)?;
    let acc = |p: &HeadParams| {
        evaluate_head(p, &holdout.samples)
            .map(|e| e.accuracy)
            .unwrap_or(f64::NAN)
    };
    let holdout_det: Vec<Prediction> = holdout
        .detections
        .iter()
        .map(|(key, d)| Prediction {
            frame_id: *key,
            class: d.class,
            score: d.score(),
            bbox: d.bbox.pixel_extent(),
        })
        .collect();

    let walkable = ep.scene.walkable_cells().count().max(1);
    Ok(MetricsFragment {
        seed: ep.seed,
        n_frames: ep.frames.len(),
        n_detections: ep.detections.len(),
        n_instances: ep.map.n_instances(),
        n_labels: ep.dataset.n_labels(),
        ended_early: ep.ended_early,
        explored_fraction: ep.explored.free_cells().count() as f64 / walkable as f64,
        total_disagreement: total_score(&ep.map, config.score),
        total_entropy: total_score(&ep.map, ScoreKind::Entropy),
        raw_accuracy,
        reconciled_accuracy,
        map50_raw: map_or_nan(&raw_preds, &gts, thr),
        map50_reconciled: map_or_nan(&rec_preds, &gts, thr),
        map50_holdout_detector: map_or_nan(&holdout_det, &holdout.ground_truth, thr),
        map50_holdout_head: map_or_nan(
            &head_predictions(&reconciled, &holdout.detections)?,
            &holdout.ground_truth,
            thr,
        ),
        head_accuracy_untrained: acc(&init),
        head_accuracy_raw: acc(&raw),
        head_accuracy: acc(&reconciled),
    })
}

/// Episode plus its metrics.
pub fn run_pipeline(config: &RunConfig, seed: u64) -> Result<(Episode, MetricsFragment)> {
    let ep = run_episode(config, seed)?;
    let m = evaluate_episode(config, &ep)?;
    Ok((ep, m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    /// Sorted by seed.
    pub per_seed: Vec<MetricsFragment>,
    /// Mean over seeds of every numeric field, NaNs skipped.
    #[serde(deserialize_with = "nan_as_null::deserialize_map")]
    pub mean: BTreeMap<String, f64>,
    /// Median over seeds (average of the two middle values for even counts).
    #[serde(deserialize_with = "nan_as_null::deserialize_map")]
    pub median: BTreeMap<String, f64>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn numeric_fields(f: &MetricsFragment) -> Vec<(String, f64)> {
    let v = serde_json::to_value(f).expect("serializable");
    let obj = v.as_object().expect("struct");
    let mut out = Vec::new();
    for (k, x) in obj {
        if k == "seed" {
            continue;
        }
        let val = match x {
            serde_json::Value::Number(n) => n.as_f64().unwrap_or(f64::NAN),
            serde_json::Value::Bool(b) => f64::from(u8::from(*b)),
            _ => f64::NAN,
        };
        out.push((k.clone(), val));
    }
    out
}

pub fn report(fragments: &[MetricsFragment]) -> Result<MetricsReport> {
    if fragments.is_empty() {
        return Err(Error::Empty("metric fragments"));
    }
    let mut per_seed = fragments.to_vec();
    per_seed.sort_by_key(|f| f.seed);
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for f in &per_seed {
        for (k, v) in numeric_fields(f) {
            columns.entry(k).or_default().push(v);
        }
    }
    let mean = columns
        .iter()
        .map(|(k, v)| {
            (
                k.clone(),
                nan_mean(v.iter().copied().filter(|x| x.is_finite())),
            )
        })
        .collect();
    let median = columns
        .iter()
        .map(|(k, v)| (k.clone(), median(v)))
        .collect();
    Ok(MetricsReport {
        schema_version: SCHEMA_VERSION,
        per_seed,
        mean,
        median,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// One row per seed plus `mean` and `median` rows.
    pub fn to_csv(&self) -> String {
        let keys: Vec<String> = self.mean.keys().cloned().collect();
        let mut s = format!("schema_version={SCHEMA_VERSION}\nseed,{}\n", keys.join(","));
        let fmt = |x: f64| {
            if x.is_finite() {
                format!("{x}")
            } else {
                String::new()
            }
        };
        for f in &self.per_seed {
            let vals: BTreeMap<String, f64> = numeric_fields(f).into_iter().collect();
            let row: Vec<String> = keys.iter().map(|k| fmt(vals[k])).collect();
            s.push_str(&format!("{},{}\n", f.seed, row.join(",")));
        }
        for (name, m) in [("mean", &self.mean), ("median", &self.median)] {
            let row: Vec<String> = keys.iter().map(|k| fmt(m[k])).collect();
            s.push_str(&format!("{name},{}\n", row.join(",")));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.json"), self.to_json())?;
        std::fs::write(dir.join("metrics.csv"), self.to_csv())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Score,
    Alpha,
    Policy,
}

impl AblationAxis {
    pub fn default_values(self) -> Vec<String> {
        match self {
            AblationAxis::Score => ScoreKind::ALL.iter().map(|k| k.to_string()).collect(),
            AblationAxis::Alpha => ["0", "0.1", "0.7", "1.0"].map(String::from).to_vec(),
            AblationAxis::Policy => ["random", "frontier", "greedy", "learned"]
                .map(String::from)
                .to_vec(),
        }
    }

    pub fn apply(self, config: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut c = config.clone();
        match self {
            AblationAxis::Score => c.score = value.parse()?,
            AblationAxis::Alpha => {
                c.finetune.hyper.alpha = value
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad alpha {value:?}")))?
            }
            AblationAxis::Policy => c.policy = value.parse()?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::Score => "score",
            AblationAxis::Alpha => "alpha",
            AblationAxis::Policy => "policy",
        })
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "score" => Ok(AblationAxis::Score),
            "alpha" => Ok(AblationAxis::Alpha),
            "policy" => Ok(AblationAxis::Policy),
            other => Err(Error::InvalidConfig(format!(
                "unknown ablation axis {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub report: Option<MetricsReport>,
    /// `seed: message` for every failed cell.
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub schema_version: u32,
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

/// One full pipeline per `(value, seed)`, run in parallel; rows keep the
/// order of `values`.
pub fn ablate(config: &RunConfig, axis: AblationAxis, values: &[String]) -> Result<AblationTable> {
    if values.is_empty() {
        return Err(Error::Empty("ablation values"));
    }
    let cells: Vec<(usize, u64)> = (0..values.len())
        .flat_map(|v| config.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<(usize, u64, Result<MetricsFragment>)> = cells
        .par_iter()
        .map(|&(v, seed)| {
            let r = axis
                .apply(config, &values[v])
                .and_then(|c| run_pipeline(&c, seed).map(|(_, m)| m));
            (v, seed, r)
        })
        .collect();
    let mut rows = Vec::with_capacity(values.len());
    for (v, value) in values.iter().enumerate() {
        let mut ok = Vec::new();
        let mut failures = Vec::new();
        for (_, seed, r) in results.iter().filter(|(i, _, _)| *i == v) {
            match r {
                Ok(m) => ok.push(m.clone()),
                Err(e) => failures.push(format!("{seed}: {e}")),
            }
        }
        rows.push(AblationRow {
            value: value.clone(),
            report: report(&ok).ok(),
            failures,
        });
    }
    Ok(AblationTable {
        schema_version: SCHEMA_VERSION,
        axis,
        rows,
    })
}

/// Columns shown in ablation tables.
pub const TABLE_COLUMNS: [&str; 8] = [
    "map50_raw",
    "map50_reconciled",
    "map50_holdout_head",
    "head_accuracy",
    "raw_accuracy",
    "reconciled_accuracy",
    "total_entropy",
    "explored_fraction",
];

impl AblationTable {
    /// Mean of the headline metrics per value; failed rows are marked.
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "schema_version={SCHEMA_VERSION}\n{},{},n_ok,n_failed\n",
            self.axis,
            TABLE_COLUMNS.join(",")
        );
        for row in &self.rows {
            let cols: Vec<String> = TABLE_COLUMNS
                .iter()
                .map(|k| {
                    row.report
                        .as_ref()
                        .and_then(|r| r.mean.get(*k))
                        .filter(|x| x.is_finite())
                        .map(|x| format!("{x:.4}"))
                        .unwrap_or_else(|| "FAILED".into())
                })
                .collect();
            let n_ok = row.report.as_ref().map_or(0, |r| r.per_seed.len());
            s.push_str(&format!(
                "{},{},{},{}\n",
                row.value,
                cols.join(","),
                n_ok,
                row.failures.len()
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyTraining {
    /// Scenes visited over the whole run.
    pub scenes: usize,
    /// Scenes per update.
    pub scenes_per_batch: usize,
    /// Rollouts per scene; their per-step mean return is the baseline.
    pub rollouts: usize,
    pub lr: f64,
    /// Step budget of training episodes.
    pub steps: usize,
}

impl Default for PolicyTraining {
    fn default() -> Self {
        PolicyTraining {
            scenes: 60,
            scenes_per_batch: 3,
            rollouts: 4,
            lr: 0.01,
            steps: 100,
        }
    }
}

/// REINFORCE over whole episodes, sampling actions. Each update draws
/// `scenes_per_batch` fresh scenes and `rollouts` episodes in each; the
/// baseline is the per-step mean return of the rollouts sharing a scene.
/// Returns the parameters and the mean return of each update.
pub fn train_policy(
    config: &RunConfig,
    init: &LearnedPolicyParams,
    training: &PolicyTraining,
    seed: u64,
) -> Result<(LearnedPolicyParams, Vec<f64>)> {
    if training.rollouts < 2 || training.scenes_per_batch == 0 {
        return Err(Error::InvalidConfig(
            "policy training needs ≥ 2 rollouts and ≥ 1 scene per batch".into(),
        ));
    }
    let mut params = init.clone();
    let mut curve = Vec::new();
    let mut done = 0;
    while done < training.scenes {
        let n = training.scenes_per_batch.min(training.scenes - done);
        let mut c = config.clone();
        c.policy = PolicyKind::Learned;
        c.learned = params.clone();
        c.learned_sampling = true;
        c.steps = training.steps;
        let jobs: Vec<(usize, u64)> = (done..done + n)
            .flat_map(|s| (0..training.rollouts as u64).map(move |r| (s, r)))
            .collect();
        let trajs: Vec<Vec<Transition>> = jobs
            .par_iter()
            .map(|&(s, r)| {
                run_rollout(&c, rng::derive(seed, &[TAG_TRAIN, s as u64]), r)
                    .map(|ep| ep.transitions)
            })
            .collect::<Result<_>>()?;
        let mut grad = [0.0; crate::policy::N_FEATURES];
        for group in trajs.chunks(training.rollouts) {
            if group.iter().all(|t| t.is_empty()) {
                continue;
            }
            let g = policy_gradient(&params, group, 0.99, Baseline::PerStepMean)?;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        params = apply_gradient(&params, &grad, training.lr);
        let ret = nan_mean(
            trajs
                .iter()
                .map(|t| t.iter().map(|x| x.reward).sum::<f64>()),
        );
        curve.push(ret);
        log::info!("policy update {}: mean return {ret:.4}", curve.len());
        done += n;
    }
    Ok((params, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            scene: SceneSpec::Generate(SceneGenConfig {
                dims: [48, 48, 16],
                n_objects: 4,
                room_grid: [1, 1],
                footprint: [2, 4],
                height: [3, 8],
                ..SceneGenConfig::default()
            }),
            camera: CameraModel {
                width: 24,
                height: 24,
                ..CameraModel::default()
            },
            camera_height: 0.3,
            steps: 60,
            n_replanning: 10,
            finetune: FinetuneConfig {
                hyper: HeadHyper {
                    lr: 0.05,
                    epochs: 3,
                    ..HeadHyper::default()
                },
                ..FinetuneConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_steps_is_empty() {
        let c = RunConfig {
            steps: 0,
            ..small()
        };
        let ep = run_episode(&c, 1).unwrap();
        assert!(ep.frames.is_empty() && ep.log.is_empty() && ep.dataset.frames.is_empty());
        assert_eq!(ep.map.n_instances(), 0);
    }

    #[test]
    fn episodes_are_deterministic() {
        let c = small();
        let a = run_episode(&c, 3).unwrap();
        let b = run_episode(&c, 3).unwrap();
        assert_eq!(a.trajectory_jsonl(), b.trajectory_jsonl());
        assert_eq!(a.map_json(), b.map_json());
        assert_eq!(a.dataset_jsonl(), b.dataset_jsonl());
        assert_eq!(a.frames.len(), c.steps);
    }

    #[test]
    fn every_policy_runs() {
        for p in ["random", "frontier", "greedy", "learned"] {
            let c = RunConfig {
                policy: p.parse().unwrap(),
                ..small()
            };
            let ep = run_episode(&c, 2).unwrap();
            assert!(ep.frames.len() <= c.steps, "{p}");
            assert!(!ep.log.is_empty(), "{p}");
            if p == "learned" {
                assert_eq!(ep.transitions.len(), ep.log.len());
            }
        }
    }

    #[test]
    fn saved_dataset_rebuilds_the_same_samples() {
        let c = small();
        let ep = run_episode(&c, 5).unwrap();
        let det = Detector::new(c.detector.clone()).unwrap();
        let bytes = ep.dataset_jsonl();
        let ds = PseudoDataset::read_jsonl(std::io::Cursor::new(bytes)).unwrap();
        let a = dataset_samples(&c, &ds, false).unwrap();
        let b = reconciled_samples(&ep, &det);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.u, y.u);
            assert_eq!(x.label, y.label);
            assert_eq!(x.soft, y.soft, "soft");
            assert_eq!(x.feature, y.feature, "feature");
        }
        let raw = dataset_samples(&c, &ds, true).unwrap();
        assert_eq!(raw.len(), ep.detections.len());
        assert!(raw
            .iter()
            .zip(&ep.detections)
            .all(|(s, d)| s.feature == d.feature));
    }

    #[test]
    fn logged_episode_reconciles_identically() {
        let c = small();
        let ep = run_episode(&c, 3).unwrap();
        let log = EpisodeLog::from_json(&ep.to_log(&c).to_json()).unwrap();
        assert_eq!(reconcile_log(&log).unwrap(), ep.dataset);
    }

    #[test]
    fn finetune_from_saved_dataset_matches_pipeline() {
        let c = small();
        let (ep, m) = run_pipeline(&c, 2).unwrap();
        let (run, curve) = finetune_dataset(&c, &ep.dataset, false, 2).unwrap();
        assert_eq!(curve.len(), c.finetune.hyper.epochs);
        assert_eq!(
            run.holdout_accuracy_untrained.to_bits(),
            m.head_accuracy_untrained.to_bits()
        );
        assert_eq!(run.holdout_accuracy.to_bits(), m.head_accuracy.to_bits());
    }

    #[test]
    fn config_json_round_trip() {
        let c = RunConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&s).unwrap(), c);
        let partial = r#"{"policy": "greedy", "steps": 10, "seeds": [1, 2]}"#;
        let p = RunConfig::from_json(partial).unwrap();
        assert_eq!(
            (p.policy, p.steps, p.seeds.clone()),
            (PolicyKind::Greedy, 10, vec![1, 2])
        );
        assert!(RunConfig::from_json(r#"{"stepz": 3}"#).is_err());
        let bad_iou = r#"{"eval": {"iou_threshold": 1.5}}"#;
        assert!(RunConfig::from_json(bad_iou).is_err());
    }

    fn fragment(seed: u64, v: f64) -> MetricsFragment {
        MetricsFragment {
            seed,
            n_frames: 1,
            n_detections: 1,
            n_instances: 1,
            n_labels: 1,
            ended_early: false,
            explored_fraction: v,
            total_disagreement: v,
            total_entropy: v,
            raw_accuracy: v,
            reconciled_accuracy: v,
            map50_raw: v,
            map50_reconciled: v,
            map50_holdout_detector: v,
            map50_holdout_head: f64::NAN,
            head_accuracy_untrained: v,
            head_accuracy_raw: v,
            head_accuracy: v,
        }
    }

    #[test]
    fn report_aggregates() {
        let one = report(&[fragment(0, 0.4)]).unwrap();
        assert_eq!(one.mean["raw_accuracy"], 0.4);
        assert_eq!(one.median["raw_accuracy"], 0.4);
        let two = report(&[fragment(1, 0.6), fragment(0, 0.4)]).unwrap();
        assert!((two.mean["raw_accuracy"] - 0.5).abs() < 1e-15);
        assert_eq!(two.per_seed[0].seed, 0);
        assert!(two.mean["map50_holdout_head"].is_nan());
        assert!(report(&[]).is_err());
        let json = two.to_json();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.per_seed[1].raw_accuracy, 0.6);
        assert!(two.to_csv().lines().count() == 6);
    }

    #[test]
    fn ablation_shapes() {
        let c = RunConfig {
            steps: 20,
            seeds: vec![4],
            ..small()
        };
        let t = ablate(&c, AblationAxis::Policy, &["random".into()]).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(
            AblationAxis::Score.default_values(),
            vec!["entropy", "cos", "euc", "count"]
        );
        let twice = ablate(&c, AblationAxis::Alpha, &["0.7".into(), "0.7".into()]).unwrap();
        assert_eq!(twice.rows[0].report, twice.rows[1].report);
        let bad = ablate(&c, AblationAxis::Score, &["nope".into()]).unwrap();
        assert!(bad.rows[0].report.is_none() && bad.rows[0].failures.len() == 1);
        assert!(bad.to_csv().contains("FAILED"));
        assert!(ablate(&c, AblationAxis::Score, &[]).is_err());
    }
}
