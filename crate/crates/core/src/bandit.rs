//! A one-decision world for checking that the learned policy picks up the
//! disagreement reward: objects of confusable classes on the left half,
//! reliably detected ones on the right, agent in the doorway between them.

use rayon::prelude::*;

use crate::detector::{Detector, DetectorProfile, ViewNoise};
use crate::disagreement::{assemble_policy_input, build_disagreement_map, total_score, ScoreKind};
use crate::error::Result;
use crate::geometry::Voxel;
use crate::policy::{
    learned_choice, reinforce_update, sample_candidates, ActionMode, Baseline, ExploredMap,
    Features, LearnedPolicyParams, Transition,
};
use crate::rng;
use crate::scene::{Scene, SceneBuilder};
use crate::sensor::{raycast_frame, AgentPose, CameraModel};
use crate::voxel_map::SemanticVoxelMap;

#[derive(Debug, Clone)]
pub struct BanditWorld {
    pub scene: Scene,
    pub detector: Detector,
    pub camera: CameraModel,
    pub camera_height: f64,
    pub candidates: usize,
    pub map_k: usize,
    /// Frames taken on the spot at the start and after the move.
    pub looks: usize,
}

const CONFUSABLE: [(usize, usize); 2] = [(2, 5), (3, 4)];

impl BanditWorld {
    pub fn new() -> Result<Self> {
        let mut b = SceneBuilder::new([72, 36, 16], 0.05, 8).seed(0xBA);
        // Dividing wall with a doorway; the agent starts in the doorway.
        b.wall_box(Voxel(35, 0, 0), Voxel(36, 35, 15));
        b.clear_box(Voxel(35, 12, 1), Voxel(36, 23, 15));
        // Corners, out of the line of sight through the doorway.
        let left = [(6, 3, 2), (6, 28, 5), (24, 3, 3), (24, 28, 4)];
        let right = [(44, 3, 0), (44, 28, 6), (62, 3, 1), (62, 28, 7)];
        for &(x, y, class) in left.iter().chain(&right) {
            b.box_object(class, Voxel(x, y, 1), Voxel(x + 3, y + 3, 8));
        }
        let scene = b.build()?;
        // Sharp logits and no view noise: disagreement comes from class
        // confusion alone.
        let detector = Detector::new(DetectorProfile {
            kappa: 8.0,
            view_noise: ViewNoise {
                dist_coeff: 0.0,
                frac_coeff: 0.0,
            },
            ..DetectorProfile::paired(8, &CONFUSABLE, 0.5)
        })?;
        Ok(BanditWorld {
            scene,
            detector,
            // Short range: each half is only seen well from inside it.
            camera: CameraModel {
                max_range: 1.5,
                ..CameraModel::default()
            },
            camera_height: 0.3,
            candidates: 16,
            map_k: 36,
            looks: 4,
        })
    }

    fn centre(&self) -> [f64; 2] {
        let e = self.scene.extent();
        [0.5 * e[0], 0.5 * e[1]]
    }

    /// True for metric points on the confusable half.
    pub fn is_left(&self, p: [f64; 2]) -> bool {
        p[0] < self.centre()[0]
    }

    pub fn look(
        &self,
        pos: [f64; 2],
        heading0: f64,
        first_frame: u32,
        det_seed: u64,
        map: &mut SemanticVoxelMap,
        explored: &mut ExploredMap,
    ) -> Result<()> {
        let step = std::f64::consts::TAU / self.looks as f64;
        for k in 0..self.looks {
            let pose = AgentPose::new(pos, heading0 + step * k as f64, self.camera_height);
            let obs = raycast_frame(&self.scene, &pose, &self.camera, first_frame + k as u32)?;
            explored.update(&obs);
            explored.mark_proximity(&self.scene, &pose, 0.5, obs.frame_id);
            for d in self.detector.detect(&self.scene, &obs, det_seed) {
                map.insert_detection(&d, &obs);
            }
        }
        map.resolve_instances();
        Ok(())
    }

    /// State after the opening look: candidate points and their features.
    pub fn opening(&self, seed: u64) -> Result<BanditState> {
        let det_seed = rng::derive(seed, &[1]);
        let mut map = SemanticVoxelMap::new(self.scene.voxel_size(), self.scene.n_classes());
        let mut explored = ExploredMap::for_scene(&self.scene);
        let mut r = rng::stream(seed, &[2]);
        let heading0 = rand::Rng::random_range(&mut r, 0.0..std::f64::consts::TAU);
        self.look(
            self.centre(),
            heading0,
            0,
            det_seed,
            &mut map,
            &mut explored,
        )?;
        let candidates = sample_candidates(&explored, self.candidates, &mut r);
        let h = build_disagreement_map(&map, ScoreKind::Entropy, self.map_k, self.scene.extent());
        let pose = AgentPose::new(self.centre(), heading0, self.camera_height);
        let input = assemble_policy_input(&h, &explored, &pose);
        Ok(BanditState {
            seed,
            det_seed,
            heading0,
            map,
            explored,
            input,
            candidates,
        })
    }

    /// One episode: opening look, one sampled goal, a look from there.
    pub fn episode(&self, params: &LearnedPolicyParams, seed: u64) -> Result<Transition> {
        let mut s = self.opening(seed)?;
        let mut r = rng::stream(seed, &[3]);
        let (action, features) =
            learned_choice(params, &s.input, &s.candidates, ActionMode::Sample, &mut r)?;
        let before = total_score(&s.map, ScoreKind::Entropy);
        let first = self.looks as u32;
        self.look(
            s.candidates[action],
            s.heading0,
            first,
            s.det_seed,
            &mut s.map,
            &mut s.explored,
        )?;
        let reward = total_score(&s.map, ScoreKind::Entropy) - before;
        Ok(Transition {
            features,
            action,
            reward,
        })
    }

    /// Mean probability mass the policy puts on confusable-side candidates.
    pub fn preference(&self, params: &LearnedPolicyParams, states: &[BanditState]) -> f64 {
        let total: f64 = states
            .iter()
            .map(|s| {
                let feats: Vec<Features> = s
                    .candidates
                    .iter()
                    .map(|&p| crate::policy::candidate_features(&s.input, p))
                    .collect();
                let p = crate::policy::action_probs(params, &feats);
                s.candidates
                    .iter()
                    .zip(p)
                    .filter(|(c, _)| self.is_left(**c))
                    .map(|(_, q)| q)
                    .sum::<f64>()
            })
            .sum();
        total / states.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct BanditState {
    pub seed: u64,
    pub det_seed: u64,
    pub heading0: f64,
    pub map: SemanticVoxelMap,
    pub explored: ExploredMap,
    pub input: crate::disagreement::PolicyInput,
    pub candidates: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditRun {
    pub params: LearnedPolicyParams,
    /// Preference before training and after every batch.
    pub preference: Vec<f64>,
    pub mean_reward: Vec<f64>,
}

/// REINFORCE on the bandit world. Preference is measured on `n_eval`
/// opening states whose seeds are disjoint from the training seeds.
pub fn train_bandit(
    world: &BanditWorld,
    episodes: usize,
    batch: usize,
    lr: f64,
    n_eval: usize,
    seed: u64,
) -> Result<BanditRun> {
    let eval: Vec<BanditState> = (0..n_eval as u64)
        .into_par_iter()
        .map(|k| world.opening(rng::derive(seed, &[0xE7A1, k])))
        .collect::<Result<_>>()?;
    let mut params = LearnedPolicyParams::default();
    let mut preference = vec![world.preference(&params, &eval)];
    let mut mean_reward = Vec::new();
    let batch = batch.max(1);
    let mut done = 0;
    while done < episodes {
        let n = batch.min(episodes - done);
        let trajs: Vec<Vec<Transition>> = (done..done + n)
            .into_par_iter()
            .map(|e| {
                world
                    .episode(&params, rng::derive(seed, &[0x7EA1, e as u64]))
                    .map(|t| vec![t])
            })
            .collect::<Result<_>>()?;
        mean_reward.push(trajs.iter().map(|t| t[0].reward).sum::<f64>() / n as f64);
        params = reinforce_update(&params, &trajs, 0.99, lr, Baseline::BatchMean)?;
        preference.push(world.preference(&params, &eval));
        done += n;
    }
    Ok(BanditRun {
        params,
        preference,
        mean_reward,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opening_sees_both_sides() {
        let w = BanditWorld::new().unwrap();
        let s = w.opening(5).unwrap();
        let left = s.candidates.iter().filter(|c| w.is_left(**c)).count();
        assert!(left > 0 && left < s.candidates.len());
        let uniform = w.preference(&LearnedPolicyParams::default(), &[s]);
        assert!((uniform - left as f64 / w.candidates as f64).abs() < 1e-12);
    }

    #[test]
    fn episodes_are_reproducible() {
        let w = BanditWorld::new().unwrap();
        let p = LearnedPolicyParams::default();
        assert_eq!(w.episode(&p, 9).unwrap(), w.episode(&p, 9).unwrap());
    }
}
