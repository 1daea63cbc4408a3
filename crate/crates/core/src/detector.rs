//! Synthetic noisy object detector.
//!
//! Per visible object the detector samples a class from the confusion row of
//! the object's true class, emits logits `κ·g·onehot(y') + N(0, s²)` where `s`
//! grows with distance and occlusion, and a feature vector centred on the
//! object's class mean plus a per-instance offset. `g` is 1 for a correct
//! sample and `confused_sharpness` otherwise: a wrong class comes out less
//! confident than a right one.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Pixel};
use crate::rng;
use crate::scene::Scene;
use crate::sensor::FrameObservation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewNoise {
    /// Noise per unit of `distance / max_range`.
    pub dist_coeff: f64,
    /// Noise per unit of `1 − visible_fraction`.
    pub frac_coeff: f64,
}

impl Default for ViewNoise {
    fn default() -> Self {
        ViewNoise {
            dist_coeff: 1.0,
            frac_coeff: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorProfile {
    pub n_classes: usize,
    /// Dense row-stochastic `C×C` matrix; row = true class.
    pub confusion: Vec<Vec<f64>>,
    pub kappa: f64,
    pub miss_rate: f64,
    pub feature_dim: usize,
    pub feature_noise_sigma: f64,
    pub view_noise: ViewNoise,
    #[serde(default = "default_confused_sharpness")]
    pub confused_sharpness: f64,
    #[serde(default = "default_instance_sigma")]
    pub instance_offset_sigma: f64,
    #[serde(default)]
    pub feature_seed: u64,
}

fn default_confused_sharpness() -> f64 {
    0.5
}

fn default_instance_sigma() -> f64 {
    0.4
}

impl Default for DetectorProfile {
    fn default() -> Self {
        DetectorProfile::paired(8, &[(0, 1), (2, 5), (3, 4), (6, 7)], 0.3)
    }
}

impl DetectorProfile {
    /// Identity confusion except the listed class pairs, which swap with probability `flip`.
    pub fn paired(n_classes: usize, pairs: &[(usize, usize)], flip: f64) -> Self {
        let mut confusion = identity(n_classes);
        for &(a, b) in pairs {
            confusion[a][a] = 1.0 - flip;
            confusion[a][b] = flip;
            confusion[b][b] = 1.0 - flip;
            confusion[b][a] = flip;
        }
        DetectorProfile {
            n_classes,
            confusion,
            kappa: 4.0,
            miss_rate: 0.15,
            feature_dim: 16,
            feature_noise_sigma: 0.6,
            view_noise: ViewNoise::default(),
            confused_sharpness: default_confused_sharpness(),
            instance_offset_sigma: default_instance_sigma(),
            feature_seed: 0,
        }
    }

    /// A perfect detector: identity confusion, no noise, no misses.
    pub fn noiseless(n_classes: usize) -> Self {
        DetectorProfile {
            confusion: identity(n_classes),
            miss_rate: 0.0,
            view_noise: ViewNoise {
                dist_coeff: 0.0,
                frac_coeff: 0.0,
            },
            ..DetectorProfile::paired(n_classes, &[], 0.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.n_classes;
        if c < 2 {
            return Err(Error::InvalidConfig("n_classes must be ≥ 2".into()));
        }
        if self.confusion.len() != c || self.confusion.iter().any(|r| r.len() != c) {
            return Err(Error::InvalidConfig(format!("confusion must be {c}×{c}")));
        }
        for (i, row) in self.confusion.iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                return Err(Error::InvalidConfig(format!(
                    "confusion row {i} has a negative or non-finite entry"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "confusion row {i} sums to {s}"
                )));
            }
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidConfig("kappa must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.miss_rate) {
            return Err(Error::InvalidConfig("miss_rate must lie in [0, 1)".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidConfig("feature_dim must be ≥ 1".into()));
        }
        if !(self.feature_noise_sigma >= 0.0
            && self.instance_offset_sigma >= 0.0
            && self.view_noise.dist_coeff >= 0.0
            && self.view_noise.frac_coeff >= 0.0
            && self.confused_sharpness > 0.0)
        {
            return Err(Error::InvalidConfig(
                "noise parameters must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame_id: u32,
    pub mask: Vec<Pixel>,
    pub bbox: BBox,
    pub class: u32,
    pub logits: Vec<f64>,
    pub feature: Vec<f64>,
    /// Evaluation only. Nothing on the mapping, policy or reconciliation
    /// paths reads this.
    pub hidden_gt_id: u32,
}

impl Detection {
    pub fn score(&self) -> f64 {
        normalized_logits(&self.logits)
            .map(|p| p.into_iter().fold(0.0, f64::max))
            .unwrap_or(0.0)
    }
}

/// Softmax.
pub fn normalized_logits(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(softmax(logits))
}

/// Softmax without the finiteness check.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Index of the maximum entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

/// A validated profile with the derived per-class feature means.
#[derive(Debug, Clone)]
pub struct Detector {
    profile: DetectorProfile,
    feature_means: Vec<Vec<f64>>,
}

impl Detector {
    pub fn new(profile: DetectorProfile) -> Result<Self> {
        profile.validate()?;
        let mut r = rng::stream(profile.feature_seed, &[0xFEA7]);
        let feature_means = (0..profile.n_classes)
            .map(|_| {
                (0..profile.feature_dim)
                    .map(|_| StandardNormal.sample(&mut r))
                    .collect()
            })
            .collect();
        Ok(Detector {
            profile,
            feature_means,
        })
    }

    pub fn profile(&self) -> &DetectorProfile {
        &self.profile
    }

    pub fn feature_means(&self) -> &[Vec<f64>] {
        &self.feature_means
    }

    /// Noise scale for an object seen at `distance` with `visible_fraction` in `[0, 1]`.
    pub fn view_noise_scale(&self, distance: f64, max_range: f64, visible_fraction: f64) -> f64 {
        let vn = self.profile.view_noise;
        vn.dist_coeff * (distance / max_range).clamp(0.0, 1.0)
            + vn.frac_coeff * (1.0 - visible_fraction.clamp(0.0, 1.0))
    }

    /// Draws one class/logit sample for an object of `true_class` under noise scale `s`.
    pub fn sample_logits(&self, true_class: usize, s: f64, rng: &mut impl Rng) -> Vec<f64> {
        let p = &self.profile;
        let u: f64 = rng.random();
        let row = &p.confusion[true_class];
        let mut acc = 0.0;
        let mut sampled = true_class;
        for (k, &q) in row.iter().enumerate() {
            acc += q;
            if u < acc {
                sampled = k;
                break;
            }
        }
        let gain = if sampled == true_class {
            1.0
        } else {
            p.confused_sharpness
        };
        (0..p.n_classes)
            .map(|k| {
                let base = if k == sampled { p.kappa * gain } else { 0.0 };
                let n: f64 = StandardNormal.sample(rng);
                base + s * n
            })
            .collect()
    }

    fn instance_offset(&self, scene_seed: u64, gt_id: u32) -> Vec<f64> {
        let mut r = rng::stream(
            self.profile.feature_seed,
            &[0x1257, scene_seed, gt_id as u64],
        );
        (0..self.profile.feature_dim)
            .map(|_| {
                let n: f64 = StandardNormal.sample(&mut r);
                self.profile.instance_offset_sigma * n
            })
            .collect()
    }

    /// Appearance feature of object `gt_id` in frame `frame_id`.
    pub fn object_feature(&self, scene: &Scene, gt_id: u32, frame_id: u32, seed: u64) -> Vec<f64> {
        let class = scene
            .object(gt_id)
            .map(|o| o.class_id as usize)
            .unwrap_or(0);
        let offset = self.instance_offset(scene.seed(), gt_id);
        let mut r = rng::stream(seed, &[frame_id as u64, gt_id as u64, 1]);
        self.feature_means[class]
            .iter()
            .zip(offset)
            .map(|(m, o)| {
                let n: f64 = StandardNormal.sample(&mut r);
                m + o + self.profile.feature_noise_sigma * n
            })
            .collect()
    }

    /// Feature of the image region under `mask`: the object covering most of
    /// the masked rays, or background noise when the region shows no object.
    pub fn region_feature(
        &self,
        scene: &Scene,
        obs: &FrameObservation,
        mask: &[Pixel],
        seed: u64,
    ) -> Vec<f64> {
        let mut counts = std::collections::BTreeMap::<u32, usize>::new();
        for &p in mask {
            if let Some(id) = obs.hit(p).gt_id() {
                *counts.entry(id).or_default() += 1;
            }
        }
        // Highest count, lowest id on ties.
        let best = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&id, _)| id);
        match best {
            Some(id) => self.object_feature(scene, id, obs.frame_id, seed),
            None => {
                let mut r = rng::stream(seed, &[obs.frame_id as u64, u64::MAX, 1]);
                (0..self.profile.feature_dim)
                    .map(|_| {
                        let n: f64 = StandardNormal.sample(&mut r);
                        self.profile.feature_noise_sigma * n
                    })
                    .collect()
            }
        }
    }

    /// Runs the detector over every object visible in `obs`.
    pub fn detect(&self, scene: &Scene, obs: &FrameObservation, seed: u64) -> Vec<Detection> {
        let eye = obs.pose.eye();
        let vs = scene.voxel_size();
        let mut out = Vec::new();
        for (&gt_id, voxels) in &obs.visible {
            let Some(obj) = scene.object(gt_id) else {
                continue;
            };
            let mut r = rng::stream(seed, &[obs.frame_id as u64, gt_id as u64, 0]);
            let miss: f64 = r.random();
            if miss < self.profile.miss_rate {
                continue;
            }
            let mask = obs.object_pixels(gt_id);
            let Some(bbox) = BBox::enclosing(&mask) else {
                continue;
            };
            let distance = voxels
                .iter()
                .map(|v| {
                    let c = [
                        (v.0 as f64 + 0.5) * vs - eye[0],
                        (v.1 as f64 + 0.5) * vs - eye[1],
                        (v.2 as f64 + 0.5) * vs - eye[2],
                    ];
                    (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
                })
                .sum::<f64>()
                / voxels.len() as f64;
            let surface = scene.surface_count(gt_id).max(1) as f64;
            let visible_fraction = (voxels.len() as f64 / (0.5 * surface)).min(1.0);
            let s = self.view_noise_scale(distance, obs.camera.max_range, visible_fraction);
            let logits = self.sample_logits(obj.class_id as usize, s, &mut r);
            let class = argmax(&logits) as u32;
            out.push(Detection {
                frame_id: obs.frame_id,
                mask,
                bbox,
                class,
                logits,
                feature: self.object_feature(scene, gt_id, obs.frame_id, seed),
                hidden_gt_id: gt_id,
            });
        }
        out
    }
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum::<f64>()
        .max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Voxel;
    use crate::scene::SceneBuilder;
    use crate::sensor::{raycast_frame, AgentPose, CameraModel};

    fn scene_with_objects() -> Scene {
        let mut b = SceneBuilder::new([60, 40, 16], 0.05, 8);
        b.box_object(2, Voxel(20, 10, 1), Voxel(23, 13, 8));
        b.box_object(6, Voxel(24, 24, 1), Voxel(27, 28, 6));
        b.build().unwrap()
    }

    fn frame(s: &Scene) -> FrameObservation {
        let pose = AgentPose::new([0.3, 1.0], 0.0, 0.4);
        raycast_frame(s, &pose, &CameraModel::default(), 3).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let u = normalized_logits(&[0.0; 5]).unwrap();
        assert!(u.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        let p = normalized_logits(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12 && (p[1] - 1.0 / 3.0).abs() < 1e-12);
        let a = normalized_logits(&[0.3, -1.0, 2.0]).unwrap();
        let b = normalized_logits(&[100.3, 99.0, 102.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(normalized_logits(&[f64::NAN, 0.0]).is_err());
        assert!(normalized_logits(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn noiseless_detector_reports_true_class() {
        let s = scene_with_objects();
        let obs = frame(&s);
        assert_eq!(obs.visible.len(), 2);
        let det = Detector::new(DetectorProfile::noiseless(8)).unwrap();
        let ds = det.detect(&s, &obs, 42);
        assert_eq!(ds.len(), 2);
        for d in &ds {
            let truth = s.object(d.hidden_gt_id).unwrap().class_id;
            assert_eq!(d.class, truth);
            assert_eq!(argmax(&d.logits) as u32, d.class);
            assert_eq!(BBox::enclosing(&d.mask), Some(d.bbox));
        }
    }

    #[test]
    fn full_miss_rate_is_empty() {
        let s = scene_with_objects();
        let obs = frame(&s);
        let det = Detector::new(DetectorProfile {
            miss_rate: 1.0 - 1e-12,
            ..DetectorProfile::default()
        })
        .unwrap();
        for seed in 0..20 {
            assert!(det.detect(&s, &obs, seed).is_empty());
        }
    }

    #[test]
    fn invalid_profiles_rejected() {
        let mut p = DetectorProfile::default();
        p.confusion[0][0] = 0.5;
        assert!(Detector::new(p).is_err());
        for p in [
            DetectorProfile {
                kappa: 0.0,
                ..DetectorProfile::default()
            },
            DetectorProfile {
                miss_rate: 1.0,
                ..DetectorProfile::default()
            },
        ] {
            assert!(Detector::new(p).is_err());
        }
    }

    #[test]
    fn pair_swap_rate_matches_confusion() {
        let mut p = DetectorProfile::paired(8, &[(2, 5)], 0.3);
        p.view_noise = ViewNoise {
            dist_coeff: 0.0,
            frac_coeff: 0.0,
        };
        let det = Detector::new(p).unwrap();
        let mut r = rng::stream(99, &[]);
        let n = 10_000;
        let swaps = (0..n)
            .filter(|_| argmax(&det.sample_logits(2, 0.0, &mut r)) == 5)
            .count();
        let rate = swaps as f64 / n as f64;
        assert!((rate - 0.3).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn detection_is_seeded() {
        let s = scene_with_objects();
        let obs = frame(&s);
        let det = Detector::new(DetectorProfile::default()).unwrap();
        assert_eq!(det.detect(&s, &obs, 5), det.detect(&s, &obs, 5));
    }

    #[test]
    fn region_feature_matches_detection_feature() {
        let s = scene_with_objects();
        let obs = frame(&s);
        let det = Detector::new(DetectorProfile::noiseless(8)).unwrap();
        for d in det.detect(&s, &obs, 8) {
            assert_eq!(det.region_feature(&s, &obs, &d.mask, 8), d.feature);
        }
    }

    #[test]
    fn entropy_rises_with_distance() {
        let det = Detector::new(DetectorProfile::default()).unwrap();
        let mut r = rng::stream(3, &[]);
        let mut prev = -1.0;
        for k in 0..=5 {
            let d = k as f64;
            let s = det.view_noise_scale(d, 5.0, 1.0);
            let n = 4000;
            let mean = (0..n)
                .map(|_| entropy(&softmax(&det.sample_logits(0, s, &mut r))))
                .sum::<f64>()
                / n as f64;
            assert!(mean >= prev - 1e-3, "distance {d}: {mean} < {prev}");
            prev = mean;
        }
    }
}
