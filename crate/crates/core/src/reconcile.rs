//! Disagreement reconciliation: resolved map instances are raytraced back into
//! every collected frame, giving one class and soft target per instance
//! across all views.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Pixel, Voxel};
use crate::scene::Scene;
use crate::sensor::{traverse, AgentPose, CameraModel};
use crate::voxel_map::{InstanceId, SemanticVoxelMap};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_MIN_MASK_PIXELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub frame_id: u32,
    pub u: InstanceId,
    pub class: u32,
    pub lambda_bar: Vec<f64>,
    /// Sorted row-major.
    pub mask: Vec<Pixel>,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoFrame {
    pub frame_id: u32,
    pub pose: AgentPose,
    pub labels: Vec<PseudoLabel>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub policy: String,
    pub score: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoDataset {
    pub provenance: Provenance,
    pub camera: CameraModel,
    pub frames: Vec<PseudoFrame>,
}

/// Which map instance each pixel sees first. Rays stop at the first voxel
/// owned by an instance or occupied by scene geometry.
pub fn project_frame(
    scene: &Scene,
    map: &SemanticVoxelMap,
    pose: &AgentPose,
    camera: &CameraModel,
) -> BTreeMap<InstanceId, Vec<Pixel>> {
    OwnerGrid::new(scene, map).project(scene, pose, camera)
}

/// Dense copy of the voxel owners over the scene grid, for fast ray lookups.
struct OwnerGrid {
    dims: [usize; 3],
    owners: Vec<Option<InstanceId>>,
}

impl OwnerGrid {
    fn new(scene: &Scene, map: &SemanticVoxelMap) -> Self {
        let dims = scene.dims();
        let mut owners = vec![None; dims.iter().product()];
        for inst in map.instances() {
            for &v in &inst.voxels {
                if let Some(k) = Self::index(dims, v) {
                    owners[k] = Some(inst.u);
                }
            }
        }
        OwnerGrid { dims, owners }
    }

    fn index(dims: [usize; 3], v: Voxel) -> Option<usize> {
        let in_bounds = v.0 >= 0
            && v.1 >= 0
            && v.2 >= 0
            && (v.0 as usize) < dims[0]
            && (v.1 as usize) < dims[1]
            && (v.2 as usize) < dims[2];
        in_bounds.then(|| (v.2 as usize * dims[1] + v.1 as usize) * dims[0] + v.0 as usize)
    }

    fn owner(&self, v: Voxel) -> Option<InstanceId> {
        Self::index(self.dims, v).and_then(|k| self.owners[k])
    }

    fn project(
        &self,
        scene: &Scene,
        pose: &AgentPose,
        camera: &CameraModel,
    ) -> BTreeMap<InstanceId, Vec<Pixel>> {
        let vs = scene.voxel_size();
        let eye = pose.eye();
        let origin = [eye[0] / vs, eye[1] / vs, eye[2] / vs];
        let max_t = camera.max_range / vs;
        let mut out: BTreeMap<InstanceId, Vec<Pixel>> = BTreeMap::new();
        for k in 0..camera.n_rays() {
            let p = camera.pixel(k);
            let dir = camera.direction(pose.heading, p);
            let hit = traverse(scene.dims(), origin, dir, max_t, |v, _| {
                if let Some(u) = self.owner(v) {
                    Some(Some(u))
                } else if scene.is_solid(v) {
                    Some(None)
                } else {
                    None
                }
            });
            if let Some((Some(u), _, _)) = hit {
                out.entry(u).or_default().push(p);
            }
        }
        out
    }
}

/// Occlusion-respecting mask and box of instance `u` seen from `pose`.
pub fn project_instance(
    scene: &Scene,
    map: &SemanticVoxelMap,
    u: InstanceId,
    pose: &AgentPose,
    camera: &CameraModel,
) -> Option<(Vec<Pixel>, BBox)> {
    let mask = project_frame(scene, map, pose, camera).remove(&u)?;
    let bbox = BBox::enclosing(&mask)?;
    Some((mask, bbox))
}

/// Pseudo-labels for every frame. Masks smaller than `min_mask_pixels` are
/// dropped; frames without labels are kept as background.
pub fn reconcile(
    scene: &Scene,
    map: &SemanticVoxelMap,
    frames: &[(u32, AgentPose)],
    camera: &CameraModel,
    min_mask_pixels: usize,
    provenance: Provenance,
) -> Result<PseudoDataset> {
    if map.is_dirty() {
        return Err(Error::InvalidConfig(
            "voxel map has unresolved insertions".into(),
        ));
    }
    let mut targets = BTreeMap::new();
    for inst in map.instances() {
        targets.insert(inst.u, (inst.class, map.aggregated_softmax(inst.u)?));
    }
    let grid = OwnerGrid::new(scene, map);
    let mut out = Vec::with_capacity(frames.len());
    for &(frame_id, pose) in frames {
        let mut labels = Vec::new();
        for (u, mask) in grid.project(scene, &pose, camera) {
            if mask.len() < min_mask_pixels {
                continue;
            }
            let (class, lambda_bar) = targets[&u].clone();
            let bbox = BBox::enclosing(&mask).expect("non-empty mask");
            labels.push(PseudoLabel {
                frame_id,
                u,
                class,
                lambda_bar,
                mask,
                bbox,
            });
        }
        out.push(PseudoFrame {
            frame_id,
            pose,
            labels,
        });
    }
    Ok(PseudoDataset {
        provenance,
        camera: *camera,
        frames: out,
    })
}

impl PseudoDataset {
    pub fn labels(&self) -> impl Iterator<Item = &PseudoLabel> {
        self.frames.iter().flat_map(|f| f.labels.iter())
    }

    pub fn n_labels(&self) -> usize {
        self.frames.iter().map(|f| f.labels.len()).sum()
    }

    /// One header line followed by one record per frame.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            schema_version: DATASET_SCHEMA_VERSION,
            provenance: self.provenance.clone(),
            camera: self.camera,
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for f in &self.frames {
            let rec = FrameRecord {
                frame_id: f.frame_id,
                pose: f.pose,
                labels: f
                    .labels
                    .iter()
                    .map(|l| LabelRecord {
                        u: l.u,
                        y: l.class,
                        lambda_bar: l.lambda_bar.clone(),
                        bbox: l.bbox,
                        mask: encode_rle(&l.mask, &self.camera),
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let parse_err = |line: usize, e: serde_json::Error| Error::Parse {
            line,
            column: e.column(),
            message: e.to_string(),
        };
        let (_, first) = lines.next().ok_or(Error::Empty("dataset"))?;
        let header: Header = serde_json::from_str(&first?).map_err(|e| parse_err(1, e))?;
        if header.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::Parse {
                line: 1,
                column: 0,
                message: format!("unsupported schema_version {}", header.schema_version),
            });
        }
        let mut frames = Vec::new();
        for (k, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| parse_err(k + 1, e))?;
            let labels = rec
                .labels
                .into_iter()
                .map(|l| PseudoLabel {
                    frame_id: rec.frame_id,
                    u: l.u,
                    class: l.y,
                    lambda_bar: l.lambda_bar,
                    mask: decode_rle(&l.mask, &header.camera),
                    bbox: l.bbox,
                })
                .collect();
            frames.push(PseudoFrame {
                frame_id: rec.frame_id,
                pose: rec.pose,
                labels,
            });
        }
        Ok(PseudoDataset {
            provenance: header.provenance,
            camera: header.camera,
            frames,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    provenance: Provenance,
    camera: CameraModel,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    frame_id: u32,
    pose: AgentPose,
    labels: Vec<LabelRecord>,
}

#[derive(Serialize, Deserialize)]
struct LabelRecord {
    u: InstanceId,
    y: u32,
    lambda_bar: Vec<f64>,
    bbox: BBox,
    /// `[start, length]` runs over row-major pixel indices.
    mask: Vec<[usize; 2]>,
}

pub fn encode_rle(mask: &[Pixel], camera: &CameraModel) -> Vec<[usize; 2]> {
    let mut idx: Vec<usize> = mask.iter().map(|&p| camera.ray_index(p)).collect();
    idx.sort_unstable();
    idx.dedup();
    let mut runs: Vec<[usize; 2]> = Vec::new();
    for k in idx {
        match runs.last_mut() {
            Some(r) if r[0] + r[1] == k => r[1] += 1,
            _ => runs.push([k, 1]),
        }
    }
    runs
}

pub fn decode_rle(runs: &[[usize; 2]], camera: &CameraModel) -> Vec<Pixel> {
    runs.iter()
        .flat_map(|&[s, n]| (s..s + n).map(|k| camera.pixel(k)))
        .collect()
}

/// Reference to one label: the frame and the instance it shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabelRef {
    pub frame_id: u32,
    pub u: InstanceId,
}

/// Index triplets `(anchor, positive, negative)` over `keys`: every ordered
/// pair of views of one instance from different frames, with one negative
/// drawn from another instance. At most `max` triplets are kept.
pub fn mine_triplet_indices(
    keys: &[LabelRef],
    max: usize,
    rng: &mut impl Rng,
) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (a, ka) in keys.iter().enumerate() {
        let negatives: Vec<usize> = (0..keys.len()).filter(|&n| keys[n].u != ka.u).collect();
        if negatives.is_empty() {
            continue;
        }
        for (p, kp) in keys.iter().enumerate() {
            if p == a || kp.u != ka.u || kp.frame_id == ka.frame_id {
                continue;
            }
            let n = negatives[rng.random_range(0..negatives.len())];
            out.push((a, p, n));
        }
    }
    if out.len() > max {
        out.shuffle(rng);
        out.truncate(max);
        out.sort_unstable();
    }
    out
}

pub fn mine_triplets(
    dataset: &PseudoDataset,
    batch: &[u32],
    max: usize,
    rng: &mut impl Rng,
) -> Vec<(LabelRef, LabelRef, LabelRef)> {
    let keys: Vec<LabelRef> = dataset
        .frames
        .iter()
        .filter(|f| batch.contains(&f.frame_id))
        .flat_map(|f| f.labels.iter())
        .map(|l| LabelRef {
            frame_id: l.frame_id,
            u: l.u,
        })
        .collect();
    mine_triplet_indices(&keys, max, rng)
        .into_iter()
        .map(|(a, p, n)| (keys[a], keys[p], keys[n]))
        .collect()
}
