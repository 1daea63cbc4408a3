//! Agent embodiment: pose, ray-fan camera, voxel ray traversal and kinematic steps.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Cell, Pixel, Voxel};
use crate::scene::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentPose {
    /// Metric top-down position.
    pub position: [f64; 2],
    /// Radians in `[0, 2π)`, 0 = +x (east), counter-clockwise.
    pub heading: f64,
    pub camera_height: f64,
}

impl AgentPose {
    pub fn new(position: [f64; 2], heading: f64, camera_height: f64) -> Self {
        AgentPose {
            position,
            heading: normalize_angle(heading),
            camera_height,
        }
    }

    /// Pose at the centre of a cell.
    pub fn at_cell(scene: &Scene, cell: Cell, heading: f64, camera_height: f64) -> Self {
        AgentPose::new(cell.center(scene.voxel_size()), heading, camera_height)
    }

    pub fn cell(&self, scene: &Scene) -> Option<Cell> {
        scene.cell_of(self.position)
    }

    pub fn rotated(&self, delta: f64) -> Self {
        AgentPose::new(self.position, self.heading + delta, self.camera_height)
    }

    pub fn eye(&self) -> [f64; 3] {
        [self.position[0], self.position[1], self.camera_height]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraModel {
    pub hfov_deg: f64,
    pub vfov_deg: f64,
    pub width: u32,
    pub height: u32,
    /// Metres.
    pub max_range: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel {
            hfov_deg: 90.0,
            vfov_deg: 90.0,
            width: 64,
            height: 64,
            max_range: 5.0,
        }
    }
}

impl CameraModel {
    pub fn n_rays(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn pixel(&self, ray: usize) -> Pixel {
        Pixel(ray as u32 % self.width, ray as u32 / self.width)
    }

    pub fn ray_index(&self, p: Pixel) -> usize {
        p.1 as usize * self.width as usize + p.0 as usize
    }

    /// Unit world-frame direction of the ray through pixel centre `p`.
    ///
    /// Columns grow to the right of the view, rows grow downward.
    pub fn direction(&self, heading: f64, p: Pixel) -> [f64; 3] {
        let th = (self.hfov_deg.to_radians() * 0.5).tan();
        let tv = (self.vfov_deg.to_radians() * 0.5).tan();
        let u = 2.0 * (p.0 as f64 + 0.5) / self.width as f64 - 1.0;
        let v = 2.0 * (p.1 as f64 + 0.5) / self.height as f64 - 1.0;
        let (s, c) = heading.sin_cos();
        let forward = [c, s, 0.0];
        let left = [-s, c, 0.0];
        let right_amt = u * th;
        let down_amt = v * tv;
        let d = [
            forward[0] - right_amt * left[0],
            forward[1] - right_amt * left[1],
            -down_amt,
        ];
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        [d[0] / n, d[1] / n, d[2] / n]
    }
}

/// What a single camera ray struck.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RayHit {
    Miss,
    Wall {
        voxel: Voxel,
        depth: f64,
    },
    Object {
        gt_id: u32,
        voxel: Voxel,
        depth: f64,
    },
}

impl RayHit {
    pub fn depth(&self) -> Option<f64> {
        match *self {
            RayHit::Miss => None,
            RayHit::Wall { depth, .. } | RayHit::Object { depth, .. } => Some(depth),
        }
    }

    pub fn voxel(&self) -> Option<Voxel> {
        match *self {
            RayHit::Miss => None,
            RayHit::Wall { voxel, .. } | RayHit::Object { voxel, .. } => Some(voxel),
        }
    }

    pub fn gt_id(&self) -> Option<u32> {
        match *self {
            RayHit::Object { gt_id, .. } => Some(gt_id),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CellState {
    Free,
    Obstacle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub frame_id: u32,
    pub pose: AgentPose,
    pub camera: CameraModel,
    /// One entry per ray, row-major.
    pub rays: Vec<RayHit>,
    /// Visible surface voxels per ground-truth object.
    pub visible: BTreeMap<u32, BTreeSet<Voxel>>,
    /// Top-down cells observed in this frame.
    pub explored_delta: BTreeMap<Cell, CellState>,
}

impl FrameObservation {
    pub fn depth(&self) -> impl Iterator<Item = Option<f64>> + '_ {
        self.rays.iter().map(RayHit::depth)
    }

    pub fn hit(&self, p: Pixel) -> RayHit {
        self.rays
            .get(self.camera.ray_index(p))
            .copied()
            .unwrap_or(RayHit::Miss)
    }

    /// Pixels whose rays hit the given object first.
    pub fn object_pixels(&self, gt_id: u32) -> Vec<Pixel> {
        self.rays
            .iter()
            .enumerate()
            .filter(|(_, h)| h.gt_id() == Some(gt_id))
            .map(|(k, _)| self.camera.pixel(k))
            .collect()
    }

    /// Metric point a little past the ray's recorded depth, i.e. inside the hit surface.
    pub fn surface_point(&self, p: Pixel, voxel_size: f64) -> Option<[f64; 3]> {
        let depth = self.hit(p).depth()?;
        let d = self.camera.direction(self.pose.heading, p);
        let t = depth + 1e-3 * voxel_size;
        let o = self.pose.eye();
        Some([o[0] + d[0] * t, o[1] + d[1] * t, o[2] + d[2] * t])
    }
}

/// Amanatides–Woo voxel traversal.
///
/// `origin` and `max_t` are in voxel units; `dir` need not be normalized but
/// distances returned are in units of `|dir|`. The start voxel is skipped.
/// Returns the first voxel for which `solid` returns `Some` together with its
/// entry distance. Stops when leaving `dims`.
pub fn traverse<T>(
    dims: [usize; 3],
    origin: [f64; 3],
    dir: [f64; 3],
    max_t: f64,
    mut visit: impl FnMut(Voxel, f64) -> Option<T>,
) -> Option<(T, Voxel, f64)> {
    let mut v = [
        origin[0].floor() as i64,
        origin[1].floor() as i64,
        origin[2].floor() as i64,
    ];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        if dir[a] > 0.0 {
            step[a] = 1;
            t_max[a] = (v[a] as f64 + 1.0 - origin[a]) / dir[a];
            t_delta[a] = 1.0 / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (v[a] as f64 - origin[a]) / dir[a];
            t_delta[a] = -1.0 / dir[a];
        }
    }
    loop {
        let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        let t = t_max[axis];
        if !(t <= max_t) {
            return None;
        }
        v[axis] += step[axis];
        t_max[axis] += t_delta[axis];
        if v.iter().any(|&c| c < 0) || (0..3).any(|a| v[a] as usize >= dims[a]) {
            return None;
        }
        let vox = Voxel(v[0] as i32, v[1] as i32, v[2] as i32);
        if let Some(x) = visit(vox, t) {
            return Some((x, vox, t));
        }
    }
}

/// Casts the camera's ray fan into the scene from `pose`.
pub fn raycast_frame(
    scene: &Scene,
    pose: &AgentPose,
    camera: &CameraModel,
    frame_id: u32,
) -> Result<FrameObservation> {
    let Some(agent_cell) = pose.cell(scene) else {
        return Err(Error::OutOfBounds {
            x: pose.position[0],
            y: pose.position[1],
        });
    };
    let vs = scene.voxel_size();
    let dims = scene.dims();
    let eye = pose.eye();
    let origin = [eye[0] / vs, eye[1] / vs, eye[2] / vs];
    let max_t = camera.max_range / vs;

    let mut rays = Vec::with_capacity(camera.n_rays());
    let mut visible: BTreeMap<u32, BTreeSet<Voxel>> = BTreeMap::new();
    let mut explored: BTreeMap<Cell, CellState> = BTreeMap::new();
    explored.insert(agent_cell, CellState::Free);

    for k in 0..camera.n_rays() {
        let p = camera.pixel(k);
        let dir = camera.direction(pose.heading, p);
        let mut floor_level = Vec::new();
        let hit = traverse(dims, origin, dir, max_t, |v, _| {
            if let Some(id) = scene.object_at(v) {
                Some(Some(id))
            } else if scene.is_wall(v) {
                Some(None)
            } else {
                if v.2 == 1 {
                    floor_level.push(v.column());
                }
                None
            }
        });
        for c in floor_level {
            explored.entry(c).or_insert(CellState::Free);
        }
        let ray = match hit {
            None => RayHit::Miss,
            Some((obj, voxel, t)) => {
                let depth = t * vs;
                let state = if voxel.2 == 0 {
                    CellState::Free
                } else {
                    CellState::Obstacle
                };
                let e = explored.entry(voxel.column()).or_insert(state);
                if state == CellState::Obstacle {
                    *e = CellState::Obstacle;
                }
                match obj {
                    Some(gt_id) => {
                        visible.entry(gt_id).or_default().insert(voxel);
                        RayHit::Object {
                            gt_id,
                            voxel,
                            depth,
                        }
                    }
                    None => RayHit::Wall { voxel, depth },
                }
            }
        };
        rays.push(ray);
    }

    Ok(FrameObservation {
        frame_id,
        pose: *pose,
        camera: *camera,
        rays,
        visible,
        explored_delta: explored,
    })
}

/// Default locomotion limit: one diagonal cell.
pub fn default_step_length(scene: &Scene) -> f64 {
    std::f64::consts::SQRT_2 * scene.voxel_size() * (1.0 + 1e-9)
}

/// Moves the agent to `waypoint`, facing the direction of travel.
pub fn step_agent(
    scene: &Scene,
    pose: &AgentPose,
    waypoint: [f64; 2],
    step_length: f64,
) -> Result<AgentPose> {
    let Some(cell) = scene.cell_of(waypoint) else {
        return Err(Error::OutOfBounds {
            x: waypoint[0],
            y: waypoint[1],
        });
    };
    if !scene.walkable(cell) {
        return Err(Error::NotWalkable {
            i: cell.0,
            j: cell.1,
        });
    }
    let dx = waypoint[0] - pose.position[0];
    let dy = waypoint[1] - pose.position[1];
    let distance = dx.hypot(dy);
    if distance > step_length {
        return Err(Error::StepTooLong {
            distance,
            step_length,
        });
    }
    let heading = if distance > 0.0 {
        dy.atan2(dx)
    } else {
        pose.heading
    };
    Ok(AgentPose::new(waypoint, heading, pose.camera_height))
}
