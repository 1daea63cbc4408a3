//! Grid A* over the explored free space and waypoint following.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Cell;
use crate::policy::{ExploredMap, GoalAction};
use crate::scene::Scene;
use crate::sensor::{raycast_frame, step_agent, AgentPose, CameraModel, FrameObservation};

/// 8-connected graph over known-free cells. Diagonals never cut corners.
#[derive(Debug, Clone, PartialEq)]
pub struct NavGraph {
    nx: usize,
    ny: usize,
    cell_size: f64,
    free: Vec<bool>,
}

impl NavGraph {
    pub fn from_free(nx: usize, ny: usize, cell_size: f64, free: Vec<bool>) -> Self {
        assert_eq!(free.len(), nx * ny);
        NavGraph {
            nx,
            ny,
            cell_size,
            free,
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.0 < self.nx && c.1 < self.ny && self.free[c.1 * self.nx + c.0]
    }

    pub fn nodes(&self) -> impl Iterator<Item = Cell> + '_ {
        let nx = self.nx;
        self.free
            .iter()
            .enumerate()
            .filter(|(_, f)| **f)
            .map(move |(k, _)| Cell(k % nx, k / nx))
    }

    pub fn n_nodes(&self) -> usize {
        self.free.iter().filter(|f| **f).count()
    }

    fn free_at(&self, i: i64, j: i64) -> bool {
        i >= 0 && j >= 0 && self.contains(Cell(i as usize, j as usize))
    }

    pub fn neighbors(&self, c: Cell) -> Vec<(Cell, f64)> {
        let mut out = Vec::with_capacity(8);
        if !self.contains(c) {
            return out;
        }
        let (i, j) = (c.0 as i64, c.1 as i64);
        for dj in -1..=1i64 {
            for di in -1..=1i64 {
                if (di == 0 && dj == 0) || !self.free_at(i + di, j + dj) {
                    continue;
                }
                let diagonal = di != 0 && dj != 0;
                if diagonal && !(self.free_at(i + di, j) && self.free_at(i, j + dj)) {
                    continue;
                }
                let w = if diagonal {
                    std::f64::consts::SQRT_2
                } else {
                    1.0
                };
                out.push((Cell((i + di) as usize, (j + dj) as usize), w));
            }
        }
        out
    }

    /// Undirected edge count.
    pub fn n_edges(&self) -> usize {
        self.nodes().map(|c| self.neighbors(c).len()).sum::<usize>() / 2
    }

    /// Nodes reachable from `start`, in BFS order.
    pub fn component(&self, start: Cell) -> Vec<Cell> {
        let mut seen = vec![false; self.nx * self.ny];
        let mut out = Vec::new();
        if !self.contains(start) {
            return out;
        }
        seen[start.1 * self.nx + start.0] = true;
        let mut q = VecDeque::from([start]);
        while let Some(c) = q.pop_front() {
            out.push(c);
            for (n, _) in self.neighbors(c) {
                let k = n.1 * self.nx + n.0;
                if !seen[k] {
                    seen[k] = true;
                    q.push_back(n);
                }
            }
        }
        out
    }
}

pub fn build_nav_graph(explored: &ExploredMap) -> NavGraph {
    let (nx, ny) = explored.size();
    let mut free = vec![false; nx * ny];
    for c in explored.free_cells() {
        free[c.1 * nx + c.0] = true;
    }
    NavGraph::from_free(nx, ny, explored.cell_size(), free)
}

/// Reachable node closest (Euclidean) to the goal point.
pub fn snap_goal(graph: &NavGraph, goal: &GoalAction, start: Cell) -> Result<Cell> {
    if !graph.contains(start) {
        return Err(Error::StartIsolated {
            i: start.0,
            j: start.1,
        });
    }
    let cs = graph.cell_size();
    graph
        .component(start)
        .into_iter()
        .map(|c| {
            let p = c.center(cs);
            ((p[0] - goal.target[0]).hypot(p[1] - goal.target[1]), c)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, c)| c)
        .ok_or(Error::StartIsolated {
            i: start.0,
            j: start.1,
        })
}

pub fn octile(a: Cell, b: Cell) -> f64 {
    let dx = (a.0 as f64 - b.0 as f64).abs();
    let dy = (a.1 as f64 - b.1 as f64).abs();
    let (lo, hi) = if dx < dy { (dx, dy) } else { (dy, dx) };
    hi - lo + std::f64::consts::SQRT_2 * lo
}

#[derive(PartialEq)]
struct Open(f64, f64, Cell);

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on f, then larger g first, then cell order.
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| self.1.total_cmp(&other.1))
            .then_with(|| other.2.cmp(&self.2))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub cells: Vec<Cell>,
    pub cost: f64,
}

fn search(graph: &NavGraph, start: Cell, goal: Cell, heuristic: bool) -> Result<Path> {
    let no_path = || Error::NoPath(start.0, start.1, goal.0, goal.1);
    if !graph.contains(start) || !graph.contains(goal) {
        return Err(no_path());
    }
    let (nx, ny) = graph.size();
    let idx = |c: Cell| c.1 * nx + c.0;
    let mut g = vec![f64::INFINITY; nx * ny];
    let mut parent: Vec<Option<Cell>> = vec![None; nx * ny];
    let mut closed = vec![false; nx * ny];
    let h = |c: Cell| if heuristic { octile(c, goal) } else { 0.0 };
    g[idx(start)] = 0.0;
    let mut open = BinaryHeap::new();
    open.push(Open(h(start), 0.0, start));
    while let Some(Open(_, gc, c)) = open.pop() {
        if closed[idx(c)] || gc > g[idx(c)] {
            continue;
        }
        closed[idx(c)] = true;
        if c == goal {
            let mut cells = vec![c];
            let mut cur = c;
            while let Some(p) = parent[idx(cur)] {
                cells.push(p);
                cur = p;
            }
            cells.reverse();
            return Ok(Path { cells, cost: gc });
        }
        for (n, w) in graph.neighbors(c) {
            let ng = gc + w;
            if ng < g[idx(n)] {
                g[idx(n)] = ng;
                parent[idx(n)] = Some(c);
                open.push(Open(ng + h(n), ng, n));
            }
        }
    }
    Err(no_path())
}

/// Shortest path under the octile heuristic.
pub fn astar(graph: &NavGraph, start: Cell, goal: Cell) -> Result<Path> {
    search(graph, start, goal, true)
}

/// Plain Dijkstra, kept as the reference for A*.
pub fn dijkstra(graph: &NavGraph, start: Cell, goal: Cell) -> Result<Path> {
    search(graph, start, goal, false)
}

/// Sum of edge lengths; `None` if any step is not a graph edge.
pub fn path_cost(graph: &NavGraph, cells: &[Cell]) -> Option<f64> {
    let mut cost = 0.0;
    for w in cells.windows(2) {
        let (_, c) = graph
            .neighbors(w[0])
            .into_iter()
            .find(|(n, _)| *n == w[1])?;
        cost += c;
    }
    Some(cost)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FollowOutcome {
    pub pose: AgentPose,
    pub frames: Vec<FrameObservation>,
    /// Number of waypoints consumed from the path (excluding the start).
    pub advanced: usize,
    pub replan: bool,
}

/// Walks up to `n_steps` waypoints (the first path cell is the start) and
/// raycasts one frame per step. Frame ids continue from `first_frame`.
pub fn follow(
    scene: &Scene,
    pose: AgentPose,
    path: &[Cell],
    n_steps: usize,
    camera: &CameraModel,
    first_frame: u32,
) -> FollowOutcome {
    let mut pose = pose;
    let mut frames = Vec::new();
    let step_length = crate::sensor::default_step_length(scene);
    let mut advanced = 0;
    for &wp in path.iter().skip(1).take(n_steps) {
        let target = wp.center(scene.voxel_size());
        let Ok(next) = step_agent(scene, &pose, target, step_length) else {
            return FollowOutcome {
                pose,
                frames,
                advanced,
                replan: true,
            };
        };
        let frame_id = first_frame + frames.len() as u32;
        match raycast_frame(scene, &next, camera, frame_id) {
            Ok(obs) => frames.push(obs),
            Err(_) => {
                return FollowOutcome {
                    pose,
                    frames,
                    advanced,
                    replan: true,
                }
            }
        }
        pose = next;
        advanced += 1;
    }
    FollowOutcome {
        pose,
        frames,
        advanced,
        replan: false,
    }
}
