//! Long-term goal selection: random, frontier, greedy-disagreement and a
//! learned linear softmax policy trained with REINFORCE on the disagreement
//! reward.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::softmax;
use crate::disagreement::{
    total_score, DisagreementMap, PolicyInput, ScoreKind, AGENT_MARK, EXPLORED_FREE,
};
use crate::error::{Error, Result};
use crate::geometry::Cell;
use crate::scene::Scene;
use crate::sensor::{AgentPose, CellState, FrameObservation};
use crate::voxel_map::SemanticVoxelMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExploredState {
    Unknown,
    Free,
    Obstacle,
}

/// Top-down knowledge of the environment accumulated over an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct ExploredMap {
    nx: usize,
    ny: usize,
    cell_size: f64,
    states: Vec<ExploredState>,
    provenance: Vec<Option<u32>>,
}

impl ExploredMap {
    pub fn new(nx: usize, ny: usize, cell_size: f64) -> Self {
        ExploredMap {
            nx,
            ny,
            cell_size,
            states: vec![ExploredState::Unknown; nx * ny],
            provenance: vec![None; nx * ny],
        }
    }

    pub fn for_scene(scene: &Scene) -> Self {
        let (nx, ny) = scene.grid_size();
        ExploredMap::new(nx, ny, scene.voxel_size())
    }

    pub fn size(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn state(&self, c: Cell) -> ExploredState {
        if c.0 < self.nx && c.1 < self.ny {
            self.states[c.1 * self.nx + c.0]
        } else {
            ExploredState::Unknown
        }
    }

    pub fn state_at(&self, p: [f64; 2]) -> Option<ExploredState> {
        let c = Cell::from_point(p, self.cell_size)?;
        (c.0 < self.nx && c.1 < self.ny).then(|| self.state(c))
    }

    pub fn last_updated(&self, c: Cell) -> Option<u32> {
        self.provenance.get(c.1 * self.nx + c.0).copied().flatten()
    }

    pub fn is_free(&self, c: Cell) -> bool {
        self.state(c) == ExploredState::Free
    }

    /// Records an observation. Known cells never revert to unknown; an
    /// obstacle sighting overrides an earlier free one.
    pub fn mark(&mut self, c: Cell, s: CellState, frame_id: u32) {
        if c.0 >= self.nx || c.1 >= self.ny {
            return;
        }
        let k = c.1 * self.nx + c.0;
        let next = match (self.states[k], s) {
            (ExploredState::Obstacle, _) => ExploredState::Obstacle,
            (_, CellState::Obstacle) => ExploredState::Obstacle,
            (_, CellState::Free) => ExploredState::Free,
        };
        if next != self.states[k] {
            self.states[k] = next;
            self.provenance[k] = Some(frame_id);
        }
    }

    pub fn update(&mut self, obs: &FrameObservation) {
        for (&c, &s) in &obs.explored_delta {
            self.mark(c, s, obs.frame_id);
        }
    }

    /// Marks cells within `radius` of the agent from its proximity sensing,
    /// which covers the floor area the camera cannot see.
    pub fn mark_proximity(&mut self, scene: &Scene, pose: &AgentPose, radius: f64, frame_id: u32) {
        let r = (radius / self.cell_size).ceil() as i64;
        let Some(c) = scene.cell_of(pose.position) else {
            return;
        };
        for dj in -r..=r {
            for di in -r..=r {
                let i = c.0 as i64 + di;
                let j = c.1 as i64 + dj;
                if i < 0 || j < 0 || i as usize >= self.nx || j as usize >= self.ny {
                    continue;
                }
                let cell = Cell(i as usize, j as usize);
                let ctr = cell.center(self.cell_size);
                if (ctr[0] - pose.position[0]).hypot(ctr[1] - pose.position[1]) > radius {
                    continue;
                }
                let s = if scene.walkable(cell) {
                    CellState::Free
                } else {
                    CellState::Obstacle
                };
                self.mark(cell, s, frame_id);
            }
        }
    }

    pub fn free_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        let nx = self.nx;
        self.states
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == ExploredState::Free)
            .map(move |(k, _)| Cell(k % nx, k / nx))
    }

    pub fn known_fraction(&self) -> f64 {
        let known = self
            .states
            .iter()
            .filter(|s| **s != ExploredState::Unknown)
            .count();
        known as f64 / self.states.len() as f64
    }

    fn neighbors4(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        let (i, j) = (c.0 as i64, c.1 as i64);
        [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
            .into_iter()
            .filter(|&(a, b)| a >= 0 && b >= 0 && (a as usize) < self.nx && (b as usize) < self.ny)
            .map(|(a, b)| Cell(a as usize, b as usize))
    }

    /// Free cells with a 4-neighbour that is unknown.
    pub fn is_frontier(&self, c: Cell) -> bool {
        self.is_free(c)
            && self
                .neighbors4(c)
                .any(|n| self.state(n) == ExploredState::Unknown)
    }

    pub fn frontier_cells(&self) -> Vec<Cell> {
        let mut out: Vec<Cell> = self.free_cells().filter(|&c| self.is_frontier(c)).collect();
        out.sort();
        out
    }

    /// Octile geodesic distances (in cells) over free cells from `start`;
    /// diagonal moves need both adjacent axis cells free.
    pub fn geodesic_from(&self, start: Cell) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.nx * self.ny];
        if !self.is_free(start) {
            return dist;
        }
        let idx = |c: Cell| c.1 * self.nx + c.0;
        dist[idx(start)] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(HeapItem(0.0, start));
        while let Some(HeapItem(d, c)) = heap.pop() {
            if d > dist[idx(c)] {
                continue;
            }
            for (n, w) in self.moves(c) {
                let nd = d + w;
                if nd < dist[idx(n)] {
                    dist[idx(n)] = nd;
                    heap.push(HeapItem(nd, n));
                }
            }
        }
        dist
    }

    /// 8-connected moves between free cells without corner cutting.
    pub fn moves(&self, c: Cell) -> Vec<(Cell, f64)> {
        let mut out = Vec::with_capacity(8);
        let (i, j) = (c.0 as i64, c.1 as i64);
        let free = |a: i64, b: i64| {
            a >= 0
                && b >= 0
                && (a as usize) < self.nx
                && (b as usize) < self.ny
                && self.is_free(Cell(a as usize, b as usize))
        };
        for dj in -1..=1i64 {
            for di in -1..=1i64 {
                if di == 0 && dj == 0 || !free(i + di, j + dj) {
                    continue;
                }
                if di != 0 && dj != 0 {
                    if !free(i + di, j) || !free(i, j + dj) {
                        continue;
                    }
                    out.push((
                        Cell((i + di) as usize, (j + dj) as usize),
                        std::f64::consts::SQRT_2,
                    ));
                } else {
                    out.push((Cell((i + di) as usize, (j + dj) as usize), 1.0));
                }
            }
        }
        out
    }
}

#[derive(PartialEq)]
struct HeapItem(f64, Cell);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalAction {
    pub target: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Random,
    Frontier,
    Greedy,
    Learned,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::Frontier => "frontier",
            PolicyKind::Greedy => "greedy",
            PolicyKind::Learned => "learned",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PolicyKind::Random),
            "frontier" => Ok(PolicyKind::Frontier),
            "greedy" => Ok(PolicyKind::Greedy),
            "learned" => Ok(PolicyKind::Learned),
            other => Err(Error::InvalidConfig(format!("unknown policy {other:?}"))),
        }
    }
}

/// Uniform over known-free cells.
pub fn random_goal(explored: &ExploredMap, rng: &mut impl Rng) -> Result<GoalAction> {
    let free: Vec<Cell> = explored.free_cells().collect();
    if free.is_empty() {
        return Err(Error::NoFreeCells);
    }
    let c = free[rng.random_range(0..free.len())];
    Ok(GoalAction {
        target: c.center(explored.cell_size()),
    })
}

/// 4-connected clusters of frontier cells, each with its centroid snapped
/// to the nearest member cell.
pub fn frontier_clusters(explored: &ExploredMap) -> Vec<(Cell, Vec<Cell>)> {
    let cells = explored.frontier_cells();
    let (nx, ny) = explored.size();
    let mut is_frontier = vec![false; nx * ny];
    for c in &cells {
        is_frontier[c.1 * nx + c.0] = true;
    }
    let mut seen = vec![false; nx * ny];
    let mut out = Vec::new();
    for &start in &cells {
        if seen[start.1 * nx + start.0] {
            continue;
        }
        let mut members = Vec::new();
        let mut q = VecDeque::from([start]);
        seen[start.1 * nx + start.0] = true;
        while let Some(c) = q.pop_front() {
            members.push(c);
            for n in explored.neighbors4(c) {
                let k = n.1 * nx + n.0;
                if is_frontier[k] && !seen[k] {
                    seen[k] = true;
                    q.push_back(n);
                }
            }
        }
        members.sort();
        let m = members.len() as f64;
        let cx = members.iter().map(|c| c.0 as f64).sum::<f64>() / m;
        let cy = members.iter().map(|c| c.1 as f64).sum::<f64>() / m;
        let snapped = *members
            .iter()
            .min_by(|a, b| {
                let da = (a.0 as f64 - cx).hypot(a.1 as f64 - cy);
                let db = (b.0 as f64 - cx).hypot(b.1 as f64 - cy);
                da.total_cmp(&db).then(a.cmp(b))
            })
            .expect("non-empty cluster");
        out.push((snapped, members));
    }
    out
}

/// Nearest frontier cluster by geodesic distance.
pub fn frontier_goal(explored: &ExploredMap, pose: &AgentPose) -> Result<GoalAction> {
    let Some(start) = Cell::from_point(pose.position, explored.cell_size()) else {
        return Err(Error::ExplorationComplete);
    };
    let (nx, _) = explored.size();
    let dist = explored.geodesic_from(start);
    frontier_clusters(explored)
        .into_iter()
        .map(|(c, _)| {
            (
                dist.get(c.1 * nx + c.0).copied().unwrap_or(f64::INFINITY),
                c,
            )
        })
        .filter(|(d, _)| d.is_finite())
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, c)| GoalAction {
            target: c.center(explored.cell_size()),
        })
        .ok_or(Error::ExplorationComplete)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GreedyParams {
    /// Metres.
    pub radius: f64,
    /// Penalty per metre of geodesic distance.
    pub beta: f64,
    /// Cells this close (metres) to an earlier goal are skipped by the
    /// episode loop, so the agent keeps collecting new viewpoints.
    pub revisit_radius: f64,
}

impl Default for GreedyParams {
    fn default() -> Self {
        GreedyParams {
            radius: 0.3,
            beta: 0.05,
            revisit_radius: 2.5,
        }
    }
}

/// Sum of `H` over cells whose centres lie within `radius` of `p`.
pub fn local_sum(h: &DisagreementMap, p: [f64; 2], radius: f64) -> f64 {
    nonzero_cells(&h.grid, h.k, h.cell_size)
        .filter(|(c, _)| (c[0] - p[0]).hypot(c[1] - p[1]) <= radius)
        .map(|(_, v)| v)
        .sum()
}

fn nonzero_cells(
    grid: &[f64],
    k: usize,
    cell_size: f64,
) -> impl Iterator<Item = ([f64; 2], f64)> + '_ {
    grid.iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(move |(idx, &v)| (Cell(idx % k, idx / k).center(cell_size), v))
}

/// Best reachable cell by local disagreement minus a distance penalty;
/// falls back to the frontier rule when `H` is all zero.
pub fn greedy_disagreement_goal(
    h: &DisagreementMap,
    explored: &ExploredMap,
    pose: &AgentPose,
    params: &GreedyParams,
) -> Result<GoalAction> {
    greedy_goal_avoiding(h, explored, pose, params, &[])
}

/// As [`greedy_disagreement_goal`], skipping cells within
/// `params.revisit_radius` of any point in `visited`.
pub fn greedy_goal_avoiding(
    h: &DisagreementMap,
    explored: &ExploredMap,
    pose: &AgentPose,
    params: &GreedyParams,
    visited: &[[f64; 2]],
) -> Result<GoalAction> {
    if h.max() <= 0.0 {
        return frontier_goal(explored, pose);
    }
    let cs = explored.cell_size();
    let Some(start) = Cell::from_point(pose.position, cs) else {
        return Err(Error::OutOfBounds {
            x: pose.position[0],
            y: pose.position[1],
        });
    };
    let hot: Vec<([f64; 2], f64)> = nonzero_cells(&h.grid, h.k, h.cell_size).collect();
    let dist = explored.geodesic_from(start);
    let (nx, _) = explored.size();
    let mut best: Option<(f64, Cell)> = None;
    let mut cells: Vec<Cell> = explored.free_cells().collect();
    cells.sort();
    for c in cells {
        let d = dist[c.1 * nx + c.0];
        if !d.is_finite() {
            continue;
        }
        let p = c.center(cs);
        if visited
            .iter()
            .any(|v| (v[0] - p[0]).hypot(v[1] - p[1]) < params.revisit_radius)
        {
            continue;
        }
        let local: f64 = hot
            .iter()
            .filter(|(q, _)| (q[0] - p[0]).hypot(q[1] - p[1]) <= params.radius)
            .map(|(_, v)| v)
            .sum();
        let value = local - params.beta * d * cs;
        if best.is_none_or(|(bv, _)| value > bv) {
            best = Some((value, c));
        }
    }
    match best {
        Some((_, c)) => Ok(GoalAction {
            target: c.center(cs),
        }),
        None => frontier_goal(explored, pose),
    }
}

pub const N_FEATURES: usize = 6;
pub const FEATURE_SPEC_VERSION: u32 = 1;

pub type Features = [f64; N_FEATURES];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedPolicyParams {
    pub weights: Vec<f64>,
    pub temperature: f64,
    pub feature_spec_version: u32,
}

impl Default for LearnedPolicyParams {
    fn default() -> Self {
        LearnedPolicyParams {
            weights: vec![0.0; N_FEATURES],
            temperature: 1.0,
            feature_spec_version: FEATURE_SPEC_VERSION,
        }
    }
}

impl LearnedPolicyParams {
    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != N_FEATURES {
            return Err(Error::InvalidConfig(format!(
                "expected {N_FEATURES} weights, got {}",
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("policy weights"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if self.feature_spec_version != FEATURE_SPEC_VERSION {
            return Err(Error::InvalidConfig(format!(
                "feature spec version {} unsupported",
                self.feature_spec_version
            )));
        }
        Ok(())
    }
}

/// Radii (metres) of the three local disagreement sums.
pub const FEATURE_RADII: [f64; 3] = [0.25, 0.5, 1.0];
const NEIGHBORHOOD: f64 = 0.5;

/// Hand-crafted features of a candidate goal at metric point `p`:
/// local disagreement at three radii, normalized distance to the agent,
/// explored fraction nearby, and a frontier indicator.
pub fn candidate_features(input: &PolicyInput, p: [f64; 2]) -> Features {
    let k = input.k;
    let cs = input.cell_size;
    let mut f = [0.0; N_FEATURES];
    for (idx, v) in input.channels[0].iter().enumerate() {
        if *v == 0.0 {
            continue;
        }
        let c = Cell(idx % k, idx / k).center(cs);
        let d = (c[0] - p[0]).hypot(c[1] - p[1]);
        for (r, slot) in FEATURE_RADII.iter().zip(f.iter_mut()) {
            if d <= *r {
                *slot += v;
            }
        }
    }
    let agent = input.agent.center(cs);
    let extent = k as f64 * cs * std::f64::consts::SQRT_2;
    f[3] = (agent[0] - p[0]).hypot(agent[1] - p[1]) / extent;

    let clamp = |x: f64| ((x / cs).floor().max(0.0) as usize).min(k - 1);
    let (ci, cj) = (clamp(p[0]), clamp(p[1]));
    let r = (NEIGHBORHOOD / cs).ceil() as i64;
    let mut known = 0usize;
    let mut total = 0usize;
    for dj in -r..=r {
        for di in -r..=r {
            let i = ci as i64 + di;
            let j = cj as i64 + dj;
            if i < 0 || j < 0 || i as usize >= k || j as usize >= k {
                continue;
            }
            if ((di * di + dj * dj) as f64).sqrt() * cs > NEIGHBORHOOD {
                continue;
            }
            total += 1;
            if input.get(1, i as usize, j as usize) > 0.0 {
                known += 1;
            }
        }
    }
    f[4] = if total == 0 {
        0.0
    } else {
        known as f64 / total as f64
    };
    let here = input.get(1, ci, cj);
    let free_here = here == EXPLORED_FREE || here == AGENT_MARK;
    let touches_unknown = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)]
        .iter()
        .any(|(di, dj)| {
            let i = ci as i64 + di;
            let j = cj as i64 + dj;
            i >= 0
                && j >= 0
                && (i as usize) < k
                && (j as usize) < k
                && input.get(1, i as usize, j as usize) == 0.0
        });
    f[5] = if free_here && touches_unknown {
        1.0
    } else {
        0.0
    };
    f
}

fn dot(w: &[f64], f: &Features) -> f64 {
    w.iter().zip(f).map(|(a, b)| a * b).sum()
}

/// Action probabilities `softmax(w·φ / τ)` over candidate features.
pub fn action_probs(params: &LearnedPolicyParams, feats: &[Features]) -> Vec<f64> {
    let logits: Vec<f64> = feats
        .iter()
        .map(|f| dot(&params.weights, f) / params.temperature)
        .collect();
    softmax(&logits)
}

/// `∇_w log π(a | candidates)`.
pub fn log_prob_grad(params: &LearnedPolicyParams, feats: &[Features], action: usize) -> Features {
    let p = action_probs(params, feats);
    let mut g = feats[action];
    for (pb, fb) in p.iter().zip(feats) {
        for (gk, fk) in g.iter_mut().zip(fb) {
            *gk -= pb * fk;
        }
    }
    for gk in g.iter_mut() {
        *gk /= params.temperature;
    }
    g
}

pub fn log_prob(params: &LearnedPolicyParams, feats: &[Features], action: usize) -> f64 {
    action_probs(params, feats)[action].ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Greedy,
}

/// Picks a candidate index and returns it with the candidate features.
pub fn learned_choice(
    params: &LearnedPolicyParams,
    input: &PolicyInput,
    candidates: &[[f64; 2]],
    mode: ActionMode,
    rng: &mut impl Rng,
) -> Result<(usize, Vec<Features>)> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidates"));
    }
    let feats: Vec<Features> = candidates
        .iter()
        .map(|&p| candidate_features(input, p))
        .collect();
    let choice = match mode {
        ActionMode::Greedy => {
            let scores: Vec<f64> = feats.iter().map(|f| dot(&params.weights, f)).collect();
            crate::detector::argmax(&scores)
        }
        ActionMode::Sample => {
            let p = action_probs(params, &feats);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = p.len() - 1;
            for (k, pk) in p.iter().enumerate() {
                acc += pk;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            pick
        }
    };
    Ok((choice, feats))
}

pub fn learned_goal(
    params: &LearnedPolicyParams,
    input: &PolicyInput,
    candidates: &[[f64; 2]],
    mode: ActionMode,
    rng: &mut impl Rng,
) -> Result<GoalAction> {
    let (k, _) = learned_choice(params, input, candidates, mode, rng)?;
    Ok(GoalAction {
        target: candidates[k],
    })
}

/// Draws `n` distinct known-free cells uniformly (all of them if fewer).
pub fn sample_candidates(explored: &ExploredMap, n: usize, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    let mut free: Vec<Cell> = explored.free_cells().collect();
    let m = free.len();
    let take = n.min(m);
    for k in 0..take {
        let j = rng.random_range(k..m);
        free.swap(k, j);
    }
    free.truncate(take);
    free.into_iter()
        .map(|c| c.center(explored.cell_size()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub features: Vec<Features>,
    pub action: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Baseline {
    /// Mean discounted return over every step in the batch.
    BatchMean,
    /// Mean discounted return over the batch at the same decision index.
    PerStepMean,
    Fixed(f64),
}

/// Discounted returns-to-go.
pub fn returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// One REINFORCE step over a batch of trajectories.
pub fn reinforce_update(
    params: &LearnedPolicyParams,
    batch: &[Vec<Transition>],
    gamma: f64,
    lr: f64,
    baseline: Baseline,
) -> Result<LearnedPolicyParams> {
    let grad = policy_gradient(params, batch, gamma, baseline)?;
    Ok(apply_gradient(params, &grad, lr))
}

/// Ascent step `w += lr·g`.
pub fn apply_gradient(
    params: &LearnedPolicyParams,
    grad: &Features,
    lr: f64,
) -> LearnedPolicyParams {
    let mut next = params.clone();
    for (w, g) in next.weights.iter_mut().zip(grad) {
        *w += lr * g;
    }
    next
}

/// `Σ_t ∇log π(a_t|s_t)·(G_t − b_t)` over a batch of trajectories.
pub fn policy_gradient(
    params: &LearnedPolicyParams,
    batch: &[Vec<Transition>],
    gamma: f64,
    baseline: Baseline,
) -> Result<Features> {
    if batch.iter().all(|t| t.is_empty()) {
        return Err(Error::Empty("trajectory"));
    }
    if batch.iter().flatten().any(|t| !t.reward.is_finite()) {
        return Err(Error::NonFinite("rewards"));
    }
    let all_returns: Vec<Vec<f64>> = batch
        .iter()
        .map(|traj| returns(&traj.iter().map(|t| t.reward).collect::<Vec<_>>(), gamma))
        .collect();
    let longest = all_returns.iter().map(Vec::len).max().unwrap_or(0);
    let b: Vec<f64> = match baseline {
        Baseline::Fixed(b) => vec![b; longest],
        Baseline::BatchMean => {
            let n: usize = all_returns.iter().map(Vec::len).sum();
            vec![all_returns.iter().flatten().sum::<f64>() / n as f64; longest]
        }
        Baseline::PerStepMean => (0..longest)
            .map(|t| {
                let at: Vec<f64> = all_returns
                    .iter()
                    .filter_map(|r| r.get(t).copied())
                    .collect();
                at.iter().sum::<f64>() / at.len() as f64
            })
            .collect(),
    };
    let mut grad = [0.0; N_FEATURES];
    for (traj, rets) in batch.iter().zip(&all_returns) {
        for (step, (t, g)) in traj.iter().zip(rets).enumerate() {
            let adv = g - b[step];
            if adv == 0.0 {
                continue;
            }
            let glp = log_prob_grad(params, &t.features, t.action);
            for (acc, x) in grad.iter_mut().zip(glp) {
                *acc += x * adv;
            }
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("policy gradient"));
    }
    Ok(grad)
}

/// Change in total disagreement between two resolved maps.
pub fn compute_step_reward(
    before: &SemanticVoxelMap,
    after: &SemanticVoxelMap,
    kind: ScoreKind,
) -> f64 {
    total_score(after, kind) - total_score(before, kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Voxel;
    use crate::rng;

    fn grid(rows: &[&str]) -> ExploredMap {
        // Row 0 is printed first and is j = 0.
        let ny = rows.len();
        let nx = rows[0].len();
        let mut m = ExploredMap::new(nx, ny, 1.0);
        for (j, r) in rows.iter().enumerate() {
            for (i, ch) in r.chars().enumerate() {
                match ch {
                    '.' => m.mark(Cell(i, j), CellState::Free, 0),
                    '#' => m.mark(Cell(i, j), CellState::Obstacle, 0),
                    _ => {}
                }
            }
        }
        m
    }

    fn pose_at(c: Cell) -> AgentPose {
        AgentPose::new(c.center(1.0), 0.0, 0.4)
    }

    #[test]
    fn random_goal_cases() {
        let m = grid(&["??", "?."]);
        let mut r = rng::stream(1, &[]);
        assert_eq!(random_goal(&m, &mut r).unwrap().target, [1.5, 1.5]);
        let unknown = grid(&["??", "??"]);
        assert!(matches!(
            random_goal(&unknown, &mut r),
            Err(Error::NoFreeCells)
        ));
        let m = grid(&["....", "....", "...."]);
        let a: Vec<_> = (0..5)
            .map(|k| random_goal(&m, &mut rng::stream(7, &[k])).unwrap())
            .collect();
        let b: Vec<_> = (0..5)
            .map(|k| random_goal(&m, &mut rng::stream(7, &[k])).unwrap())
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn frontier_on_half_explored_corridor() {
        let m = grid(&["##########", "......????", "##########"]);
        let g = frontier_goal(&m, &pose_at(Cell(0, 1))).unwrap();
        // BFS oracle: the only free cell touching unknown is (5, 1).
        assert_eq!(g.target, Cell(5, 1).center(1.0));
    }

    #[test]
    fn frontier_complete_when_fully_known() {
        let m = grid(&["###", "#.#", "###"]);
        assert!(matches!(
            frontier_goal(&m, &pose_at(Cell(1, 1))),
            Err(Error::ExplorationComplete)
        ));
    }

    #[test]
    fn frontier_prefers_nearer_cluster() {
        // Agent at column 3; frontiers at column 0 (distance 3) and column 12 (distance 9).
        let m = grid(&["##############", "?............?", "##############"]);
        let g = frontier_goal(&m, &pose_at(Cell(4, 1))).unwrap();
        assert_eq!(g.target, Cell(1, 1).center(1.0));
    }

    fn hot_map(cells: &[(usize, usize, f64)], k: usize) -> DisagreementMap {
        let mut h = DisagreementMap::zeros(k, 1.0);
        for &(i, j, v) in cells {
            h.grid[j * k + i] = v;
        }
        h
    }

    #[test]
    fn greedy_goal_cases() {
        let m = grid(&["..........", "..........", ".........."]);
        let p = GreedyParams {
            radius: 0.1,
            beta: 0.0,
            ..GreedyParams::default()
        };
        let h = hot_map(&[(7, 2, 1.0)], 10);
        let g = greedy_disagreement_goal(&h, &m, &pose_at(Cell(0, 0)), &p).unwrap();
        assert_eq!(g.target, Cell(7, 2).center(1.0));

        let zero = hot_map(&[], 10);
        let m2 = grid(&["....??????", "..........", ".........."]);
        let g = greedy_disagreement_goal(&zero, &m2, &pose_at(Cell(0, 0)), &p).unwrap();
        assert_eq!(g, frontier_goal(&m2, &pose_at(Cell(0, 0))).unwrap());

        let two = hot_map(&[(2, 1, 1.0), (9, 1, 1.0)], 10);
        let p = GreedyParams {
            radius: 0.1,
            beta: 0.1,
            ..GreedyParams::default()
        };
        let g = greedy_disagreement_goal(&two, &m, &pose_at(Cell(0, 1)), &p).unwrap();
        assert_eq!(g.target, Cell(2, 1).center(1.0));
    }

    fn toy_input() -> PolicyInput {
        let k = 8;
        let mut ch0 = vec![0.0; k * k];
        ch0[3 * k + 5] = 1.0;
        let mut ch1 = vec![EXPLORED_FREE; k * k];
        ch1[0] = AGENT_MARK;
        for i in 0..k {
            ch1[7 * k + i] = 0.0;
        }
        PolicyInput {
            k,
            cell_size: 0.25,
            channels: [ch0, ch1],
            orientation: 0.0,
            agent: Cell(0, 0),
        }
    }

    #[test]
    fn learned_goal_limits() {
        let input = toy_input();
        let mut r = rng::stream(0, &[]);
        let one = [[1.0, 1.0]];
        let params = LearnedPolicyParams::default();
        assert_eq!(
            learned_goal(&params, &input, &one, ActionMode::Sample, &mut r)
                .unwrap()
                .target,
            [1.0, 1.0]
        );
        let cands: Vec<[f64; 2]> = (0..4).map(|k| [0.125 + 0.5 * k as f64, 0.6]).collect();
        let feats: Vec<Features> = cands
            .iter()
            .map(|&p| candidate_features(&input, p))
            .collect();
        let p = action_probs(&params, &feats);
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-12));

        let w = LearnedPolicyParams {
            weights: vec![1.0, 0.5, 0.2, -1.0, 0.0, 0.3],
            temperature: 1e-6,
            feature_spec_version: FEATURE_SPEC_VERSION,
        };
        let (pick, feats) = learned_choice(&w, &input, &cands, ActionMode::Greedy, &mut r).unwrap();
        let scores: Vec<f64> = feats.iter().map(|f| dot(&w.weights, f)).collect();
        assert_eq!(pick, crate::detector::argmax(&scores));
        // Near-zero temperature sampling concentrates on the same argmax.
        let (sampled, _) = learned_choice(&w, &input, &cands, ActionMode::Sample, &mut r).unwrap();
        assert_eq!(sampled, pick);
    }

    #[test]
    fn features_see_hotspot_and_frontier() {
        let input = toy_input();
        let near = candidate_features(&input, Cell(5, 3).center(0.25));
        let far = candidate_features(&input, Cell(0, 6).center(0.25));
        assert_eq!(near[0], 1.0);
        assert_eq!(far[0], 0.0);
        assert!(far[2] <= near[2]);
        assert_eq!(far[5], 1.0);
        assert_eq!(near[5], 0.0);
        assert!(near[3] > 0.0);
    }

    fn transition(rng: &mut impl Rng, n: usize, reward: f64) -> Transition {
        let features = (0..n)
            .map(|_| {
                let mut f = [0.0; N_FEATURES];
                for x in f.iter_mut() {
                    *x = rng.random_range(-1.0..1.0);
                }
                f
            })
            .collect();
        Transition {
            features,
            action: rng.random_range(0..n),
            reward,
        }
    }

    #[test]
    fn zero_rewards_leave_weights() {
        let mut r = rng::stream(4, &[]);
        let params = LearnedPolicyParams {
            weights: vec![0.3, -0.1, 0.0, 0.2, 0.5, -0.4],
            ..Default::default()
        };
        let traj: Vec<Transition> = (0..5).map(|_| transition(&mut r, 6, 0.0)).collect();
        let next = reinforce_update(&params, &[traj], 0.99, 0.1, Baseline::BatchMean).unwrap();
        assert_eq!(next, params);
    }

    #[test]
    fn positive_advantage_raises_chosen_probability() {
        let params = LearnedPolicyParams::default();
        let t = Transition {
            features: vec![
                [1.0, 0.0, 0.0, 0.2, 0.5, 0.0],
                [0.0, 0.0, 0.0, 0.7, 0.1, 1.0],
            ],
            action: 0,
            reward: 1.0,
        };
        let before = action_probs(&params, &t.features)[0];
        let next =
            reinforce_update(&params, &[vec![t.clone()]], 0.99, 0.5, Baseline::Fixed(0.0)).unwrap();
        let after = action_probs(&next, &t.features)[0];
        assert!(after > before, "{after} <= {before}");
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let mut r = rng::stream(11, &[]);
        for _ in 0..50 {
            let n = r.random_range(2..10);
            let t = transition(&mut r, n, 0.0);
            let params = LearnedPolicyParams {
                weights: (0..N_FEATURES).map(|_| r.random_range(-2.0..2.0)).collect(),
                temperature: r.random_range(0.3..2.0),
                feature_spec_version: FEATURE_SPEC_VERSION,
            };
            let g = log_prob_grad(&params, &t.features, t.action);
            let h = 1e-5;
            for k in 0..N_FEATURES {
                let mut plus = params.clone();
                plus.weights[k] += h;
                let mut minus = params.clone();
                minus.weights[k] -= h;
                let fd = (log_prob(&plus, &t.features, t.action)
                    - log_prob(&minus, &t.features, t.action))
                    / (2.0 * h);
                let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-8);
                assert!(
                    rel < 1e-5 || (fd - g[k]).abs() < 1e-9,
                    "k={k} fd={fd} g={}",
                    g[k]
                );
            }
        }
    }

    #[test]
    fn non_finite_reward_rejected() {
        let t = Transition {
            features: vec![[0.0; N_FEATURES]],
            action: 0,
            reward: f64::NAN,
        };
        assert!(reinforce_update(
            &LearnedPolicyParams::default(),
            &[vec![t]],
            0.99,
            0.1,
            Baseline::BatchMean
        )
        .is_err());
    }

    #[test]
    fn per_step_baseline_centres_each_index() {
        let t = |a: usize, r: f64| Transition {
            features: vec![[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0; N_FEATURES]],
            action: a,
            reward: r,
        };
        // Same returns at each index in both trajectories: zero advantage everywhere.
        let batch = vec![vec![t(0, 1.0), t(1, 5.0)], vec![t(0, 1.0), t(1, 5.0)]];
        let p = LearnedPolicyParams::default();
        let g = policy_gradient(&p, &batch, 1.0, Baseline::PerStepMean).unwrap();
        assert_eq!(g, [0.0; N_FEATURES]);
        let g = policy_gradient(&p, &batch, 1.0, Baseline::BatchMean).unwrap();
        assert!(g[0] != 0.0);
    }

    #[test]
    fn greedy_skips_visited_goals() {
        let m = grid(&["..........", "..........", ".........."]);
        let p = GreedyParams {
            radius: 0.1,
            beta: 0.0,
            revisit_radius: 1.5,
        };
        let h = hot_map(&[(7, 2, 2.0), (2, 0, 1.0)], 10);
        let here = pose_at(Cell(0, 0));
        let first = greedy_goal_avoiding(&h, &m, &here, &p, &[]).unwrap();
        assert_eq!(first.target, Cell(7, 2).center(1.0));
        let second = greedy_goal_avoiding(&h, &m, &here, &p, &[first.target]).unwrap();
        assert_eq!(second.target, Cell(2, 0).center(1.0));
    }

    #[test]
    fn returns_are_discounted() {
        let g = returns(&[1.0, 0.0, 2.0], 0.5);
        assert_eq!(g, vec![1.5, 1.0, 2.0]);
    }

    #[test]
    fn step_reward_cases() {
        let mut before = SemanticVoxelMap::new(0.05, 3);
        before.insert_entry(Voxel(0, 0, 0), 0, &[4.0, 0.0, 0.0]);
        before.insert_entry(Voxel(0, 0, 0), 1, &[4.0, 0.0, 0.0]);
        before.resolve_instances();
        assert_eq!(
            compute_step_reward(&before, &before, ScoreKind::Entropy),
            0.0
        );
        let mut after = before.clone();
        after.resolve_instances();
        assert_eq!(
            compute_step_reward(&before, &after, ScoreKind::Entropy),
            0.0
        );
        after.insert_entry(Voxel(0, 0, 0), 2, &[0.0, 4.0, 0.0]);
        after.resolve_instances();
        // Hand check: p before = softmax(4,0,0); after = mean with softmax(0,4,0).
        let s = crate::detector::softmax(&[4.0, 0.0, 0.0]);
        let h_before = crate::detector::entropy(&s);
        let mixed = [(2.0 * s[0] + s[1]) / 3.0, (2.0 * s[1] + s[0]) / 3.0, s[2]];
        let h_after = crate::detector::entropy(&mixed);
        let r = compute_step_reward(&before, &after, ScoreKind::Entropy);
        assert!(r > 0.0);
        assert!((r - (h_after - h_before)).abs() < 1e-12);
    }

    #[test]
    fn explored_map_is_monotone() {
        let mut m = ExploredMap::new(3, 3, 1.0);
        m.mark(Cell(1, 1), CellState::Free, 1);
        assert_eq!(m.state(Cell(1, 1)), ExploredState::Free);
        assert_eq!(m.last_updated(Cell(1, 1)), Some(1));
        m.mark(Cell(1, 1), CellState::Obstacle, 2);
        m.mark(Cell(1, 1), CellState::Free, 3);
        assert_eq!(m.state(Cell(1, 1)), ExploredState::Obstacle);
        assert_eq!(m.last_updated(Cell(1, 1)), Some(2));
    }
}
