//! Per-instance disagreement scores and the top-down disagreement map.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detector::{argmax, entropy};
use crate::error::{Error, Result};
use crate::geometry::Cell;
use crate::policy::{ExploredMap, ExploredState};
use crate::sensor::AgentPose;
use crate::voxel_map::{InstanceId, SemanticVoxelMap};

/// Guard for normalizing an all-zero map.
pub const EPS_NORM: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Entropy,
    Cos,
    Euc,
    Count,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 4] = [
        ScoreKind::Entropy,
        ScoreKind::Cos,
        ScoreKind::Euc,
        ScoreKind::Count,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Entropy => "entropy",
            ScoreKind::Cos => "cos",
            ScoreKind::Euc => "euc",
            ScoreKind::Count => "count",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(ScoreKind::Entropy),
            "cos" => Ok(ScoreKind::Cos),
            "euc" => Ok(ScoreKind::Euc),
            "count" => Ok(ScoreKind::Count),
            other => Err(Error::InvalidConfig(format!(
                "unknown score kind {other:?}"
            ))),
        }
    }
}

/// Entropy (nats) of the aggregated softmax of `u`.
pub fn score_entropy(map: &SemanticVoxelMap, u: InstanceId) -> Result<f64> {
    Ok(entropy(&map.aggregated_softmax(u)?))
}

pub fn score_cos(map: &SemanticVoxelMap, u: InstanceId) -> Result<f64> {
    Ok(pairwise_cos(&map.logit_set(u)?).0)
}

pub fn score_euc(map: &SemanticVoxelMap, u: InstanceId) -> Result<f64> {
    Ok(pairwise_euc(&map.logit_set(u)?))
}

/// Distinct argmax classes over `Q(u)`, minus one.
pub fn score_count(map: &SemanticVoxelMap, u: InstanceId) -> Result<f64> {
    Ok(distinct_classes(&map.logit_set(u)?))
}

pub fn score(map: &SemanticVoxelMap, u: InstanceId, kind: ScoreKind) -> Result<f64> {
    match kind {
        ScoreKind::Entropy => score_entropy(map, u),
        ScoreKind::Cos => score_cos(map, u),
        ScoreKind::Euc => score_euc(map, u),
        ScoreKind::Count => score_count(map, u),
    }
}

/// Sum of `score(u)` over all resolved instances.
pub fn total_score(map: &SemanticVoxelMap, kind: ScoreKind) -> f64 {
    map.instances()
        .map(|i| score(map, i.u, kind).expect("resolved instance"))
        .sum()
}

/// Mean `1 − cos` over unordered pairs; returns the value and the number of
/// pairs skipped because a vector had zero norm.
pub fn pairwise_cos(q: &[&[f64]]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut skipped = 0usize;
    for a in 0..q.len() {
        for b in a + 1..q.len() {
            let na = norm(q[a]);
            let nb = norm(q[b]);
            if na == 0.0 || nb == 0.0 {
                skipped += 1;
                continue;
            }
            let dot: f64 = q[a].iter().zip(q[b]).map(|(x, y)| x * y).sum();
            sum += (1.0 - dot / (na * nb)).max(0.0);
            n += 1;
        }
    }
    (if n == 0 { 0.0 } else { sum / n as f64 }, skipped)
}

pub fn pairwise_euc(q: &[&[f64]]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for a in 0..q.len() {
        for b in a + 1..q.len() {
            sum += q[a]
                .iter()
                .zip(q[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn distinct_classes(q: &[&[f64]]) -> f64 {
    let mut classes: Vec<usize> = q.iter().map(|l| argmax(l)).collect();
    classes.sort_unstable();
    classes.dedup();
    classes.len().saturating_sub(1) as f64
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisagreementMap {
    pub k: usize,
    /// Metres per cell.
    pub cell_size: f64,
    /// Row-major: index `j * k + i`.
    pub grid: Vec<f64>,
}

impl DisagreementMap {
    pub fn zeros(k: usize, cell_size: f64) -> Self {
        DisagreementMap {
            k,
            cell_size,
            grid: vec![0.0; k * k],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.grid[j * self.k + i]
    }

    pub fn max(&self) -> f64 {
        self.grid.iter().copied().fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.grid.iter().sum()
    }

    /// Grid cell containing a metric point, clamped to the map.
    pub fn cell_of(&self, p: [f64; 2]) -> Cell {
        let clamp = |x: f64| ((x / self.cell_size).floor().max(0.0) as usize).min(self.k - 1);
        Cell(clamp(p[0]), clamp(p[1]))
    }

    /// One CSV row per grid row `j`.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for j in 0..self.k {
            let row: Vec<String> = (0..self.k).map(|i| format!("{}", self.get(i, j))).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Top-down footprint centroid of an instance, in metres.
pub fn footprint_centroid(map: &SemanticVoxelMap, u: InstanceId) -> Result<[f64; 2]> {
    let inst = map.instance(u)?;
    let vs = map.voxel_size();
    let n = inst.voxels.len() as f64;
    let (sx, sy) = inst.voxels.iter().fold((0.0, 0.0), |(a, b), v| {
        (a + v.0 as f64 + 0.5, b + v.1 as f64 + 0.5)
    });
    Ok([sx / n * vs, sy / n * vs])
}

/// Projects every instance's score onto the cell holding its footprint centroid.
///
/// `extent` is the metric size of the scene; cells are square with edge
/// `max(extent) / k`.
pub fn build_disagreement_map(
    map: &SemanticVoxelMap,
    kind: ScoreKind,
    k: usize,
    extent: [f64; 2],
) -> DisagreementMap {
    let mut h = DisagreementMap::zeros(k.max(1), extent[0].max(extent[1]) / k.max(1) as f64);
    for inst in map.instances() {
        let s = score(map, inst.u, kind).expect("resolved instance");
        let c = footprint_centroid(map, inst.u).expect("resolved instance");
        let Cell(i, j) = h.cell_of(c);
        h.grid[j * h.k + i] += s;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyInput {
    pub k: usize,
    pub cell_size: f64,
    /// Channel 0: normalized disagreement. Channel 1: explored map with the
    /// agent marked. Both row-major, values in `[0, 1]`.
    pub channels: [Vec<f64>; 2],
    pub orientation: f64,
    pub agent: Cell,
}

pub const EXPLORED_FREE: f64 = 0.5;
pub const EXPLORED_OBSTACLE: f64 = 0.25;
pub const AGENT_MARK: f64 = 1.0;

impl PolicyInput {
    pub fn get(&self, channel: usize, i: usize, j: usize) -> f64 {
        self.channels[channel][j * self.k + i]
    }
}

pub fn assemble_policy_input(
    h: &DisagreementMap,
    explored: &ExploredMap,
    pose: &AgentPose,
) -> PolicyInput {
    let k = h.k;
    let scale = h.max().max(EPS_NORM);
    let ch0: Vec<f64> = h.grid.iter().map(|x| (x / scale).clamp(0.0, 1.0)).collect();
    let mut ch1 = vec![0.0; k * k];
    for j in 0..k {
        for i in 0..k {
            let centre = Cell(i, j).center(h.cell_size);
            ch1[j * k + i] = match explored.state_at(centre) {
                Some(ExploredState::Free) => EXPLORED_FREE,
                Some(ExploredState::Obstacle) => EXPLORED_OBSTACLE,
                _ => 0.0,
            };
        }
    }
    let agent = h.cell_of(pose.position);
    ch1[agent.1 * k + agent.0] = AGENT_MARK;
    PolicyInput {
        k,
        cell_size: h.cell_size,
        channels: [ch0, ch1],
        orientation: pose.heading,
        agent,
    }
}
