//! Synthetic voxel worlds: occupancy, ground-truth objects and the derived
//! walkability grid. A [`Scene`] is immutable once built.

use std::collections::{BTreeSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Cell, Voxel};
use crate::rng;

pub const SCENE_FILE_VERSION: u32 = 1;

const FREE: u8 = 0;
const WALL: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub gt_id: u32,
    pub class_id: u32,
    /// Sorted, duplicate-free.
    pub voxels: Vec<Voxel>,
    #[serde(default = "default_true")]
    pub connected: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneGenConfig {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub n_objects: usize,
    pub n_classes: usize,
    /// Rooms along x and y, separated by interior walls with doors.
    pub room_grid: [usize; 2],
    pub door_width: usize,
    /// Inclusive range of object footprint edge lengths, in voxels.
    pub footprint: [usize; 2],
    /// Inclusive range of object heights, in voxels.
    pub height: [usize; 2],
    /// Free margin kept around every object, in voxels.
    pub clearance: usize,
    pub max_retries: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            dims: [40, 40, 20],
            voxel_size: 0.05,
            n_objects: 0,
            n_classes: 8,
            room_grid: [1, 1],
            door_width: 4,
            footprint: [2, 5],
            height: [3, 10],
            clearance: 1,
            max_retries: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    dims: [usize; 3],
    voxel_size: f64,
    n_classes: usize,
    seed: u64,
    occupancy: Vec<u8>,
    objects: Vec<GroundTruthObject>,
    // Derived from the above.
    object_grid: Vec<u32>,
    walkable: Vec<bool>,
    surface_counts: Vec<usize>,
}

impl Scene {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn objects(&self) -> &[GroundTruthObject] {
        &self.objects
    }

    pub fn object(&self, gt_id: u32) -> Option<&GroundTruthObject> {
        self.objects.get(gt_id as usize)
    }

    /// Metric extent of the top-down footprint `[x, y]`.
    pub fn extent(&self) -> [f64; 2] {
        [
            self.dims[0] as f64 * self.voxel_size,
            self.dims[1] as f64 * self.voxel_size,
        ]
    }

    pub fn grid_size(&self) -> (usize, usize) {
        (self.dims[0], self.dims[1])
    }

    pub fn in_bounds(&self, v: Voxel) -> bool {
        v.0 >= 0
            && v.1 >= 0
            && v.2 >= 0
            && (v.0 as usize) < self.dims[0]
            && (v.1 as usize) < self.dims[1]
            && (v.2 as usize) < self.dims[2]
    }

    fn index(&self, v: Voxel) -> usize {
        (v.2 as usize * self.dims[1] + v.1 as usize) * self.dims[0] + v.0 as usize
    }

    pub fn is_wall(&self, v: Voxel) -> bool {
        self.in_bounds(v) && self.occupancy[self.index(v)] == WALL
    }

    pub fn object_at(&self, v: Voxel) -> Option<u32> {
        if !self.in_bounds(v) {
            return None;
        }
        match self.object_grid[self.index(v)] {
            0 => None,
            id => Some(id - 1),
        }
    }

    pub fn is_solid(&self, v: Voxel) -> bool {
        self.is_wall(v) || self.object_at(v).is_some()
    }

    pub fn walkable(&self, c: Cell) -> bool {
        c.0 < self.dims[0] && c.1 < self.dims[1] && self.walkable[c.1 * self.dims[0] + c.0]
    }

    pub fn walkable_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        let nx = self.dims[0];
        self.walkable
            .iter()
            .enumerate()
            .filter(|(_, w)| **w)
            .map(move |(k, _)| Cell(k % nx, k / nx))
    }

    /// Top-down cell containing a metric point, if inside the grid.
    pub fn cell_of(&self, p: [f64; 2]) -> Option<Cell> {
        let c = Cell::from_point(p, self.voxel_size)?;
        (c.0 < self.dims[0] && c.1 < self.dims[1]).then_some(c)
    }

    /// Number of object voxels with at least one face neighbour outside the object.
    pub fn surface_count(&self, gt_id: u32) -> usize {
        self.surface_counts
            .get(gt_id as usize)
            .copied()
            .unwrap_or(0)
    }

    /// Scene-level serialization.
    pub fn save(&self) -> Vec<u8> {
        let file = SceneFile {
            version: SCENE_FILE_VERSION,
            seed: self.seed,
            voxel_size: self.voxel_size,
            dims: self.dims,
            n_classes: self.n_classes,
            occupancy: rle_encode(&self.occupancy),
            objects: self.objects.clone(),
        };
        serde_json::to_vec(&file).expect("scene serializes")
    }

    pub fn load(bytes: &[u8]) -> Result<Scene> {
        let file: SceneFile = serde_json::from_slice(bytes)?;
        if file.version != SCENE_FILE_VERSION {
            return Err(parse_err(format!(
                "unsupported scene version {}",
                file.version
            )));
        }
        let n = file.dims.iter().product::<usize>();
        let occupancy = rle_decode(&file.occupancy, n)?;
        let mut b = SceneBuilder {
            dims: file.dims,
            voxel_size: file.voxel_size,
            n_classes: file.n_classes,
            seed: file.seed,
            occupancy,
            objects: Vec::new(),
        };
        for (k, o) in file.objects.into_iter().enumerate() {
            if o.gt_id as usize != k {
                return Err(parse_err(format!(
                    "objects[{k}]: gt_id {} out of sequence",
                    o.gt_id
                )));
            }
            b.objects.push(o);
        }
        b.build().map_err(|e| match e {
            Error::SceneGeneration(m) | Error::InvalidConfig(m) => parse_err(m),
            other => other,
        })
    }
}

fn parse_err(message: String) -> Error {
    Error::Parse {
        line: 0,
        column: 0,
        message,
    }
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    version: u32,
    seed: u64,
    voxel_size: f64,
    dims: [usize; 3],
    n_classes: usize,
    /// Run-length pairs `[value, count]` in x-fastest, then y, then z order.
    occupancy: Vec<[u32; 2]>,
    objects: Vec<GroundTruthObject>,
}

fn rle_encode(data: &[u8]) -> Vec<[u32; 2]> {
    let mut out: Vec<[u32; 2]> = Vec::new();
    for &v in data {
        match out.last_mut() {
            Some(last) if last[0] == v as u32 => last[1] += 1,
            _ => out.push([v as u32, 1]),
        }
    }
    out
}

fn rle_decode(runs: &[[u32; 2]], expected: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(expected);
    for (k, &[value, count]) in runs.iter().enumerate() {
        if value > 1 {
            return Err(parse_err(format!("occupancy[{k}]: invalid value {value}")));
        }
        out.extend(std::iter::repeat_n(value as u8, count as usize));
        if out.len() > expected {
            return Err(parse_err(format!(
                "occupancy[{k}]: runs exceed {expected} voxels"
            )));
        }
    }
    if out.len() != expected {
        return Err(parse_err(format!(
            "occupancy covers {} voxels, expected {expected}",
            out.len()
        )));
    }
    Ok(out)
}

/// Assembles a scene and checks every scene invariant on `build`.
#[derive(Debug, Clone)]
pub struct SceneBuilder {
    dims: [usize; 3],
    voxel_size: f64,
    n_classes: usize,
    seed: u64,
    occupancy: Vec<u8>,
    objects: Vec<GroundTruthObject>,
}

impl SceneBuilder {
    /// Solid floor at z = 0, perimeter walls, free interior.
    pub fn new(dims: [usize; 3], voxel_size: f64, n_classes: usize) -> Self {
        let mut b = SceneBuilder {
            dims,
            voxel_size,
            n_classes,
            seed: 0,
            occupancy: vec![FREE; dims.iter().product()],
            objects: Vec::new(),
        };
        let [nx, ny, nz] = dims;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if z == 0 || x == 0 || y == 0 || x + 1 == nx || y + 1 == ny {
                        b.set(Voxel(x as i32, y as i32, z as i32), WALL);
                    }
                }
            }
        }
        b
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn set(&mut self, v: Voxel, value: u8) {
        let [nx, ny, _] = self.dims;
        let k = (v.2 as usize * ny + v.1 as usize) * nx + v.0 as usize;
        self.occupancy[k] = value;
    }

    fn in_bounds(&self, v: Voxel) -> bool {
        v.0 >= 0
            && v.1 >= 0
            && v.2 >= 0
            && (v.0 as usize) < self.dims[0]
            && (v.1 as usize) < self.dims[1]
            && (v.2 as usize) < self.dims[2]
    }

    /// Fills the inclusive box `[lo, hi]` with wall.
    pub fn wall_box(&mut self, lo: Voxel, hi: Voxel) -> &mut Self {
        self.fill_box(lo, hi, WALL)
    }

    /// Clears the inclusive box `[lo, hi]`.
    pub fn clear_box(&mut self, lo: Voxel, hi: Voxel) -> &mut Self {
        self.fill_box(lo, hi, FREE)
    }

    fn fill_box(&mut self, lo: Voxel, hi: Voxel, value: u8) -> &mut Self {
        for z in lo.2..=hi.2 {
            for y in lo.1..=hi.1 {
                for x in lo.0..=hi.0 {
                    let v = Voxel(x, y, z);
                    if self.in_bounds(v) {
                        self.set(v, value);
                    }
                }
            }
        }
        self
    }

    /// Adds an object; returns its gt id.
    pub fn object(&mut self, class_id: u32, voxels: impl IntoIterator<Item = Voxel>) -> u32 {
        let gt_id = self.objects.len() as u32;
        let voxels: BTreeSet<Voxel> = voxels.into_iter().collect();
        self.objects.push(GroundTruthObject {
            gt_id,
            class_id,
            voxels: voxels.into_iter().collect(),
            connected: true,
        });
        gt_id
    }

    /// Convenience: a solid column box standing on the floor.
    pub fn box_object(&mut self, class_id: u32, lo: Voxel, hi: Voxel) -> u32 {
        let mut vs = Vec::new();
        for z in lo.2..=hi.2 {
            for y in lo.1..=hi.1 {
                for x in lo.0..=hi.0 {
                    vs.push(Voxel(x, y, z));
                }
            }
        }
        self.object(class_id, vs)
    }

    pub fn build(self) -> Result<Scene> {
        let [nx, ny, nz] = self.dims;
        if nx < 3 || ny < 3 || nz < 2 {
            return Err(Error::InvalidConfig(format!(
                "dims {:?} too small",
                self.dims
            )));
        }
        if !(self.voxel_size.is_finite() && self.voxel_size > 0.0) {
            return Err(Error::InvalidConfig("voxel_size must be positive".into()));
        }
        if self.occupancy.len() != nx * ny * nz {
            return Err(Error::InvalidConfig("occupancy size mismatch".into()));
        }
        let mut object_grid = vec![0u32; nx * ny * nz];
        let mut surface_counts = Vec::with_capacity(self.objects.len());
        let mut objects = self.objects;
        for obj in &mut objects {
            if obj.voxels.is_empty() {
                return Err(Error::SceneGeneration(format!(
                    "object {} has no voxels",
                    obj.gt_id
                )));
            }
            if obj.class_id as usize >= self.n_classes {
                return Err(Error::SceneGeneration(format!(
                    "object {} class {} outside [0, {})",
                    obj.gt_id, obj.class_id, self.n_classes
                )));
            }
            obj.voxels.sort();
            obj.voxels.dedup();
            for &v in &obj.voxels {
                let in_bounds = v.0 >= 0
                    && v.1 >= 0
                    && v.2 >= 0
                    && (v.0 as usize) < nx
                    && (v.1 as usize) < ny
                    && (v.2 as usize) < nz;
                if !in_bounds {
                    return Err(Error::SceneGeneration(format!(
                        "object {} voxel {:?} out of bounds",
                        obj.gt_id, v
                    )));
                }
                let k = (v.2 as usize * ny + v.1 as usize) * nx + v.0 as usize;
                if self.occupancy[k] == WALL {
                    return Err(Error::SceneGeneration(format!(
                        "object {} voxel {:?} overlaps a wall",
                        obj.gt_id, v
                    )));
                }
                if object_grid[k] != 0 {
                    return Err(Error::SceneGeneration(format!(
                        "object {} voxel {:?} overlaps object {}",
                        obj.gt_id,
                        v,
                        object_grid[k] - 1
                    )));
                }
                object_grid[k] = obj.gt_id + 1;
            }
            obj.connected = is_26_connected(&obj.voxels);
            if !obj.connected {
                return Err(Error::SceneGeneration(format!(
                    "object {} is not 26-connected",
                    obj.gt_id
                )));
            }
        }
        for obj in &objects {
            let set: BTreeSet<Voxel> = obj.voxels.iter().copied().collect();
            let n = obj
                .voxels
                .iter()
                .filter(|v| {
                    FACE_OFFSETS
                        .iter()
                        .any(|d| !set.contains(&Voxel(v.0 + d[0], v.1 + d[1], v.2 + d[2])))
                })
                .count();
            surface_counts.push(n);
        }

        let mut walkable = vec![false; nx * ny];
        for y in 0..ny {
            for x in 0..nx {
                let floor = (y * nx) + x;
                let supported = self.occupancy[floor] == WALL;
                let clear = (1..nz).all(|z| {
                    let k = (z * ny + y) * nx + x;
                    self.occupancy[k] == FREE && object_grid[k] == 0
                });
                walkable[y * nx + x] = supported && clear;
            }
        }

        Ok(Scene {
            dims: self.dims,
            voxel_size: self.voxel_size,
            n_classes: self.n_classes,
            seed: self.seed,
            occupancy: self.occupancy,
            objects,
            object_grid,
            walkable,
            surface_counts,
        })
    }
}

const FACE_OFFSETS: [[i32; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

fn is_26_connected(voxels: &[Voxel]) -> bool {
    let Some(&start) = voxels.first() else {
        return false;
    };
    let set: BTreeSet<Voxel> = voxels.iter().copied().collect();
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        for n in v.neighbors26() {
            if set.contains(&n) && seen.insert(n) {
                queue.push_back(n);
            }
        }
    }
    seen.len() == set.len()
}

/// Number of 4-connected components among walkable cells.
pub fn walkable_components(scene: &Scene) -> usize {
    let (nx, ny) = scene.grid_size();
    let mut seen = vec![false; nx * ny];
    let mut count = 0;
    for start in scene.walkable_cells() {
        if seen[start.1 * nx + start.0] {
            continue;
        }
        count += 1;
        flood4(nx, ny, start, &mut seen, |c| scene.walkable(c));
    }
    count
}

fn flood4(nx: usize, ny: usize, start: Cell, seen: &mut [bool], open: impl Fn(Cell) -> bool) {
    let mut queue = VecDeque::from([start]);
    seen[start.1 * nx + start.0] = true;
    while let Some(Cell(i, j)) = queue.pop_front() {
        let nbrs = [
            (i.wrapping_sub(1), j),
            (i + 1, j),
            (i, j.wrapping_sub(1)),
            (i, j + 1),
        ];
        for (a, b) in nbrs {
            if a < nx && b < ny && !seen[b * nx + a] && open(Cell(a, b)) {
                seen[b * nx + a] = true;
                queue.push_back(Cell(a, b));
            }
        }
    }
}

/// Generates a room layout and places `n_objects` objects on the floor.
///
/// Objects are columnar stacks standing on the floor, so a column is either
/// fully free above the floor or blocked. Every placement keeps the walkable
/// cells in a single 4-connected component.
pub fn generate_scene(config: &SceneGenConfig, seed: u64) -> Result<Scene> {
    let [nx, ny, nz] = config.dims;
    if config.n_classes < 2 {
        return Err(Error::InvalidConfig("at least two classes required".into()));
    }
    if nx < 8 || ny < 8 || nz < 4 {
        return Err(Error::InvalidConfig(format!(
            "dims {:?} too small for a scene",
            config.dims
        )));
    }
    let [fmin, fmax] = config.footprint;
    let [hmin, hmax] = config.height;
    if fmin == 0 || fmin > fmax || hmin == 0 || hmin > hmax {
        return Err(Error::InvalidConfig("empty object size range".into()));
    }
    if hmax + 1 >= nz {
        return Err(Error::InvalidConfig(format!(
            "object height {hmax} does not fit under nz = {nz}"
        )));
    }
    let [rx, ry] = config.room_grid;
    if rx == 0 || ry == 0 || nx / rx < 6 || ny / ry < 6 {
        return Err(Error::InvalidConfig(format!(
            "room grid {:?} does not fit dims {:?}",
            config.room_grid, config.dims
        )));
    }

    let mut rng = rng::stream(seed, &[0x5CE7E]);
    let mut b = SceneBuilder::new(config.dims, config.voxel_size, config.n_classes).seed(seed);
    let top = nz as i32 - 1;

    // Interior walls with one door per room-to-room boundary.
    let xs: Vec<usize> = (1..rx).map(|k| k * nx / rx).collect();
    let ys: Vec<usize> = (1..ry).map(|k| k * ny / ry).collect();
    for &wx in &xs {
        b.wall_box(Voxel(wx as i32, 0, 0), Voxel(wx as i32, ny as i32 - 1, top));
    }
    for &wy in &ys {
        b.wall_box(Voxel(0, wy as i32, 0), Voxel(nx as i32 - 1, wy as i32, top));
    }
    let bounds = |cuts: &[usize], n: usize| -> Vec<(usize, usize)> {
        let mut edges = vec![0];
        edges.extend_from_slice(cuts);
        edges.push(n - 1);
        edges.windows(2).map(|w| (w[0] + 1, w[1] - 1)).collect()
    };
    let xr = bounds(&xs, nx);
    let yr = bounds(&ys, ny);
    let door = config.door_width.max(1);
    let carve = |rng: &mut rand_chacha::ChaCha8Rng, lo: usize, hi: usize| -> (usize, usize) {
        let span = hi + 1 - lo;
        let w = door.min(span);
        let start = lo + rng.random_range(0..=(span - w));
        (start, start + w - 1)
    };
    for &wx in &xs {
        for &(y0, y1) in &yr {
            let (a, c) = carve(&mut rng, y0, y1);
            b.clear_box(
                Voxel(wx as i32, a as i32, 1),
                Voxel(wx as i32, c as i32, top),
            );
        }
    }
    for &wy in &ys {
        for &(x0, x1) in &xr {
            let (a, c) = carve(&mut rng, x0, x1);
            b.clear_box(
                Voxel(a as i32, wy as i32, 1),
                Voxel(c as i32, wy as i32, top),
            );
        }
    }

    // Object placement on a scratch walkable grid.
    let layout = b.clone().build()?;
    let mut blocked: Vec<bool> = (0..nx * ny)
        .map(|k| !layout.walkable(Cell(k % nx, k / nx)))
        .collect();
    // Door cells stay clear so rooms remain connected without relying on retries.
    let mut reserved = vec![false; nx * ny];
    for &wx in &xs {
        for y in 0..ny {
            for dx in -2i32..=2 {
                let x = wx as i32 + dx;
                if x >= 0 && (x as usize) < nx && layout.walkable(Cell(wx, y)) {
                    reserved[y * nx + x as usize] = true;
                }
            }
        }
    }
    for &wy in &ys {
        for x in 0..nx {
            for dy in -2i32..=2 {
                let y = wy as i32 + dy;
                if y >= 0 && (y as usize) < ny && layout.walkable(Cell(x, wy)) {
                    reserved[y as usize * nx + x] = true;
                }
            }
        }
    }

    let margin = config.clearance as i32;
    for k in 0..config.n_objects {
        let mut placed = false;
        for _ in 0..config.max_retries {
            let w = rng.random_range(fmin..=fmax);
            let d = rng.random_range(fmin..=fmax);
            let h = rng.random_range(hmin..=hmax);
            if w + 2 * config.clearance + 2 > nx || d + 2 * config.clearance + 2 > ny {
                continue;
            }
            let x0 = rng.random_range(1..=(nx - 1 - w)) as i32;
            let y0 = rng.random_range(1..=(ny - 1 - d)) as i32;
            let fits = (y0 - margin..y0 + d as i32 + margin).all(|y| {
                (x0 - margin..x0 + w as i32 + margin).all(|x| {
                    x >= 0
                        && y >= 0
                        && (x as usize) < nx
                        && (y as usize) < ny
                        && !blocked[y as usize * nx + x as usize]
                        && !reserved[y as usize * nx + x as usize]
                })
            });
            if !fits {
                continue;
            }
            let mut trial = blocked.clone();
            for y in y0..y0 + d as i32 {
                for x in x0..x0 + w as i32 {
                    trial[y as usize * nx + x as usize] = true;
                }
            }
            if !single_component(nx, ny, &trial) {
                continue;
            }
            // Column heights jitter a little so objects are not all perfect boxes.
            let mut voxels = Vec::new();
            for y in y0..y0 + d as i32 {
                for x in x0..x0 + w as i32 {
                    let hc = rng.random_range(h.saturating_sub(2).max(1)..=h);
                    for z in 1..=hc as i32 {
                        voxels.push(Voxel(x, y, z));
                    }
                }
            }
            let class_id = rng.random_range(0..config.n_classes) as u32;
            b.object(class_id, voxels);
            blocked = trial;
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::SceneGeneration(format!(
                "could not place object {k} after {} attempts",
                config.max_retries
            )));
        }
    }
    b.build()
}

fn single_component(nx: usize, ny: usize, blocked: &[bool]) -> bool {
    let Some(start) = (0..nx * ny).find(|&k| !blocked[k]) else {
        return false;
    };
    let mut seen = vec![false; nx * ny];
    flood4(nx, ny, Cell(start % nx, start / nx), &mut seen, |c| {
        !blocked[c.1 * nx + c.0]
    });
    (0..nx * ny).all(|k| blocked[k] || seen[k])
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent BFS flood fill over 26-neighbourhoods.
    fn flood_components(voxels: &[Voxel]) -> usize {
        let set: BTreeSet<Voxel> = voxels.iter().copied().collect();
        let mut seen = BTreeSet::new();
        let mut comps = 0;
        for &v in &set {
            if seen.contains(&v) {
                continue;
            }
            comps += 1;
            let mut stack = vec![v];
            seen.insert(v);
            while let Some(c) = stack.pop() {
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        for dz in -1..=1 {
                            let n = Voxel(c.0 + dx, c.1 + dy, c.2 + dz);
                            if set.contains(&n) && seen.insert(n) {
                                stack.push(n);
                            }
                        }
                    }
                }
            }
        }
        comps
    }

    #[test]
    fn empty_scene_has_free_interior() {
        let cfg = SceneGenConfig {
            dims: [40, 40, 20],
            n_objects: 0,
            ..Default::default()
        };
        let s = generate_scene(&cfg, 1).unwrap();
        assert!(s.objects().is_empty());
        for x in 1..39 {
            for y in 1..39 {
                for z in 1..20 {
                    assert!(!s.is_solid(Voxel(x, y, z)));
                }
                assert!(s.walkable(Cell(x as usize, y as usize)));
            }
        }
        assert!(!s.walkable(Cell(0, 5)));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneGenConfig {
            dims: [64, 64, 20],
            n_objects: 6,
            room_grid: [2, 2],
            ..Default::default()
        };
        let a = generate_scene(&cfg, 11).unwrap();
        let b = generate_scene(&cfg, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.save(), b.save());
        let c = generate_scene(&cfg, 12).unwrap();
        assert_ne!(a.save(), c.save());
    }

    #[test]
    fn five_objects_disjoint_and_connected() {
        let cfg = SceneGenConfig {
            dims: [48, 48, 20],
            n_objects: 5,
            n_classes: 3,
            ..Default::default()
        };
        let s = generate_scene(&cfg, 7).unwrap();
        assert_eq!(s.objects().len(), 5);
        let mut all = BTreeSet::new();
        for o in s.objects() {
            assert!(o.class_id < 3);
            assert_eq!(flood_components(&o.voxels), 1);
            for v in &o.voxels {
                assert!(all.insert(*v), "voxel {v:?} shared");
                assert!(!s.is_wall(*v));
            }
        }
    }

    #[test]
    fn walkable_cells_mutually_reachable() {
        for seed in 0..10 {
            let cfg = SceneGenConfig {
                dims: [72, 72, 20],
                n_objects: 10,
                room_grid: [2, 2],
                ..Default::default()
            };
            let s = generate_scene(&cfg, seed).unwrap();
            assert_eq!(walkable_components(&s), 1, "seed {seed}");
        }
    }

    #[test]
    fn impossible_placement_is_an_error() {
        let cfg = SceneGenConfig {
            dims: [12, 12, 20],
            n_objects: 40,
            max_retries: 20,
            ..Default::default()
        };
        assert!(matches!(
            generate_scene(&cfg, 3),
            Err(Error::SceneGeneration(_))
        ));
    }

    #[test]
    fn rejects_single_class() {
        let cfg = SceneGenConfig {
            n_classes: 1,
            ..Default::default()
        };
        assert!(generate_scene(&cfg, 0).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = SceneGenConfig {
            dims: [48, 48, 16],
            n_objects: 4,
            ..Default::default()
        };
        let s = generate_scene(&cfg, 5).unwrap();
        let bytes = s.save();
        assert_eq!(Scene::load(&bytes).unwrap(), s);

        let empty = generate_scene(&SceneGenConfig::default(), 5).unwrap();
        assert_eq!(Scene::load(&empty.save()).unwrap(), empty);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let s = generate_scene(&SceneGenConfig::default(), 5).unwrap();
        let bytes = s.save();
        let err = Scene::load(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn load_rejects_object_inside_wall() {
        let mut b = SceneBuilder::new([10, 10, 6], 0.05, 2);
        b.box_object(0, Voxel(0, 0, 1), Voxel(1, 1, 2));
        assert!(b.build().is_err());
    }

    #[test]
    fn surface_count_of_solid_cube() {
        let mut b = SceneBuilder::new([10, 10, 8], 0.05, 2);
        let id = b.box_object(1, Voxel(3, 3, 1), Voxel(5, 5, 3));
        let s = b.build().unwrap();
        // 27 voxels, only the centre is interior.
        assert_eq!(s.surface_count(id), 26);
    }
}
