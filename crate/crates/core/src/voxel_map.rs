//! Semantic voxel map: per-voxel logit accumulation, max-score hard labels and
//! 26-connected instance resolution.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::detector::{argmax, softmax, Detection};
use crate::error::{Error, Result};
use crate::geometry::Voxel;
use crate::sensor::FrameObservation;

pub type InstanceId = u32;

/// Handle of one inserted detection inside a map.
pub type EntryId = u32;

#[derive(Debug, Clone, PartialEq)]
struct EntryRecord {
    frame_id: u32,
    logits: Vec<f64>,
    probs: Vec<f64>,
    peak_class: usize,
}

impl EntryRecord {
    fn peak(&self) -> f64 {
        self.probs[self.peak_class]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelCell {
    entries: Vec<EntryId>,
    hard_label: u32,
    owner: Option<InstanceId>,
}

impl VoxelCell {
    pub fn n_entries(&self) -> usize {
        self.entries.len()
    }

    pub fn hard_label(&self) -> u32 {
        self.hard_label
    }

    pub fn owner(&self) -> Option<InstanceId> {
        self.owner
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub u: InstanceId,
    pub class: u32,
    /// Sorted.
    pub voxels: Vec<Voxel>,
    /// Entries making up `Q(u)`, in canonical order.
    logit_set: Vec<EntryId>,
    pub bbox3d: (Voxel, Voxel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticVoxelMap {
    voxel_size: f64,
    n_classes: usize,
    cells: BTreeMap<Voxel, VoxelCell>,
    records: Vec<EntryRecord>,
    instances: BTreeMap<InstanceId, InstanceRecord>,
    entry_instance: Vec<Option<InstanceId>>,
    dirty: bool,
    skipped_pixels: usize,
}

impl SemanticVoxelMap {
    pub fn new(voxel_size: f64, n_classes: usize) -> Self {
        SemanticVoxelMap {
            voxel_size,
            n_classes,
            cells: BTreeMap::new(),
            records: Vec::new(),
            instances: BTreeMap::new(),
            entry_instance: Vec::new(),
            dirty: false,
            skipped_pixels: 0,
        }
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn is_dirty(&self) -> bool {
        self.dirty
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Masked pixels dropped because their ray had no depth.
    pub fn skipped_pixels(&self) -> usize {
        self.skipped_pixels
    }

    pub fn cell(&self, v: Voxel) -> Option<&VoxelCell> {
        self.cells.get(&v)
    }

    pub fn cells(&self) -> impl Iterator<Item = (&Voxel, &VoxelCell)> {
        self.cells.iter()
    }

    pub fn n_labeled(&self) -> usize {
        self.cells.len()
    }

    /// `(frame_id, logits)` pairs stored at a voxel.
    pub fn logit_entries(&self, v: Voxel) -> Vec<(u32, &[f64])> {
        self.cells
            .get(&v)
            .map(|c| {
                c.entries
                    .iter()
                    .map(|&e| {
                        let r = &self.records[e as usize];
                        (r.frame_id, r.logits.as_slice())
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Records one detection and returns its entry handle. Every masked ray
    /// whose depth is known adds one entry to the voxel containing its hit point.
    pub fn insert_detection(&mut self, det: &Detection, obs: &FrameObservation) -> EntryId {
        let id = self.push_record(det.frame_id, &det.logits);
        for &p in &det.mask {
            match obs.surface_point(p, self.voxel_size) {
                Some(pt) => {
                    let v = Voxel::from_point(pt, self.voxel_size);
                    self.attach(v, id);
                }
                None => self.skipped_pixels += 1,
            }
        }
        id
    }

    /// Records a single logit vector observed at one voxel.
    pub fn insert_entry(&mut self, v: Voxel, frame_id: u32, logits: &[f64]) -> EntryId {
        let id = self.push_record(frame_id, logits);
        self.attach(v, id);
        id
    }

    /// Records one logit vector observed over several voxels.
    pub fn insert_entry_at(&mut self, voxels: &[Voxel], frame_id: u32, logits: &[f64]) -> EntryId {
        let id = self.push_record(frame_id, logits);
        for &v in voxels {
            self.attach(v, id);
        }
        id
    }

    fn push_record(&mut self, frame_id: u32, logits: &[f64]) -> EntryId {
        assert_eq!(logits.len(), self.n_classes, "logit vector length");
        let probs = softmax(logits);
        let peak_class = argmax(&probs);
        self.records.push(EntryRecord {
            frame_id,
            logits: logits.to_vec(),
            probs,
            peak_class,
        });
        self.entry_instance.push(None);
        self.dirty = true;
        (self.records.len() - 1) as EntryId
    }

    fn attach(&mut self, v: Voxel, id: EntryId) {
        self.cells
            .entry(v)
            .or_insert_with(|| VoxelCell {
                entries: Vec::new(),
                hard_label: 0,
                owner: None,
            })
            .entries
            .push(id);
        self.dirty = true;
    }

    /// Order-free key for an entry: higher score first, then lower class,
    /// then earlier frame, then the logit bits.
    fn label_key(&self, e: EntryId) -> (std::cmp::Reverse<u64>, usize, u32) {
        let r = &self.records[e as usize];
        (
            std::cmp::Reverse(r.peak().to_bits()),
            r.peak_class,
            r.frame_id,
        )
    }

    fn canonical_key(&self, e: EntryId) -> (u32, Vec<u64>) {
        let r = &self.records[e as usize];
        (r.frame_id, r.logits.iter().map(|x| x.to_bits()).collect())
    }

    /// Recomputes hard labels and the instance partition from scratch.
    pub fn resolve_instances(&mut self) {
        let labels: Vec<u32> = self
            .cells
            .values()
            .map(|c| {
                let best = c
                    .entries
                    .iter()
                    .copied()
                    .min_by_key(|&e| self.label_key(e))
                    .expect("cells are never empty");
                self.records[best as usize].peak_class as u32
            })
            .collect();
        for (cell, label) in self.cells.values_mut().zip(&labels) {
            cell.hard_label = *label;
        }

        let voxels: Vec<Voxel> = self.cells.keys().copied().collect();
        let components = label_components(&voxels, &labels);

        self.instances.clear();
        for x in self.entry_instance.iter_mut() {
            *x = None;
        }
        let mut votes: Vec<BTreeMap<InstanceId, usize>> = vec![BTreeMap::new(); self.records.len()];
        for (u, members) in components.iter().enumerate() {
            let u = u as InstanceId;
            let mut lo = voxels[members[0]];
            let mut hi = voxels[members[0]];
            let mut q: Vec<EntryId> = Vec::new();
            for &k in members.iter() {
                let v = voxels[k];
                lo = Voxel(lo.0.min(v.0), lo.1.min(v.1), lo.2.min(v.2));
                hi = Voxel(hi.0.max(v.0), hi.1.max(v.1), hi.2.max(v.2));
                let cell = self.cells.get_mut(&v).expect("voxel present");
                cell.owner = Some(u);
                for &e in &cell.entries {
                    *votes[e as usize].entry(u).or_default() += 1;
                    q.push(e);
                }
            }
            q.sort_unstable();
            q.dedup();
            q.sort_by_cached_key(|&e| self.canonical_key(e));
            self.instances.insert(
                u,
                InstanceRecord {
                    u,
                    class: labels[members[0]],
                    voxels: members.iter().map(|&k| voxels[k]).collect(),
                    logit_set: q,
                    bbox3d: (lo, hi),
                },
            );
        }
        for (e, v) in votes.into_iter().enumerate() {
            self.entry_instance[e] = v
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(u, _)| u);
        }
        self.dirty = false;
    }

    pub fn instances(&self) -> impl Iterator<Item = &InstanceRecord> {
        self.instances.values()
    }

    pub fn n_instances(&self) -> usize {
        self.instances.len()
    }

    pub fn instance(&self, u: InstanceId) -> Result<&InstanceRecord> {
        self.instances.get(&u).ok_or(Error::UnknownInstance(u))
    }

    /// Owner instance of a voxel, as of the last resolve.
    pub fn owner(&self, v: Voxel) -> Option<InstanceId> {
        self.cells.get(&v).and_then(|c| c.owner)
    }

    /// Instance holding most of an entry's voxels, as of the last resolve.
    pub fn entry_instance(&self, e: EntryId) -> Option<InstanceId> {
        self.entry_instance.get(e as usize).copied().flatten()
    }

    /// The logit vectors `Q(u)` in canonical order.
    pub fn logit_set(&self, u: InstanceId) -> Result<Vec<&[f64]>> {
        let inst = self.instance(u)?;
        Ok(inst
            .logit_set
            .iter()
            .map(|&e| self.records[e as usize].logits.as_slice())
            .collect())
    }

    /// Mean of `softmax(λ)` over `Q(u)`.
    pub fn aggregated_softmax(&self, u: InstanceId) -> Result<Vec<f64>> {
        let inst = self.instance(u)?;
        let mut acc = vec![0.0; self.n_classes];
        for &e in &inst.logit_set {
            for (a, p) in acc.iter_mut().zip(&self.records[e as usize].probs) {
                *a += p;
            }
        }
        let n = inst.logit_set.len() as f64;
        Ok(acc.into_iter().map(|a| a / n).collect())
    }

    pub fn dump(&self) -> MapDump {
        MapDump {
            schema_version: 1,
            voxel_size: self.voxel_size,
            voxels: self
                .cells
                .iter()
                .map(|(v, c)| VoxelDump {
                    index: *v,
                    hard_label: c.hard_label,
                    n_entries: c.entries.len(),
                })
                .collect(),
            instances: self
                .instances
                .values()
                .map(|i| InstanceDump {
                    u: i.u,
                    class: i.class,
                    n_voxels: i.voxels.len(),
                    lambda_bar: self.aggregated_softmax(i.u).expect("known instance"),
                })
                .collect(),
        }
    }
}

/// 26-connected components of equal label, by union-find over a sorted
/// voxel list. Components are returned ordered by their smallest voxel; each
/// holds indices into `voxels` in ascending order.
fn label_components(voxels: &[Voxel], labels: &[u32]) -> Vec<Vec<usize>> {
    let index: HashMap<Voxel, usize> = voxels.iter().enumerate().map(|(k, v)| (*v, k)).collect();
    let mut parent: Vec<usize> = (0..voxels.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (k, v) in voxels.iter().enumerate() {
        for n in v.neighbors26() {
            if n >= *v {
                continue;
            }
            if let Some(&m) = index.get(&n) {
                if labels[m] == labels[k] {
                    let a = find(&mut parent, k);
                    let b = find(&mut parent, m);
                    if a != b {
                        // Keep the smaller index as root so roots are component minima.
                        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                        parent[hi] = lo;
                    }
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for k in 0..voxels.len() {
        let r = find(&mut parent, k);
        groups.entry(r).or_default().push(k);
    }
    groups.into_values().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapDump {
    pub schema_version: u32,
    pub voxel_size: f64,
    pub voxels: Vec<VoxelDump>,
    pub instances: Vec<InstanceDump>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VoxelDump {
    pub index: Voxel,
    pub hard_label: u32,
    pub n_entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceDump {
    pub u: InstanceId,
    pub class: u32,
    pub n_voxels: usize,
    pub lambda_bar: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::{BTreeSet, VecDeque};

    fn logits_with_peak(c: usize, class: usize, p: f64) -> Vec<f64> {
        // softmax peak of exactly p on `class`, remainder spread evenly.
        let rest = (1.0 - p) / (c - 1) as f64;
        (0..c)
            .map(|k| if k == class { p.ln() } else { rest.ln() })
            .collect()
    }

    #[test]
    fn duplicate_insert_accumulates() {
        let mut m = SemanticVoxelMap::new(0.05, 3);
        let l = [1.0, 0.0, 0.0];
        m.insert_entry(Voxel(1, 1, 1), 0, &l);
        m.insert_entry(Voxel(1, 1, 1), 0, &l);
        let e = m.logit_entries(Voxel(1, 1, 1));
        assert_eq!(e.len(), 2);
        assert_eq!(e[0], e[1]);
        assert!(m.is_dirty());
        m.resolve_instances();
        assert!(!m.is_dirty());
        assert_eq!(m.logit_set(0).unwrap().len(), 2);
    }

    #[test]
    fn hard_label_is_max_score() {
        let mut m = SemanticVoxelMap::new(0.05, 4);
        m.insert_entry(Voxel(0, 0, 0), 1, &logits_with_peak(4, 3, 0.6));
        m.insert_entry(Voxel(0, 0, 0), 2, &logits_with_peak(4, 1, 0.9));
        m.resolve_instances();
        assert_eq!(m.cell(Voxel(0, 0, 0)).unwrap().hard_label(), 1);
    }

    #[test]
    fn hard_label_ties_prefer_lower_class() {
        let mut m = SemanticVoxelMap::new(0.05, 4);
        m.insert_entry(Voxel(0, 0, 0), 1, &logits_with_peak(4, 3, 0.7));
        m.insert_entry(Voxel(0, 0, 0), 2, &logits_with_peak(4, 2, 0.7));
        m.resolve_instances();
        assert_eq!(m.cell(Voxel(0, 0, 0)).unwrap().hard_label(), 2);
    }

    #[test]
    fn connectivity_cases() {
        let a = [2.0, 0.0];
        let b = [0.0, 2.0];
        for (v2, l2, expect) in [
            (Voxel(1, 0, 0), a, 1),
            (Voxel(1, 1, 1), a, 1),
            (Voxel(1, 0, 0), b, 2),
            (Voxel(2, 0, 0), a, 2),
        ] {
            let mut m = SemanticVoxelMap::new(0.05, 2);
            m.insert_entry(Voxel(0, 0, 0), 0, &a);
            m.insert_entry(v2, 1, &l2);
            m.resolve_instances();
            assert_eq!(m.n_instances(), expect, "{v2:?}");
        }
    }

    #[test]
    fn aggregated_softmax_examples() {
        let ln2 = 2f64.ln();
        let mut m = SemanticVoxelMap::new(0.05, 2);
        m.insert_entry(Voxel(0, 0, 0), 0, &[ln2, 0.0]);
        m.resolve_instances();
        let p = m.aggregated_softmax(0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);

        m.insert_entry(Voxel(0, 0, 0), 1, &[0.0, ln2]);
        // Both entries peak at 2/3; the tie goes to class 0.
        m.resolve_instances();
        assert_eq!(m.n_instances(), 1);
        let p = m.aggregated_softmax(0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        assert!(matches!(
            m.aggregated_softmax(7),
            Err(Error::UnknownInstance(7))
        ));
    }

    #[test]
    fn entry_spanning_voxels_counts_once_in_q() {
        let mut m = SemanticVoxelMap::new(0.05, 2);
        let vs = [Voxel(0, 0, 0), Voxel(0, 0, 1), Voxel(0, 0, 2)];
        let e = m.insert_entry_at(&vs, 4, &[3.0, 0.0]);
        m.resolve_instances();
        assert_eq!(m.logit_set(0).unwrap().len(), 1);
        assert_eq!(m.entry_instance(e), Some(0));
    }

    fn bfs_partition(voxels: &BTreeMap<Voxel, u32>) -> BTreeSet<BTreeSet<Voxel>> {
        let mut seen = BTreeSet::new();
        let mut out = BTreeSet::new();
        for (&v, &l) in voxels {
            if seen.contains(&v) {
                continue;
            }
            let mut comp = BTreeSet::new();
            let mut q = VecDeque::from([v]);
            seen.insert(v);
            while let Some(c) = q.pop_front() {
                comp.insert(c);
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        for dz in -1..=1 {
                            let n = Voxel(c.0 + dx, c.1 + dy, c.2 + dz);
                            if voxels.get(&n) == Some(&l) && seen.insert(n) {
                                q.push_back(n);
                            }
                        }
                    }
                }
            }
            out.insert(comp);
        }
        out
    }

    proptest! {
        #[test]
        fn components_match_flood_fill(
            cells in proptest::collection::btree_map((0i32..6, 0i32..6, 0i32..6), 0usize..3, 1..80)
        ) {
            let mut m = SemanticVoxelMap::new(0.05, 3);
            let mut truth = BTreeMap::new();
            for (&(x, y, z), &c) in &cells {
                let mut l = vec![0.0; 3];
                l[c] = 4.0;
                m.insert_entry(Voxel(x, y, z), 0, &l);
                truth.insert(Voxel(x, y, z), c as u32);
            }
            m.resolve_instances();
            let got: BTreeSet<BTreeSet<Voxel>> = m
                .instances()
                .map(|i| i.voxels.iter().copied().collect())
                .collect();
            prop_assert_eq!(got, bfs_partition(&truth));
            let total: usize = m.instances().map(|i| i.voxels.len()).sum();
            prop_assert_eq!(total, m.n_labeled());
            for i in m.instances() {
                let p = m.aggregated_softmax(i.u).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(i.voxels.iter().all(|v| truth[v] == i.class));
            }
        }

        #[test]
        fn insertion_order_does_not_matter(
            entries in proptest::collection::vec(
                ((0i32..4, 0i32..4, 0i32..3), 0u32..5, proptest::collection::vec(-3.0f64..3.0, 3)),
                1..40),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let build = |order: &[usize]| {
                let mut m = SemanticVoxelMap::new(0.05, 3);
                for &k in order {
                    let ((x, y, z), f, l) = &entries[k];
                    m.insert_entry(Voxel(*x, *y, *z), *f, l);
                }
                m.resolve_instances();
                m
            };
            let order: Vec<usize> = (0..entries.len()).collect();
            let mut shuffled = order.clone();
            shuffled.shuffle(&mut crate::rng::stream(seed, &[]));
            let a = build(&order);
            let b = build(&shuffled);
            let da = a.dump();
            let db = b.dump();
            prop_assert_eq!(da, db);
        }
    }
}
