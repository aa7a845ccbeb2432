//! The hierarchical world model: map points, object landmarks, keyframes and
//! the two covisibility graphs (shared points, shared objects).
//!
//! Every observation is stored on both sides (entity → keyframe and
//! keyframe → entity). Both covisibility graphs are maintained incrementally
//! from those observation edges; [`Map::audit`] recomputes them from scratch
//! and checks referential integrity.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, BufRead, Write};

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::features::{Descriptor, Detection, Keypoint};
use crate::geometry::{Ellipsoid, Pose};

macro_rules! id_type {
    ($name:ident, $tag:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($tag, "{}"), self.0)
            }
        }
    };
}

id_type!(KeyFrameId, "kf");
id_type!(MapPointId, "mp");
id_type!(ObjectId, "obj");

/// Shared-point threshold for point covisibility edges.
pub const POINT_EDGE_THRESHOLD: u32 = 15;
/// Shared-object threshold for object covisibility edges.
pub const OBJECT_EDGE_THRESHOLD: u32 = 1;
/// Keyframes in which a point must fall inside an object's detections
/// before the object claims it.
pub const OWNERSHIP_MIN_VOTES: usize = 2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MapError {
    #[error("keyframe {0} already exists")]
    DuplicateId(KeyFrameId),
    #[error("unknown keyframe {0}")]
    UnknownKeyFrame(KeyFrameId),
    #[error("unknown map point {0}")]
    UnknownMapPoint(MapPointId),
    #[error("unknown object {0}")]
    UnknownObject(ObjectId),
    #[error("keypoint index {index} out of range for {kf}")]
    KeypointOutOfRange { kf: KeyFrameId, index: usize },
    #[error("detection index {index} out of range for {kf}")]
    DetectionOutOfRange { kf: KeyFrameId, index: usize },
    #[error("keypoint {index} of {kf} is already matched")]
    KeypointTaken { kf: KeyFrameId, index: usize },
}

#[derive(Debug, Clone)]
pub struct MapPoint {
    pub id: MapPointId,
    pub position: Vector3<f64>,
    pub descriptor: Descriptor,
    /// keyframe → keypoint index
    pub observations: BTreeMap<KeyFrameId, usize>,
    pub owner_object: Option<ObjectId>,
    /// For each object, the keyframes in which this point fell inside the
    /// object's detection.
    pub object_votes: BTreeMap<ObjectId, BTreeSet<KeyFrameId>>,
    pub first_keyframe: KeyFrameId,
}

#[derive(Debug, Clone)]
pub struct ObjectLandmark {
    pub id: ObjectId,
    pub ellipsoid: Ellipsoid,
    /// Majority label over observations.
    pub category: u32,
    pub category_votes: BTreeMap<u32, u32>,
    pub map_point_ids: BTreeSet<MapPointId>,
    /// keyframe → detection index
    pub observations: BTreeMap<KeyFrameId, usize>,
}

impl ObjectLandmark {
    fn refresh_category(&mut self) {
        if let Some((&c, _)) = self
            .category_votes
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        {
            self.category = c;
        }
    }
}

#[derive(Debug, Clone)]
pub struct KeyFrame {
    pub id: KeyFrameId,
    pub timestamp: f64,
    pub pose: Pose,
    pub keypoints: Vec<Keypoint>,
    pub detections: Vec<Detection>,
    /// keypoint index → map point
    pub matched_points: BTreeMap<usize, MapPointId>,
    /// object → detection index
    pub observed_objects: BTreeMap<ObjectId, usize>,
}

impl KeyFrame {
    pub fn new(id: KeyFrameId, timestamp: f64, pose: Pose, keypoints: Vec<Keypoint>, detections: Vec<Detection>) -> Self {
        Self {
            id,
            timestamp,
            pose,
            keypoints,
            detections,
            matched_points: BTreeMap::new(),
            observed_objects: BTreeMap::new(),
        }
    }
}

/// Weighted, symmetric keyframe graph. All positive shared counts are kept;
/// edges are reported only at or above `threshold`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CovisibilityGraph {
    threshold: u32,
    counts: BTreeMap<KeyFrameId, BTreeMap<KeyFrameId, u32>>,
}

impl CovisibilityGraph {
    pub fn new(threshold: u32) -> Self {
        Self { threshold, counts: BTreeMap::new() }
    }

    pub fn threshold(&self) -> u32 {
        self.threshold
    }

    fn bump(&mut self, a: KeyFrameId, b: KeyFrameId, delta: i64) {
        if a == b {
            return;
        }
        for (x, y) in [(a, b), (b, a)] {
            let row = self.counts.entry(x).or_default();
            let w = row.entry(y).or_insert(0);
            let nw = *w as i64 + delta;
            debug_assert!(nw >= 0, "negative covisibility count");
            if nw <= 0 {
                row.remove(&y);
                if row.is_empty() {
                    self.counts.remove(&x);
                }
            } else {
                *w = nw as u32;
            }
        }
    }

    /// Shared-entity count between two keyframes (0 when unrelated).
    pub fn weight(&self, a: KeyFrameId, b: KeyFrameId) -> u32 {
        self.counts.get(&a).and_then(|r| r.get(&b)).copied().unwrap_or(0)
    }

    /// Neighbors with weight ≥ `min_weight`, unsorted.
    pub fn neighbors(&self, kf: KeyFrameId, min_weight: u32) -> Vec<(KeyFrameId, u32)> {
        self.counts
            .get(&kf)
            .map(|row| row.iter().filter(|(_, &w)| w >= min_weight).map(|(&k, &w)| (k, w)).collect())
            .unwrap_or_default()
    }

    /// Edges `(a, b, w)` with `a < b` and `w ≥ threshold`.
    pub fn edges(&self) -> Vec<(KeyFrameId, KeyFrameId, u32)> {
        let mut out = Vec::new();
        for (&a, row) in &self.counts {
            for (&b, &w) in row {
                if a < b && w >= self.threshold {
                    out.push((a, b, w));
                }
            }
        }
        out
    }

    /// Builds the graph from entity → observing-keyframes sets.
    pub fn from_observers(threshold: u32, observers: impl IntoIterator<Item = Vec<KeyFrameId>>) -> Self {
        let mut g = Self::new(threshold);
        for kfs in observers {
            for (i, &a) in kfs.iter().enumerate() {
                for &b in &kfs[i + 1..] {
                    g.bump(a, b, 1);
                }
            }
        }
        g
    }
}

/// Keyframes and points selected for a local bundle adjustment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalMap {
    pub keyframes: Vec<KeyFrameId>,
    pub points: Vec<MapPointId>,
    /// Keyframes outside the window that observe some local point.
    pub fixed: Vec<KeyFrameId>,
}

#[derive(Debug, Clone, Copy)]
pub struct LocalMapOptions {
    /// Include object-covisibility neighbors.
    pub use_object_graph: bool,
    /// Cap on object-covisibility neighbors; `None` includes all.
    pub object_neighbors: Option<usize>,
    /// Number of strongest point-covisibility neighbors to include.
    pub point_neighbors: usize,
    pub min_point_weight: u32,
}

impl Default for LocalMapOptions {
    fn default() -> Self {
        Self { use_object_graph: true, object_neighbors: None, point_neighbors: 10, min_point_weight: POINT_EDGE_THRESHOLD }
    }
}

/// Outcome of [`Map::audit`].
#[derive(Debug, Clone, Default)]
pub struct AuditReport {
    pub problems: Vec<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.problems.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Map {
    points: BTreeMap<MapPointId, MapPoint>,
    objects: BTreeMap<ObjectId, ObjectLandmark>,
    keyframes: BTreeMap<KeyFrameId, KeyFrame>,
    point_graph: CovisibilityGraph,
    object_graph: CovisibilityGraph,
    next_point: u64,
    next_object: u64,
}

impl Default for Map {
    fn default() -> Self {
        Self::new()
    }
}

impl Map {
    pub fn new() -> Self {
        Self {
            points: BTreeMap::new(),
            objects: BTreeMap::new(),
            keyframes: BTreeMap::new(),
            point_graph: CovisibilityGraph::new(POINT_EDGE_THRESHOLD),
            object_graph: CovisibilityGraph::new(OBJECT_EDGE_THRESHOLD),
            next_point: 0,
            next_object: 0,
        }
    }

    pub fn keyframes(&self) -> &BTreeMap<KeyFrameId, KeyFrame> {
        &self.keyframes
    }

    pub fn points(&self) -> &BTreeMap<MapPointId, MapPoint> {
        &self.points
    }

    pub fn objects(&self) -> &BTreeMap<ObjectId, ObjectLandmark> {
        &self.objects
    }

    pub fn keyframe(&self, id: KeyFrameId) -> Option<&KeyFrame> {
        self.keyframes.get(&id)
    }

    pub fn point(&self, id: MapPointId) -> Option<&MapPoint> {
        self.points.get(&id)
    }

    pub fn object(&self, id: ObjectId) -> Option<&ObjectLandmark> {
        self.objects.get(&id)
    }

    pub fn point_graph(&self) -> &CovisibilityGraph {
        &self.point_graph
    }

    pub fn object_graph(&self) -> &CovisibilityGraph {
        &self.object_graph
    }

    /// The gauge keyframe (smallest id), held fixed by bundle adjustment.
    pub fn first_keyframe(&self) -> Option<KeyFrameId> {
        self.keyframes.keys().next().copied()
    }

    pub fn last_keyframe(&self) -> Option<KeyFrameId> {
        self.keyframes.keys().next_back().copied()
    }

    pub fn set_keyframe_pose(&mut self, id: KeyFrameId, pose: Pose) -> Result<(), MapError> {
        self.keyframes.get_mut(&id).ok_or(MapError::UnknownKeyFrame(id))?.pose = pose;
        Ok(())
    }

    pub fn set_point_position(&mut self, id: MapPointId, position: Vector3<f64>) -> Result<(), MapError> {
        self.points.get_mut(&id).ok_or(MapError::UnknownMapPoint(id))?.position = position;
        Ok(())
    }

    pub fn set_object_ellipsoid(&mut self, id: ObjectId, ellipsoid: Ellipsoid) -> Result<(), MapError> {
        self.objects.get_mut(&id).ok_or(MapError::UnknownObject(id))?.ellipsoid = ellipsoid;
        Ok(())
    }

    /// Stores a keyframe and registers the reciprocal observations listed in
    /// its `matched_points` and `observed_objects`; both covisibility graphs
    /// are updated incrementally.
    pub fn insert_keyframe(&mut self, kf: KeyFrame) -> Result<KeyFrameId, MapError> {
        let id = kf.id;
        if self.keyframes.contains_key(&id) {
            return Err(MapError::DuplicateId(id));
        }
        for (&idx, pid) in &kf.matched_points {
            if idx >= kf.keypoints.len() {
                return Err(MapError::KeypointOutOfRange { kf: id, index: idx });
            }
            if !self.points.contains_key(pid) {
                return Err(MapError::UnknownMapPoint(*pid));
            }
        }
        for (oid, &det) in &kf.observed_objects {
            if det >= kf.detections.len() {
                return Err(MapError::DetectionOutOfRange { kf: id, index: det });
            }
            if !self.objects.contains_key(oid) {
                return Err(MapError::UnknownObject(*oid));
            }
        }
        let points: Vec<_> = kf.matched_points.iter().map(|(&i, &p)| (i, p)).collect();
        let objects: Vec<_> = kf.observed_objects.iter().map(|(&o, &d)| (o, d)).collect();
        let mut stored = kf;
        stored.matched_points.clear();
        stored.observed_objects.clear();
        self.keyframes.insert(id, stored);
        let mut seen = BTreeSet::new();
        for (idx, pid) in points {
            // A point matched to two keypoints of the same keyframe keeps the first.
            if seen.insert(pid) {
                self.add_point_observation(pid, id, idx)?;
            }
        }
        for (oid, det) in objects {
            self.add_object_observation(oid, id, det)?;
        }
        Ok(id)
    }

    /// Creates a map point observed by `kf` at keypoint `idx`.
    pub fn add_map_point(
        &mut self,
        position: Vector3<f64>,
        descriptor: Descriptor,
        kf: KeyFrameId,
        idx: usize,
    ) -> Result<MapPointId, MapError> {
        let frame = self.keyframes.get(&kf).ok_or(MapError::UnknownKeyFrame(kf))?;
        if idx >= frame.keypoints.len() {
            return Err(MapError::KeypointOutOfRange { kf, index: idx });
        }
        if frame.matched_points.contains_key(&idx) {
            return Err(MapError::KeypointTaken { kf, index: idx });
        }
        let id = MapPointId(self.next_point);
        self.next_point += 1;
        self.points.insert(
            id,
            MapPoint {
                id,
                position,
                descriptor,
                observations: BTreeMap::new(),
                owner_object: None,
                object_votes: BTreeMap::new(),
                first_keyframe: kf,
            },
        );
        self.add_point_observation(id, kf, idx)?;
        Ok(id)
    }

    /// Links keypoint `idx` of `kf` to point `pid`. A keyframe observes a
    /// point at most once; an already-linked pair is left unchanged.
    pub fn add_point_observation(&mut self, pid: MapPointId, kf: KeyFrameId, idx: usize) -> Result<(), MapError> {
        let frame = self.keyframes.get_mut(&kf).ok_or(MapError::UnknownKeyFrame(kf))?;
        if idx >= frame.keypoints.len() {
            return Err(MapError::KeypointOutOfRange { kf, index: idx });
        }
        if frame.matched_points.contains_key(&idx) {
            return Err(MapError::KeypointTaken { kf, index: idx });
        }
        let point = self.points.get_mut(&pid).ok_or(MapError::UnknownMapPoint(pid))?;
        if point.observations.contains_key(&kf) {
            return Ok(());
        }
        frame.matched_points.insert(idx, pid);
        let others: Vec<_> = point.observations.keys().copied().collect();
        point.observations.insert(kf, idx);
        for other in others {
            self.point_graph.bump(kf, other, 1);
        }
        Ok(())
    }

    pub fn remove_point_observation(&mut self, pid: MapPointId, kf: KeyFrameId) -> Result<(), MapError> {
        let point = self.points.get_mut(&pid).ok_or(MapError::UnknownMapPoint(pid))?;
        let Some(idx) = point.observations.remove(&kf) else {
            return Ok(());
        };
        let others: Vec<_> = point.observations.keys().copied().collect();
        if let Some(frame) = self.keyframes.get_mut(&kf) {
            frame.matched_points.remove(&idx);
        }
        for other in others {
            self.point_graph.bump(kf, other, -1);
        }
        Ok(())
    }

    /// Removes a point and every edge that references it.
    pub fn remove_map_point(&mut self, pid: MapPointId) -> Result<(), MapError> {
        let kfs: Vec<_> = self
            .points
            .get(&pid)
            .ok_or(MapError::UnknownMapPoint(pid))?
            .observations
            .keys()
            .copied()
            .collect();
        for kf in kfs {
            self.remove_point_observation(pid, kf)?;
        }
        let point = self.points.remove(&pid).expect("checked above");
        if let Some(owner) = point.owner_object {
            if let Some(obj) = self.objects.get_mut(&owner) {
                obj.map_point_ids.remove(&pid);
            }
        }
        Ok(())
    }

    /// Merges `drop` into `keep`: observations of `drop` move to `keep` where
    /// the keyframe does not already observe `keep`; `drop` is deleted.
    pub fn fuse_points(&mut self, keep: MapPointId, drop: MapPointId) -> Result<(), MapError> {
        if keep == drop {
            return Ok(());
        }
        if !self.points.contains_key(&keep) {
            return Err(MapError::UnknownMapPoint(keep));
        }
        let drop_obs: Vec<_> = self
            .points
            .get(&drop)
            .ok_or(MapError::UnknownMapPoint(drop))?
            .observations
            .iter()
            .map(|(&k, &i)| (k, i))
            .collect();
        let drop_votes = self.points[&drop].object_votes.clone();
        self.remove_map_point(drop)?;
        for (kf, idx) in drop_obs {
            if !self.points[&keep].observations.contains_key(&kf) {
                self.add_point_observation(keep, kf, idx)?;
            }
        }
        let kp = self.points.get_mut(&keep).expect("checked above");
        for (obj, kfs) in drop_votes {
            kp.object_votes.entry(obj).or_default().extend(kfs);
        }
        self.refresh_owner(keep);
        Ok(())
    }

    pub fn set_point_descriptor(&mut self, pid: MapPointId, d: Descriptor) -> Result<(), MapError> {
        self.points.get_mut(&pid).ok_or(MapError::UnknownMapPoint(pid))?.descriptor = d;
        Ok(())
    }

    /// Recomputes a point's descriptor as the bitwise majority of its
    /// observed keypoint descriptors.
    pub fn refresh_point_descriptor(&mut self, pid: MapPointId) {
        let Some(point) = self.points.get(&pid) else { return };
        let descs: Vec<Descriptor> = point
            .observations
            .iter()
            .filter_map(|(kf, &i)| self.keyframes.get(kf).map(|f| f.keypoints[i].descriptor))
            .collect();
        if let Some(d) = Descriptor::majority(descs.iter()) {
            self.points.get_mut(&pid).expect("exists").descriptor = d;
        }
    }

    pub fn add_object(&mut self, ellipsoid: Ellipsoid, category: u32) -> ObjectId {
        let id = ObjectId(self.next_object);
        self.next_object += 1;
        self.objects.insert(
            id,
            ObjectLandmark {
                id,
                ellipsoid,
                category,
                category_votes: BTreeMap::new(),
                map_point_ids: BTreeSet::new(),
                observations: BTreeMap::new(),
            },
        );
        id
    }

    pub fn add_object_observation(&mut self, oid: ObjectId, kf: KeyFrameId, det: usize) -> Result<(), MapError> {
        let frame = self.keyframes.get_mut(&kf).ok_or(MapError::UnknownKeyFrame(kf))?;
        let Some(detection) = frame.detections.get(det) else {
            return Err(MapError::DetectionOutOfRange { kf, index: det });
        };
        let category = detection.category;
        let object = self.objects.get_mut(&oid).ok_or(MapError::UnknownObject(oid))?;
        if object.observations.contains_key(&kf) {
            return Ok(());
        }
        frame.observed_objects.insert(oid, det);
        let others: Vec<_> = object.observations.keys().copied().collect();
        object.observations.insert(kf, det);
        *object.category_votes.entry(category).or_insert(0) += 1;
        object.refresh_category();
        for other in others {
            self.object_graph.bump(kf, other, 1);
        }
        Ok(())
    }

    pub fn remove_object_observation(&mut self, oid: ObjectId, kf: KeyFrameId) -> Result<(), MapError> {
        let object = self.objects.get_mut(&oid).ok_or(MapError::UnknownObject(oid))?;
        let Some(det) = object.observations.remove(&kf) else {
            return Ok(());
        };
        let others: Vec<_> = object.observations.keys().copied().collect();
        if let Some(frame) = self.keyframes.get_mut(&kf) {
            frame.observed_objects.remove(&oid);
            if let Some(c) = frame.detections.get(det).map(|d| d.category) {
                if let Some(v) = object.category_votes.get_mut(&c) {
                    *v -= 1;
                    if *v == 0 {
                        object.category_votes.remove(&c);
                    }
                }
                object.refresh_category();
            }
        }
        for other in others {
            self.object_graph.bump(kf, other, -1);
        }
        Ok(())
    }

    /// Directly binds points to an object, overriding previous owners.
    pub fn assign_points_to_object(&mut self, oid: ObjectId, point_ids: &[MapPointId]) -> Result<(), MapError> {
        if !self.objects.contains_key(&oid) {
            return Err(MapError::UnknownObject(oid));
        }
        for pid in point_ids {
            let prev = {
                let p = self.points.get_mut(pid).ok_or(MapError::UnknownMapPoint(*pid))?;
                p.owner_object.replace(oid)
            };
            if let Some(prev) = prev {
                if let Some(o) = self.objects.get_mut(&prev) {
                    o.map_point_ids.remove(pid);
                }
            }
            self.objects.get_mut(&oid).expect("checked").map_point_ids.insert(*pid);
        }
        Ok(())
    }

    /// Records, for every point matched in `kf`, which object detections it
    /// fell inside, and re-derives owners: a point joins the object whose
    /// detections contained it in the most keyframes, once that count reaches
    /// [`OWNERSHIP_MIN_VOTES`].
    pub fn update_object_ownership(&mut self, kf: KeyFrameId) -> Result<(), MapError> {
        let frame = self.keyframes.get(&kf).ok_or(MapError::UnknownKeyFrame(kf))?;
        let mut votes: Vec<(MapPointId, ObjectId)> = Vec::new();
        for (&oid, &det) in &frame.observed_objects {
            for idx in &frame.detections[det].keypoint_indices {
                if let Some(&pid) = frame.matched_points.get(idx) {
                    votes.push((pid, oid));
                }
            }
        }
        let mut touched = BTreeSet::new();
        for (pid, oid) in votes {
            if let Some(p) = self.points.get_mut(&pid) {
                p.object_votes.entry(oid).or_default().insert(kf);
                touched.insert(pid);
            }
        }
        for pid in touched {
            self.refresh_owner(pid);
        }
        Ok(())
    }

    fn refresh_owner(&mut self, pid: MapPointId) {
        let Some(p) = self.points.get(&pid) else { return };
        let current = p.owner_object;
        let best = p
            .object_votes
            .iter()
            .filter(|(o, kfs)| kfs.len() >= OWNERSHIP_MIN_VOTES && self.objects.contains_key(o))
            .max_by(|a, b| {
                a.1.len()
                    .cmp(&b.1.len())
                    .then_with(|| (Some(*a.0) == current).cmp(&(Some(*b.0) == current)))
                    .then_with(|| b.0.cmp(a.0))
            })
            .map(|(o, _)| *o);
        if best == current {
            return;
        }
        if let Some(prev) = current {
            if let Some(o) = self.objects.get_mut(&prev) {
                o.map_point_ids.remove(&pid);
            }
        }
        if let Some(new) = best {
            self.objects.get_mut(&new).expect("filtered").map_point_ids.insert(pid);
        }
        self.points.get_mut(&pid).expect("exists").owner_object = best;
    }

    /// Keyframes sharing at least `min_weight` points, strongest first
    /// (ties: most recent first).
    pub fn point_covisibility_neighbors(&self, kf: KeyFrameId, min_weight: u32) -> Vec<KeyFrameId> {
        let mut n = self.point_graph.neighbors(kf, min_weight);
        n.sort_by(|a, b| b.1.cmp(&a.1).then(b.0.cmp(&a.0)));
        n.into_iter().map(|(k, _)| k).collect()
    }

    /// Keyframes sharing at least one object, ordered by shared-object count
    /// then recency.
    pub fn object_covisibility_neighbors(&self, kf: KeyFrameId) -> Vec<KeyFrameId> {
        let mut n = self.object_graph.neighbors(kf, self.object_graph.threshold());
        n.sort_by(|a, b| b.1.cmp(&a.1).then(b.0.cmp(&a.0)));
        n.into_iter().map(|(k, _)| k).collect()
    }

    /// Selects the window for local bundle adjustment around `kf`.
    pub fn local_map_for_frame(&self, kf: KeyFrameId, opts: &LocalMapOptions) -> Result<LocalMap, MapError> {
        if !self.keyframes.contains_key(&kf) {
            return Err(MapError::UnknownKeyFrame(kf));
        }
        let mut local = BTreeSet::from([kf]);
        if opts.use_object_graph {
            local.extend(self.object_covisibility_neighbors(kf).into_iter().take(opts.object_neighbors.unwrap_or(usize::MAX)));
        }
        local.extend(
            self.point_covisibility_neighbors(kf, opts.min_point_weight)
                .into_iter()
                .take(opts.point_neighbors),
        );
        let mut points = BTreeSet::new();
        for k in &local {
            points.extend(self.keyframes[k].matched_points.values().copied());
        }
        let mut fixed = BTreeSet::new();
        for p in &points {
            for k in self.points[p].observations.keys() {
                if !local.contains(k) {
                    fixed.insert(*k);
                }
            }
        }
        Ok(LocalMap {
            keyframes: local.into_iter().collect(),
            points: points.into_iter().collect(),
            fixed: fixed.into_iter().collect(),
        })
    }

    /// Removes points that were created at least `min_age` keyframes before
    /// `current` and are still observed by fewer than `min_observations`
    /// keyframes, plus points left without observations.
    pub fn cull_map_points(&mut self, current: KeyFrameId, min_age: u64, min_observations: usize) -> usize {
        let doomed: Vec<_> = self
            .points
            .values()
            .filter(|p| {
                p.observations.is_empty()
                    || (current.0.saturating_sub(p.first_keyframe.0) >= min_age
                        && p.observations.len() < min_observations)
            })
            .map(|p| p.id)
            .collect();
        let n = doomed.len();
        for pid in doomed {
            let _ = self.remove_map_point(pid);
        }
        n
    }

    /// Point covisibility graph recomputed from the observation records.
    pub fn recompute_point_graph(&self) -> CovisibilityGraph {
        CovisibilityGraph::from_observers(
            POINT_EDGE_THRESHOLD,
            self.points.values().map(|p| p.observations.keys().copied().collect()),
        )
    }

    pub fn recompute_object_graph(&self) -> CovisibilityGraph {
        CovisibilityGraph::from_observers(
            OBJECT_EDGE_THRESHOLD,
            self.objects.values().map(|o| o.observations.keys().copied().collect()),
        )
    }

    /// Full referential-integrity check.
    pub fn audit(&self) -> AuditReport {
        let mut problems = Vec::new();
        for p in self.points.values() {
            if !p.position.iter().all(|v| v.is_finite()) {
                problems.push(format!("{} has non-finite position", p.id));
            }
            for (kf, &idx) in &p.observations {
                match self.keyframes.get(kf) {
                    None => problems.push(format!("{} observed by missing {kf}", p.id)),
                    Some(f) if f.matched_points.get(&idx) != Some(&p.id) => {
                        problems.push(format!("{} -> {kf}[{idx}] not reciprocated", p.id))
                    }
                    _ => {}
                }
            }
            if let Some(o) = p.owner_object {
                if !self.objects.get(&o).is_some_and(|obj| obj.map_point_ids.contains(&p.id)) {
                    problems.push(format!("{} owner {o} does not list it", p.id));
                }
            }
        }
        for o in self.objects.values() {
            for (kf, &det) in &o.observations {
                match self.keyframes.get(kf) {
                    None => problems.push(format!("{} observed by missing {kf}", o.id)),
                    Some(f) if f.observed_objects.get(&o.id) != Some(&det) => {
                        problems.push(format!("{} -> {kf} not reciprocated", o.id))
                    }
                    _ => {}
                }
            }
            for pid in &o.map_point_ids {
                if self.points.get(pid).and_then(|p| p.owner_object) != Some(o.id) {
                    problems.push(format!("{} lists {pid} which it does not own", o.id));
                }
            }
        }
        for f in self.keyframes.values() {
            for (&idx, pid) in &f.matched_points {
                if idx >= f.keypoints.len() {
                    problems.push(format!("{} keypoint {idx} out of range", f.id));
                }
                if self.points.get(pid).and_then(|p| p.observations.get(&f.id)) != Some(&idx) {
                    problems.push(format!("{}[{idx}] -> {pid} not reciprocated", f.id));
                }
            }
            for (oid, &det) in &f.observed_objects {
                if self.objects.get(oid).and_then(|o| o.observations.get(&f.id)) != Some(&det) {
                    problems.push(format!("{} -> {oid} not reciprocated", f.id));
                }
            }
        }
        if self.recompute_point_graph() != self.point_graph {
            problems.push("point covisibility graph differs from recomputation".into());
        }
        if self.recompute_object_graph() != self.object_graph {
            problems.push("object covisibility graph differs from recomputation".into());
        }
        AuditReport { problems }
    }

    /// Writes the line-oriented text dump. Record layouts:
    ///
    /// ```text
    /// P  <id> <x> <y> <z>
    /// O  <id> <category> <cx> <cy> <cz> <a> <b> <c> <qx> <qy> <qz> <qw>
    /// K  <id> <timestamp> <tx> <ty> <tz> <qx> <qy> <qz> <qw>
    /// EP <kf_a> <kf_b> <shared points>
    /// EO <kf_a> <kf_b> <shared objects>
    /// ```
    ///
    /// Keyframe poses are written world-from-camera (camera position and
    /// orientation), like trajectory files. Floats use `{:.9e}`; records are
    /// sorted by id.
    pub fn write_dump<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# map dump v1")?;
        for p in self.points.values() {
            writeln!(w, "P {} {:.9e} {:.9e} {:.9e}", p.id.0, p.position.x, p.position.y, p.position.z)?;
        }
        for o in self.objects.values() {
            let e = &o.ellipsoid;
            let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(e.rotation));
            writeln!(
                w,
                "O {} {} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e}",
                o.id.0,
                o.category,
                e.center.x,
                e.center.y,
                e.center.z,
                e.semi_axes.x,
                e.semi_axes.y,
                e.semi_axes.z,
                q.i,
                q.j,
                q.k,
                q.w
            )?;
        }
        for f in self.keyframes.values() {
            let twc = f.pose.inverse();
            let q = twc.quaternion();
            let t = twc.translation();
            writeln!(
                w,
                "K {} {:.6} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e}",
                f.id.0, f.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
            )?;
        }
        for (a, b, wgt) in self.point_graph.edges() {
            writeln!(w, "EP {} {} {}", a.0, b.0, wgt)?;
        }
        for (a, b, wgt) in self.object_graph.edges() {
            writeln!(w, "EO {} {} {}", a.0, b.0, wgt)?;
        }
        Ok(())
    }
}

/// Parsed contents of a map dump.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MapDump {
    pub points: Vec<(u64, [f64; 3])>,
    /// id, category, center, semi-axes, quaternion (x, y, z, w)
    pub objects: Vec<(u64, u32, [f64; 3], [f64; 3], [f64; 4])>,
    /// id, timestamp, translation, quaternion (x, y, z, w)
    pub keyframes: Vec<(u64, f64, [f64; 3], [f64; 4])>,
    pub point_edges: Vec<(u64, u64, u32)>,
    pub object_edges: Vec<(u64, u64, u32)>,
}

#[derive(Debug, thiserror::Error)]
pub enum DumpParseError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl MapDump {
    pub fn read<R: BufRead>(r: R) -> Result<Self, DumpParseError> {
        let mut dump = MapDump::default();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| DumpParseError::Malformed { line: n + 1, msg: msg.to_string() };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let f = |i: usize| -> Result<f64, DumpParseError> {
                fields.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad number"))
            };
            let u = |i: usize| -> Result<u64, DumpParseError> {
                fields.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad integer"))
            };
            match fields[0] {
                "P" if fields.len() == 5 => dump.points.push((u(1)?, [f(2)?, f(3)?, f(4)?])),
                "O" if fields.len() == 13 => dump.objects.push((
                    u(1)?,
                    u(2)? as u32,
                    [f(3)?, f(4)?, f(5)?],
                    [f(6)?, f(7)?, f(8)?],
                    [f(9)?, f(10)?, f(11)?, f(12)?],
                )),
                "K" if fields.len() == 10 => dump.keyframes.push((
                    u(1)?,
                    f(2)?,
                    [f(3)?, f(4)?, f(5)?],
                    [f(6)?, f(7)?, f(8)?, f(9)?],
                )),
                "EP" if fields.len() == 4 => dump.point_edges.push((u(1)?, u(2)?, u(3)? as u32)),
                "EO" if fields.len() == 4 => dump.object_edges.push((u(1)?, u(2)?, u(3)? as u32)),
                _ => return Err(bad("unknown record")),
            }
        }
        Ok(dump)
    }
}
