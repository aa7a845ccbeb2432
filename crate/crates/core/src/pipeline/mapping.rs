//! Mapping stage run once per new keyframe.

use std::collections::BTreeSet;

use crate::association::match_local_map;
use crate::geometry::Intrinsics;
use crate::map::{KeyFrameId, LocalMapOptions, Map, MapError, MapPointId, ObjectId, POINT_EDGE_THRESHOLD};
use crate::optimize::{local_bundle_adjustment, BaReport, SolveReport};

use super::objects::ObjectMapper;
use super::PipelineConfig;

/// Call counters for the mapping stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MappingAudit {
    pub keyframes: usize,
    pub object_associations: usize,
    pub object_graph_queries: usize,
}

#[derive(Debug, Clone, Default)]
pub struct MappingReport {
    pub keyframe: Option<KeyFrameId>,
    pub created_points: usize,
    pub fused_points: usize,
    pub added_observations: usize,
    pub created_objects: Vec<ObjectId>,
    pub reoptimized_objects: Vec<ObjectId>,
    pub culled_points: usize,
    pub ba: Option<BaReport>,
    pub solves: Vec<(&'static str, SolveReport)>,
}

pub struct Mapper {
    cfg: PipelineConfig,
    k: Intrinsics,
    objects: ObjectMapper,
    pub audit: MappingAudit,
}

impl Mapper {
    pub fn new(cfg: &PipelineConfig, k: Intrinsics) -> Self {
        let m = &cfg.mapping;
        let mut objects =
            ObjectMapper::new(cfg.effective_association(), cfg.ellipsoid_solver, m.n_init, m.candidate_expiry, m.max_object_views);
        objects.reoptimize = m.reoptimize_objects;
        Self { cfg: *cfg, k, objects, audit: MappingAudit::default() }
    }

    pub fn object_mapper(&self) -> &ObjectMapper {
        &self.objects
    }

    /// Back-projects every unmatched keypoint with valid depth into a new
    /// map point.
    fn spawn_points(&self, map: &mut Map, kf: KeyFrameId) -> Result<usize, MapError> {
        let frame = map.keyframe(kf).ok_or(MapError::UnknownKeyFrame(kf))?;
        let world = frame.pose.inverse();
        let fresh: Vec<_> = frame
            .keypoints
            .iter()
            .enumerate()
            .filter(|(i, _)| !frame.matched_points.contains_key(i))
            .filter_map(|(i, kp)| {
                let d = kp.depth.filter(|d| *d <= self.cfg.mapping.max_point_depth)?;
                Some((i, world.transform(&self.k.backproject(&kp.pixel, d)), kp.descriptor))
            })
            .collect();
        let n = fresh.len();
        for (i, pos, desc) in fresh {
            map.add_map_point(pos, desc, kf, i)?;
        }
        Ok(n)
    }

    /// Projects the points of `kf` and its neighbors into each other; a
    /// match on a free keypoint adds an observation, a match on a keypoint
    /// holding another point merges the two (the better-observed point
    /// survives, ties keep the older id).
    fn fuse(&self, map: &mut Map, kf: KeyFrameId, neighbors: &[KeyFrameId]) -> Result<(usize, usize), MapError> {
        let targets: Vec<KeyFrameId> = std::iter::once(kf).chain(neighbors.iter().copied()).collect();
        let mut pool: BTreeSet<MapPointId> = BTreeSet::new();
        for t in &targets {
            if let Some(f) = map.keyframe(*t) {
                pool.extend(f.matched_points.values().copied());
            }
        }
        let (mut fused, mut added) = (0, 0);
        for t in targets {
            let Some(frame) = map.keyframe(t) else { continue };
            let (pose, keypoints) = (frame.pose, frame.keypoints.clone());
            let pts: Vec<MapPointId> = pool
                .iter()
                .copied()
                .filter(|p| map.point(*p).is_some_and(|pt| !pt.observations.contains_key(&t)))
                .collect();
            let found = match_local_map(&keypoints, &pts, map, &pose, &self.k, &[], &self.cfg.points, self.cfg.mapping.fuse_radius);
            for m in found {
                let pid = m.map_point_id;
                let Some(point) = map.point(pid) else { continue };
                if point.observations.contains_key(&t) {
                    continue;
                }
                let holder = map.keyframe(t).and_then(|f| f.matched_points.get(&m.keypoint_index)).copied();
                match holder {
                    Some(q) if q == pid => {}
                    Some(q) => {
                        let (np, nq) = (point.observations.len(), map.point(q).map_or(0, |p| p.observations.len()));
                        let (keep, drop) = if np > nq || (np == nq && pid < q) { (pid, q) } else { (q, pid) };
                        map.fuse_points(keep, drop)?;
                        map.refresh_point_descriptor(keep);
                        pool.remove(&drop);
                        fused += 1;
                    }
                    None => {
                        map.add_point_observation(pid, t, m.keypoint_index)?;
                        added += 1;
                    }
                }
            }
        }
        Ok((fused, added))
    }

    /// Runs the mapping stage for a keyframe already inserted in `map`.
    pub fn step(&mut self, map: &mut Map, kf: KeyFrameId) -> Result<MappingReport, MapError> {
        self.audit.keyframes += 1;
        let ablation = self.cfg.ablation;
        let mut report = MappingReport { keyframe: Some(kf), ..Default::default() };

        if ablation.maintains_objects() {
            let associate = !ablation.objects_in_odometry();
            if associate {
                self.audit.object_associations += 1;
            }
            report.created_objects = self.objects.associate_and_spawn(map, kf, &self.k, associate)?;
        }

        report.created_points = self.spawn_points(map, kf)?;

        let mut neighbors: BTreeSet<KeyFrameId> = map
            .point_covisibility_neighbors(kf, POINT_EDGE_THRESHOLD)
            .into_iter()
            .take(self.cfg.mapping.point_neighbors)
            .collect();
        if ablation.objects_in_mapping() {
            self.audit.object_graph_queries += 1;
            neighbors.extend(map.object_covisibility_neighbors(kf).into_iter().take(self.cfg.mapping.object_neighbors.unwrap_or(usize::MAX)));
        }
        let neighbors: Vec<KeyFrameId> = neighbors.into_iter().collect();
        let (fused, added) = self.fuse(map, kf, &neighbors)?;
        report.fused_points = fused;
        report.added_observations = added;

        if ablation.maintains_objects() {
            map.update_object_ownership(kf)?;
        }

        let opts = LocalMapOptions {
            use_object_graph: ablation.objects_in_mapping(),
            object_neighbors: self.cfg.mapping.object_neighbors,
            point_neighbors: self.cfg.mapping.point_neighbors,
            min_point_weight: POINT_EDGE_THRESHOLD,
        };
        if opts.use_object_graph {
            self.audit.object_graph_queries += 1;
        }
        let local = map.local_map_for_frame(kf, &opts)?;
        let ba = local_bundle_adjustment(map, &local, &self.k, &self.cfg.bundle_solver);
        report.solves.push(("ba", ba.solve.clone()));
        report.ba = Some(ba);

        if ablation.maintains_objects() {
            let refined = self.objects.refine_observed(map, kf, &self.k, &[]);
            for (oid, r) in refined {
                report.reoptimized_objects.push(oid);
                report.solves.push(("ellipsoid", r));
            }
        }

        if self.cfg.mapping.cull_points {
            report.culled_points = map.cull_map_points(kf, self.cfg.mapping.cull_min_age, self.cfg.mapping.cull_min_observations);
        }
        let points: Vec<MapPointId> = map.keyframe(kf).map(|f| f.matched_points.values().copied().collect()).unwrap_or_default();
        for p in points {
            map.refresh_point_descriptor(p);
        }
        Ok(report)
    }
}

/// Runs the mapping stage for `kf` with `mapper`'s configuration.
pub fn mapping_step(mapper: &mut Mapper, map: &mut Map, kf: KeyFrameId) -> Result<MappingReport, MapError> {
    mapper.step(map, kf)
}
