//! Data association: detections to object landmarks (four scoring variants)
//! and keypoints to map points (object-aided and projection-window search).

use std::collections::BTreeMap;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

pub use crate::features::Detection;
use crate::features::{Keypoint, ObservationModel};
use crate::geometry::{
    bbox_iou, ellipse_bbox, ellipse_to_gaussian, ellipsoid_to_dual_quadric, project_dual_quadric_gaussian,
    BBox, Ellipse2D, Gaussian2D, Intrinsics, Pose,
};
use crate::map::{Map, MapPointId, ObjectId, ObjectLandmark};
use crate::metrics::{normalized_wasserstein, MetricConfig};

/// Object association strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum AssociationMethod {
    /// Box IoU, same category only.
    Da1,
    /// Box IoU, any category.
    Da2,
    /// Box IoU, any category, lower threshold when labels agree.
    Da3,
    /// Normalized Wasserstein similarity of the ellipse Gaussians.
    #[default]
    Da4,
}

impl AssociationMethod {
    pub const ALL: [AssociationMethod; 4] = [Self::Da1, Self::Da2, Self::Da3, Self::Da4];

    pub fn label(&self) -> &'static str {
        match self {
            Self::Da1 => "DA1",
            Self::Da2 => "DA2",
            Self::Da3 => "DA3",
            Self::Da4 => "DA4",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssociationConfig {
    pub method: AssociationMethod,
    pub iou_threshold: f64,
    pub iou_threshold_same_label: f64,
    pub nw_threshold: f64,
    pub metric: MetricConfig,
    pub observation_model: ObservationModel,
    /// Detections with more than this fraction of contour points on the image
    /// border are not associated with objects.
    pub max_border_fraction: f64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            method: AssociationMethod::Da4,
            iou_threshold: 0.3,
            iou_threshold_same_label: 0.1,
            nw_threshold: 0.005,
            metric: MetricConfig::default(),
            observation_model: ObservationModel::ContourFit,
            max_border_fraction: 0.2,
        }
    }
}

impl AssociationConfig {
    pub fn with_method(method: AssociationMethod) -> Self {
        Self { method, ..Self::default() }
    }

    pub fn is_valid(&self) -> bool {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        unit(self.iou_threshold)
            && unit(self.iou_threshold_same_label)
            && unit(self.nw_threshold)
            && self.metric.is_valid()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectMatch {
    pub detection_index: usize,
    pub object_id: ObjectId,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointMatch {
    pub keypoint_index: usize,
    pub map_point_id: MapPointId,
    pub descriptor_distance: u32,
}

/// Result of object association.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObjectAssociation {
    pub matches: Vec<ObjectMatch>,
    /// Gated detections left without a landmark: candidates for new objects.
    pub unmatched: Vec<usize>,
}

/// A landmark as seen from the current camera.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedObject {
    pub id: ObjectId,
    pub category: u32,
    pub ellipse: Ellipse2D,
    pub gaussian: Gaussian2D,
    pub bbox: BBox,
}

impl ProjectedObject {
    pub fn from_gaussian(id: ObjectId, category: u32, gaussian: Gaussian2D) -> Option<Self> {
        let ellipse = crate::geometry::gaussian_to_ellipse(&gaussian).ok()?;
        Some(Self { id, category, ellipse, gaussian, bbox: ellipse_bbox(&ellipse) })
    }
}

/// Projects landmarks; objects that fail projection or fall entirely outside
/// the image are skipped.
pub fn project_objects<'a>(
    objects: impl IntoIterator<Item = &'a ObjectLandmark>,
    pose: &Pose,
    k: &Intrinsics,
) -> Vec<ProjectedObject> {
    let image = BBox { min: Vector2::zeros(), max: Vector2::new(k.width as f64, k.height as f64) };
    objects
        .into_iter()
        .filter_map(|o| {
            let q = ellipsoid_to_dual_quadric(&o.ellipsoid);
            let g = project_dual_quadric_gaussian(&q, pose, k).ok()?;
            let p = ProjectedObject::from_gaussian(o.id, o.category, g)?;
            (bbox_iou(&p.bbox, &image) > 0.0).then_some(p)
        })
        .collect()
}

/// Association score of a detection against a projected landmark, or `None`
/// when the pair is gated out.
pub fn association_score(det: &Detection, obj: &ProjectedObject, cfg: &AssociationConfig) -> Option<f64> {
    let same = det.category == obj.category;
    let (score, threshold) = match cfg.method {
        AssociationMethod::Da1 => {
            if !same {
                return None;
            }
            (bbox_iou(&det.bbox, &obj.bbox), cfg.iou_threshold)
        }
        AssociationMethod::Da2 => (bbox_iou(&det.bbox, &obj.bbox), cfg.iou_threshold),
        AssociationMethod::Da3 => {
            let t = if same { cfg.iou_threshold_same_label } else { cfg.iou_threshold };
            (bbox_iou(&det.bbox, &obj.bbox), t)
        }
        AssociationMethod::Da4 => {
            let obs = ellipse_to_gaussian(&det.observation_ellipse(cfg.observation_model));
            (normalized_wasserstein(&obs, &obj.gaussian, &cfg.metric), cfg.nw_threshold)
        }
    };
    (score >= threshold).then_some(score)
}

/// Greedy one-to-one assignment by descending score. Each accepted pair is
/// the best remaining pair for both its row and its column. Ties are broken
/// by row then column index.
pub fn greedy_assignment(scores: &[Vec<Option<f64>>]) -> Vec<(usize, usize, f64)> {
    let mut pairs: Vec<(usize, usize, f64)> = scores
        .iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().filter_map(move |(c, s)| s.map(|s| (r, c, s))))
        .collect();
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let rows = scores.len();
    let cols = scores.iter().map(|r| r.len()).max().unwrap_or(0);
    let (mut row_used, mut col_used) = (vec![false; rows], vec![false; cols]);
    let mut out = Vec::new();
    for (r, c, s) in pairs {
        if !row_used[r] && !col_used[c] {
            row_used[r] = true;
            col_used[c] = true;
            out.push((r, c, s));
        }
    }
    out
}

/// Exhaustive optimal assignment (maximum total score over one-to-one
/// matchings that only use admissible pairs). Intended for matrices up to 8×8.
pub fn assignment_oracle(scores: &[Vec<Option<f64>>]) -> (f64, Vec<(usize, usize)>) {
    fn search(
        scores: &[Vec<Option<f64>>],
        row: usize,
        used: &mut Vec<bool>,
        current: &mut Vec<(usize, usize)>,
        total: f64,
        best: &mut (f64, Vec<(usize, usize)>),
    ) {
        if row == scores.len() {
            if total > best.0 {
                *best = (total, current.clone());
            }
            return;
        }
        search(scores, row + 1, used, current, total, best);
        for (c, s) in scores[row].iter().enumerate() {
            if let Some(s) = s {
                if !used[c] {
                    used[c] = true;
                    current.push((row, c));
                    search(scores, row + 1, used, current, total + s, best);
                    current.pop();
                    used[c] = false;
                }
            }
        }
    }
    let cols = scores.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut best = (0.0, Vec::new());
    search(scores, 0, &mut vec![false; cols], &mut Vec::new(), 0.0, &mut best);
    best
}

/// Associates detections with already-projected landmarks.
pub fn associate_projected(
    detections: &[Detection],
    projected: &[ProjectedObject],
    cfg: &AssociationConfig,
) -> ObjectAssociation {
    let gated: Vec<usize> = (0..detections.len())
        .filter(|&i| detections[i].border_fraction <= cfg.max_border_fraction)
        .collect();
    let scores: Vec<Vec<Option<f64>>> = gated
        .iter()
        .map(|&i| projected.iter().map(|p| association_score(&detections[i], p, cfg)).collect())
        .collect();
    let assigned = greedy_assignment(&scores);
    let mut matched_rows = vec![false; gated.len()];
    let mut matches: Vec<ObjectMatch> = assigned
        .into_iter()
        .map(|(r, c, s)| {
            matched_rows[r] = true;
            ObjectMatch { detection_index: gated[r], object_id: projected[c].id, score: s }
        })
        .collect();
    matches.sort_by_key(|m| m.detection_index);
    let unmatched = gated.iter().zip(&matched_rows).filter(|(_, &m)| !m).map(|(&i, _)| i).collect();
    ObjectAssociation { matches, unmatched }
}

/// Matches frame detections to object landmarks seen from `pose`.
pub fn associate_objects<'a>(
    detections: &[Detection],
    objects: impl IntoIterator<Item = &'a ObjectLandmark>,
    pose: &Pose,
    k: &Intrinsics,
    cfg: &AssociationConfig,
) -> ObjectAssociation {
    let projected = project_objects(objects, pose, k);
    associate_projected(detections, &projected, cfg)
}

/// Descriptor matching parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMatchConfig {
    /// Maximum Hamming distance of an accepted match.
    pub max_distance: u32,
    /// Best / second-best distance ratio bound.
    pub ratio: f64,
    /// Projection search radius in pixels.
    pub search_radius: f64,
}

impl Default for PointMatchConfig {
    fn default() -> Self {
        Self { max_distance: 50, ratio: 0.8, search_radius: 8.0 }
    }
}

/// Best candidate for one map point among a set of keypoints, subject to the
/// distance bound and ratio test.
fn best_keypoint(
    desc: &crate::features::Descriptor,
    candidates: impl IntoIterator<Item = usize>,
    keypoints: &[Keypoint],
    cfg: &PointMatchConfig,
) -> Option<(usize, u32)> {
    let (mut best, mut second) = ((usize::MAX, u32::MAX), u32::MAX);
    for i in candidates {
        let d = desc.hamming(&keypoints[i].descriptor);
        if d < best.1 || (d == best.1 && i < best.0) {
            second = second.min(best.1);
            best = (i, d);
        } else if d < second {
            second = d;
        }
    }
    if best.0 == usize::MAX || best.1 > cfg.max_distance {
        return None;
    }
    if second != u32::MAX && best.1 as f64 >= cfg.ratio * second as f64 {
        return None;
    }
    Some(best)
}

/// Keeps, for each keypoint, the closest proposal (ties: lower map point id),
/// and drops map points that were proposed twice.
fn resolve_conflicts(mut proposals: Vec<PointMatch>, claimed: &[bool]) -> Vec<PointMatch> {
    proposals.sort_by(|a, b| {
        a.keypoint_index
            .cmp(&b.keypoint_index)
            .then(a.descriptor_distance.cmp(&b.descriptor_distance))
            .then(a.map_point_id.cmp(&b.map_point_id))
    });
    let mut out: Vec<PointMatch> = Vec::new();
    for p in proposals {
        if claimed.get(p.keypoint_index).copied().unwrap_or(false) {
            continue;
        }
        if out.last().is_some_and(|l| l.keypoint_index == p.keypoint_index) {
            continue;
        }
        out.push(p);
    }
    out
}

/// Object-aided point matching: for every matched object, its map points are
/// compared by descriptor against the keypoints inside the matched detection.
/// Points behind the camera are skipped.
pub fn associate_map_points_via_objects(
    keypoints: &[Keypoint],
    detections: &[Detection],
    matches: &[ObjectMatch],
    map: &Map,
    pose: &Pose,
    cfg: &PointMatchConfig,
) -> Vec<PointMatch> {
    let mut proposals = Vec::new();
    for m in matches {
        let (Some(obj), Some(det)) = (map.object(m.object_id), detections.get(m.detection_index)) else {
            continue;
        };
        for pid in &obj.map_point_ids {
            let Some(p) = map.point(*pid) else { continue };
            if pose.transform(&p.position).z <= 0.0 {
                continue;
            }
            if let Some((kp, d)) = best_keypoint(&p.descriptor, det.keypoint_indices.iter().copied(), keypoints, cfg) {
                proposals.push(PointMatch { keypoint_index: kp, map_point_id: *pid, descriptor_distance: d });
            }
        }
    }
    resolve_conflicts(proposals, &[])
}

/// Uniform grid over keypoint pixels for radius queries.
pub struct KeypointGrid {
    cell: f64,
    cols: usize,
    rows: usize,
    cells: Vec<Vec<usize>>,
}

impl KeypointGrid {
    pub fn new(keypoints: &[Keypoint], k: &Intrinsics, cell: f64) -> Self {
        let cols = ((k.width as f64 / cell).ceil() as usize).max(1);
        let rows = ((k.height as f64 / cell).ceil() as usize).max(1);
        let mut cells = vec![Vec::new(); cols * rows];
        for (i, kp) in keypoints.iter().enumerate() {
            let cx = ((kp.pixel.x / cell).floor().max(0.0) as usize).min(cols - 1);
            let cy = ((kp.pixel.y / cell).floor().max(0.0) as usize).min(rows - 1);
            cells[cy * cols + cx].push(i);
        }
        Self { cell, cols, rows, cells }
    }

    pub fn within(&self, keypoints: &[Keypoint], center: &Vector2<f64>, radius: f64) -> Vec<usize> {
        let lo_x = (((center.x - radius) / self.cell).floor().max(0.0)) as usize;
        let lo_y = (((center.y - radius) / self.cell).floor().max(0.0)) as usize;
        let hi_x = ((((center.x + radius) / self.cell).floor()).max(0.0) as usize).min(self.cols - 1);
        let hi_y = ((((center.y + radius) / self.cell).floor()).max(0.0) as usize).min(self.rows - 1);
        let r2 = radius * radius;
        let mut out = Vec::new();
        for cy in lo_y..=hi_y {
            for cx in lo_x..=hi_x {
                for &i in &self.cells[cy * self.cols + cx] {
                    if (keypoints[i].pixel - center).norm_squared() <= r2 {
                        out.push(i);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Projection-window matching of local map points. Keypoints flagged in
/// `claimed` are never reassigned; points already matched are skipped.
#[allow(clippy::too_many_arguments)]
pub fn match_local_map(
    keypoints: &[Keypoint],
    local_points: &[MapPointId],
    map: &Map,
    pose: &Pose,
    k: &Intrinsics,
    claimed: &[bool],
    cfg: &PointMatchConfig,
    radius: f64,
) -> Vec<PointMatch> {
    let grid = KeypointGrid::new(keypoints, k, radius.max(4.0) * 2.0);
    let mut proposals = Vec::new();
    for pid in local_points {
        let Some(p) = map.point(*pid) else { continue };
        let pc = pose.transform(&p.position);
        if pc.z <= 0.0 {
            continue;
        }
        let uv = k.project(&pc);
        if !k.contains(&uv, 0.0) {
            continue;
        }
        let near: Vec<usize> = grid
            .within(keypoints, &uv, radius)
            .into_iter()
            .filter(|&i| !claimed.get(i).copied().unwrap_or(false))
            .collect();
        if let Some((kp, d)) = best_keypoint(&p.descriptor, near, keypoints, cfg) {
            proposals.push(PointMatch { keypoint_index: kp, map_point_id: *pid, descriptor_distance: d });
        }
    }
    resolve_conflicts(proposals, claimed)
}

/// Counts matches per object id (diagnostics helper).
pub fn matches_by_object(matches: &[ObjectMatch]) -> BTreeMap<ObjectId, usize> {
    matches.iter().map(|m| (m.object_id, m.detection_index)).collect()
}
