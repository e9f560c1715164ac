//! Tracking evaluation: 2D IoU, rotated 3D IoU, normalized 3D GIoU
//! similarity kernels, the HOTA metric family and CLEARMOT.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::Vector3;

use crate::geom2d::{self, Point2};
use crate::hungarian;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetricsError {
    SequenceMismatch,
    DuplicateId { frame: u32, id: i64 },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::SequenceMismatch => {
                write!(
                    f,
                    "ground truth and predictions refer to different sequences"
                )
            }
            MetricsError::DuplicateId { frame, id } => {
                write!(f, "duplicate track id {id} in frame {frame}")
            }
        }
    }
}

#[cfg(test)]
impl std::error::Error for MetricsError {}

/// Axis-aligned image-space box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2D {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

impl Box2D {
    pub fn new(left: f64, top: f64, width: f64, height: f64) -> Self {
        Box2D {
            left,
            top,
            width,
            height,
        }
    }

    pub fn from_corners(left: f64, top: f64, right: f64, bottom: f64) -> Self {
        Box2D {
            left,
            top,
            width: (right - left).max(0.0),
            height: (bottom - top).max(0.0),
        }
    }

    pub fn right(&self) -> f64 {
        self.left + self.width
    }

    pub fn bottom(&self) -> f64 {
        self.top + self.height
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }
}

/// Gravity-aligned oriented 3D box in camera coordinates (y down); yaw
/// rotates about the y axis, dims are (width, height, length).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: Vector3<f64>,
    pub yaw: f64,
    pub dims: Vector3<f64>,
}

impl Box3D {
    pub fn new(center: Vector3<f64>, yaw: f64, dims: Vector3<f64>) -> Self {
        Box3D { center, yaw, dims }
    }

    /// Footprint corners on the ground (x-z) plane, counter-clockwise.
    pub fn bev_corners(&self) -> [Point2; 4] {
        let (s, c) = (self.yaw.sin(), self.yaw.cos());
        let hw = self.dims.x * 0.5;
        let hl = self.dims.z * 0.5;
        // object-frame (x, z) corners rotated into camera (x, z)
        let rot = |x: f64, z: f64| {
            Point2::new(self.center.x + c * x + s * z, self.center.z - s * x + c * z)
        };
        [rot(hw, hl), rot(-hw, hl), rot(-hw, -hl), rot(hw, -hl)]
    }

    /// Vertical (y) extent as (min, max).
    pub fn y_extent(&self) -> (f64, f64) {
        (
            self.center.y - self.dims.y * 0.5,
            self.center.y + self.dims.y * 0.5,
        )
    }

    pub fn volume(&self) -> f64 {
        self.dims.x * self.dims.y * self.dims.z
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let d = p - self.center;
        let (s, c) = (self.yaw.sin(), self.yaw.cos());
        // world -> object rotation is the transpose
        let ox = c * d.x - s * d.z;
        let oz = s * d.x + c * d.z;
        ox.abs() <= self.dims.x * 0.5
            && d.y.abs() <= self.dims.y * 0.5
            && oz.abs() <= self.dims.z * 0.5
    }
}

pub fn iou_2d(a: &Box2D, b: &Box2D) -> f64 {
    let iw = (a.right().min(b.right()) - a.left.max(b.left)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.top.max(b.top)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn ccw(poly: &[Point2]) -> Vec<Point2> {
    let mut p = poly.to_vec();
    if geom2d::signed_area(&p) < 0.0 {
        p.reverse();
    }
    p
}

/// BEV footprint intersection area of two rotated boxes.
fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let pa = ccw(&a.bev_corners());
    let pb = ccw(&b.bev_corners());
    geom2d::area(&geom2d::clip_convex(&pa, &pb))
}

fn y_overlap(a: &Box3D, b: &Box3D) -> f64 {
    let (a0, a1) = a.y_extent();
    let (b0, b1) = b.y_extent();
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

pub fn intersection_volume(a: &Box3D, b: &Box3D) -> f64 {
    bev_intersection(a, b) * y_overlap(a, b)
}

pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let inter = intersection_volume(a, b);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// 3D GIoU: the enclosing convex shape is the hull of both BEV footprints
/// extruded over the union of vertical extents. Returns the raw value in
/// [-1, 1].
pub fn giou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let inter = intersection_volume(a, b);
    let union = a.volume() + b.volume() - inter;
    let mut pts: Vec<Point2> = a.bev_corners().to_vec();
    pts.extend_from_slice(&b.bev_corners());
    let hull_area = geom2d::area(&geom2d::convex_hull(&pts));
    let (a0, a1) = a.y_extent();
    let (b0, b1) = b.y_extent();
    let hull_vol = hull_area * (a1.max(b1) - a0.min(b0));
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    if hull_vol <= 0.0 {
        return iou;
    }
    iou - (hull_vol - union) / hull_vol
}

/// GIoU mapped from [-1, 1] to [0, 1] for use as a HOTA similarity.
pub fn giou_3d_normalized(a: &Box3D, b: &Box3D) -> f64 {
    (giou_3d(a, b) + 1.0) * 0.5
}

/// One tracked object in one frame. 2D and 3D boxes are both optional so
/// the same containers serve 2D-only and 3D evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackedBox {
    pub id: i64,
    pub box2d: Option<Box2D>,
    pub box3d: Option<Box3D>,
    pub confidence: Option<f64>,
}

/// Per-sequence tracking data, frame index -> objects.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackingData {
    pub sequence: String,
    pub frames: BTreeMap<u32, Vec<TrackedBox>>,
}

impl TrackingData {
    pub fn new(sequence: &str) -> Self {
        TrackingData {
            sequence: String::from(sequence),
            frames: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, frame: u32, b: TrackedBox) {
        self.frames.entry(frame).or_default().push(b);
    }

    fn validate(&self) -> Result<(), MetricsError> {
        for (&frame, objs) in &self.frames {
            for (i, a) in objs.iter().enumerate() {
                if objs[i + 1..].iter().any(|b| b.id == a.id) {
                    return Err(MetricsError::DuplicateId { frame, id: a.id });
                }
            }
        }
        Ok(())
    }
}

/// Similarity kernel selection for the evaluators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    Iou2d,
    Iou3d,
    Giou3dNormalized,
}

impl Similarity {
    pub fn eval(&self, a: &TrackedBox, b: &TrackedBox) -> f64 {
        match self {
            Similarity::Iou2d => match (&a.box2d, &b.box2d) {
                (Some(x), Some(y)) => iou_2d(x, y),
                _ => 0.0,
            },
            Similarity::Iou3d => match (&a.box3d, &b.box3d) {
                (Some(x), Some(y)) => iou_3d(x, y),
                _ => 0.0,
            },
            Similarity::Giou3dNormalized => match (&a.box3d, &b.box3d) {
                (Some(x), Some(y)) => giou_3d_normalized(x, y),
                _ => 0.0,
            },
        }
    }
}

/// The 19-level alpha grid 0.05, 0.10, ..., 0.95.
pub fn default_alphas() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HotaReport {
    pub hota: f64,
    pub det_a: f64,
    pub ass_a: f64,
    pub det_re: f64,
    pub det_pr: f64,
    pub ass_re: f64,
    pub ass_pr: f64,
    pub loc_a: f64,
    /// Per-alpha HOTA values in grid order.
    pub per_alpha: Vec<f64>,
}

struct FramePair<'a> {
    gt: &'a [TrackedBox],
    pred: &'a [TrackedBox],
    /// similarity[g][p]
    sim: Vec<Vec<f64>>,
}

fn frame_pairs<'a>(
    gt: &'a TrackingData,
    pred: &'a TrackingData,
    kernel: Similarity,
) -> Vec<FramePair<'a>> {
    static EMPTY: &[TrackedBox] = &[];
    let mut frames: Vec<u32> = gt
        .frames
        .keys()
        .chain(pred.frames.keys())
        .copied()
        .collect();
    frames.sort_unstable();
    frames.dedup();
    frames
        .into_iter()
        .map(|f| {
            let g = gt.frames.get(&f).map(|v| v.as_slice()).unwrap_or(EMPTY);
            let p = pred.frames.get(&f).map(|v| v.as_slice()).unwrap_or(EMPTY);
            let sim = g
                .iter()
                .map(|a| p.iter().map(|b| kernel.eval(a, b)).collect())
                .collect();
            FramePair {
                gt: g,
                pred: p,
                sim,
            }
        })
        .collect()
}

fn id_indexing(data: &TrackingData) -> BTreeMap<i64, usize> {
    let mut map = BTreeMap::new();
    for objs in data.frames.values() {
        for o in objs {
            let next = map.len();
            map.entry(o.id).or_insert(next);
        }
    }
    map
}

/// HOTA over a similarity kernel and a set of alpha thresholds.
///
/// Matching follows the reference formulation: per frame, eligible pairs
/// (similarity >= alpha) are assigned by the Hungarian algorithm on the
/// global alignment score with the similarity as tie-break; association
/// accuracy averages the per-TP alignment A(c) = TPA / (TPA + FNA + FPA).
pub fn hota(
    gt: &TrackingData,
    pred: &TrackingData,
    kernel: Similarity,
    alphas: &[f64],
) -> Result<HotaReport, MetricsError> {
    if gt.sequence != pred.sequence {
        return Err(MetricsError::SequenceMismatch);
    }
    gt.validate()?;
    pred.validate()?;

    let gt_ids = id_indexing(gt);
    let pred_ids = id_indexing(pred);
    let (ng, np) = (gt_ids.len(), pred_ids.len());
    let pairs = frame_pairs(gt, pred, kernel);

    // global (alpha-independent) soft alignment between track ids
    let mut potential = vec![vec![0.0f64; np]; ng];
    let mut gt_count = vec![0.0f64; ng];
    let mut pred_count = vec![0.0f64; np];
    for fp in &pairs {
        let row_sums: Vec<f64> = fp.sim.iter().map(|r| r.iter().sum()).collect();
        let mut col_sums = vec![0.0f64; fp.pred.len()];
        for r in &fp.sim {
            for (j, s) in r.iter().enumerate() {
                col_sums[j] += s;
            }
        }
        for (i, g) in fp.gt.iter().enumerate() {
            let gi = gt_ids[&g.id];
            gt_count[gi] += 1.0;
            for (j, p) in fp.pred.iter().enumerate() {
                let s = fp.sim[i][j];
                let denom = row_sums[i] + col_sums[j] - s;
                if denom > 0.0 {
                    potential[gi][pred_ids[&p.id]] += s / denom;
                }
            }
        }
        for p in fp.pred {
            pred_count[pred_ids[&p.id]] += 1.0;
        }
    }
    let alignment = |gi: usize, pj: usize| -> f64 {
        let pot = potential[gi][pj];
        let denom = gt_count[gi] + pred_count[pj] - pot;
        if denom > 0.0 {
            pot / denom
        } else {
            0.0
        }
    };

    let mut report = HotaReport::default();
    let num_gt_total: f64 = gt_count.iter().sum();
    let num_pred_total: f64 = pred_count.iter().sum();

    for &alpha in alphas {
        // per-frame matching
        let mut matches = vec![vec![0.0f64; np]; ng];
        let mut tp = 0.0f64;
        let mut loc_sum = 0.0f64;
        for fp in &pairs {
            if fp.gt.is_empty() || fp.pred.is_empty() {
                continue;
            }
            let mut score = vec![vec![f64::NEG_INFINITY; fp.pred.len()]; fp.gt.len()];
            for (i, g) in fp.gt.iter().enumerate() {
                for (j, p) in fp.pred.iter().enumerate() {
                    if fp.sim[i][j] >= alpha - 1e-12 {
                        score[i][j] =
                            alignment(gt_ids[&g.id], pred_ids[&p.id]) + fp.sim[i][j] * 1e-6;
                    }
                }
            }
            for (i, j) in hungarian::maximize(&score) {
                if score[i][j] == f64::NEG_INFINITY {
                    continue;
                }
                let gi = gt_ids[&fp.gt[i].id];
                let pj = pred_ids[&fp.pred[j].id];
                matches[gi][pj] += 1.0;
                tp += 1.0;
                loc_sum += fp.sim[i][j];
            }
        }
        let fne = num_gt_total - tp;
        let fpe = num_pred_total - tp;

        let det_a = if tp + fne + fpe > 0.0 {
            tp / (tp + fne + fpe)
        } else {
            0.0
        };
        let det_re = if tp + fne > 0.0 { tp / (tp + fne) } else { 0.0 };
        let det_pr = if tp + fpe > 0.0 { tp / (tp + fpe) } else { 0.0 };

        let mut ass_a = 0.0;
        let mut ass_re = 0.0;
        let mut ass_pr = 0.0;
        if tp > 0.0 {
            let mut pred_match_count = vec![0.0f64; np];
            let mut gt_match_count = vec![0.0f64; ng];
            for gi in 0..ng {
                for pj in 0..np {
                    gt_match_count[gi] += matches[gi][pj];
                    pred_match_count[pj] += matches[gi][pj];
                }
            }
            for gi in 0..ng {
                for pj in 0..np {
                    let tpa = matches[gi][pj];
                    if tpa == 0.0 {
                        continue;
                    }
                    let fna = gt_count[gi] - tpa;
                    let fpa = pred_count[pj] - tpa;
                    ass_a += tpa * (tpa / (tpa + fna + fpa));
                    ass_re += tpa * (tpa / (tpa + fna));
                    ass_pr += tpa * (tpa / (tpa + fpa));
                }
            }
            ass_a /= tp;
            ass_re /= tp;
            ass_pr /= tp;
        }
        let loc_a = if tp > 0.0 { loc_sum / tp } else { 1.0 };
        let hota_a = (det_a * ass_a).sqrt();

        report.per_alpha.push(hota_a);
        report.hota += hota_a;
        report.det_a += det_a;
        report.ass_a += ass_a;
        report.det_re += det_re;
        report.det_pr += det_pr;
        report.ass_re += ass_re;
        report.ass_pr += ass_pr;
        report.loc_a += loc_a;
    }
    let n = alphas.len().max(1) as f64;
    report.hota /= n;
    report.det_a /= n;
    report.ass_a /= n;
    report.det_re /= n;
    report.det_pr /= n;
    report.ass_re /= n;
    report.ass_pr /= n;
    report.loc_a /= n;
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClearmotReport {
    pub mota: f64,
    pub motp: f64,
    pub id_switches: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
    pub num_gt: u64,
}

/// CLEARMOT with match carry-over: matches from the previous frame are
/// kept while still above threshold; remaining boxes are assigned by the
/// Hungarian algorithm on similarity.
pub fn clearmot(
    gt: &TrackingData,
    pred: &TrackingData,
    kernel: Similarity,
    threshold: f64,
) -> Result<ClearmotReport, MetricsError> {
    if gt.sequence != pred.sequence {
        return Err(MetricsError::SequenceMismatch);
    }
    gt.validate()?;
    pred.validate()?;

    let pairs = frame_pairs(gt, pred, kernel);
    let mut report = ClearmotReport::default();
    let mut motp_sum = 0.0f64;
    let mut matched = 0u64;
    // gt id -> pred id from the last frame where the gt was matched
    let mut last_match: BTreeMap<i64, i64> = BTreeMap::new();
    for fp in &pairs {
        report.num_gt += fp.gt.len() as u64;
        let mut gt_taken = vec![false; fp.gt.len()];
        let mut pred_taken = vec![false; fp.pred.len()];
        let mut frame_matches: Vec<(usize, usize)> = Vec::new();
        // carry over previous pairings while they remain valid
        for (i, g) in fp.gt.iter().enumerate() {
            if let Some(&pid) = last_match.get(&g.id) {
                if let Some(j) = fp.pred.iter().position(|p| p.id == pid) {
                    if fp.sim[i][j] >= threshold {
                        gt_taken[i] = true;
                        pred_taken[j] = true;
                        frame_matches.push((i, j));
                    }
                }
            }
        }
        // Hungarian over the remainder
        let mut score = vec![vec![f64::NEG_INFINITY; fp.pred.len()]; fp.gt.len()];
        let mut any = false;
        for i in 0..fp.gt.len() {
            for j in 0..fp.pred.len() {
                if !gt_taken[i] && !pred_taken[j] && fp.sim[i][j] >= threshold {
                    score[i][j] = fp.sim[i][j];
                    any = true;
                }
            }
        }
        if any {
            for (i, j) in hungarian::maximize(&score) {
                if score[i][j] == f64::NEG_INFINITY {
                    continue;
                }
                frame_matches.push((i, j));
            }
        }
        for &(i, j) in &frame_matches {
            let gid = fp.gt[i].id;
            let pid = fp.pred[j].id;
            if let Some(&prev) = last_match.get(&gid) {
                if prev != pid {
                    report.id_switches += 1;
                }
            }
            last_match.insert(gid, pid);
            motp_sum += fp.sim[i][j];
            matched += 1;
        }
        report.false_negatives += (fp.gt.len() - frame_matches.len()) as u64;
        report.false_positives += (fp.pred.len() - frame_matches.len()) as u64;
    }
    report.motp = if matched > 0 {
        motp_sum / matched as f64
    } else {
        0.0
    };
    report.mota = if report.num_gt > 0 {
        1.0 - (report.false_negatives + report.false_positives + report.id_switches) as f64
            / report.num_gt as f64
    } else {
        0.0
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cube(x: f64) -> Box3D {
        Box3D::new(Vector3::new(x, 0.0, 0.0), 0.0, Vector3::new(1.0, 1.0, 1.0))
    }

    #[test]
    fn iou_2d_fixtures() {
        let a = Box2D::new(0.0, 0.0, 1.0, 1.0);
        assert_relative_eq!(iou_2d(&a, &a), 1.0);
        let b = Box2D::new(0.5, 0.0, 1.0, 1.0);
        assert_relative_eq!(iou_2d(&a, &b), 1.0 / 3.0, epsilon = 1e-12);
        let c = Box2D::new(5.0, 5.0, 1.0, 1.0);
        assert_relative_eq!(iou_2d(&a, &c), 0.0);
    }

    #[test]
    fn iou_3d_fixtures() {
        assert_relative_eq!(iou_3d(&cube(0.0), &cube(0.0)), 1.0, epsilon = 1e-12);
        assert_relative_eq!(iou_3d(&cube(0.0), &cube(0.5)), 1.0 / 3.0, epsilon = 1e-9);
        // square footprint is invariant to a quarter-turn
        let a = cube(0.0);
        let b = Box3D::new(a.center, core::f64::consts::FRAC_PI_2, a.dims);
        assert_relative_eq!(iou_3d(&a, &b), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn giou_3d_fixtures() {
        assert_relative_eq!(giou_3d(&cube(0.0), &cube(0.0)), 1.0, epsilon = 1e-12);
        // disjoint unit cubes, 2 m apart: hull 3x1x1, union 2
        assert_relative_eq!(giou_3d(&cube(0.0), &cube(2.0)), -1.0 / 3.0, epsilon = 1e-9);
        assert_relative_eq!(
            giou_3d_normalized(&cube(0.0), &cube(2.0)),
            1.0 / 3.0,
            epsilon = 1e-9
        );
        // GIoU <= IoU
        assert!(giou_3d(&cube(0.0), &cube(0.5)) <= iou_3d(&cube(0.0), &cube(0.5)) + 1e-12);
    }

    fn toy_perfect() -> (TrackingData, TrackingData) {
        let mut gt = TrackingData::new("seq");
        let mut pred = TrackingData::new("seq");
        for f in 0..10 {
            let b = TrackedBox {
                id: 1,
                box2d: Some(Box2D::new(f as f64, 0.0, 10.0, 10.0)),
                box3d: None,
                confidence: None,
            };
            gt.push(f, b.clone());
            pred.push(f, b);
        }
        (gt, pred)
    }

    #[test]
    fn hota_perfect_is_one() {
        let (gt, pred) = toy_perfect();
        let r = hota(&gt, &pred, Similarity::Iou2d, &default_alphas()).unwrap();
        assert_relative_eq!(r.hota, 1.0, epsilon = 1e-12);
        assert_relative_eq!(r.det_a, 1.0, epsilon = 1e-12);
        assert_relative_eq!(r.ass_a, 1.0, epsilon = 1e-12);
        assert_relative_eq!(r.loc_a, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn hota_id_switch_is_sqrt_half() {
        let mut gt = TrackingData::new("seq");
        let mut pred = TrackingData::new("seq");
        for f in 0..10 {
            let b = Box2D::new(f as f64 * 20.0, 0.0, 10.0, 10.0);
            gt.push(
                f,
                TrackedBox {
                    id: 1,
                    box2d: Some(b),
                    box3d: None,
                    confidence: None,
                },
            );
            pred.push(
                f,
                TrackedBox {
                    id: if f < 5 { 7 } else { 8 },
                    box2d: Some(b),
                    box3d: None,
                    confidence: None,
                },
            );
        }
        let r = hota(&gt, &pred, Similarity::Iou2d, &default_alphas()).unwrap();
        assert_relative_eq!(r.det_a, 1.0, epsilon = 1e-12);
        assert_relative_eq!(r.ass_a, 0.5, epsilon = 1e-12);
        assert_relative_eq!(r.hota, 0.5f64.sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn hota_no_predictions_is_zero() {
        let (gt, _) = toy_perfect();
        let pred = TrackingData::new("seq");
        let r = hota(&gt, &pred, Similarity::Iou2d, &default_alphas()).unwrap();
        assert_relative_eq!(r.hota, 0.0);
    }

    #[test]
    fn hota_rejects_sequence_mismatch() {
        let (gt, mut pred) = toy_perfect();
        pred.sequence = String::from("other");
        assert_eq!(
            hota(&gt, &pred, Similarity::Iou2d, &default_alphas()),
            Err(MetricsError::SequenceMismatch)
        );
    }

    #[test]
    fn clearmot_fixtures() {
        let (gt, pred) = toy_perfect();
        let r = clearmot(&gt, &pred, Similarity::Iou2d, 0.5).unwrap();
        assert_relative_eq!(r.mota, 1.0);
        assert_eq!(r.id_switches, 0);
        assert_eq!(r.false_positives, 0);
        assert_eq!(r.false_negatives, 0);

        // id switch at frame 5 of 10
        let mut pred2 = TrackingData::new("seq");
        for (f, objs) in &gt.frames {
            for o in objs {
                let mut o = o.clone();
                o.id = if *f < 5 { 7 } else { 8 };
                pred2.push(*f, o);
            }
        }
        let r = clearmot(&gt, &pred2, Similarity::Iou2d, 0.5).unwrap();
        assert_eq!(r.id_switches, 1);
        assert_relative_eq!(r.mota, 0.9, epsilon = 1e-12);

        // empty predictions
        let r = clearmot(&gt, &TrackingData::new("seq"), Similarity::Iou2d, 0.5).unwrap();
        assert_eq!(r.false_negatives, 10);
        assert_relative_eq!(r.mota, 0.0);
    }
}
