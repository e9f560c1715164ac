//! Frame-to-frame identity management: segment overlap association and
//! the track lifecycle (spawning, coasting through short occlusions,
//! termination).

use alloc::vec::Vec;
use core::fmt;

use crate::geometry::RigidTransform;
use crate::hungarian;
use crate::imaging::{mask_iou, InstanceMask};
use crate::metrics::Box3D;
use crate::window::SlidingWindow;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AssociationError {
    /// Two live tracks carry the same id.
    DuplicateTrackId(u32),
}

impl fmt::Display for AssociationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AssociationError::DuplicateTrackId(id) => {
                write!(f, "duplicate track id {id}")
            }
        }
    }
}

#[cfg(test)]
impl std::error::Error for AssociationError {}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssociationConfig {
    /// Minimum mask overlap for a valid match.
    pub iou_threshold: f64,
    /// Consecutive unmatched frames a 3D-tracked object may coast.
    pub max_age: u32,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        AssociationConfig {
            iou_threshold: 0.05,
            max_age: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Active,
    /// Unmatched but carried forward on its predicted motion.
    Coasting,
    Terminated,
}

#[derive(Debug, Clone)]
pub struct Track {
    pub id: u32,
    pub status: TrackStatus,
    /// Consecutive frames without a segment match.
    pub age: u32,
    /// Current-frame object mask (observed or warped prediction).
    pub mask: InstanceMask,
    /// Frame-to-frame motions, newest last: each maps current-frame
    /// object points into the previous frame.
    pub motions: Vec<RigidTransform>,
    /// Set once the object has been tracked in 3D at least once, which
    /// is what earns the right to coast through missed detections.
    pub tracked_3d: bool,
    pub window: Option<SlidingWindow>,
    /// Latest fused 3D box estimate.
    pub box3d: Option<Box3D>,
    pub confidence: f64,
}

impl Track {
    pub fn new(id: u32, mask: InstanceMask, confidence: f64) -> Self {
        Track {
            id,
            status: TrackStatus::Active,
            age: 0,
            mask,
            motions: Vec::new(),
            tracked_3d: false,
            window: None,
            box3d: None,
            confidence,
        }
    }

    pub fn is_live(&self) -> bool {
        self.status != TrackStatus::Terminated
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssociationOutcome {
    /// (track index, detection index), ascending by track index.
    pub matched: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Match predicted track masks against current-frame detection masks by
/// maximizing total overlap, then discard pairs below the threshold.
pub fn associate(
    track_masks: &[&InstanceMask],
    detection_masks: &[&InstanceMask],
    cfg: &AssociationConfig,
) -> AssociationOutcome {
    let scores: Vec<Vec<f64>> = track_masks
        .iter()
        .map(|t| {
            detection_masks
                .iter()
                .map(|d| {
                    let iou = mask_iou(t, d);
                    if iou >= cfg.iou_threshold {
                        iou
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect()
        })
        .collect();
    let matched = hungarian::maximize(&scores);
    let mut track_used = alloc::vec![false; track_masks.len()];
    let mut det_used = alloc::vec![false; detection_masks.len()];
    for &(t, d) in &matched {
        track_used[t] = true;
        det_used[d] = true;
    }
    AssociationOutcome {
        matched,
        unmatched_tracks: (0..track_masks.len()).filter(|&i| !track_used[i]).collect(),
        unmatched_detections: (0..detection_masks.len())
            .filter(|&i| !det_used[i])
            .collect(),
    }
}

/// Advance the lifecycle of every live track after association.
///
/// Matched tracks take the observed mask and reset their age. Unmatched
/// tracks that have been tracked in 3D coast on their predicted mask
/// until they exceed `max_age`; ones never tracked in 3D terminate
/// immediately. Unmatched detections spawn new tracks with ids above
/// every id ever used.
pub fn update_tracks(
    tracks: &mut Vec<Track>,
    outcome: &AssociationOutcome,
    detection_masks: &[&InstanceMask],
    detection_scores: &[f64],
    next_id: &mut u32,
    cfg: &AssociationConfig,
) -> Result<(), AssociationError> {
    let mut seen = Vec::with_capacity(tracks.len());
    for t in tracks.iter() {
        if t.is_live() {
            if seen.contains(&t.id) {
                return Err(AssociationError::DuplicateTrackId(t.id));
            }
            seen.push(t.id);
        }
    }

    for &(ti, di) in &outcome.matched {
        let t = &mut tracks[ti];
        t.mask = detection_masks[di].clone();
        t.age = 0;
        t.status = TrackStatus::Active;
        t.confidence = detection_scores[di];
    }
    for &ti in &outcome.unmatched_tracks {
        let t = &mut tracks[ti];
        t.age += 1;
        if t.tracked_3d && t.age <= cfg.max_age {
            // keep the warped mask already stored on the track
            t.status = TrackStatus::Coasting;
        } else {
            t.status = TrackStatus::Terminated;
        }
    }
    for &di in &outcome.unmatched_detections {
        let t = Track::new(*next_id, detection_masks[di].clone(), detection_scores[di]);
        *next_id += 1;
        tracks.push(t);
    }
    Ok(())
}
