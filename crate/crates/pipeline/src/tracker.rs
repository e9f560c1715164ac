//! Frame-loop orchestration: per-object direct alignment, joint mask
//! association, track lifecycle, sliding-window refinement, 3D box
//! detection/fusion, and output emission.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use nalgebra::{Vector2, Vector3};

use dmot_core::alignment::{
    align, build_image_pyramid, constant_motion_init, fallback_track_2d, propose_candidates,
};
use dmot_core::association::{associate, update_tracks, Track, TrackStatus};
use dmot_core::detect::{
    fuse_proposals, refine_box, regress_bev_box, BoxObservation2D, BoxPoint, Detection3D,
};
use dmot_core::geometry::Pose4DoF;
use dmot_core::imaging::{mask_iou, warp_mask};
use dmot_core::metrics::{iou_2d, Box2D};
use dmot_core::window::{
    optimize_window, select_points, should_create_keyframe, Keyframe, PointStatus, SlidingWindow,
};
use dmot_core::{CameraIntrinsics, DepthMap, Image, InstanceMask, ObjectPyramid, RigidTransform};

use crate::formats::{Detection2D, PipelineConfig, TrackOutput};

/// Everything the tracker needs for one frame, already decoded.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub frame_id: u32,
    pub image: Image,
    pub depth: DepthMap,
    /// Instance masks of the current frame, one per visible object.
    pub masks: Vec<InstanceMask>,
    pub detections_2d: Vec<Detection2D>,
    pub dims_prior: Option<Vector3<f64>>,
}

/// Per-track quantities the lifecycle module does not manage.
#[derive(Debug, Clone)]
pub struct TrackRuntime {
    /// Frame-t object points -> reference frame, refined at keyframes.
    pub cum: RigidTransform,
    /// Same accumulation from raw frame-to-frame alignment only.
    pub cum_raw: RigidTransform,
    /// Translation accumulated since the last keyframe.
    pub accum_translation: f64,
    pub window: SlidingWindow,
    pub fused: Option<Detection3D>,
    /// Previous refined pose, regularizing the next refinement.
    pub prior_pose: Option<Pose4DoF>,
    /// (frame, cum) for every frame with a 3D motion estimate.
    pub poses_by_frame: Vec<(u32, RigidTransform)>,
    /// Same frames, accumulated without keyframe refinement.
    pub raw_poses_by_frame: Vec<(u32, RigidTransform)>,
}

impl TrackRuntime {
    fn new() -> Self {
        TrackRuntime {
            cum: RigidTransform::identity(),
            cum_raw: RigidTransform::identity(),
            accum_translation: 0.0,
            window: SlidingWindow::new(),
            fused: None,
            prior_pose: None,
            poses_by_frame: Vec::new(),
            raw_poses_by_frame: Vec::new(),
        }
    }
}

struct PrevFrame {
    gray: Image,
    pyramid: Vec<Image>,
    depth: DepthMap,
}

pub struct TrackerState {
    pub cfg: PipelineConfig,
    pub intrinsics: CameraIntrinsics,
    pub tracks: Vec<Track>,
    pub runtime: BTreeMap<u32, TrackRuntime>,
    pub next_id: u32,
    prev: Option<PrevFrame>,
}

impl TrackerState {
    pub fn new(cfg: PipelineConfig, intrinsics: CameraIntrinsics) -> Self {
        TrackerState {
            cfg,
            intrinsics,
            tracks: Vec::new(),
            runtime: BTreeMap::new(),
            next_id: 1,
            prev: None,
        }
    }
}

/// Ordered parallel map: results come back in input order regardless of
/// the worker count, keeping the pipeline deterministic.
fn par_map<T, R, F>(items: &[T], degree: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    if degree <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, R)>();
    std::thread::scope(|s| {
        for _ in 0..degree.min(items.len()) {
            let tx = tx.clone();
            let next = &next;
            let f = &f;
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                if tx.send((i, r)).is_err() {
                    break;
                }
            });
        }
    });
    drop(tx);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    for (i, r) in rx {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|s| s.expect("worker died")).collect()
}

/// Result of the per-object motion stage for one current-frame mask.
enum ObsMotion {
    /// 3D alignment succeeded: pose maps current points to t-1, mask is
    /// the geometric warp of the object into t-1.
    Pose(RigidTransform, InstanceMask),
    /// Only 2D flow worked: mask translated into t-1.
    Flow(InstanceMask),
    /// Nothing worked; association falls back to the raw mask.
    Failed,
}

fn best_detection_for_mask(detections: &[Detection2D], mask: &InstanceMask) -> Option<Box2D> {
    let (min_u, min_v, max_u, max_v) = mask.bbox()?;
    let mb = Box2D::from_corners(
        min_u as f64,
        min_v as f64,
        max_u as f64 + 1.0,
        max_v as f64 + 1.0,
    );
    detections
        .iter()
        .map(|d| (iou_2d(&d.box2d, &mb), d.box2d))
        .filter(|(iou, _)| *iou >= 0.3)
        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        .map(|(_, b)| b)
}

/// Advance the tracker by one frame and return this frame's outputs.
/// Failures of individual objects (alignment divergence, degenerate
/// geometry, even panics) are contained and never abort the frame.
pub fn process_frame(state: &mut TrackerState, input: &FrameInput) -> Vec<TrackOutput> {
    let gray = input.image.to_grayscale();
    let k = state.intrinsics;
    let cfg = state.cfg.clone();

    // ---- stage 1: per-object motion against the previous frame ----
    let motions: Vec<ObsMotion> = if let Some(prev) = &state.prev {
        // tentative pre-pairing for motion-model initialization
        let live: Vec<&Track> = state.tracks.iter().filter(|t| t.is_live()).collect();
        let paired: Vec<Option<&Track>> = input
            .masks
            .iter()
            .map(|m| {
                live.iter()
                    .map(|t| (mask_iou(&t.mask, m), *t))
                    .filter(|(iou, _)| *iou > 0.0)
                    .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                    .map(|(_, t)| t)
            })
            .collect();
        let inits: Vec<(Option<RigidTransform>, Option<InstanceMask>)> = paired
            .iter()
            .map(|t| {
                (
                    t.and_then(|t| constant_motion_init(&t.motions)),
                    t.map(|t| t.mask.clone()),
                )
            })
            .collect();

        par_map(&input.masks, cfg.parallelism, |i, mask| {
            let work = || -> ObsMotion {
                // boundary pixels mix object and background appearance and
                // bias the photometric fit; align on an eroded interior
                let interior = mask.eroded(2);
                let align_mask = if interior.len() >= cfg.align.min_pixels {
                    &interior
                } else {
                    mask
                };
                let Ok(obj) = ObjectPyramid::build(&gray, &input.depth, align_mask, &k, cfg.s_min)
                else {
                    return ObsMotion::Failed;
                };
                let (model, prev_mask) = &inits[i];
                let mut candidates = Vec::new();
                if let Some(m) = model {
                    candidates.push(*m);
                }
                candidates.extend(propose_candidates(
                    &prev.pyramid,
                    &obj,
                    prev_mask.as_ref(),
                    &cfg.align,
                ));
                for init in &candidates {
                    if let Ok(res) = align(&prev.pyramid, &obj, init, &cfg.align) {
                        if res.converged {
                            if let Ok(warped) = warp_mask(mask, &input.depth, &res.pose, &k) {
                                return ObsMotion::Pose(res.pose, warped);
                            }
                        }
                    }
                }
                match fallback_track_2d(&gray, &prev.gray, mask, &cfg.flow) {
                    Ok(m) => ObsMotion::Flow(m),
                    Err(_) => ObsMotion::Failed,
                }
            };
            catch_unwind(AssertUnwindSafe(work)).unwrap_or(ObsMotion::Failed)
        })
    } else {
        input.masks.iter().map(|_| ObsMotion::Failed).collect()
    };

    // ---- stage 2: joint association in the previous frame ----
    let warped: Vec<InstanceMask> = input
        .masks
        .iter()
        .zip(&motions)
        .map(|(m, r)| match r {
            ObsMotion::Pose(_, w) | ObsMotion::Flow(w) => w.clone(),
            ObsMotion::Failed => m.clone(),
        })
        .collect();
    let live_idx: Vec<usize> = (0..state.tracks.len())
        .filter(|&i| state.tracks[i].is_live())
        .collect();
    let track_masks: Vec<&InstanceMask> = live_idx.iter().map(|&i| &state.tracks[i].mask).collect();
    let warped_refs: Vec<&InstanceMask> = warped.iter().collect();
    let mut outcome = associate(&track_masks, &warped_refs, &cfg.assoc);
    // re-express track indices over the full track vector
    for m in &mut outcome.matched {
        m.0 = live_idx[m.0];
    }
    outcome.unmatched_tracks = outcome
        .unmatched_tracks
        .iter()
        .map(|&i| live_idx[i])
        .collect();

    // predict coasting candidates forward so their stored mask lives in
    // the current frame
    for &ti in &outcome.unmatched_tracks {
        if !state.tracks[ti].tracked_3d {
            continue;
        }
        let Some(pred) = constant_motion_init(&state.tracks[ti].motions) else {
            continue;
        };
        let Some(prev) = &state.prev else { continue };
        let Ok(m) = warp_mask(&state.tracks[ti].mask, &prev.depth, &pred.inverse(), &k) else {
            continue;
        };
        let id = state.tracks[ti].id;
        state.tracks[ti].mask = m;
        state.tracks[ti].motions.push(pred);
        if let Some(rt) = state.runtime.get_mut(&id) {
            rt.cum = rt.cum * pred;
            rt.cum_raw = rt.cum_raw * pred;
            rt.accum_translation += pred.translation.norm();
        }
    }

    // ---- stage 3: lifecycle ----
    let scores: Vec<f64> = input.masks.iter().map(|_| 1.0).collect();
    let mask_refs: Vec<&InstanceMask> = input.masks.iter().collect();
    let id_before = state.next_id;
    // matched motion/3D bookkeeping happens before the lifecycle call so
    // the track masks it stores are the current-frame ones
    for &(ti, di) in &outcome.matched {
        if let ObsMotion::Pose(pose, _) = &motions[di] {
            let t = &mut state.tracks[ti];
            t.motions.push(*pose);
            t.tracked_3d = true;
            let rt = state.runtime.entry(t.id).or_insert_with(TrackRuntime::new);
            rt.cum = rt.cum * *pose;
            rt.cum_raw = rt.cum_raw * *pose;
            rt.accum_translation += pose.translation.norm();
            rt.poses_by_frame.push((input.frame_id, rt.cum));
            rt.raw_poses_by_frame.push((input.frame_id, rt.cum_raw));
        }
    }
    let _ = update_tracks(
        &mut state.tracks,
        &outcome,
        &mask_refs,
        &scores,
        &mut state.next_id,
        &cfg.assoc,
    );
    for t in &state.tracks {
        if t.id >= id_before {
            state.runtime.entry(t.id).or_insert_with(TrackRuntime::new);
        }
    }
    state
        .runtime
        .retain(|id, _| state.tracks.iter().any(|t| t.id == *id && t.is_live()));

    // which track matched which observation (for keyframe attachments)
    let match_of: BTreeMap<u32, usize> = outcome
        .matched
        .iter()
        .map(|&(ti, di)| (state.tracks[ti].id, di))
        .collect();

    // ---- stages 4-5: keyframes, window refinement, box detection ----
    for ti in 0..state.tracks.len() {
        let t = &state.tracks[ti];
        if !t.is_live() || !t.tracked_3d || t.status != TrackStatus::Active {
            continue;
        }
        let Some(&di) = match_of.get(&t.id) else {
            continue;
        };
        if !matches!(motions[di], ObsMotion::Pose(..)) {
            continue;
        }
        let id = t.id;
        let step = || {
            let rt = state.runtime.get_mut(&id).unwrap();
            let make_kf = should_create_keyframe(
                !rt.window.keyframes.is_empty(),
                rt.accum_translation,
                cfg.ba.keyframe_motion_threshold,
            );
            if !make_kf {
                return;
            }
            let mask = &state.tracks[ti].mask;
            // patch pixels within 1 px of the silhouette still blend
            // object and background intensities under bilinear sampling
            let interior = mask.eroded(2);
            let select_mask = if interior.len() >= cfg.ba.min_active_points {
                &interior
            } else {
                mask
            };
            let points = select_points(
                &gray,
                &input.depth,
                select_mask,
                cfg.ba.points_per_keyframe,
                cfg.ba.gradient_floor,
            );
            rt.window.keyframes.push(Keyframe {
                frame_id: input.frame_id,
                image: gray.clone(),
                mask: mask.clone(),
                intrinsics: k,
                pose: rt.cum,
                points,
                detection_2d: best_detection_for_mask(&input.detections_2d, mask),
            });
            if rt.window.keyframes.len() >= 2 {
                let _ = optimize_window(&mut rt.window, &cfg.ba);
            }
            rt.window.slide(cfg.ba.window_capacity);
            // sync the running pose to the refined keyframe
            if let Some(kf) = rt.window.keyframes.last() {
                if kf.frame_id == input.frame_id {
                    rt.cum = kf.pose;
                    if let Some(last) = rt.poses_by_frame.last_mut() {
                        if last.0 == input.frame_id {
                            last.1 = rt.cum;
                        }
                    }
                }
            }
            rt.accum_translation = 0.0;

            // box measurement on the new keyframe
            if rt.window.keyframes.len() < 2 {
                return;
            }
            let mut pts: Vec<BoxPoint> = Vec::new();
            for kf in &rt.window.keyframes {
                for p in &kf.points {
                    if p.status != PointStatus::Active {
                        continue;
                    }
                    pts.push(BoxPoint {
                        position: kf.pose.transform_point(&p.position(&kf.intrinsics)),
                        sigma_x: p.sigma_x.max(1e-3),
                    });
                }
            }
            let initial = match &rt.fused {
                Some(f) => *f,
                None => {
                    let positions: Vec<Vector3<f64>> = pts.iter().map(|p| p.position).collect();
                    match regress_bev_box(
                        &positions,
                        cfg.grid_cell,
                        cfg.grid_min_count,
                        input.dims_prior,
                    ) {
                        Ok(d) => d,
                        Err(_) => return, // deferred to the next keyframe
                    }
                }
            };
            let observations: Vec<BoxObservation2D> = rt
                .window
                .keyframes
                .iter()
                .filter_map(|kf| {
                    kf.detection_2d.map(|b| BoxObservation2D {
                        keyframe_pose: kf.pose,
                        box2d: b,
                        intrinsics: kf.intrinsics,
                    })
                })
                .collect();
            let refined = refine_box(
                &initial,
                &pts,
                &observations,
                rt.prior_pose.as_ref(),
                &cfg.refine,
            );
            rt.prior_pose = Some(refined.pose());
            rt.fused = Some(match &rt.fused {
                Some(f) => fuse_proposals(f, &refined),
                None => refined,
            });
        };
        let _ = catch_unwind(AssertUnwindSafe(step));
    }

    // ---- stage 6: outputs ----
    let outputs = outputs_for_frame(state, input.frame_id);

    state.prev = Some(PrevFrame {
        pyramid: build_image_pyramid(&gray, 6),
        gray,
        depth: input.depth.clone(),
    });
    outputs
}

fn project_box2d(k: &CameraIntrinsics, pose: &Pose4DoF, dims: &Vector3<f64>) -> Option<Box2D> {
    let t = pose.to_rigid();
    let half = dims / 2.0;
    let mut min_uv = Vector2::new(f64::INFINITY, f64::INFINITY);
    let mut max_uv = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                let y = t.transform_point(&Vector3::new(sx * half.x, sy * half.y, sz * half.z));
                let uv = k.project(&y).ok()?;
                min_uv = min_uv.inf(&uv);
                max_uv = max_uv.sup(&uv);
            }
        }
    }
    Some(Box2D::from_corners(min_uv.x, min_uv.y, max_uv.x, max_uv.y))
}

/// Camera-frame box of a track at one frame: the fused reference-frame
/// box carried through that frame's pose.
pub fn box_at_frame(rt: &TrackRuntime, frame: u32) -> Option<(Pose4DoF, Vector3<f64>)> {
    let fused = rt.fused.as_ref()?;
    let &(_, cum) = rt.poses_by_frame.iter().find(|&&(f, _)| f == frame)?;
    let cam = cum.inverse() * fused.pose().to_rigid();
    Some((Pose4DoF::from_rigid(&cam), fused.dims))
}

/// Rows for one frame from the current fused estimates.
pub fn outputs_for_frame(state: &TrackerState, frame: u32) -> Vec<TrackOutput> {
    let mut rows = Vec::new();
    for t in &state.tracks {
        if !t.is_live() {
            continue;
        }
        let Some(rt) = state.runtime.get(&t.id) else {
            continue;
        };
        let Some((pose, dims)) = box_at_frame(rt, frame) else {
            continue;
        };
        let Some(box2d) = project_box2d(&state.intrinsics, &pose, &dims) else {
            continue;
        };
        rows.push(TrackOutput {
            frame,
            id: t.id,
            box2d,
            center: pose.translation,
            yaw: pose.yaw,
            dims,
            score: t.confidence,
        });
    }
    rows
}

/// Final trajectory rows: every 3D-tracked frame of every track,
/// re-expressed with the latest fused estimate (fused boxes propagate
/// to past keyframes).
pub fn final_outputs(state: &TrackerState) -> Vec<TrackOutput> {
    let mut rows = Vec::new();
    let mut by_id: Vec<(&u32, &TrackRuntime)> = state.runtime.iter().collect();
    by_id.sort_by_key(|(id, _)| **id);
    for (&id, rt) in by_id {
        let score = state
            .tracks
            .iter()
            .find(|t| t.id == id)
            .map(|t| t.confidence)
            .unwrap_or(1.0);
        for &(frame, _) in &rt.poses_by_frame {
            let Some((pose, dims)) = box_at_frame(rt, frame) else {
                continue;
            };
            let Some(box2d) = project_box2d(&state.intrinsics, &pose, &dims) else {
                continue;
            };
            rows.push(TrackOutput {
                frame,
                id,
                box2d,
                center: pose.translation,
                yaw: pose.yaw,
                dims,
                score,
            });
        }
    }
    rows.sort_by_key(|r| (r.frame, r.id));
    rows
}
