//! Two-frame direct image alignment of a single object: coarse-to-fine
//! Levenberg-Marquardt over the photometric error, pose-candidate
//! bootstrapping for new tracks, constant-motion initialization, and a
//! sparse-optical-flow 2D fallback for objects that cannot be tracked
//! in 3D.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{Matrix3, Matrix6, Vector2, Vector3, Vector6};

use crate::geometry::{Huber, RigidTransform, Twist};
use crate::imaging::{Image, InstanceMask, ObjectPyramid, PyramidLevel};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AlignError {
    /// Too few object pixels with valid depth; caller should fall back
    /// to 2D tracking.
    NotEnoughData,
    /// The optimizer could not decrease the cost on any damping retry.
    Diverged,
}

impl fmt::Display for AlignError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlignError::NotEnoughData => write!(f, "not enough valid-depth object pixels"),
            AlignError::Diverged => write!(f, "direct alignment diverged"),
        }
    }
}

#[cfg(test)]
impl std::error::Error for AlignError {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrackLost {
    TooFewFlowPoints,
}

impl fmt::Display for TrackLost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "2D fallback lost the object: too few valid flow points")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentConfig {
    pub max_iterations: u32,
    pub lm_init: f64,
    pub lm_up: f64,
    pub lm_down: f64,
    /// Huber threshold on photometric residuals, intensity levels.
    pub huber_photo: f64,
    /// Minimum valid-depth object pixels for 3D tracking.
    pub min_pixels: usize,
    pub min_inlier_fraction: f64,
    pub step_convergence: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            max_iterations: 20,
            lm_init: 1e-4,
            lm_up: 10.0,
            lm_down: 0.5,
            huber_photo: 9.0,
            min_pixels: 50,
            min_inlier_fraction: 0.6,
            step_convergence: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlignmentResult {
    /// Pose mapping current-frame object points into the previous frame.
    pub pose: RigidTransform,
    pub cost_per_pixel: f64,
    pub inlier_fraction: f64,
    pub converged: bool,
    pub iterations_per_level: Vec<u32>,
}

/// Full-frame image pyramid matching the level scales of an object
/// pyramid built from the same frame size.
pub fn build_image_pyramid(image: &Image, levels: usize) -> Vec<Image> {
    let mut pyr = Vec::with_capacity(levels);
    pyr.push(image.clone());
    for _ in 1..levels {
        pyr.push(pyr.last().unwrap().downsample());
    }
    pyr
}

/// One photometric residual with its pose Jacobian (left-multiplied
/// twist increment, translation first).
#[derive(Debug, Clone, Copy)]
pub struct PhotoResidual {
    pub value: f64,
    pub jacobian: Vector6<f64>,
}

/// Residuals of Eq-1-style alignment at a fixed pose on one pyramid
/// level. One entry per (valid-depth mask pixel, channel); `None` where
/// the warped pixel leaves the previous image.
pub fn photometric_residuals(
    prev: &Image,
    level: &PyramidLevel,
    pose: &RigidTransform,
) -> Vec<Option<PhotoResidual>> {
    let k = &level.intrinsics;
    let channels = level.image.channels.min(prev.channels);
    let mut out = Vec::new();
    for (u, v) in level.mask.pixels() {
        let Some(d) = level.depth.depth(u, v) else {
            continue;
        };
        let p = Vector2::new(u as f64, v as f64);
        let x = k.backproject(&p, d).expect("valid depth");
        let y = pose.transform_point(&x);
        let reproj = if y.z > 0.0 { k.project(&y).ok() } else { None };
        for c in 0..channels {
            let cur = level.image.pixel(u, v, c) as f64;
            let entry = reproj.and_then(|uv| {
                prev.sample_bilinear(&uv, c).map(|(val, gu, gv)| {
                    let grad = Vector2::new(gu, gv);
                    let jproj = k.projection_jacobian(&y);
                    // d y / d xi = [ I | -[y]x ]
                    let mut jpose = nalgebra::Matrix3x6::zeros();
                    jpose
                        .fixed_view_mut::<3, 3>(0, 0)
                        .copy_from(&Matrix3::identity());
                    jpose.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::new(
                        0.0, y.z, -y.y, -y.z, 0.0, y.x, y.y, -y.x, 0.0,
                    ));
                    let j = (grad.transpose() * jproj * jpose).transpose();
                    PhotoResidual {
                        value: val - cur,
                        jacobian: j,
                    }
                })
            });
            out.push(entry);
        }
    }
    out
}

/// Robust cost per attempted residual at a pose (dropped residuals do
/// not contribute).
pub fn robust_cost(
    prev: &Image,
    level: &PyramidLevel,
    pose: &RigidTransform,
    huber: &Huber,
) -> f64 {
    let res = photometric_residuals(prev, level, pose);
    let n = res.len().max(1);
    res.iter()
        .flatten()
        .map(|r| huber.cost(r.value))
        .sum::<f64>()
        / n as f64
}

fn count_valid_depth_pixels(level: &PyramidLevel) -> usize {
    level
        .mask
        .pixels()
        .filter(|&(u, v)| level.depth.depth(u, v).is_some())
        .count()
}

/// Direct image alignment of one object between two frames (coarse to
/// fine). `prev_pyramid` holds the previous full frame at the scales of
/// `obj`; the returned pose maps current-frame points to the previous
/// frame.
pub fn align(
    prev_pyramid: &[Image],
    obj: &ObjectPyramid,
    init: &RigidTransform,
    cfg: &AlignmentConfig,
) -> Result<AlignmentResult, AlignError> {
    if count_valid_depth_pixels(obj.finest()) < cfg.min_pixels {
        return Err(AlignError::NotEnoughData);
    }
    let huber = Huber::new(cfg.huber_photo);
    let mut pose = *init;
    let mut iterations_per_level = vec![0u32; obj.levels.len()];
    let mut last_cost = f64::INFINITY;
    let mut last_inlier = 0.0;
    let mut converged = true;
    let mut any_progress = false;

    for (li, level) in obj.levels.iter().enumerate().rev() {
        let prev = &prev_pyramid[li.min(prev_pyramid.len() - 1)];
        let mut lambda = cfg.lm_init;
        let mut level_converged = false;
        let mut accepted_any = false;

        let eval = |p: &RigidTransform| -> (f64, f64, Matrix6<f64>, Vector6<f64>) {
            let res = photometric_residuals(prev, level, p);
            let total = res.len().max(1);
            let mut valid = 0usize;
            let mut cost = 0.0;
            let mut h = Matrix6::zeros();
            let mut g = Vector6::zeros();
            for r in res.iter().flatten() {
                valid += 1;
                cost += huber.cost(r.value);
                let w = huber.weight(r.value);
                h += r.jacobian * r.jacobian.transpose() * w;
                g += r.jacobian * (w * r.value);
            }
            (cost / total as f64, valid as f64 / total as f64, h, g)
        };

        let (mut cost, mut inlier, mut h, mut g) = eval(&pose);
        for _ in 0..cfg.max_iterations {
            iterations_per_level[li] += 1;
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(step) = damped.lu().solve(&(-g)) else {
                return Err(AlignError::Diverged);
            };
            if step.norm() < cfg.step_convergence {
                level_converged = true;
                accepted_any = true;
                any_progress = true;
                break;
            }
            let candidate = RigidTransform::exp(&Twist(step)) * pose;
            let (new_cost, new_inlier, new_h, new_g) = eval(&candidate);
            if new_cost < cost {
                pose = candidate;
                cost = new_cost;
                inlier = new_inlier;
                h = new_h;
                g = new_g;
                lambda = (lambda * cfg.lm_down).max(1e-12);
                accepted_any = true;
                any_progress = true;
                if step.norm() < cfg.step_convergence {
                    level_converged = true;
                    break;
                }
            } else {
                lambda *= cfg.lm_up;
                if lambda > 1e8 {
                    break;
                }
            }
        }
        last_cost = cost;
        last_inlier = inlier;
        if !level_converged && !accepted_any && li == obj.levels.len() - 1 && !any_progress {
            // never moved at the coarsest level; treat a singular /
            // gradient-free problem as divergence unless the init is
            // already a minimum
            if !cost.is_finite() {
                return Err(AlignError::Diverged);
            }
        }
        if !level_converged && !accepted_any {
            converged = false;
        }
    }

    if last_inlier < cfg.min_inlier_fraction || !last_cost.is_finite() {
        converged = false;
    }
    Ok(AlignmentResult {
        pose,
        cost_per_pixel: last_cost,
        inlier_fraction: last_inlier,
        converged,
        iterations_per_level,
    })
}

/// Pose candidates for a new track: identity, plus the translation
/// implied by the mask-centroid displacement at median depth with 0.5x
/// and 2x variants. Candidates are scored by one robust-cost evaluation
/// on the coarsest level; cheapest first.
pub fn propose_candidates(
    prev_pyramid: &[Image],
    obj: &ObjectPyramid,
    prev_mask: Option<&InstanceMask>,
    cfg: &AlignmentConfig,
) -> Vec<RigidTransform> {
    let mut candidates = vec![RigidTransform::identity()];
    if let Some(pm) = prev_mask {
        let finest = obj.finest();
        if let (Some(cur_c), Some(prev_c)) = (finest.mask.centroid(), pm.centroid()) {
            let mut depths: Vec<f64> = finest
                .mask
                .pixels()
                .filter_map(|(u, v)| finest.depth.depth(u, v))
                .collect();
            if !depths.is_empty() {
                depths.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let z = depths[depths.len() / 2];
                let k = &finest.intrinsics;
                if let (Ok(a), Ok(b)) = (k.backproject(&cur_c, z), k.backproject(&prev_c, z)) {
                    let t: Vector3<f64> = b - a;
                    candidates.push(RigidTransform::from_translation(t));
                    candidates.push(RigidTransform::from_translation(t * 0.5));
                    candidates.push(RigidTransform::from_translation(t * 2.0));
                }
            }
        }
    }
    let coarse = obj.coarsest();
    let prev_img = &prev_pyramid[(obj.levels.len() - 1).min(prev_pyramid.len() - 1)];
    let huber = Huber::new(cfg.huber_photo);
    candidates.sort_by(|a, b| {
        robust_cost(prev_img, coarse, a, &huber)
            .partial_cmp(&robust_cost(prev_img, coarse, b, &huber))
            .unwrap()
    });
    candidates
}

/// Constant-motion initialization: the last frame-to-frame relative
/// transform, when the track has one.
pub fn constant_motion_init(relative_motions: &[RigidTransform]) -> Option<RigidTransform> {
    relative_motions.last().copied()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub max_points: usize,
    pub min_points: usize,
    pub window_radius: i32,
    pub pyramid_levels: usize,
    pub iterations: u32,
    pub forward_backward_max: f64,
    /// minimum gradient magnitude for a point to be tracked
    pub gradient_floor: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            max_points: 100,
            min_points: 20,
            window_radius: 3,
            pyramid_levels: 3,
            iterations: 10,
            forward_backward_max: 1.0,
            gradient_floor: 8.0,
        }
    }
}

fn lk_track_point(
    from_pyr: &[Image],
    to_pyr: &[Image],
    p: Vector2<f64>,
    cfg: &FlowConfig,
) -> Option<Vector2<f64>> {
    let mut flow = Vector2::zeros();
    for li in (0..from_pyr.len()).rev() {
        let s = 1.0 / (1 << li) as f64;
        let pl = p * s;
        let mut fl = flow * s;
        let from = &from_pyr[li];
        let to = &to_pyr[li];
        for _ in 0..cfg.iterations {
            let mut h = nalgebra::Matrix2::<f64>::zeros();
            let mut g = Vector2::<f64>::zeros();
            let mut n = 0;
            for dv in -cfg.window_radius..=cfg.window_radius {
                for du in -cfg.window_radius..=cfg.window_radius {
                    let q = pl + Vector2::new(du as f64, dv as f64);
                    let Some((a, gu, gv)) = from.sample_bilinear(&q, 0) else {
                        continue;
                    };
                    let Some((b, _, _)) = to.sample_bilinear(&(q + fl), 0) else {
                        continue;
                    };
                    let grad = Vector2::new(gu, gv);
                    h += grad * grad.transpose();
                    g += grad * (b - a);
                    n += 1;
                }
            }
            if n < 4 {
                return None;
            }
            let step = h.lu().solve(&(-g))?;
            fl += step;
            if step.norm() < 0.01 {
                break;
            }
        }
        flow = fl / s;
    }
    Some(flow)
}

/// 2D fallback: pyramidal Lucas-Kanade flow on up to `max_points`
/// high-gradient mask pixels with a forward-backward consistency check;
/// the mask is shifted by the median flow.
pub fn fallback_track_2d(
    prev: &Image,
    cur: &Image,
    mask: &InstanceMask,
    cfg: &FlowConfig,
) -> Result<InstanceMask, TrackLost> {
    let prev_g = prev.to_grayscale();
    let cur_g = cur.to_grayscale();
    let prev_pyr = build_image_pyramid(&prev_g, cfg.pyramid_levels);
    let cur_pyr = build_image_pyramid(&cur_g, cfg.pyramid_levels);

    // strongest-gradient mask pixels first
    let mut scored: Vec<(f64, Vector2<f64>)> = mask
        .pixels()
        .filter_map(|(u, v)| {
            let p = Vector2::new(u as f64, v as f64);
            prev_g
                .sample_bilinear(&p, 0)
                .map(|(_, gu, gv)| (gu.hypot(gv), p))
        })
        .filter(|(m, _)| *m >= cfg.gradient_floor)
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    scored.truncate(cfg.max_points);

    let mut flows: Vec<Vector2<f64>> = Vec::new();
    for (_, p) in &scored {
        let Some(f) = lk_track_point(&prev_pyr, &cur_pyr, *p, cfg) else {
            continue;
        };
        let Some(back) = lk_track_point(&cur_pyr, &prev_pyr, p + f, cfg) else {
            continue;
        };
        if (f + back).norm() < cfg.forward_backward_max {
            flows.push(f);
        }
    }
    if flows.len() < cfg.min_points {
        return Err(TrackLost::TooFewFlowPoints);
    }
    let median = |mut vals: Vec<f64>| -> f64 {
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals[vals.len() / 2]
    };
    let du = median(flows.iter().map(|f| f.x).collect());
    let dv = median(flows.iter().map(|f| f.y).collect());
    Ok(mask.translated(du.round() as i32, dv.round() as i32))
}
