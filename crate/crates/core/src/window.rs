//! Keyframe management and joint photometric optimization of object
//! keyframe poses and point inverse depths in a bounded sliding window.
//!
//! All keyframe poses map object points observed at that keyframe's time
//! into the reference frame (the object's position at the origin of its
//! trajectory, expressed in camera coordinates). The first keyframe of a
//! trajectory therefore carries the identity pose and the oldest keyframe
//! in the window is held fixed during optimization to pin the gauge.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3, Vector6};

use crate::geometry::{CameraIntrinsics, Huber, RigidTransform, Twist};
use crate::imaging::{DepthMap, Image, InstanceMask};
use crate::metrics::Box2D;

/// DSO residual pattern around a host pixel.
pub const RESIDUAL_PATTERN: [(i32, i32); 8] = [
    (0, 0),
    (-2, 0),
    (2, 0),
    (0, -2),
    (0, 2),
    (-1, -1),
    (1, -1),
    (-1, 1),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WindowError {
    /// Fewer than 2 keyframes or fewer active points than the minimum.
    NotEnoughData,
}

impl fmt::Display for WindowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "window needs at least 2 keyframes and 10 active points")
    }
}

#[cfg(test)]
impl std::error::Error for WindowError {}

#[derive(Debug, Clone, PartialEq)]
pub struct BAConfig {
    pub window_capacity: usize,
    /// Accumulated translation (meters) that promotes a keyframe.
    pub keyframe_motion_threshold: f64,
    pub points_per_keyframe: usize,
    pub iterations: u32,
    pub huber_photo: f64,
    pub min_active_points: usize,
    /// Minimum gradient magnitude (intensity levels) for point selection.
    pub gradient_floor: f64,
    /// Points with mean |residual| above this multiple of the Huber
    /// threshold are marked outliers after optimization.
    pub outlier_factor: f64,
    /// Standard deviation of the inverse-depth measurement prior that
    /// anchors the otherwise free photometric scale gauge to the depth
    /// map (inverse-depth units; <= 0 disables the prior).
    pub depth_prior_sigma: f64,
}

impl Default for BAConfig {
    fn default() -> Self {
        BAConfig {
            window_capacity: 6,
            keyframe_motion_threshold: 0.5,
            points_per_keyframe: 300,
            iterations: 10,
            huber_photo: 9.0,
            min_active_points: 10,
            gradient_floor: 8.0,
            outlier_factor: 2.0,
            depth_prior_sigma: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointStatus {
    Active,
    Outlier,
}

/// A point hosted at a keyframe pixel, parameterized by inverse depth
/// along its ray.
#[derive(Debug, Clone)]
pub struct HostPoint {
    pub pixel: Vector2<f64>,
    pub inv_depth: f64,
    /// Inverse depth as measured by the depth map at selection time.
    pub inv_depth_meas: f64,
    /// Depth of each pattern pixel relative to the center, sampled from
    /// the host depth map at selection time (1.0 where unavailable).
    /// Keeps patch warps faithful on slanted surfaces while the center
    /// inverse depth stays the single optimized parameter.
    pub pattern_depth_ratios: [f64; RESIDUAL_PATTERN.len()],
    /// 3D-position standard deviation proxy (meters).
    pub sigma_x: f64,
    pub status: PointStatus,
}

impl HostPoint {
    /// Camera-frame 3D position in the host keyframe.
    pub fn position(&self, k: &CameraIntrinsics) -> Vector3<f64> {
        k.backproject(&self.pixel, 1.0 / self.inv_depth)
            .expect("positive depth")
    }
}

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub frame_id: u32,
    /// Grayscale intensity image of the keyframe.
    pub image: Image,
    pub mask: InstanceMask,
    pub intrinsics: CameraIntrinsics,
    /// Object points at this keyframe's time -> reference frame.
    pub pose: RigidTransform,
    pub points: Vec<HostPoint>,
    /// Amodal 2D detection attached to this keyframe, when available.
    pub detection_2d: Option<Box2D>,
}

#[derive(Debug, Clone)]
pub struct SlidingWindow {
    pub keyframes: Vec<Keyframe>,
}

impl SlidingWindow {
    pub fn new() -> Self {
        SlidingWindow {
            keyframes: Vec::new(),
        }
    }

    pub fn active_point_count(&self) -> usize {
        self.keyframes
            .iter()
            .flat_map(|kf| kf.points.iter())
            .filter(|p| p.status == PointStatus::Active)
            .count()
    }

    /// Drop oldest keyframes (and their hosted points) beyond capacity.
    /// No marginalization prior is kept; poses stay expressed relative
    /// to the trajectory origin.
    pub fn slide(&mut self, capacity: usize) {
        while self.keyframes.len() > capacity {
            self.keyframes.remove(0);
        }
    }
}

impl Default for SlidingWindow {
    fn default() -> Self {
        Self::new()
    }
}

/// Keyframe promotion: true on the first 3D-tracked frame and whenever
/// the translation accumulated since the last keyframe reaches the
/// threshold.
pub fn should_create_keyframe(
    has_keyframe: bool,
    accumulated_translation: f64,
    threshold: f64,
) -> bool {
    !has_keyframe || accumulated_translation >= threshold
}

/// Select up to `budget` host points uniformly over the mask bounding
/// box: per grid cell, the valid-depth mask pixel with the strongest
/// gradient above the floor. Inverse depth comes from the input depth
/// map, sigma_x from a depth-quadratic prior.
pub fn select_points(
    image: &Image,
    depth: &DepthMap,
    mask: &InstanceMask,
    budget: usize,
    gradient_floor: f64,
) -> Vec<HostPoint> {
    let Some((min_u, min_v, max_u, max_v)) = mask.bbox() else {
        return Vec::new();
    };
    let gray = image.to_grayscale();
    let cells = ((budget as f64).sqrt().ceil() as u32).max(1);
    let bw = (max_u - min_u + 1) as f64 / cells as f64;
    let bh = (max_v - min_v + 1) as f64 / cells as f64;
    let mut best: Vec<Option<(f64, u32, u32, f64)>> = vec![None; (cells * cells) as usize];
    for (u, v) in mask.pixels() {
        let Some(z) = depth.depth(u, v) else { continue };
        let Some((_, gu, gv)) = gray.sample_bilinear(&Vector2::new(u as f64, v as f64), 0) else {
            continue;
        };
        let mag = gu.hypot(gv);
        if mag < gradient_floor {
            continue;
        }
        let cu = (((u - min_u) as f64 / bw) as u32).min(cells - 1);
        let cv = (((v - min_v) as f64 / bh) as u32).min(cells - 1);
        let slot = &mut best[(cv * cells + cu) as usize];
        if slot.is_none_or(|(m, _, _, _)| mag > m) {
            *slot = Some((mag, u, v, z));
        }
    }
    best.into_iter()
        .flatten()
        .map(|(_, u, v, z)| {
            let mut ratios = [1.0; RESIDUAL_PATTERN.len()];
            for (i, (du, dv)) in RESIDUAL_PATTERN.iter().enumerate() {
                let (nu, nv) = (u as i64 + *du as i64, v as i64 + *dv as i64);
                if nu >= 0 && nv >= 0 {
                    let (nu, nv) = (nu as u32, nv as u32);
                    if mask.contains(nu, nv) {
                        if let Some(zp) = depth.depth(nu, nv) {
                            // clamp against depth discontinuities
                            ratios[i] = (zp / z).clamp(0.8, 1.25);
                        }
                    }
                }
            }
            HostPoint {
                pixel: Vector2::new(u as f64, v as f64),
                inv_depth: 1.0 / z,
                inv_depth_meas: 1.0 / z,
                pattern_depth_ratios: ratios,
                sigma_x: 0.01 * z * z,
                status: PointStatus::Active,
            }
        })
        .collect()
}

/// One residual patch: a host point observed in one target keyframe.
pub struct PatchBlock {
    pub host: usize,
    pub target: usize,
    /// Index of the point within the host keyframe.
    pub point: usize,
    /// Per valid pattern pixel: its index in the residual pattern.
    pub pattern: Vec<usize>,
    /// Per valid pattern pixel: sub-pixel sampling position in the
    /// target image.
    pub target_uv: Vec<Vector2<f64>>,
    /// Per valid pattern pixel: residual value.
    pub residuals: Vec<f64>,
    /// Per valid pattern pixel: d r / d twist of the host pose.
    pub jac_host: Vec<Vector6<f64>>,
    /// Per valid pattern pixel: d r / d twist of the target pose.
    pub jac_target: Vec<Vector6<f64>>,
    /// Per valid pattern pixel: d r / d inverse depth.
    pub jac_depth: Vec<f64>,
}

/// Evaluate every residual patch of the window at its current state.
///
/// The patch residual uses the locally-scaled difference
/// r_p = I_target(p') - s * I_host(p) with s the ratio of patch
/// intensity sums, which cancels uniform gain changes. The Jacobians
/// include the dependence of s on the warp. Patches whose host
/// intensity sum is near zero, or whose center does not land inside the
/// target mask with positive depth, are skipped.
pub fn evaluate_patches(window: &SlidingWindow) -> Vec<PatchBlock> {
    let mut blocks = Vec::new();
    let nk = window.keyframes.len();
    for hi in 0..nk {
        let host = &window.keyframes[hi];
        for (pi, point) in host.points.iter().enumerate() {
            if point.status != PointStatus::Active {
                continue;
            }
            let x_host = point.position(&host.intrinsics);
            let z_ref = host.pose.transform_point(&x_host);
            for ti in 0..nk {
                if ti == hi {
                    continue;
                }
                let target = &window.keyframes[ti];
                let t_rel = target.pose.inverse();
                // center visibility gate: inside the target mask
                let center = t_rel.transform_point(&z_ref);
                if center.z <= 0.0 {
                    continue;
                }
                let Ok(center_uv) = target.intrinsics.project(&center) else {
                    continue;
                };
                let (cu, cv) = (center_uv.x.round(), center_uv.y.round());
                if cu < 0.0 || cv < 0.0 || !target.mask.contains(cu as u32, cv as u32) {
                    continue;
                }

                let mut host_vals = Vec::with_capacity(RESIDUAL_PATTERN.len());
                let mut tgt_vals = Vec::with_capacity(RESIDUAL_PATTERN.len());
                let mut jacs = Vec::with_capacity(RESIDUAL_PATTERN.len());
                let mut pattern_ids = Vec::with_capacity(RESIDUAL_PATTERN.len());
                let mut uvs = Vec::with_capacity(RESIDUAL_PATTERN.len());
                for (i, (du, dv)) in RESIDUAL_PATTERN.iter().enumerate() {
                    let hp = point.pixel + Vector2::new(*du as f64, *dv as f64);
                    // both patch endpoints must lie on the object: pixels
                    // mixing object and background appearance bias the fit
                    let (hu, hv) = (hp.x.round(), hp.y.round());
                    if hu < 0.0 || hv < 0.0 || !host.mask.contains(hu as u32, hv as u32) {
                        continue;
                    }
                    let Some((ih, _, _)) = host.image.sample_bilinear(&hp, 0) else {
                        continue;
                    };
                    // pattern-pixel depth scales with the center depth,
                    // preserving the surface shape seen at selection time
                    let zp_host = point.pattern_depth_ratios[i] / point.inv_depth;
                    let Ok(xp) = host.intrinsics.backproject(&hp, zp_host) else {
                        continue;
                    };
                    let zp = host.pose.transform_point(&xp);
                    let yp = t_rel.transform_point(&zp);
                    if yp.z <= 0.0 {
                        continue;
                    }
                    let Ok(uv) = target.intrinsics.project(&yp) else {
                        continue;
                    };
                    let (tu, tv) = (uv.x.round(), uv.y.round());
                    if tu < 0.0 || tv < 0.0 || !target.mask.contains(tu as u32, tv as u32) {
                        continue;
                    }
                    let Some((it, gu, gv)) = target.image.sample_bilinear(&uv, 0) else {
                        continue;
                    };
                    let grad = Vector2::new(gu, gv);
                    let jproj = target.intrinsics.projection_jacobian(&yp);
                    let rjt = t_rel.rotation; // R_target^T

                    // d yp / d eps_host (left-multiplied on host pose)
                    let mut dz = nalgebra::Matrix3x6::zeros();
                    dz.fixed_view_mut::<3, 3>(0, 0)
                        .copy_from(&Matrix3::identity());
                    dz.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::new(
                        0.0, zp.z, -zp.y, -zp.z, 0.0, zp.x, zp.y, -zp.x, 0.0,
                    ));
                    let dy_dhost = rjt * dz;
                    // left-multiplied on target pose: exact negative
                    let dy_dtarget = -dy_dhost;
                    // d yp / d inv_depth: xp = dir / rho
                    let dx_drho = -xp / point.inv_depth;
                    let dy_drho = rjt * (host.pose.rotation * dx_drho);

                    let g = grad.transpose() * jproj;
                    let j_host: Vector6<f64> = (g * dy_dhost).transpose();
                    let j_target: Vector6<f64> = (g * dy_dtarget).transpose();
                    let j_depth: f64 = (g * dy_drho)[0];
                    host_vals.push(ih);
                    tgt_vals.push(it);
                    jacs.push((j_host, j_target, j_depth));
                    pattern_ids.push(i);
                    uvs.push(uv);
                }
                if host_vals.is_empty() {
                    continue;
                }
                let sum_host: f64 = host_vals.iter().sum();
                if sum_host.abs() < 1e-6 {
                    continue;
                }
                let sum_tgt: f64 = tgt_vals.iter().sum();
                let scale = sum_tgt / sum_host;
                // d s / d theta = sum_p d I_target(p') / d theta / sum_host
                let mut sum_jh = Vector6::zeros();
                let mut sum_jt = Vector6::zeros();
                let mut sum_jd = 0.0;
                for (jh, jt, jd) in &jacs {
                    sum_jh += jh;
                    sum_jt += jt;
                    sum_jd += jd;
                }
                let n = host_vals.len();
                let mut block = PatchBlock {
                    host: hi,
                    target: ti,
                    point: pi,
                    pattern: pattern_ids,
                    target_uv: uvs,
                    residuals: Vec::with_capacity(n),
                    jac_host: Vec::with_capacity(n),
                    jac_target: Vec::with_capacity(n),
                    jac_depth: Vec::with_capacity(n),
                };
                for i in 0..n {
                    let (jh, jt, jd) = jacs[i];
                    let c = host_vals[i] / sum_host;
                    block.residuals.push(tgt_vals[i] - scale * host_vals[i]);
                    block.jac_host.push(jh - sum_jh * c);
                    block.jac_target.push(jt - sum_jt * c);
                    block.jac_depth.push(jd - sum_jd * c);
                }
                blocks.push(block);
            }
        }
    }
    blocks
}

/// Quadratic inverse-depth prior energy tying active points to their
/// measured depths.
fn depth_prior_energy(window: &SlidingWindow, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    let w = 1.0 / (sigma * sigma);
    window
        .keyframes
        .iter()
        .flat_map(|kf| kf.points.iter())
        .filter(|p| p.status == PointStatus::Active)
        .map(|p| {
            let d = p.inv_depth - p.inv_depth_meas;
            w * d * d
        })
        .sum()
}

/// Total robust photometric energy of the window (Huber over the patch
/// residuals of every co-observation).
pub fn photometric_energy(window: &SlidingWindow, huber: &Huber) -> f64 {
    evaluate_patches(window)
        .iter()
        .flat_map(|b| b.residuals.iter())
        .map(|&r| huber.cost(r))
        .sum()
}

/// Robust photometric energy together with the number of contributing
/// residuals. The count matters when comparing poses: the visibility
/// gates depend on the pose, so a raw sum can be lowered by pushing
/// patches out of the masks rather than by fitting them.
fn photometric_energy_count(window: &SlidingWindow, huber: &Huber) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    for b in evaluate_patches(window) {
        for &r in &b.residuals {
            sum += huber.cost(r);
            n += 1;
        }
    }
    (sum, n)
}

/// Dense residual vector and Jacobian over the free parameters:
/// the twists of keyframes 1..F-1 (6 each, the first keyframe pins the
/// gauge) followed by the inverse depths of active points in window
/// order. Intended for small windows (finite-difference verification);
/// the optimizer itself accumulates normal equations.
pub fn residuals_and_jacobian(window: &SlidingWindow) -> (DVector<f64>, DMatrix<f64>) {
    let layout = ParamLayout::new(window);
    let blocks = evaluate_patches(window);
    let rows: usize = blocks.iter().map(|b| b.residuals.len()).sum();
    let mut r = DVector::zeros(rows);
    let mut j = DMatrix::zeros(rows, layout.total);
    let mut row = 0;
    for b in &blocks {
        for i in 0..b.residuals.len() {
            r[row] = b.residuals[i];
            if let Some(c) = layout.pose_col(b.host) {
                for k in 0..6 {
                    j[(row, c + k)] = b.jac_host[i][k];
                }
            }
            if let Some(c) = layout.pose_col(b.target) {
                for k in 0..6 {
                    j[(row, c + k)] = b.jac_target[i][k];
                }
            }
            j[(row, layout.depth_col(b.host, b.point))] = b.jac_depth[i];
            row += 1;
        }
    }
    (r, j)
}

struct ParamLayout {
    /// (keyframe, point) -> depth column
    depth_cols: Vec<Vec<usize>>,
    n_poses: usize,
    total: usize,
}

impl ParamLayout {
    fn new(window: &SlidingWindow) -> Self {
        let n_poses = window.keyframes.len().saturating_sub(1);
        let mut next = 6 * n_poses;
        let mut depth_cols = Vec::with_capacity(window.keyframes.len());
        for kf in &window.keyframes {
            let mut cols = Vec::with_capacity(kf.points.len());
            for p in &kf.points {
                if p.status == PointStatus::Active {
                    cols.push(next);
                    next += 1;
                } else {
                    cols.push(usize::MAX);
                }
            }
            depth_cols.push(cols);
        }
        ParamLayout {
            depth_cols,
            n_poses,
            total: next,
        }
    }

    fn pose_col(&self, kf: usize) -> Option<usize> {
        (kf > 0).then(|| 6 * (kf - 1))
    }

    fn depth_col(&self, kf: usize, point: usize) -> usize {
        self.depth_cols[kf][point]
    }

    fn n_depths(&self) -> usize {
        self.total - 6 * self.n_poses
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeReport {
    pub initial_energy: f64,
    pub final_energy: f64,
    pub accepted_steps: u32,
    pub outliers_marked: usize,
    /// Set when the normal equations were singular; poses unchanged.
    pub low_confidence: bool,
}

fn apply_step(window: &mut SlidingWindow, layout: &ParamLayout, step: &DVector<f64>) {
    for ki in 1..window.keyframes.len() {
        let c = 6 * (ki - 1);
        let twist = Twist(Vector6::from_iterator((0..6).map(|k| step[c + k])));
        let kf = &mut window.keyframes[ki];
        kf.pose = RigidTransform::exp(&twist) * kf.pose;
    }
    for (ki, cols) in layout.depth_cols.iter().enumerate() {
        for (pi, &col) in cols.iter().enumerate() {
            if col != usize::MAX {
                let p = &mut window.keyframes[ki].points[pi];
                p.inv_depth = (p.inv_depth + step[col]).max(1e-6);
            }
        }
    }
}

/// Jointly refine keyframe poses and point inverse depths by
/// Levenberg-Marquardt with a pose/depth Schur complement. The first
/// window keyframe stays fixed. After convergence, points with a mean
/// absolute residual above `outlier_factor * huber_photo` are marked
/// outliers and every active point's sigma_x is refreshed from its
/// inverse-depth Hessian mapped through the backprojection Jacobian.
pub fn optimize_window(
    window: &mut SlidingWindow,
    cfg: &BAConfig,
) -> Result<OptimizeReport, WindowError> {
    if window.keyframes.len() < 2 || window.active_point_count() < cfg.min_active_points {
        return Err(WindowError::NotEnoughData);
    }
    let huber = Huber::new(cfg.huber_photo);
    // mean cost per residual so that configurations with more visible
    // patches are not penalized for seeing more of the object
    let total_energy = |w: &SlidingWindow| -> (f64, usize) {
        let (sum, n) = photometric_energy_count(w, &huber);
        let active = w.active_point_count().max(1);
        (
            sum / n.max(1) as f64 + depth_prior_energy(w, cfg.depth_prior_sigma) / active as f64,
            n,
        )
    };
    let (mut energy, mut res_count) = total_energy(window);
    let initial_energy = energy;
    let mut lambda = 1e-4;
    let mut accepted = 0u32;
    let mut low_confidence = false;

    for _ in 0..cfg.iterations {
        let layout = ParamLayout::new(window);
        let np = 6 * layout.n_poses;
        let nd = layout.n_depths();
        let blocks = evaluate_patches(window);

        let mut h_pp = DMatrix::<f64>::zeros(np, np);
        let mut h_pd = DMatrix::<f64>::zeros(np, nd);
        let mut h_dd = DVector::<f64>::zeros(nd);
        let mut g_p = DVector::<f64>::zeros(np);
        let mut g_d = DVector::<f64>::zeros(nd);

        for b in &blocks {
            let hc = layout.pose_col(b.host);
            let tc = layout.pose_col(b.target);
            let dc = layout.depth_col(b.host, b.point) - np;
            for i in 0..b.residuals.len() {
                let r = b.residuals[i];
                let w = huber.weight(r);
                let jh = &b.jac_host[i];
                let jt = &b.jac_target[i];
                let jd = b.jac_depth[i];
                if let Some(c) = hc {
                    for a in 0..6 {
                        g_p[c + a] += w * jh[a] * r;
                        for bb in 0..6 {
                            h_pp[(c + a, c + bb)] += w * jh[a] * jh[bb];
                        }
                        h_pd[(c + a, dc)] += w * jh[a] * jd;
                    }
                }
                if let Some(c) = tc {
                    for a in 0..6 {
                        g_p[c + a] += w * jt[a] * r;
                        for bb in 0..6 {
                            h_pp[(c + a, c + bb)] += w * jt[a] * jt[bb];
                        }
                        h_pd[(c + a, dc)] += w * jt[a] * jd;
                    }
                }
                if let (Some(ch), Some(ct)) = (hc, tc) {
                    for a in 0..6 {
                        for bb in 0..6 {
                            let v = w * jh[a] * jt[bb];
                            h_pp[(ch + a, ct + bb)] += v;
                            h_pp[(ct + bb, ch + a)] += v;
                        }
                    }
                }
                h_dd[dc] += w * jd * jd;
                g_d[dc] += w * jd * r;
            }
        }

        // inverse-depth measurement prior (anchors the scale gauge)
        if cfg.depth_prior_sigma > 0.0 {
            let wp = 1.0 / (cfg.depth_prior_sigma * cfg.depth_prior_sigma);
            for (ki, cols) in layout.depth_cols.iter().enumerate() {
                for (pi, &col) in cols.iter().enumerate() {
                    if col == usize::MAX {
                        continue;
                    }
                    let pt = &window.keyframes[ki].points[pi];
                    h_dd[col - np] += wp;
                    g_d[col - np] += wp * (pt.inv_depth - pt.inv_depth_meas);
                }
            }
        }

        // damped Schur complement on the pose block
        let mut s = h_pp.clone();
        for i in 0..np {
            s[(i, i)] += lambda * h_pp[(i, i)].max(1e-9);
        }
        let hdd_damped: DVector<f64> = h_dd.map(|v| v + lambda * v.max(1e-9));
        let mut rhs = g_p.clone();
        for d in 0..nd {
            let inv = if hdd_damped[d] > 1e-12 {
                1.0 / hdd_damped[d]
            } else {
                0.0
            };
            for i in 0..np {
                let hid = h_pd[(i, d)];
                rhs[i] -= hid * inv * g_d[d];
                for jcol in 0..np {
                    s[(i, jcol)] -= hid * inv * h_pd[(jcol, d)];
                }
            }
        }
        let Some(dp) = s.lu().solve(&(-rhs)) else {
            low_confidence = true;
            break;
        };
        let mut step = DVector::zeros(np + nd);
        step.rows_mut(0, np).copy_from(&dp);
        for d in 0..nd {
            let inv = if hdd_damped[d] > 1e-12 {
                1.0 / hdd_damped[d]
            } else {
                0.0
            };
            let mut acc = g_d[d];
            for i in 0..np {
                acc += h_pd[(i, d)] * dp[i];
            }
            step[np + d] = -inv * acc;
        }
        if step.norm() < 1e-10 {
            break;
        }
        let mut candidate = window.clone();
        apply_step(&mut candidate, &layout, &step);
        let (new_energy, new_count) = total_energy(&candidate);
        // reject steps that improve the mean by shrinking visibility
        if new_energy < energy && new_count >= res_count {
            *window = candidate;
            energy = new_energy;
            res_count = new_count;
            lambda = (lambda * 0.5).max(1e-12);
            accepted += 1;
        } else {
            lambda *= 10.0;
            if lambda > 1e8 {
                break;
            }
        }
    }

    // outlier marking and sigma_x refresh from the post-fit state
    let blocks = evaluate_patches(window);
    let layout = ParamLayout::new(window);
    let nd = layout.n_depths();
    let np = 6 * layout.n_poses;
    let mut res_sum = vec![0.0f64; nd];
    let mut res_cnt = vec![0usize; nd];
    let mut hdd = vec![0.0f64; nd];
    for b in &blocks {
        let dc = layout.depth_col(b.host, b.point) - np;
        for i in 0..b.residuals.len() {
            res_sum[dc] += b.residuals[i].abs();
            res_cnt[dc] += 1;
            let w = huber.weight(b.residuals[i]);
            hdd[dc] += w * b.jac_depth[i] * b.jac_depth[i];
        }
    }
    let mut outliers = 0usize;
    for (ki, cols) in layout.depth_cols.iter().enumerate() {
        for (pi, &col) in cols.iter().enumerate() {
            if col == usize::MAX {
                continue;
            }
            let d = col - np;
            let intrinsics = window.keyframes[ki].intrinsics;
            let p = &mut window.keyframes[ki].points[pi];
            if res_cnt[d] > 0
                && res_sum[d] / res_cnt[d] as f64 > cfg.outlier_factor * cfg.huber_photo
            {
                p.status = PointStatus::Outlier;
                outliers += 1;
                continue;
            }
            if hdd[d] > 1e-12 {
                let sigma_rho = (1.0 / hdd[d]).sqrt();
                // x = dir / rho, |dx/drho| = |dir| / rho^2
                let dir = intrinsics.backproject(&p.pixel, 1.0).expect("unit depth");
                p.sigma_x = dir.norm() / (p.inv_depth * p.inv_depth) * sigma_rho;
            }
        }
    }

    Ok(OptimizeReport {
        initial_energy,
        final_energy: energy,
        accepted_steps: accepted,
        outliers_marked: outliers,
        low_confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::vec::Vec;

    fn textured_image(w: u32, h: u32, seed: u64) -> Image {
        let mut data = Vec::with_capacity((w * h) as usize);
        let s = seed as f32;
        for v in 0..h {
            for u in 0..w {
                let (x, y) = (u as f32, v as f32);
                let val = 128.0
                    + 60.0 * ((0.31 * x + 0.07 * s).sin() * (0.27 * y).cos())
                    + 40.0 * ((0.11 * x - 0.17 * y).sin());
                data.push(val.clamp(0.0, 255.0));
            }
        }
        Image::new(w, h, 1, data)
    }

    fn full_mask(w: u32, h: u32) -> InstanceMask {
        InstanceMask::new(w, h, vec![true; (w * h) as usize])
    }

    fn k_default() -> CameraIntrinsics {
        CameraIntrinsics::new(120.0, 120.0, 64.0, 48.0, 128, 96)
    }

    fn simple_keyframe(frame_id: u32, pose: RigidTransform, seed: u64) -> Keyframe {
        let img = textured_image(128, 96, seed);
        let depth = DepthMap::filled(128, 96, 8.0);
        let mask = full_mask(128, 96);
        let points = select_points(&img, &depth, &mask, 100, 8.0);
        Keyframe {
            frame_id,
            image: img,
            mask,
            intrinsics: k_default(),
            pose,
            points,
            detection_2d: None,
        }
    }

    #[test]
    fn keyframe_promotion_thresholds() {
        assert!(should_create_keyframe(false, 0.0, 0.5));
        assert!(should_create_keyframe(true, 0.6, 0.5));
        assert!(!should_create_keyframe(true, 0.4, 0.5));
    }

    #[test]
    fn select_points_on_uniform_texture_is_empty() {
        let img = Image::filled(64, 64, 1, 77.0);
        let depth = DepthMap::filled(64, 64, 5.0);
        let mask = full_mask(64, 64);
        assert!(select_points(&img, &depth, &mask, 100, 8.0).is_empty());
    }

    #[test]
    fn select_points_budget_and_containment() {
        let img = textured_image(128, 96, 1);
        let depth = DepthMap::filled(128, 96, 5.0);
        let mask = full_mask(128, 96);
        let budget = 300;
        let pts = select_points(&img, &depth, &mask, budget, 8.0);
        assert!(pts.len() <= budget + 35, "{} points", pts.len()); // ceil(sqrt)^2 cells
        assert!(pts.len() >= budget / 2, "{} points", pts.len());
        for p in &pts {
            assert!(mask.contains(p.pixel.x as u32, p.pixel.y as u32));
        }
    }

    #[test]
    fn select_points_checkerboard_prefers_edges() {
        let mut img = Image::filled(64, 64, 1, 0.0);
        for v in 0..64 {
            for u in 0..64 {
                if ((u / 8) + (v / 8)) % 2 == 0 {
                    img.set_pixel(u, v, 0, 200.0);
                }
            }
        }
        let depth = DepthMap::filled(64, 64, 5.0);
        let mask = full_mask(64, 64);
        let pts = select_points(&img, &depth, &mask, 64, 8.0);
        assert!(!pts.is_empty());
        for p in &pts {
            let u = p.pixel.x as u32 % 8;
            let v = p.pixel.y as u32 % 8;
            // gradient maxima hug the 8 px square borders
            assert!(
                u == 0 || u == 7 || v == 0 || v == 7,
                "interior point at {:?}",
                p.pixel
            );
        }
    }

    #[test]
    fn energy_zero_for_identical_keyframes_at_identity() {
        let window = SlidingWindow {
            keyframes: vec![
                simple_keyframe(0, RigidTransform::identity(), 3),
                simple_keyframe(1, RigidTransform::identity(), 3),
            ],
        };
        let e = photometric_energy(&window, &Huber::new(9.0));
        assert!(e < 1e-12, "energy {e}");
    }

    #[test]
    fn lssd_cancels_uniform_gain() {
        let mut window = SlidingWindow {
            keyframes: vec![
                simple_keyframe(0, RigidTransform::identity(), 3),
                simple_keyframe(1, RigidTransform::identity(), 3),
            ],
        };
        let e0 = photometric_energy(&window, &Huber::new(9.0));
        // scale the second image by 1.3
        let img = &window.keyframes[1].image;
        let scaled: Vec<f32> = img.data().iter().map(|&x| x * 1.3).collect();
        window.keyframes[1].image = Image::new(img.width, img.height, 1, scaled);
        let e1 = photometric_energy(&window, &Huber::new(9.0));
        // f32 image storage quantizes the scaled intensities, leaving
        // ~1e-5-level residuals per pixel
        assert!((e1 - e0).abs() < 1e-6, "e0={e0} e1={e1}");
    }

    #[test]
    fn optimize_rejects_thin_windows() {
        let mut w = SlidingWindow {
            keyframes: vec![simple_keyframe(0, RigidTransform::identity(), 3)],
        };
        assert_eq!(
            optimize_window(&mut w, &BAConfig::default()).unwrap_err(),
            WindowError::NotEnoughData
        );
        // 5 active points is below the threshold
        let mut w = SlidingWindow {
            keyframes: vec![
                simple_keyframe(0, RigidTransform::identity(), 3),
                simple_keyframe(1, RigidTransform::identity(), 3),
            ],
        };
        for kf in &mut w.keyframes {
            kf.points.truncate(2);
        }
        assert_eq!(
            optimize_window(&mut w, &BAConfig::default()).unwrap_err(),
            WindowError::NotEnoughData
        );
    }

    #[test]
    fn optimize_at_fixed_point_changes_nothing() {
        let mut w = SlidingWindow {
            keyframes: vec![
                simple_keyframe(0, RigidTransform::identity(), 3),
                simple_keyframe(1, RigidTransform::identity(), 3),
            ],
        };
        let before: Vec<RigidTransform> = w.keyframes.iter().map(|k| k.pose).collect();
        let r = optimize_window(&mut w, &BAConfig::default()).unwrap();
        assert!(r.final_energy <= r.initial_energy + 1e-12);
        for (kf, b) in w.keyframes.iter().zip(&before) {
            assert!((kf.pose.translation - b.translation).norm() < 1e-8);
            assert!((kf.pose.rotation - b.rotation).norm() < 1e-8);
        }
    }

    #[test]
    fn gauge_is_pinned_to_first_keyframe() {
        let mut w = SlidingWindow {
            keyframes: vec![
                simple_keyframe(0, RigidTransform::identity(), 3),
                simple_keyframe(
                    1,
                    RigidTransform::from_translation(Vector3::new(0.02, 0.0, 0.0)),
                    3,
                ),
            ],
        };
        let _ = optimize_window(&mut w, &BAConfig::default()).unwrap();
        assert_relative_eq!(
            w.keyframes[0].pose.translation,
            Vector3::zeros(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut w = SlidingWindow {
            keyframes: vec![
                simple_keyframe(0, RigidTransform::identity(), 3),
                simple_keyframe(
                    1,
                    RigidTransform::exp(&Twist(Vector6::new(
                        0.01, -0.02, 0.015, 0.002, -0.001, 0.003,
                    ))),
                    7,
                ),
            ],
        };
        for kf in &mut w.keyframes {
            kf.points.truncate(12);
        }
        let layout = ParamLayout::new(&w);
        let (r0, j) = residuals_and_jacobian(&w);
        assert!(!r0.is_empty());
        assert_eq!(j.ncols(), layout.total);
        let h = 1e-6;
        for col in 0..layout.total {
            let mut step = DVector::zeros(layout.total);
            step[col] = h;
            let mut wp = w.clone();
            apply_step(&mut wp, &layout, &step);
            let (rp, _) = residuals_and_jacobian(&wp);
            step[col] = -h;
            let mut wm = w.clone();
            apply_step(&mut wm, &layout, &step);
            let (rm, _) = residuals_and_jacobian(&wm);
            // the residual set must not change under the tiny step for
            // the comparison to be meaningful
            if rp.len() != r0.len() || rm.len() != r0.len() {
                continue;
            }
            for row in 0..r0.len() {
                let fd = (rp[row] - rm[row]) / (2.0 * h);
                let an = j[(row, col)];
                let scale = an.abs().max(fd.abs()).max(1.0);
                assert!(
                    (fd - an).abs() / scale < 1e-3,
                    "col {col} row {row}: fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn optimizer_recovers_perturbed_pose() {
        // same scene in both keyframes, so the true relative pose is
        // identity; start the second keyframe slightly off
        let perturb = Twist(Vector6::new(0.03, -0.02, 0.04, 0.0, 0.0, 0.0));
        let mut w = SlidingWindow {
            keyframes: vec![
                simple_keyframe(0, RigidTransform::identity(), 3),
                simple_keyframe(1, RigidTransform::exp(&perturb), 3),
            ],
        };
        let report = optimize_window(&mut w, &BAConfig::default()).unwrap();
        assert!(report.final_energy < report.initial_energy);
        assert!(!report.low_confidence);
        let t = w.keyframes[1].pose.translation.norm();
        let before = perturb.0.norm();
        assert!(t < 0.3 * before, "residual offset {t} vs initial {before}");
    }

    #[test]
    fn slide_window_drops_oldest() {
        let mut w = SlidingWindow {
            keyframes: (0..7)
                .map(|i| simple_keyframe(i, RigidTransform::identity(), 3))
                .collect(),
        };
        w.slide(6);
        assert_eq!(w.keyframes.len(), 6);
        assert_eq!(w.keyframes[0].frame_id, 1);
        w.slide(6);
        assert_eq!(w.keyframes.len(), 6);
    }
}
