//! Amodal 3D box estimation for tracked objects: bird's-eye-view box
//! regression from accumulated points, joint 4-DoF refinement against
//! point, 2D-box and temporal-prior terms, and covariance-weighted
//! fusion of box proposals over time.

use alloc::vec::Vec;
use core::fmt;

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3, Vector4};

use crate::geom2d::{self, Point2};
use crate::geometry::{wrap_angle, CameraIntrinsics, Huber, Pose4DoF, RigidTransform};
use crate::metrics::Box2D;

/// Car-class average height (meters), used when no dimension prior is
/// available.
pub const DEFAULT_HEIGHT: f64 = 1.53;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectError {
    /// Too few occupied cells to regress a footprint; retry at the next
    /// keyframe.
    InsufficientGeometry,
}

impl fmt::Display for DetectError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "not enough 3D points to estimate a box footprint")
    }
}

#[cfg(test)]
impl std::error::Error for DetectError {}

/// An oriented 3D box estimate with per-axis location variance and yaw
/// variance. `dims` is (width, height, length); the footprint spans
/// width along the object x axis and length along z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection3D {
    pub center: Vector3<f64>,
    pub yaw: f64,
    pub dims: Vector3<f64>,
    /// Diagonal of the 3x3 location covariance (m^2).
    pub location_var: Vector3<f64>,
    pub yaw_var: f64,
    pub frame_id: u32,
    pub track_id: u32,
}

impl Detection3D {
    pub fn pose(&self) -> Pose4DoF {
        Pose4DoF::new(self.center, self.yaw)
    }
}

#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    pub cell_size: f64,
    pub min_count: u32,
    origin: Vector2<f64>,
    cols: u32,
    rows: u32,
    counts: Vec<u32>,
}

impl OccupancyGrid {
    /// Bin ground-plane (x, z) projections of the points.
    pub fn build(points: &[Vector3<f64>], cell_size: f64, min_count: u32) -> Self {
        assert!(cell_size > 0.0);
        let (mut min_x, mut min_z) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_z) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            min_x = min_x.min(p.x);
            max_x = max_x.max(p.x);
            min_z = min_z.min(p.z);
            max_z = max_z.max(p.z);
        }
        if points.is_empty() {
            return OccupancyGrid {
                cell_size,
                min_count,
                origin: Vector2::zeros(),
                cols: 0,
                rows: 0,
                counts: Vec::new(),
            };
        }
        let cols = ((max_x - min_x) / cell_size) as u32 + 1;
        let rows = ((max_z - min_z) / cell_size) as u32 + 1;
        let mut counts = alloc::vec![0u32; (cols * rows) as usize];
        for p in points {
            let c = (((p.x - min_x) / cell_size) as u32).min(cols - 1);
            let r = (((p.z - min_z) / cell_size) as u32).min(rows - 1);
            counts[(r * cols + c) as usize] += 1;
        }
        OccupancyGrid {
            cell_size,
            min_count,
            origin: Vector2::new(min_x, min_z),
            cols,
            rows,
            counts,
        }
    }

    /// Ground-plane (x, z) centers of cells meeting the count threshold.
    pub fn occupied_centers(&self) -> Vec<Point2> {
        let mut out = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.counts[(r * self.cols + c) as usize] >= self.min_count {
                    out.push(Point2::new(
                        self.origin.x + (c as f64 + 0.5) * self.cell_size,
                        self.origin.y + (r as f64 + 0.5) * self.cell_size,
                    ));
                }
            }
        }
        out
    }
}

/// A candidate rotated rectangle on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevRect {
    pub center: Point2,
    /// Rotation of the rectangle's local z (length) axis.
    pub yaw: f64,
    /// Extent along local x (width) and local z (length).
    pub extent: Vector2<f64>,
    /// Sum of squared distances from occupied cell centers to the
    /// rectangle boundary.
    pub objective: f64,
}

fn rotate_bev(p: &Point2, yaw: f64) -> Point2 {
    // matches the footprint convention: x' = c*x + s*z, z' = -s*x + c*z
    let (s, c) = (yaw.sin(), yaw.cos());
    Point2::new(c * p.x + s * p.y, -s * p.x + c * p.y)
}

fn rect_boundary_distance_sq(local: &Point2, half: &Vector2<f64>) -> f64 {
    // distance from a point to the boundary of an axis-aligned
    // rectangle centered at the origin
    let dx = local.x.abs() - half.x;
    let dz = local.y.abs() - half.y;
    if dx <= 0.0 && dz <= 0.0 {
        let d = dx.max(dz); // negative: depth inside, nearest edge
        d * d
    } else {
        let ox = dx.max(0.0);
        let oz = dz.max(0.0);
        ox * ox + oz * oz
    }
}

/// Every minimal enclosing rectangle aligned with a hull edge, each
/// scored by the sum of squared cell-center distances to its boundary.
pub fn bev_candidates(cells: &[Point2]) -> Vec<BevRect> {
    let hull = geom2d::convex_hull(cells);
    if hull.len() < 2 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let e = b - a;
        if e.norm() < 1e-12 {
            continue;
        }
        // align the local z axis with the edge
        let yaw = e.x.atan2(e.y);
        let (mut min_x, mut min_z) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_z) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in cells {
            let q = rotate_bev(p, -yaw);
            min_x = min_x.min(q.x);
            max_x = max_x.max(q.x);
            min_z = min_z.min(q.y);
            max_z = max_z.max(q.y);
        }
        let half = Vector2::new((max_x - min_x) / 2.0, (max_z - min_z) / 2.0);
        let local_center = Point2::new((min_x + max_x) / 2.0, (min_z + max_z) / 2.0);
        let center = rotate_bev(&local_center, yaw);
        let objective: f64 = cells
            .iter()
            .map(|p| {
                let q = rotate_bev(p, -yaw) - local_center;
                rect_boundary_distance_sq(&Point2::new(q.x, q.y), &half)
            })
            .sum();
        out.push(BevRect {
            center,
            yaw: wrap_angle(yaw),
            extent: half * 2.0,
            objective,
        });
    }
    out
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Initial box regression from accumulated object points (reference
/// frame). The footprint comes from the best hull-edge-aligned
/// rectangle over occupied grid cells; height uses the class average
/// and the vertical center the median point height. A `dims_prior`
/// (width, height, length) replaces the estimated dimensions when
/// supplied.
pub fn regress_bev_box(
    points: &[Vector3<f64>],
    grid_cell: f64,
    min_count: u32,
    dims_prior: Option<Vector3<f64>>,
) -> Result<Detection3D, DetectError> {
    if points.len() < 8 {
        return Err(DetectError::InsufficientGeometry);
    }
    let grid = OccupancyGrid::build(points, grid_cell, min_count);
    let cells = grid.occupied_centers();
    if cells.len() < 3 {
        return Err(DetectError::InsufficientGeometry);
    }
    let candidates = bev_candidates(&cells);
    let Some(best) = candidates
        .iter()
        .min_by(|a, b| a.objective.partial_cmp(&b.objective).unwrap())
    else {
        return Err(DetectError::InsufficientGeometry);
    };
    // re-measure the extent from the raw points in the winning
    // orientation; the grid-center rectangle is padded by quantization
    let mut min_q = Point2::new(f64::INFINITY, f64::INFINITY);
    let mut max_q = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        let q = rotate_bev(&Point2::new(p.x, p.z), -best.yaw);
        min_q = min_q.inf(&q);
        max_q = max_q.sup(&q);
    }
    let center_bev = rotate_bev(&((min_q + max_q) / 2.0), best.yaw);
    let best = BevRect {
        center: center_bev,
        extent: max_q - min_q,
        ..*best
    };
    // length along the local z axis by convention
    let (mut yaw, mut extent) = (best.yaw, best.extent);
    if extent.x > extent.y {
        yaw = wrap_angle(yaw + core::f64::consts::FRAC_PI_2);
        extent = Vector2::new(extent.y, extent.x);
    }
    let mut heights: Vec<f64> = points.iter().map(|p| p.y).collect();
    let center_y = median(&mut heights);
    let dims = dims_prior.unwrap_or_else(|| Vector3::new(extent.x, DEFAULT_HEIGHT, extent.y));
    Ok(Detection3D {
        center: Vector3::new(best.center.x, center_y, best.center.y),
        yaw,
        dims,
        location_var: Vector3::repeat(1.0),
        yaw_var: 1.0,
        frame_id: 0,
        track_id: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementConfig {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub lambda: f64,
    /// Huber threshold (meters) on the point-to-box excess.
    pub huber_3d: f64,
    pub iterations: u32,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            w1: 5.0,
            w2: 3.0,
            w3: 1.0,
            lambda: 1.5,
            huber_3d: 0.5,
            iterations: 15,
        }
    }
}

/// Cap on the point-term weight: full `w2` while the point energy stays
/// below `lambda^2 * n`, then scaled down so the weighted energy never
/// exceeds `w2 * lambda^2 * n`.
pub fn dynamic_weight(e33: f64, n: usize, lambda: f64, w2: f64) -> f64 {
    let cap = lambda * lambda * n as f64;
    if e33 <= cap {
        w2
    } else {
        w2 * cap / e33
    }
}

/// One accumulated object point for the point-to-box term, expressed in
/// the reference frame (keyframe pose already applied).
#[derive(Debug, Clone, Copy)]
pub struct BoxPoint {
    pub position: Vector3<f64>,
    pub sigma_x: f64,
}

/// One amodal 2D detection attached to a keyframe.
#[derive(Debug, Clone, Copy)]
pub struct BoxObservation2D {
    /// Keyframe pose: keyframe-time object points -> reference frame.
    pub keyframe_pose: RigidTransform,
    pub box2d: Box2D,
    pub intrinsics: CameraIntrinsics,
}

fn box_to_phi(b: &Box2D) -> Vector4<f64> {
    Vector4::new(
        b.left + b.width / 2.0,
        b.top + b.height / 2.0,
        b.width,
        b.height,
    )
}

/// Point-to-box energy: per point, the componentwise excess of the
/// object-frame position over the half-dimensions, whitened by sigma_x
/// and robustified with the branch decided by the metric excess.
pub fn residual_3d3d(
    pose: &Pose4DoF,
    dims: &Vector3<f64>,
    points: &[BoxPoint],
    huber_3d: f64,
) -> f64 {
    let huber = Huber::new(huber_3d);
    let t = pose.to_rigid().inverse();
    let half = dims / 2.0;
    points
        .iter()
        .map(|pt| {
            let p = t.transform_point(&pt.position);
            let ex = Vector3::new(
                (p.x.abs() - half.x).max(0.0),
                (p.y.abs() - half.y).max(0.0),
                (p.z.abs() - half.z).max(0.0),
            );
            huber.cost(ex.norm()) / (pt.sigma_x * pt.sigma_x)
        })
        .sum()
}

/// Projected-box residual for one keyframe: the (center_u, center_v,
/// width, height) of the enclosing axis-aligned box of the 8 projected
/// corners minus the detection. Returns None when any corner sits at or
/// behind the near plane (z <= 0.1 m), skipping that keyframe.
pub fn project_box_residual(
    pose: &Pose4DoF,
    dims: &Vector3<f64>,
    obs: &BoxObservation2D,
) -> Option<Vector4<f64>> {
    let t = obs.keyframe_pose.inverse() * pose.to_rigid();
    let half = dims / 2.0;
    let mut min_uv = Vector2::new(f64::INFINITY, f64::INFINITY);
    let mut max_uv = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                let c = Vector3::new(sx * half.x, sy * half.y, sz * half.z);
                let y = t.transform_point(&c);
                if y.z <= 0.1 {
                    return None;
                }
                let uv = obs.intrinsics.project(&y).ok()?;
                min_uv = min_uv.inf(&uv);
                max_uv = max_uv.sup(&uv);
            }
        }
    }
    let phi = Vector4::new(
        (min_uv.x + max_uv.x) / 2.0,
        (min_uv.y + max_uv.y) / 2.0,
        max_uv.x - min_uv.x,
        max_uv.y - min_uv.y,
    );
    Some(phi - box_to_phi(&obs.box2d))
}

/// Total projected-box energy over the keyframes (plain squared norm)
/// plus the number of keyframes skipped for corners behind the camera.
pub fn residual_3d2d(
    pose: &Pose4DoF,
    dims: &Vector3<f64>,
    observations: &[BoxObservation2D],
) -> (f64, usize) {
    let mut cost = 0.0;
    let mut skipped = 0;
    for obs in observations {
        match project_box_residual(pose, dims, obs) {
            Some(r) => cost += r.norm_squared(),
            None => skipped += 1,
        }
    }
    (cost, skipped)
}

/// Pose-change regularizer: norm of the relative twist between the
/// current estimate and the previous one.
pub fn residual_reg(pose: &Pose4DoF, previous: &Pose4DoF) -> f64 {
    let rel = pose.to_rigid().inverse() * previous.to_rigid();
    match rel.log() {
        Ok(twist) => twist.0.norm(),
        Err(_) => core::f64::consts::PI, // antipodal rotation: saturate
    }
}

fn total_cost(
    pose: &Pose4DoF,
    dims: &Vector3<f64>,
    points: &[BoxPoint],
    observations: &[BoxObservation2D],
    prior: Option<&Pose4DoF>,
    cfg: &RefinementConfig,
) -> (f64, usize) {
    let e33 = residual_3d3d(pose, dims, points, cfg.huber_3d);
    let n = points.len().max(1);
    let w = dynamic_weight(e33, n, cfg.lambda, cfg.w2);
    let (e32, skipped) = residual_3d2d(pose, dims, observations);
    let er = prior.map_or(0.0, |p| residual_reg(pose, p));
    (cfg.w1 * e32 + w * e33 + cfg.w3 * er, skipped)
}

/// Analytic gradient of the 3D-2D energy w.r.t. (x, y, z, yaw); valid
/// away from corner-ordering ties of the enclosing box.
pub fn grad_3d2d(
    pose: &Pose4DoF,
    dims: &Vector3<f64>,
    observations: &[BoxObservation2D],
) -> Vector4<f64> {
    let mut g = Vector4::zeros();
    let half = dims / 2.0;
    let (s, c) = (pose.yaw.sin(), pose.yaw.cos());
    let dr = Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s);
    for obs in observations {
        let t_inv = obs.keyframe_pose.inverse();
        let t = t_inv * pose.to_rigid();
        // projected corners with per-corner parameter Jacobians
        let mut us: Vec<(f64, Vector4<f64>)> = Vec::with_capacity(8);
        let mut vs: Vec<(f64, Vector4<f64>)> = Vec::with_capacity(8);
        let mut behind = false;
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    let ck = Vector3::new(sx * half.x, sy * half.y, sz * half.z);
                    let y = t.transform_point(&ck);
                    if y.z <= 0.1 {
                        behind = true;
                        break;
                    }
                    let uv = obs.intrinsics.project(&y).unwrap();
                    let jp = obs.intrinsics.projection_jacobian(&y);
                    // dy/d(x,y,z) = R_i^T, dy/dyaw = R_i^T dR ck
                    let jt = t_inv.rotation;
                    let jyaw = t_inv.rotation * (dr * ck);
                    let duv_dt = jp * jt;
                    let duv_dyaw = jp * jyaw;
                    let ju =
                        Vector4::new(duv_dt[(0, 0)], duv_dt[(0, 1)], duv_dt[(0, 2)], duv_dyaw.x);
                    let jv =
                        Vector4::new(duv_dt[(1, 0)], duv_dt[(1, 1)], duv_dt[(1, 2)], duv_dyaw.y);
                    us.push((uv.x, ju));
                    vs.push((uv.y, jv));
                }
            }
        }
        if behind {
            continue;
        }
        let pick = |list: &[(f64, Vector4<f64>)], max: bool| -> (f64, Vector4<f64>) {
            let mut best = list[0];
            for e in &list[1..] {
                if (max && e.0 > best.0) || (!max && e.0 < best.0) {
                    best = *e;
                }
            }
            best
        };
        let (umin, jumin) = pick(&us, false);
        let (umax, jumax) = pick(&us, true);
        let (vmin, jvmin) = pick(&vs, false);
        let (vmax, jvmax) = pick(&vs, true);
        let phi = Vector4::new(
            (umin + umax) / 2.0,
            (vmin + vmax) / 2.0,
            umax - umin,
            vmax - vmin,
        );
        let r = phi - box_to_phi(&obs.box2d);
        let jphi = [
            (jumin + jumax) / 2.0,
            (jvmin + jvmax) / 2.0,
            jumax - jumin,
            jvmax - jvmin,
        ];
        for i in 0..4 {
            g += 2.0 * r[i] * jphi[i];
        }
    }
    g
}

/// Analytic gradient of the point-to-box energy w.r.t. (x, y, z, yaw);
/// valid away from box-face crossings and the robust-branch boundary.
pub fn grad_3d3d(
    pose: &Pose4DoF,
    dims: &Vector3<f64>,
    points: &[BoxPoint],
    huber_3d: f64,
) -> Vector4<f64> {
    let huber = Huber::new(huber_3d);
    let half = dims / 2.0;
    let (s, c) = (pose.yaw.sin(), pose.yaw.cos());
    let rt = pose.to_rigid().rotation.transpose();
    // d(R^T)/dyaw
    let drt = Matrix3::new(-s, 0.0, -c, 0.0, 0.0, 0.0, c, 0.0, -s);
    let mut g = Vector4::zeros();
    for pt in points {
        let q = pt.position - pose.translation;
        let p = rt * q;
        let ex = Vector3::new(
            (p.x.abs() - half.x).max(0.0),
            (p.y.abs() - half.y).max(0.0),
            (p.z.abs() - half.z).max(0.0),
        );
        let m = ex.norm();
        if m < 1e-12 {
            continue;
        }
        // d huber(m) / d m, whitened
        let dcost_dm = if m <= huber.delta { m } else { huber.delta } / (pt.sigma_x * pt.sigma_x);
        // dm/dp per axis: active components only
        let mut dm_dp = Vector3::zeros();
        for a in 0..3 {
            if ex[a] > 0.0 {
                dm_dp[a] = ex[a] / m * p[a].signum();
            }
        }
        // dp/dt = -R^T, dp/dyaw = dR^T/dyaw (x - t)
        let dp_dyaw = drt * q;
        let gt = -rt.transpose() * dm_dp; // (dp/dt)^T dm/dp = -R dm/dp
        g.x += dcost_dm * gt.x;
        g.y += dcost_dm * gt.y;
        g.z += dcost_dm * gt.z;
        g.w += dcost_dm * dm_dp.dot(&dp_dyaw);
    }
    g
}

fn numeric_gradient<F: Fn(&Pose4DoF) -> f64>(pose: &Pose4DoF, f: F) -> Vector4<f64> {
    let h = 1e-6;
    let mut g = Vector4::zeros();
    for i in 0..4 {
        let mut lo = *pose;
        let mut hi = *pose;
        match i {
            0 => {
                lo.translation.x -= h;
                hi.translation.x += h;
            }
            1 => {
                lo.translation.y -= h;
                hi.translation.y += h;
            }
            2 => {
                lo.translation.z -= h;
                hi.translation.z += h;
            }
            _ => {
                lo.yaw -= h;
                hi.yaw += h;
            }
        }
        g[i] = (f(&hi) - f(&lo)) / (2.0 * h);
    }
    g
}

/// 4-DoF pose refinement of a box proposal against the accumulated
/// points, the per-keyframe 2D detections and the previous estimate.
/// Dimensions stay fixed. The returned covariance comes from the
/// diagonal of the inverse Gauss-Newton Hessian at convergence; if that
/// Hessian is singular the initial estimate is returned with its
/// uncertainties inflated tenfold.
pub fn refine_box(
    initial: &Detection3D,
    points: &[BoxPoint],
    observations: &[BoxObservation2D],
    prior: Option<&Pose4DoF>,
    cfg: &RefinementConfig,
) -> Detection3D {
    let dims = initial.dims;
    let mut pose = initial.pose();
    let (mut cost, mut cur_skipped) = total_cost(&pose, &dims, points, observations, prior, cfg);
    let mut lm = 1e-4;

    let hessian_at = |pose: &Pose4DoF| -> Matrix4<f64> {
        // Gauss-Newton approximation from the total-cost gradient via
        // symmetric differencing of the gradient (the weighted sum of
        // heterogeneous robust terms has no convenient closed J^T J)
        let h = 1e-5;
        let grad = |p: &Pose4DoF| -> Vector4<f64> {
            let e33 = residual_3d3d(p, &dims, points, cfg.huber_3d);
            let w = dynamic_weight(e33, points.len().max(1), cfg.lambda, cfg.w2);
            let mut g = cfg.w1 * grad_3d2d(p, &dims, observations)
                + w * grad_3d3d(p, &dims, points, cfg.huber_3d);
            if let Some(pr) = prior {
                g += cfg.w3 * numeric_gradient(p, |q| residual_reg(q, pr));
            }
            g
        };
        let mut hess = Matrix4::zeros();
        for i in 0..4 {
            let mut lo = *pose;
            let mut hi = *pose;
            match i {
                0 => {
                    lo.translation.x -= h;
                    hi.translation.x += h;
                }
                1 => {
                    lo.translation.y -= h;
                    hi.translation.y += h;
                }
                2 => {
                    lo.translation.z -= h;
                    hi.translation.z += h;
                }
                _ => {
                    lo.yaw -= h;
                    hi.yaw += h;
                }
            }
            let d = (grad(&hi) - grad(&lo)) / (2.0 * h);
            for j in 0..4 {
                hess[(i, j)] = d[j];
            }
        }
        // symmetrize
        0.5 * (hess + hess.transpose())
    };

    for _ in 0..cfg.iterations {
        let e33 = residual_3d3d(&pose, &dims, points, cfg.huber_3d);
        let w = dynamic_weight(e33, points.len().max(1), cfg.lambda, cfg.w2);
        let mut g = cfg.w1 * grad_3d2d(&pose, &dims, observations)
            + w * grad_3d3d(&pose, &dims, points, cfg.huber_3d);
        if let Some(pr) = prior {
            g += cfg.w3 * numeric_gradient(&pose, |q| residual_reg(q, pr));
        }
        if g.norm() < 1e-10 {
            break;
        }
        let h = hessian_at(&pose);
        let mut accepted = false;
        for _ in 0..8 {
            let mut damped = h;
            for i in 0..4 {
                damped[(i, i)] += lm * damped[(i, i)].abs().max(1e-6);
            }
            let Some(step) = damped.lu().solve(&(-g)) else {
                lm *= 10.0;
                continue;
            };
            let mut cand = pose;
            cand.translation += Vector3::new(step.x, step.y, step.z);
            cand.yaw = wrap_angle(cand.yaw + step.w);
            let (cand_cost, cand_skipped) =
                total_cost(&cand, &dims, points, observations, prior, cfg);
            // a step may only look cheaper because it pushed corners
            // behind the camera and dropped whole keyframe terms
            if cand_cost < cost && cand_skipped <= cur_skipped {
                pose = cand;
                cost = cand_cost;
                cur_skipped = cand_skipped;
                lm = (lm * 0.5).max(1e-12);
                accepted = true;
                break;
            }
            lm *= 10.0;
        }
        if !accepted {
            break;
        }
    }

    let hess = hessian_at(&pose);
    match hess.try_inverse() {
        Some(inv) if (0..4).all(|i| inv[(i, i)].is_finite() && inv[(i, i)] > 0.0) => Detection3D {
            center: pose.translation,
            yaw: pose.yaw,
            dims,
            location_var: Vector3::new(inv[(0, 0)], inv[(1, 1)], inv[(2, 2)]),
            yaw_var: inv[(3, 3)],
            frame_id: initial.frame_id,
            track_id: initial.track_id,
        },
        _ => Detection3D {
            location_var: initial.location_var * 10.0,
            yaw_var: initial.yaw_var * 10.0,
            ..*initial
        },
    }
}

/// Covariance-weighted fusion of the running box estimate with a new
/// measurement. Location fuses per-axis; yaw fuses on the shortest arc.
pub fn fuse_proposals(prior: &Detection3D, measurement: &Detection3D) -> Detection3D {
    let mut center = Vector3::zeros();
    let mut var = Vector3::zeros();
    for i in 0..3 {
        let (sp, sm) = (prior.location_var[i], measurement.location_var[i]);
        center[i] = (sp * measurement.center[i] + sm * prior.center[i]) / (sp + sm);
        var[i] = sp * sm / (sp + sm);
    }
    let (sp, sm) = (prior.yaw_var, measurement.yaw_var);
    let mut m_yaw = measurement.yaw;
    while m_yaw - prior.yaw > core::f64::consts::PI {
        m_yaw -= 2.0 * core::f64::consts::PI;
    }
    while m_yaw - prior.yaw < -core::f64::consts::PI {
        m_yaw += 2.0 * core::f64::consts::PI;
    }
    let yaw = wrap_angle((sp * m_yaw + sm * prior.yaw) / (sp + sm));
    Detection3D {
        center,
        yaw,
        dims: measurement.dims,
        location_var: var,
        yaw_var: sp * sm / (sp + sm),
        frame_id: measurement.frame_id,
        track_id: measurement.track_id,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use core::f64::consts::{FRAC_PI_2, PI};

    fn rect_perimeter_points(w: f64, l: f64, yaw: f64, n: usize) -> Vec<Vector3<f64>> {
        // evenly spaced samples along the rectangle perimeter
        let per = 2.0 * (w + l);
        let (s, c) = (yaw.sin(), yaw.cos());
        (0..n)
            .map(|i| {
                let mut t = i as f64 / n as f64 * per;
                let (mut x, mut z);
                if t < l {
                    x = -w / 2.0;
                    z = -l / 2.0 + t;
                } else if t - l < w {
                    t -= l;
                    x = -w / 2.0 + t;
                    z = l / 2.0;
                } else if t - l - w < l {
                    t -= l + w;
                    x = w / 2.0;
                    z = l / 2.0 - t;
                } else {
                    t -= 2.0 * l + w;
                    x = w / 2.0 - t;
                    z = -l / 2.0;
                }
                let (rx, rz) = (c * x + s * z, -s * x + c * z);
                x = rx;
                z = rz;
                Vector3::new(x, 0.8, z)
            })
            .collect()
    }

    #[test]
    fn regress_recovers_rotated_rectangle() {
        let yaw_true = 30.0_f64.to_radians();
        let pts = rect_perimeter_points(1.8, 4.2, yaw_true, 200);
        let det = regress_bev_box(&pts, 0.15, 1, None).unwrap();
        // 4 valid orientations from rectangle symmetry
        let mut dy = (det.yaw - yaw_true).abs() % FRAC_PI_2;
        dy = dy.min(FRAC_PI_2 - dy);
        assert!(dy < 1.0_f64.to_radians(), "yaw {}", det.yaw.to_degrees());
        assert!((det.dims.x - 1.8).abs() < 0.15, "width {}", det.dims.x);
        assert!((det.dims.z - 4.2).abs() < 0.15, "length {}", det.dims.z);
        assert_relative_eq!(det.center.y, 0.8, epsilon = 1e-12);
        assert_eq!(det.dims.y, DEFAULT_HEIGHT);
    }

    #[test]
    fn regress_axis_aligned_square() {
        let pts = rect_perimeter_points(2.0, 2.0, 0.0, 64);
        let det = regress_bev_box(&pts, 0.15, 1, None).unwrap();
        let r = det.yaw % FRAC_PI_2;
        let r = r.abs().min(FRAC_PI_2 - r.abs());
        assert!(r < 1e-6, "yaw {}", det.yaw);
    }

    #[test]
    fn regress_needs_eight_points() {
        let pts = rect_perimeter_points(2.0, 2.0, 0.0, 5);
        assert_eq!(
            regress_bev_box(&pts, 0.15, 1, None).unwrap_err(),
            DetectError::InsufficientGeometry
        );
    }

    #[test]
    fn winner_beats_every_candidate() {
        let pts = rect_perimeter_points(1.5, 3.0, 0.7, 150);
        let grid = OccupancyGrid::build(&pts, 0.15, 1);
        let cells = grid.occupied_centers();
        let cands = bev_candidates(&cells);
        let best = cands
            .iter()
            .map(|c| c.objective)
            .fold(f64::INFINITY, f64::min);
        for c in &cands {
            assert!(best <= c.objective + 1e-12);
        }
    }

    #[test]
    fn dynamic_weight_branches() {
        let (lambda, w2) = (1.5, 3.0);
        let n = 10;
        let cap = lambda * lambda * n as f64;
        assert_relative_eq!(dynamic_weight(cap, n, lambda, w2), 3.0, epsilon = 1e-12);
        assert_relative_eq!(
            dynamic_weight(2.0 * cap, n, lambda, w2),
            1.5,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            dynamic_weight(0.5 * cap, n, lambda, w2),
            3.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(dynamic_weight(0.0, n, lambda, w2), 3.0, epsilon = 1e-12);
        // cap property: weighted energy never exceeds w2 * lambda^2 * n
        for e in [0.1, cap, 3.0 * cap, 100.0 * cap] {
            assert!(dynamic_weight(e, n, lambda, w2) * e <= w2 * cap + 1e-9);
        }
    }

    #[test]
    fn point_term_hand_values() {
        let pose = Pose4DoF::new(Vector3::zeros(), 0.0);
        let dims = Vector3::new(2.0, 2.0, 2.0);
        // strictly inside
        let inside = [BoxPoint {
            position: Vector3::zeros(),
            sigma_x: 1.0,
        }];
        assert_eq!(residual_3d3d(&pose, &dims, &inside, 0.5), 0.0);
        // 0.3 m outside the +x face, sigma 1
        let out = [BoxPoint {
            position: Vector3::new(dims.x / 2.0 + 0.3, 0.0, 0.0),
            sigma_x: 1.0,
        }];
        assert_relative_eq!(
            residual_3d3d(&pose, &dims, &out, 0.5),
            0.045,
            epsilon = 1e-12
        );
        // same point, sigma 0.5 -> whitened excess 0.6
        let out2 = [BoxPoint {
            position: Vector3::new(dims.x / 2.0 + 0.3, 0.0, 0.0),
            sigma_x: 0.5,
        }];
        assert_relative_eq!(
            residual_3d3d(&pose, &dims, &out2, 0.5),
            0.18,
            epsilon = 1e-12
        );
    }

    fn obs_fixture() -> BoxObservation2D {
        BoxObservation2D {
            keyframe_pose: RigidTransform::identity(),
            box2d: Box2D::from_corners(
                16.0 + 2.0 / 3.0,
                16.0 + 2.0 / 3.0,
                83.0 + 1.0 / 3.0,
                83.0 + 1.0 / 3.0,
            ),
            intrinsics: CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100),
        }
    }

    #[test]
    fn projected_box_fixture() {
        let pose = Pose4DoF::new(Vector3::new(0.0, 0.0, 4.0), 0.0);
        let dims = Vector3::new(2.0, 2.0, 2.0);
        let obs = obs_fixture();
        let r = project_box_residual(&pose, &dims, &obs).unwrap();
        assert!(r.norm() < 1e-9, "residual {r:?}");
        // shifting the detection center by +10 px in u
        let mut shifted = obs;
        shifted.box2d.left += 10.0;
        let r = project_box_residual(&pose, &dims, &shifted).unwrap();
        assert_relative_eq!(r.x.abs(), 10.0, epsilon = 1e-9);
        assert!(r.y.abs() < 1e-9 && r.z.abs() < 1e-9 && r.w.abs() < 1e-9);
    }

    #[test]
    fn behind_camera_skips_keyframe() {
        let pose = Pose4DoF::new(Vector3::new(0.0, 0.0, -4.0), 0.0);
        let dims = Vector3::new(2.0, 2.0, 2.0);
        let (cost, skipped) = residual_3d2d(&pose, &dims, &[obs_fixture()]);
        assert_eq!(cost, 0.0);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn reg_term_hand_values() {
        let a = Pose4DoF::new(Vector3::zeros(), 0.0);
        assert_eq!(residual_reg(&a, &a), 0.0);
        let b = Pose4DoF::new(Vector3::zeros(), 0.1);
        assert_relative_eq!(residual_reg(&a, &b), 0.1, epsilon = 1e-12);
        let c = Pose4DoF::new(Vector3::new(0.3, 0.0, 0.4), 0.0);
        assert_relative_eq!(residual_reg(&a, &c), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let pose = Pose4DoF::new(Vector3::new(0.2, -0.1, 5.0), 0.3);
        let dims = Vector3::new(1.8, 1.5, 4.2);
        let pts: Vec<BoxPoint> = rect_perimeter_points(2.4, 5.0, 0.25, 40)
            .into_iter()
            .map(|p| BoxPoint {
                position: p + Vector3::new(0.2, 0.0, 5.0),
                sigma_x: 0.8,
            })
            .collect();
        let g = grad_3d3d(&pose, &dims, &pts, 0.5);
        let fd = numeric_gradient(&pose, |p| residual_3d3d(p, &dims, &pts, 0.5));
        for i in 0..4 {
            let scale = g[i].abs().max(fd[i].abs()).max(1.0);
            assert!(
                (g[i] - fd[i]).abs() / scale < 1e-3,
                "3d3d comp {i}: {} vs {}",
                g[i],
                fd[i]
            );
        }

        let obs = BoxObservation2D {
            keyframe_pose: RigidTransform::from_translation(Vector3::new(0.1, 0.0, -0.5)),
            box2d: Box2D::from_corners(10.0, 12.0, 90.0, 80.0),
            intrinsics: CameraIntrinsics::new(110.0, 105.0, 50.0, 48.0, 100, 100),
        };
        let g = grad_3d2d(&pose, &dims, &[obs]);
        let fd = numeric_gradient(&pose, |p| residual_3d2d(p, &dims, &[obs]).0);
        for i in 0..4 {
            let scale = g[i].abs().max(fd[i].abs()).max(1.0);
            assert!(
                (g[i] - fd[i]).abs() / scale < 1e-3,
                "3d2d comp {i}: {} vs {}",
                g[i],
                fd[i]
            );
        }
    }

    #[test]
    fn refine_zero_residual_fixture_stays_put() {
        // truth zeroes all three terms; start slightly off and recover
        let truth = Pose4DoF::new(Vector3::new(0.0, 0.0, 4.0), 0.0);
        let dims = Vector3::new(2.0, 2.0, 2.0);
        let pts: Vec<BoxPoint> = rect_perimeter_points(1.9, 1.9, 0.0, 24)
            .into_iter()
            .map(|p| BoxPoint {
                position: Vector3::new(p.x, 0.0, p.z + 4.0),
                sigma_x: 1.0,
            })
            .collect();
        let obs = obs_fixture();
        let init = Detection3D {
            center: truth.translation + Vector3::new(0.08, -0.05, 0.1),
            yaw: 0.04,
            dims,
            location_var: Vector3::repeat(1.0),
            yaw_var: 1.0,
            frame_id: 0,
            track_id: 1,
        };
        let out = refine_box(
            &init,
            &pts,
            &[obs],
            Some(&truth),
            &RefinementConfig::default(),
        );
        assert!(
            (out.center - truth.translation).norm() < 1e-3,
            "center {:?}",
            out.center
        );
        assert!(out.yaw.abs() < 1e-3, "yaw {}", out.yaw);
    }

    #[test]
    fn refine_depth_from_2d_box_alone() {
        // with only the projected-box term, depth along the ray must
        // move until the projected size matches
        let dims = Vector3::new(2.0, 2.0, 2.0);
        let obs = obs_fixture();
        let init = Detection3D {
            center: Vector3::new(0.0, 0.0, 5.0),
            yaw: 0.0,
            dims,
            location_var: Vector3::repeat(1.0),
            yaw_var: 1.0,
            frame_id: 0,
            track_id: 1,
        };
        let out = refine_box(&init, &[], &[obs], None, &RefinementConfig::default());
        let r = project_box_residual(&Pose4DoF::new(out.center, out.yaw), &dims, &obs).unwrap();
        assert!(r.z.abs() < 1.0 && r.w.abs() < 1.0, "size residual {r:?}");
    }

    #[test]
    fn refine_singular_hessian_inflates_and_returns_initial() {
        // no residual terms at all: the Hessian is zero
        let init = Detection3D {
            center: Vector3::new(1.0, 2.0, 3.0),
            yaw: 0.2,
            dims: Vector3::new(2.0, 1.5, 4.0),
            location_var: Vector3::repeat(0.5),
            yaw_var: 0.3,
            frame_id: 7,
            track_id: 2,
        };
        let out = refine_box(&init, &[], &[], None, &RefinementConfig::default());
        assert_eq!(out.center, init.center);
        assert_eq!(out.yaw, init.yaw);
        assert_relative_eq!(out.location_var.x, 5.0, epsilon = 1e-12);
        assert_relative_eq!(out.yaw_var, 3.0, epsilon = 1e-12);
    }

    fn det(center: Vector3<f64>, yaw: f64, var: f64, yaw_var: f64) -> Detection3D {
        Detection3D {
            center,
            yaw,
            dims: Vector3::new(1.8, 1.5, 4.2),
            location_var: Vector3::repeat(var),
            yaw_var,
            frame_id: 0,
            track_id: 0,
        }
    }

    #[test]
    fn fusion_symmetric_case() {
        let p = det(Vector3::zeros(), 0.0, 1.0, 1.0);
        let m = det(Vector3::new(2.0, 0.0, 0.0), 0.0, 1.0, 1.0);
        let f = fuse_proposals(&p, &m);
        assert_relative_eq!(f.center.x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(f.location_var.x, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn fusion_certain_measurement_wins() {
        let p = det(Vector3::zeros(), 0.0, 1.0, 1.0);
        let m = det(Vector3::new(2.0, -1.0, 3.0), 0.0, 1e-12, 1.0);
        let f = fuse_proposals(&p, &m);
        assert!((f.center - m.center).norm() < 1e-9);
    }

    #[test]
    fn fusion_yaw_wraps_on_shortest_arc() {
        let p = det(Vector3::zeros(), 170.0_f64.to_radians(), 1.0, 1.0);
        let m = det(Vector3::zeros(), -170.0_f64.to_radians(), 1.0, 1.0);
        let f = fuse_proposals(&p, &m);
        assert_relative_eq!(f.yaw, PI, epsilon = 1e-12);
    }

    #[test]
    fn fusion_contracts_uncertainty() {
        let p = det(Vector3::zeros(), 0.1, 0.7, 0.4);
        let m = det(Vector3::new(1.0, 0.0, 0.0), 0.2, 0.3, 0.9);
        let f = fuse_proposals(&p, &m);
        for i in 0..3 {
            assert!(f.location_var[i] <= p.location_var[i].min(m.location_var[i]) + 1e-12);
        }
        assert!(f.yaw_var <= p.yaw_var.min(m.yaw_var) + 1e-12);
    }
}
