//! Planar convex geometry: monotone-chain hulls, convex polygon clipping
//! and areas. Shared by the rotated-box similarity kernels and the
//! bird's-eye-view box regression.

use alloc::vec::Vec;

use nalgebra::Vector2;

pub type Point2 = Vector2<f64>;

fn cross(o: &Point2, a: &Point2, b: &Point2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Convex hull by monotone chain, counter-clockwise, no duplicate
/// endpoint. Collinear points on the hull boundary are dropped.
pub fn convex_hull(points: &[Point2]) -> Vec<Point2> {
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| {
        a.x.partial_cmp(&b.x)
            .unwrap()
            .then(a.y.partial_cmp(&b.y).unwrap())
    });
    pts.dedup_by(|a, b| (a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12);
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Point2> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0
        {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<Point2> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0
        {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Signed area by the shoelace formula (positive for counter-clockwise).
pub fn signed_area(poly: &[Point2]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut a = 0.0;
    for i in 0..poly.len() {
        let p = &poly[i];
        let q = &poly[(i + 1) % poly.len()];
        a += p.x * q.y - q.x * p.y;
    }
    0.5 * a
}

pub fn area(poly: &[Point2]) -> f64 {
    signed_area(poly).abs()
}

/// Sutherland-Hodgman clip of a convex `subject` polygon by a convex,
/// counter-clockwise `clip` polygon.
pub fn clip_convex(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut output: Vec<Point2> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = core::mem::take(&mut output);
        let inside = |p: &Point2| cross(&a, &b, p) >= -1e-12;
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = inside(&cur);
            let prev_in = inside(&prev);
            if cur_in != prev_in {
                // segment crosses the clip line; intersect
                let d1 = cross(&a, &b, &prev);
                let d2 = cross(&a, &b, &cur);
                let t = d1 / (d1 - d2);
                output.push(prev + (cur - prev) * t);
            }
            if cur_in {
                output.push(cur);
            }
        }
    }
    output
}

pub fn point_in_convex(poly: &[Point2], p: &Point2) -> bool {
    if poly.len() < 3 {
        return false;
    }
    for i in 0..poly.len() {
        if cross(&poly[i], &poly[(i + 1) % poly.len()], p) < -1e-12 {
            return false;
        }
    }
    true
}
