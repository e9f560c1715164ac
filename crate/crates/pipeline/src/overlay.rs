//! Projection of tracked 3D boxes into the input images for visual
//! inspection.

use nalgebra::{Vector2, Vector3};

use dmot_core::geometry::Pose4DoF;
use dmot_core::{CameraIntrinsics, Image};

use crate::formats::TrackOutput;

const COLORS: [[f32; 3]; 6] = [
    [255.0, 64.0, 64.0],
    [64.0, 220.0, 64.0],
    [80.0, 120.0, 255.0],
    [255.0, 200.0, 40.0],
    [230.0, 80.0, 230.0],
    [60.0, 220.0, 220.0],
];

// vertical edges, bottom ring, top ring of the unit cuboid corners
const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (2, 6),
    (6, 4),
    (4, 0),
    (1, 3),
    (3, 7),
    (7, 5),
    (5, 1),
];

fn draw_line(img: &mut Image, a: Vector2<f64>, b: Vector2<f64>, color: [f32; 3]) {
    let n = (b - a).norm().ceil().max(1.0) as usize;
    for i in 0..=n {
        let p = a + (b - a) * (i as f64 / n as f64);
        let (u, v) = (p.x.round(), p.y.round());
        if u < 0.0 || v < 0.0 || u >= img.width as f64 || v >= img.height as f64 {
            continue;
        }
        for c in 0..img.channels.min(3) {
            img.set_pixel(u as u32, v as u32, c, color[c as usize]);
        }
    }
}

/// Draw every track's 3D box wireframe into an RGB copy of the image.
pub fn draw_boxes(image: &Image, rows: &[TrackOutput], k: &CameraIntrinsics) -> Image {
    let mut out = if image.channels == 3 {
        image.clone()
    } else {
        let mut rgb = Image::filled(image.width, image.height, 3, 0.0);
        for v in 0..image.height {
            for u in 0..image.width {
                let g = image.pixel(u, v, 0);
                for c in 0..3 {
                    rgb.set_pixel(u, v, c, g);
                }
            }
        }
        rgb
    };
    for row in rows {
        let color = COLORS[row.id as usize % COLORS.len()];
        let t = Pose4DoF::new(row.center, row.yaw).to_rigid();
        let half = row.dims / 2.0;
        let mut corners = Vec::with_capacity(8);
        let mut ok = true;
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    let p = t.transform_point(&Vector3::new(sx * half.x, sy * half.y, sz * half.z));
                    match k.project(&p) {
                        Ok(uv) => corners.push(uv),
                        Err(_) => ok = false,
                    }
                }
            }
        }
        if !ok {
            continue;
        }
        for (a, b) in EDGES {
            draw_line(&mut out, corners[a], corners[b], color);
        }
    }
    out
}
