//! Sequence loading, image/depth/mask codecs, detection and calibration
//! parsers, track file IO and the pipeline configuration format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::Vector3;

use dmot_core::metrics::{Box2D, Box3D, TrackedBox, TrackingData};
use dmot_core::{CameraIntrinsics, DepthMap, Image, InstanceMask};

/// One 2D detection: amodal box plus confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection2D {
    pub box2d: Box2D,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub frame_id: u32,
    pub image_path: PathBuf,
    pub depth_path: PathBuf,
    pub mask_path: PathBuf,
    pub detections_2d: Vec<Detection2D>,
    /// Optional (width, height, length) dimension prior.
    pub dims_prior: Option<Vector3<f64>>,
}

#[derive(Debug, Clone)]
pub struct SequenceBundle {
    pub sequence_id: String,
    pub intrinsics: CameraIntrinsics,
    pub width: u32,
    pub height: u32,
    pub frames: Vec<FrameRecord>,
}

fn frame_files(dir: &Path, kind: &str) -> Result<BTreeMap<u32, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries =
        fs::read_dir(dir).with_context(|| format!("missing {kind} directory {}", dir.display()))?;
    for e in entries {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == "png") {
            let stem = p
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| anyhow!("unreadable file name in {}", dir.display()))?;
            let id: u32 = stem
                .parse()
                .with_context(|| format!("non-numeric {kind} frame name {stem}"))?;
            out.insert(id, p);
        }
    }
    Ok(out)
}

/// Validate directory structure, counts and image dimensions up front;
/// pixel data stays on disk until a frame is loaded.
pub fn load_sequence(root: &Path) -> Result<SequenceBundle> {
    let intrinsics_raw = fs::read_to_string(root.join("calib.txt"))
        .with_context(|| format!("missing calib.txt in {}", root.display()))?;
    let nums: Vec<f64> = intrinsics_raw
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| anyhow!("bad calib value {t}")))
        .collect::<Result<_>>()?;
    if nums.len() != 4 {
        bail!(
            "calib.txt must hold exactly fx fy cx cy, found {} values",
            nums.len()
        );
    }

    let images = frame_files(&root.join("image_02"), "image")?;
    let depths = frame_files(&root.join("depth"), "depth")?;
    let masks = frame_files(&root.join("masks"), "mask")?;
    if images.is_empty() {
        bail!("sequence {} has no frames", root.display());
    }

    let (width, height) = image::image_dimensions(images.values().next().unwrap())?;
    let intrinsics = CameraIntrinsics::new(nums[0], nums[1], nums[2], nums[3], width, height);

    let mut frames = Vec::with_capacity(images.len());
    for (&frame_id, image_path) in &images {
        let depth_path = depths
            .get(&frame_id)
            .ok_or_else(|| anyhow!("frame {frame_id}: missing depth map"))?;
        let mask_path = masks
            .get(&frame_id)
            .ok_or_else(|| anyhow!("frame {frame_id}: missing instance mask"))?;
        for (p, kind) in [
            (image_path, "image"),
            (depth_path, "depth"),
            (mask_path, "mask"),
        ] {
            let (w, h) = image::image_dimensions(p)
                .with_context(|| format!("frame {frame_id}: unreadable {kind}"))?;
            if (w, h) != (width, height) {
                bail!("frame {frame_id}: {kind} is {w}x{h}, expected {width}x{height}");
            }
        }
        frames.push(FrameRecord {
            frame_id,
            image_path: image_path.clone(),
            depth_path: depth_path.clone(),
            mask_path: mask_path.clone(),
            detections_2d: Vec::new(),
            dims_prior: None,
        });
    }

    let by_id: BTreeMap<u32, usize> = frames
        .iter()
        .enumerate()
        .map(|(i, f)| (f.frame_id, i))
        .collect();

    let det_path = root.join("detections_2d.txt");
    if det_path.exists() {
        for (ln, line) in fs::read_to_string(&det_path)?.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let t: Vec<f64> = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| anyhow!("detections_2d.txt:{}: bad number {s}", ln + 1))
                })
                .collect::<Result<_>>()?;
            if t.len() != 6 {
                bail!(
                    "detections_2d.txt:{}: expected 6 fields, found {}",
                    ln + 1,
                    t.len()
                );
            }
            let frame = t[0] as u32;
            let idx = *by_id.get(&frame).ok_or_else(|| {
                anyhow!(
                    "detections_2d.txt:{}: frame {frame} is not in the sequence",
                    ln + 1
                )
            })?;
            frames[idx].detections_2d.push(Detection2D {
                box2d: Box2D::from_corners(t[1], t[2], t[3], t[4]),
                score: t[5],
            });
        }
    }

    let det3_path = root.join("detections_3d.txt");
    if det3_path.exists() {
        for (ln, line) in fs::read_to_string(&det3_path)?.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let t: Vec<f64> = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| anyhow!("detections_3d.txt:{}: bad number {s}", ln + 1))
                })
                .collect::<Result<_>>()?;
            if t.len() != 4 {
                bail!(
                    "detections_3d.txt:{}: expected 4 fields, found {}",
                    ln + 1,
                    t.len()
                );
            }
            let frame = t[0] as u32;
            let idx = *by_id.get(&frame).ok_or_else(|| {
                anyhow!(
                    "detections_3d.txt:{}: frame {frame} is not in the sequence",
                    ln + 1
                )
            })?;
            // file order: h w l; stored as (w, h, l)
            frames[idx].dims_prior = Some(Vector3::new(t[2], t[1], t[3]));
        }
    }

    Ok(SequenceBundle {
        sequence_id: root
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("sequence")
            .to_owned(),
        intrinsics,
        width,
        height,
        frames,
    })
}

/// 8-bit gray or RGB image as float intensities in [0, 255].
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).with_context(|| format!("open {}", path.display()))?;
    Ok(match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Image::new(
                w,
                h,
                1,
                g.into_raw().into_iter().map(|p| p as f32).collect(),
            )
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            Image::new(
                w,
                h,
                3,
                rgb.into_raw().into_iter().map(|p| p as f32).collect(),
            )
        }
    })
}

/// 16-bit PNG, millimeters, 0 = invalid.
pub fn load_depth(path: &Path) -> Result<DepthMap> {
    let img = image::open(path).with_context(|| format!("open {}", path.display()))?;
    let g = img.into_luma16();
    let (w, h) = g.dimensions();
    Ok(DepthMap::new(
        w,
        h,
        g.into_raw()
            .into_iter()
            .map(|mm| mm as f32 / 1000.0)
            .collect(),
    ))
}

/// 16-bit PNG of instance ids, 0 = background. Returns (id, mask) in
/// ascending id order.
pub fn load_masks(path: &Path) -> Result<Vec<(u16, InstanceMask)>> {
    let img = image::open(path).with_context(|| format!("open {}", path.display()))?;
    let g = img.into_luma16();
    let (w, h) = g.dimensions();
    let raw = g.into_raw();
    let mut ids: Vec<u16> = raw.iter().copied().filter(|&v| v != 0).collect();
    ids.sort_unstable();
    ids.dedup();
    Ok(ids
        .into_iter()
        .map(|id| {
            let bits = raw.iter().map(|&v| v == id).collect();
            (id, InstanceMask::new(w, h, bits))
        })
        .collect())
}

pub fn save_gray_image(path: &Path, img: &Image) -> Result<()> {
    let g = img.to_grayscale();
    let buf: Vec<u8> = g
        .data()
        .iter()
        .map(|&v| v.clamp(0.0, 255.0) as u8)
        .collect();
    image::GrayImage::from_raw(g.width, g.height, buf)
        .ok_or_else(|| anyhow!("image buffer size mismatch"))?
        .save(path)?;
    Ok(())
}

pub fn save_rgb_image(path: &Path, img: &Image) -> Result<()> {
    let buf: Vec<u8> = if img.channels == 3 {
        img.data()
            .iter()
            .map(|&v| v.clamp(0.0, 255.0) as u8)
            .collect()
    } else {
        img.data()
            .iter()
            .flat_map(|&v| {
                let b = v.clamp(0.0, 255.0) as u8;
                [b, b, b]
            })
            .collect()
    };
    image::RgbImage::from_raw(img.width, img.height, buf)
        .ok_or_else(|| anyhow!("image buffer size mismatch"))?
        .save(path)?;
    Ok(())
}

pub fn save_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let buf: Vec<u16> = depth
        .data()
        .iter()
        .map(|&m| {
            if m <= 0.0 {
                0
            } else {
                (m as f64 * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16
            }
        })
        .collect();
    image::ImageBuffer::<image::Luma<u16>, _>::from_raw(depth.width, depth.height, buf)
        .ok_or_else(|| anyhow!("depth buffer size mismatch"))?
        .save(path)?;
    Ok(())
}

pub fn save_masks(
    path: &Path,
    width: u32,
    height: u32,
    masks: &[(u16, &InstanceMask)],
) -> Result<()> {
    let mut buf = vec![0u16; (width * height) as usize];
    for (id, m) in masks {
        for (u, v) in m.pixels() {
            buf[(v * width + u) as usize] = *id;
        }
    }
    image::ImageBuffer::<image::Luma<u16>, _>::from_raw(width, height, buf)
        .ok_or_else(|| anyhow!("mask buffer size mismatch"))?
        .save(path)?;
    Ok(())
}

/// One output row: a tracked object in one frame. `dims` is (width,
/// height, length); `center` is the geometric box center in camera
/// coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutput {
    pub frame: u32,
    pub id: u32,
    pub box2d: Box2D,
    pub center: Vector3<f64>,
    pub yaw: f64,
    pub dims: Vector3<f64>,
    pub score: f64,
}

/// KITTI tracking label line: frame, id, "Car", truncated -1, occluded
/// -1, alpha, 2D box (l t r b), dims (h w l), location of the bottom
/// face center (x y z), rotation_y, score. Floats with 6 decimals.
pub fn format_kitti_tracks(rows: &[TrackOutput]) -> String {
    let mut out = String::new();
    for r in rows {
        let alpha = dmot_core::geometry::wrap_angle(r.yaw - r.center.x.atan2(r.center.z));
        let yaw = dmot_core::geometry::wrap_angle(r.yaw);
        let _ = writeln!(
            out,
            "{} {} Car -1 -1 {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            r.frame,
            r.id,
            alpha,
            r.box2d.left,
            r.box2d.top,
            r.box2d.right(),
            r.box2d.bottom(),
            r.dims.y,
            r.dims.x,
            r.dims.z,
            r.center.x,
            r.center.y + r.dims.y / 2.0,
            r.center.z,
            yaw,
            r.score,
        );
    }
    out
}

pub fn write_kitti_tracks(path: &Path, rows: &[TrackOutput]) -> Result<()> {
    fs::write(path, format_kitti_tracks(rows))
        .with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

/// Read a KITTI tracking label file into evaluation containers. The
/// score column is optional (ground-truth files omit it); classes other
/// than the tracked one are kept as-is since the pipeline is
/// single-class.
pub fn read_kitti_tracks(path: &Path, sequence: &str) -> Result<TrackingData> {
    let mut data = TrackingData::new(sequence);
    for (ln, line) in fs::read_to_string(path)
        .with_context(|| format!("open {}", path.display()))?
        .lines()
        .enumerate()
    {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 17 && t.len() != 18 {
            bail!(
                "{}:{}: expected 17 or 18 fields, found {}",
                path.display(),
                ln + 1,
                t.len()
            );
        }
        let f = |i: usize| -> Result<f64> {
            t[i].parse::<f64>()
                .map_err(|_| anyhow!("{}:{}: bad number {}", path.display(), ln + 1, t[i]))
        };
        let frame: u32 = t[0]
            .parse()
            .map_err(|_| anyhow!("{}:{}: bad frame {}", path.display(), ln + 1, t[0]))?;
        let id: i64 = t[1]
            .parse()
            .map_err(|_| anyhow!("{}:{}: bad id {}", path.display(), ln + 1, t[1]))?;
        let (h, w, l) = (f(10)?, f(11)?, f(12)?);
        let (x, y, z) = (f(13)?, f(14)?, f(15)?);
        data.push(
            frame,
            TrackedBox {
                id,
                box2d: Some(Box2D::from_corners(f(6)?, f(7)?, f(8)?, f(9)?)),
                box3d: Some(Box3D::new(
                    Vector3::new(x, y - h / 2.0, z),
                    f(16)?,
                    Vector3::new(w, h, l),
                )),
                confidence: if t.len() == 18 { Some(f(17)?) } else { None },
            },
        );
    }
    Ok(data)
}

/// All tunables of the tracker, loadable from a line-oriented
/// `key = value` file. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub align: dmot_core::alignment::AlignmentConfig,
    pub flow: dmot_core::alignment::FlowConfig,
    pub ba: dmot_core::window::BAConfig,
    pub assoc: dmot_core::association::AssociationConfig,
    pub refine: dmot_core::detect::RefinementConfig,
    /// Coarsest direct-alignment pyramid level keeps the smaller mask
    /// bounding-box side at or above this many pixels.
    pub s_min: u32,
    /// Occupancy grid cell size (meters) for box regression.
    pub grid_cell: f64,
    pub grid_min_count: u32,
    /// Worker threads for the per-object stages.
    pub parallelism: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            align: Default::default(),
            flow: Default::default(),
            ba: Default::default(),
            assoc: Default::default(),
            refine: Default::default(),
            s_min: 16,
            grid_cell: 0.15,
            grid_min_count: 1,
            parallelism: 4,
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected key = value", ln + 1))?;
            let (key, value) = (key.trim(), value.trim());
            let fv = || -> Result<f64> {
                value
                    .parse()
                    .map_err(|_| anyhow!("config line {}: bad number {value}", ln + 1))
            };
            let uv = || -> Result<u32> {
                value
                    .parse()
                    .map_err(|_| anyhow!("config line {}: bad integer {value}", ln + 1))
            };
            match key {
                "align.max_iterations" => cfg.align.max_iterations = uv()?,
                "align.huber_photo" => cfg.align.huber_photo = fv()?,
                "align.min_pixels" => cfg.align.min_pixels = uv()? as usize,
                "align.min_inlier_fraction" => cfg.align.min_inlier_fraction = fv()?,
                "align.step_convergence" => cfg.align.step_convergence = fv()?,
                "ba.window_capacity" => cfg.ba.window_capacity = uv()? as usize,
                "ba.keyframe_motion_threshold" => cfg.ba.keyframe_motion_threshold = fv()?,
                "ba.points_per_keyframe" => cfg.ba.points_per_keyframe = uv()? as usize,
                "ba.iterations" => cfg.ba.iterations = uv()?,
                "ba.huber_photo" => cfg.ba.huber_photo = fv()?,
                "ba.gradient_floor" => cfg.ba.gradient_floor = fv()?,
                "ba.min_active_points" => cfg.ba.min_active_points = uv()? as usize,
                "ba.outlier_factor" => cfg.ba.outlier_factor = fv()?,
                "ba.depth_prior_sigma" => cfg.ba.depth_prior_sigma = fv()?,
                "flow.max_points" => cfg.flow.max_points = uv()? as usize,
                "flow.min_points" => cfg.flow.min_points = uv()? as usize,
                "flow.window_radius" => cfg.flow.window_radius = uv()? as i32,
                "flow.pyramid_levels" => cfg.flow.pyramid_levels = uv()? as usize,
                "flow.iterations" => cfg.flow.iterations = uv()?,
                "flow.forward_backward_max" => cfg.flow.forward_backward_max = fv()?,
                "flow.gradient_floor" => cfg.flow.gradient_floor = fv()?,
                "assoc.iou_threshold" => cfg.assoc.iou_threshold = fv()?,
                "assoc.max_age" => cfg.assoc.max_age = uv()?,
                "refine.w1" => cfg.refine.w1 = fv()?,
                "refine.w2" => cfg.refine.w2 = fv()?,
                "refine.w3" => cfg.refine.w3 = fv()?,
                "refine.lambda" => cfg.refine.lambda = fv()?,
                "refine.huber_3d" => cfg.refine.huber_3d = fv()?,
                "refine.iterations" => cfg.refine.iterations = uv()?,
                "s_min" => cfg.s_min = uv()?,
                "grid_cell" => cfg.grid_cell = fv()?,
                "grid_min_count" => cfg.grid_min_count = uv()?,
                "parallelism" => cfg.parallelism = (uv()? as usize).max(1),
                other => bail!("config line {}: unknown key {other}", ln + 1),
            }
        }
        if cfg.grid_cell <= 0.0 {
            bail!("grid_cell must be positive");
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).with_context(|| format!("open {}", path.display()))?)
    }
}
