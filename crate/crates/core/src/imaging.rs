//! Image, depth and instance-mask containers with bilinear sampling,
//! per-object adaptive pyramids, mask warping and 2D mask overlap.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{Vector2, Vector3};

use crate::geometry::{CameraIntrinsics, RigidTransform};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImagingError {
    EmptyMask,
    /// No mask pixel carries a valid depth; 3D tracking is impossible.
    NoValidDepth,
}

impl fmt::Display for ImagingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImagingError::EmptyMask => write!(f, "instance mask is empty"),
            ImagingError::NoValidDepth => write!(f, "no mask pixel has valid depth"),
        }
    }
}

#[cfg(test)]
impl std::error::Error for ImagingError {}

/// Intensity image, 1 (grayscale) or 3 (color) interleaved channels,
/// values in [0, 255].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: u32, height: u32, channels: u32, data: Vec<f32>) -> Self {
        assert!(width > 0 && height > 0);
        assert!(channels == 1 || channels == 3);
        assert_eq!(data.len(), (width * height * channels) as usize);
        Image {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn filled(width: u32, height: u32, channels: u32, value: f32) -> Self {
        Self::new(
            width,
            height,
            channels,
            vec![value; (width * height * channels) as usize],
        )
    }

    #[inline]
    pub fn pixel(&self, u: u32, v: u32, c: u32) -> f32 {
        self.data[((v * self.width + u) * self.channels + c) as usize]
    }

    #[inline]
    pub fn set_pixel(&mut self, u: u32, v: u32, c: u32, value: f32) {
        self.data[((v * self.width + u) * self.channels + c) as usize] = value;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Luminance conversion (0.299 R + 0.587 G + 0.114 B).
    pub fn to_grayscale(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let mut data = Vec::with_capacity((self.width * self.height) as usize);
        for px in self.data.chunks_exact(3) {
            data.push(0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]);
        }
        Image::new(self.width, self.height, 1, data)
    }

    /// Bilinear intensity and the exact in-cell gradient of the bilinear
    /// surface at subpixel coordinates. Returns `None` closer than one
    /// pixel to the border.
    pub fn sample_bilinear(&self, uv: &Vector2<f64>, channel: u32) -> Option<(f64, f64, f64)> {
        let (u, v) = (uv.x, uv.y);
        if !(u >= 1.0 && v >= 1.0 && u < (self.width - 2) as f64 && v < (self.height - 2) as f64) {
            return None;
        }
        let x0 = u.floor();
        let y0 = v.floor();
        let ax = u - x0;
        let ay = v - y0;
        let (i, j) = (x0 as u32, y0 as u32);
        let p00 = self.pixel(i, j, channel) as f64;
        let p10 = self.pixel(i + 1, j, channel) as f64;
        let p01 = self.pixel(i, j + 1, channel) as f64;
        let p11 = self.pixel(i + 1, j + 1, channel) as f64;
        let value = p00 * (1.0 - ax) * (1.0 - ay)
            + p10 * ax * (1.0 - ay)
            + p01 * (1.0 - ax) * ay
            + p11 * ax * ay;
        let gu = (p10 - p00) * (1.0 - ay) + (p11 - p01) * ay;
        let gv = (p01 - p00) * (1.0 - ax) + (p11 - p10) * ax;
        Some((value, gu, gv))
    }

    /// 3x3 binomial smoothing (kernel [1 2 1]/4 per axis, edges
    /// clamped). Used to tame intensity noise before gradient-based
    /// refinement.
    pub fn smoothed(&self) -> Image {
        let (w, h) = (self.width as i64, self.height as i64);
        let mut data = vec![0.0f32; (self.width * self.height * self.channels) as usize];
        let weights = [
            (-1i64, -1i64, 1.0f32),
            (0, -1, 2.0),
            (1, -1, 1.0),
            (-1, 0, 2.0),
            (0, 0, 4.0),
            (1, 0, 2.0),
            (-1, 1, 1.0),
            (0, 1, 2.0),
            (1, 1, 1.0),
        ];
        for v in 0..h {
            for u in 0..w {
                for c in 0..self.channels {
                    let mut acc = 0.0f32;
                    for (du, dv, wt) in weights {
                        let su = (u + du).clamp(0, w - 1) as u32;
                        let sv = (v + dv).clamp(0, h - 1) as u32;
                        acc += wt * self.pixel(su, sv, c);
                    }
                    let idx = ((v as u32 * self.width + u as u32) * self.channels + c) as usize;
                    data[idx] = acc / 16.0;
                }
            }
        }
        Image::new(self.width, self.height, self.channels, data)
    }

    /// 2x2-average downsampling (odd trailing row/column dropped).
    pub fn downsample(&self) -> Image {
        let w = (self.width / 2).max(1);
        let h = (self.height / 2).max(1);
        let mut data = Vec::with_capacity((w * h * self.channels) as usize);
        for v in 0..h {
            for u in 0..w {
                for c in 0..self.channels {
                    let (su, sv) = (2 * u, 2 * v);
                    let sum = self.pixel(su, sv, c)
                        + self.pixel((su + 1).min(self.width - 1), sv, c)
                        + self.pixel(su, (sv + 1).min(self.height - 1), c)
                        + self.pixel(
                            (su + 1).min(self.width - 1),
                            (sv + 1).min(self.height - 1),
                            c,
                        );
                    data.push(sum * 0.25);
                }
            }
        }
        Image::new(w, h, self.channels, data)
    }
}

/// Per-pixel depth in meters; values <= 0 mark invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    data: Vec<f32>,
}

impl DepthMap {
    pub const INVALID: f32 = 0.0;

    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), (width * height) as usize);
        DepthMap {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: u32, height: u32, value: f32) -> Self {
        Self::new(width, height, vec![value; (width * height) as usize])
    }

    #[inline]
    pub fn depth(&self, u: u32, v: u32) -> Option<f64> {
        let d = self.data[(v * self.width + u) as usize];
        (d > 0.0).then_some(d as f64)
    }

    #[inline]
    pub fn set_depth(&mut self, u: u32, v: u32, d: f32) {
        self.data[(v * self.width + u) as usize] = d;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Downsampling by the median of valid pixels in each 2x2 block.
    pub fn downsample(&self) -> DepthMap {
        let w = (self.width / 2).max(1);
        let h = (self.height / 2).max(1);
        let mut data = Vec::with_capacity((w * h) as usize);
        for v in 0..h {
            for u in 0..w {
                let mut vals: [f32; 4] = [0.0; 4];
                let mut n = 0;
                for (du, dv) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let su = (2 * u + du).min(self.width - 1);
                    let sv = (2 * v + dv).min(self.height - 1);
                    let d = self.data[(sv * self.width + su) as usize];
                    if d > 0.0 {
                        vals[n] = d;
                        n += 1;
                    }
                }
                if n == 0 {
                    data.push(Self::INVALID);
                } else {
                    vals[..n].sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
                    // lower median of the valid samples
                    data.push(vals[(n - 1) / 2]);
                }
            }
        }
        DepthMap::new(w, h, data)
    }
}

/// Pixel set of one object instance with a cached bounding rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub width: u32,
    pub height: u32,
    bits: Vec<bool>,
    count: usize,
    /// (min_u, min_v, max_u, max_v), inclusive; None when empty.
    bbox: Option<(u32, u32, u32, u32)>,
}

impl InstanceMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), (width * height) as usize);
        let mut count = 0;
        let mut bbox: Option<(u32, u32, u32, u32)> = None;
        for v in 0..height {
            for u in 0..width {
                if bits[(v * width + u) as usize] {
                    count += 1;
                    bbox = Some(match bbox {
                        None => (u, v, u, v),
                        Some((a, b, c, d)) => (a.min(u), b.min(v), c.max(u), d.max(v)),
                    });
                }
            }
        }
        InstanceMask {
            width,
            height,
            bits,
            count,
            bbox,
        }
    }

    pub fn empty(width: u32, height: u32) -> Self {
        InstanceMask {
            width,
            height,
            bits: vec![false; (width * height) as usize],
            count: 0,
            bbox: None,
        }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: &[(u32, u32)]) -> Self {
        let mut bits = vec![false; (width * height) as usize];
        for &(u, v) in pixels {
            bits[(v * width + u) as usize] = true;
        }
        Self::new(width, height, bits)
    }

    #[inline]
    pub fn contains(&self, u: u32, v: u32) -> bool {
        u < self.width && v < self.height && self.bits[(v * self.width + u) as usize]
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn bbox(&self) -> Option<(u32, u32, u32, u32)> {
        self.bbox
    }

    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i as u32 % w, i as u32 / w))
    }

    pub fn centroid(&self) -> Option<Vector2<f64>> {
        if self.count == 0 {
            return None;
        }
        let mut acc = Vector2::zeros();
        for (u, v) in self.pixels() {
            acc += Vector2::new(u as f64, v as f64);
        }
        Some(acc / self.count as f64)
    }

    /// Translate by integer pixels, dropping pixels that leave the image.
    pub fn translated(&self, du: i32, dv: i32) -> InstanceMask {
        let mut bits = vec![false; (self.width * self.height) as usize];
        for (u, v) in self.pixels() {
            let nu = u as i32 + du;
            let nv = v as i32 + dv;
            if nu >= 0 && nv >= 0 && (nu as u32) < self.width && (nv as u32) < self.height {
                bits[(nv as u32 * self.width + nu as u32) as usize] = true;
            }
        }
        InstanceMask::new(self.width, self.height, bits)
    }

    /// Any-set downsampling: a coarse pixel is set if any source pixel is.
    pub fn downsample(&self) -> InstanceMask {
        let w = (self.width / 2).max(1);
        let h = (self.height / 2).max(1);
        let mut bits = vec![false; (w * h) as usize];
        for v in 0..h {
            for u in 0..w {
                let mut any = false;
                for (du, dv) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let su = (2 * u + du).min(self.width - 1);
                    let sv = (2 * v + dv).min(self.height - 1);
                    any |= self.bits[(sv * self.width + su) as usize];
                }
                bits[(v * w + u) as usize] = any;
            }
        }
        InstanceMask::new(w, h, bits)
    }

    /// 3x3 morphological closing (dilation followed by erosion).
    pub fn closed(&self) -> InstanceMask {
        let (w, h) = (self.width as i32, self.height as i32);
        let mut dilated = vec![false; (self.width * self.height) as usize];
        for (u, v) in self.pixels() {
            for dv in -1..=1i32 {
                for du in -1..=1i32 {
                    let (nu, nv) = (u as i32 + du, v as i32 + dv);
                    if nu >= 0 && nv >= 0 && nu < w && nv < h {
                        dilated[(nv * w + nu) as usize] = true;
                    }
                }
            }
        }
        let mut bits = vec![false; dilated.len()];
        for v in 0..h {
            for u in 0..w {
                let mut all = true;
                'n: for dv in -1..=1i32 {
                    for du in -1..=1i32 {
                        let (nu, nv) = (u + du, v + dv);
                        // out-of-image neighbors count as set so border
                        // pixels survive erosion
                        if nu >= 0
                            && nv >= 0
                            && nu < w
                            && nv < h
                            && !dilated[(nv * w + nu) as usize]
                        {
                            all = false;
                            break 'n;
                        }
                    }
                }
                bits[(v * w + u) as usize] = all;
            }
        }
        InstanceMask::new(self.width, self.height, bits)
    }

    /// Morphological erosion with a square structuring element of the
    /// given Chebyshev radius. Out-of-image neighbors count as set so
    /// pixels at the image border survive.
    pub fn eroded(&self, radius: u32) -> InstanceMask {
        let (w, h) = (self.width as i32, self.height as i32);
        let r = radius as i32;
        let mut bits = vec![false; (self.width * self.height) as usize];
        for (u, v) in self.pixels() {
            let (u, v) = (u as i32, v as i32);
            let mut all = true;
            'n: for dv in -r..=r {
                for du in -r..=r {
                    let (nu, nv) = (u + du, v + dv);
                    if nu >= 0
                        && nv >= 0
                        && nu < w
                        && nv < h
                        && !self.contains(nu as u32, nv as u32)
                    {
                        all = false;
                        break 'n;
                    }
                }
            }
            bits[(v * w + u) as usize] = all;
        }
        InstanceMask::new(self.width, self.height, bits)
    }
}

/// |a and b| / |a or b|; 0 when the union is empty.
pub fn mask_iou(a: &InstanceMask, b: &InstanceMask) -> f64 {
    debug_assert_eq!((a.width, a.height), (b.width, b.height));
    let mut inter = 0usize;
    let mut union = 0usize;
    for i in 0..a.bits.len() {
        let (x, y) = (a.bits[i], b.bits[i]);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// One pyramid level of an object region: image, depth and mask at the
/// same resolution, with intrinsics adjusted for the scale.
#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub image: Image,
    pub depth: DepthMap,
    pub mask: InstanceMask,
    pub intrinsics: CameraIntrinsics,
    /// Downsampling factor relative to level 0 (1, 2, 4, ...).
    pub scale: u32,
}

/// Coarse-to-fine pyramid for one object; the level count adapts to the
/// mask size so small objects are not over-smoothed on coarse levels.
#[derive(Debug, Clone)]
pub struct ObjectPyramid {
    pub levels: Vec<PyramidLevel>,
}

impl ObjectPyramid {
    /// Number of levels for a mask bounding box and a minimal coarsest
    /// object size `s_min` in pixels.
    pub fn level_count(bbox_w: u32, bbox_h: u32, s_min: u32) -> u32 {
        let side = bbox_w.min(bbox_h).max(1) as f64;
        let l = 1 + (side / s_min as f64).log2().floor() as i64;
        l.max(1) as u32
    }

    pub fn build(
        image: &Image,
        depth: &DepthMap,
        mask: &InstanceMask,
        intrinsics: &CameraIntrinsics,
        s_min: u32,
    ) -> Result<ObjectPyramid, ImagingError> {
        let (min_u, min_v, max_u, max_v) = mask.bbox().ok_or(ImagingError::EmptyMask)?;
        let levels_wanted = Self::level_count(max_u - min_u + 1, max_v - min_v + 1, s_min);
        let mut levels = Vec::with_capacity(levels_wanted as usize);
        levels.push(PyramidLevel {
            image: image.clone(),
            depth: depth.clone(),
            mask: mask.clone(),
            intrinsics: *intrinsics,
            scale: 1,
        });
        while (levels.len() as u32) < levels_wanted {
            let last = levels.last().unwrap();
            if last.image.width < 4 || last.image.height < 4 {
                break;
            }
            levels.push(PyramidLevel {
                image: last.image.downsample(),
                depth: last.depth.downsample(),
                mask: last.mask.downsample(),
                intrinsics: last.intrinsics.halved(),
                scale: last.scale * 2,
            });
        }
        Ok(ObjectPyramid { levels })
    }

    pub fn finest(&self) -> &PyramidLevel {
        &self.levels[0]
    }

    pub fn coarsest(&self) -> &PyramidLevel {
        self.levels.last().unwrap()
    }
}

/// Warp a mask into another view: every mask pixel with valid depth is
/// backprojected, moved by `t`, reprojected, and the hit pixels are
/// morphologically closed to fill resampling holes.
pub fn warp_mask(
    mask: &InstanceMask,
    depth: &DepthMap,
    t: &RigidTransform,
    k: &CameraIntrinsics,
) -> Result<InstanceMask, ImagingError> {
    let mut bits = vec![false; (mask.width * mask.height) as usize];
    let mut hits = 0usize;
    let mut valid_depth = 0usize;
    for (u, v) in mask.pixels() {
        let Some(d) = depth.depth(u, v) else { continue };
        valid_depth += 1;
        let p = k
            .backproject(&Vector2::new(u as f64, v as f64), d)
            .expect("valid depth");
        let q: Vector3<f64> = t.transform_point(&p);
        let Ok(uv) = k.project(&q) else { continue };
        let (nu, nv) = (uv.x.round(), uv.y.round());
        if nu >= 0.0 && nv >= 0.0 && (nu as u32) < mask.width && (nv as u32) < mask.height {
            bits[(nv as u32 * mask.width + nu as u32) as usize] = true;
            hits += 1;
        }
    }
    if valid_depth == 0 || hits == 0 {
        return Err(ImagingError::NoValidDepth);
    }
    Ok(InstanceMask::new(mask.width, mask.height, bits).closed())
}
