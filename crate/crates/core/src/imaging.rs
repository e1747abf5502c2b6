//! Rasters, image I/O, field-image preprocessing, and the procedural field
//! scenes plus aerial-style degradation used in place of real imagery.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const SOIL: u8 = 0;
pub const CROP: u8 = 1;
pub const WEED: u8 = 2;
pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["soil", "crop", "weed"];

/// RGB raster, channel-planar, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    /// `3 * height * width` values: the R plane, then G, then B.
    pub data: Vec<f32>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    #[inline]
    fn plane_len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = y * self.width + x;
        let p = self.plane_len();
        [self.data[i], self.data[p + i], self.data[2 * p + i]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = y * self.width + x;
        let p = self.plane_len();
        self.data[i] = rgb[0];
        self.data[p + i] = rgb[1];
        self.data[2 * p + i] = rgb[2];
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.plane_len();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let p = self.plane_len();
        &mut self.data[c * p..(c + 1) * p]
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(Shape::new(1, 3, self.height, self.width), self.data.clone())
            .expect("planar layout matches NCHW")
    }

    /// Batch item `n` of a 3-channel tensor, clamped to [0, 1].
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let s = t.shape();
        crate::error::check_dim("ImageRgb::from_tensor", "C", 3, s.c)?;
        Ok(Self {
            width: s.w,
            height: s.h,
            data: t.sample(n).iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of bounds");
        Self::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.get(x as usize, y as usize);
            Rgb(p.map(quantize))
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        Self::from_fn(img.width() as usize, img.height() as usize, |x, y| {
            img.get_pixel(x as u32, y as u32).0.map(|v| v as f32 / 255.0)
        })
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel class ids (0 soil, 1 crop, 2 weed).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, SOIL)
    }

    pub fn filled(width: usize, height: usize, class: u8) -> Self {
        Self {
            width,
            height,
            data: vec![class; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        crate::error::check_dim("LabelMask::from_vec", "data length", width * height, data.len())?;
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of bounds");
        let mut out = Self::new(w, h);
        for y in 0..h {
            out.data[y * w..(y + 1) * w]
                .copy_from_slice(&self.data[(y0 + y) * self.width + x0..][..w]);
        }
        out
    }

    pub fn histogram(&self, classes: usize) -> Vec<u64> {
        let mut h = vec![0u64; classes];
        for &c in &self.data {
            if (c as usize) < classes {
                h[c as usize] += 1;
            }
        }
        h
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&c| c as usize >= classes) {
            Some(&c) => Err(Error::LabelOutOfRange {
                label: c as usize,
                classes,
            }),
            None => Ok(()),
        }
    }

    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([self.get(x as usize, y as usize)])
        })
    }

    /// Soil brown, crop green, weed red.
    pub fn to_color(&self) -> RgbImage {
        const PALETTE: [[u8; 3]; 3] = [[120, 85, 60], [40, 170, 60], [220, 40, 40]];
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Rgb(PALETTE[(self.get(x as usize, y as usize) as usize).min(2)])
        })
    }
}

/// Single-channel real raster (feature maps, heatmaps).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayRaster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayRaster {
    /// Min-max normalizes `values` to [0, 1]; a constant input maps to all zeros.
    pub fn normalized(width: usize, height: usize, values: &[f32]) -> Self {
        let (lo, hi) = values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        let data = if range > 0.0 && range.is_finite() {
            values.iter().map(|&v| (v - lo) / range).collect()
        } else {
            vec![0.0; values.len()]
        };
        Self { width, height, data }
    }

    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([quantize(self.data[y as usize * self.width + x as usize])])
        })
    }
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => Ok(ImageFormat::Png),
        Some("ppm") | Some("pgm") | Some("pnm") => Ok(ImageFormat::Pnm),
        _ => Err(Error::UnsupportedFormat(path.to_path_buf())),
    }
}

/// Reads a PNG or binary PPM (P6) file.
pub fn load_image(path: &Path) -> Result<ImageRgb> {
    let format = format_for(path)?;
    let bytes = fs::read(path)?;
    let img = image::load_from_memory_with_format(&bytes, format)?;
    Ok(ImageRgb::from_rgb8(&img.to_rgb8()))
}

/// Writes PNG or PPM (P6) at 8-bit depth, chosen by extension.
pub fn save_image(image: &ImageRgb, path: &Path) -> Result<()> {
    let format = format_for(path)?;
    encode_to_file(path, |buf| {
        image
            .to_rgb8()
            .write_to(&mut std::io::Cursor::new(buf), format)
    })
}

pub fn load_mask(path: &Path) -> Result<LabelMask> {
    let format = format_for(path)?;
    let bytes = fs::read(path)?;
    let img = image::load_from_memory_with_format(&bytes, format)?.to_luma8();
    let mask = LabelMask {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    };
    mask.validate(NUM_CLASSES)?;
    Ok(mask)
}

pub fn save_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    save_gray(&mask.to_gray8(), path)
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    encode_to_file(path, |buf| {
        img.write_to(&mut std::io::Cursor::new(buf), ImageFormat::Png)
    })
}

pub fn save_rgb8(img: &RgbImage, path: &Path) -> Result<()> {
    encode_to_file(path, |buf| {
        img.write_to(&mut std::io::Cursor::new(buf), ImageFormat::Png)
    })
}

/// Encodes in memory, then writes through a temporary file renamed into place.
fn encode_to_file(
    path: &Path,
    encode: impl FnOnce(&mut Vec<u8>) -> image::ImageResult<()>,
) -> Result<()> {
    let mut buf = Vec::new();
    encode(&mut buf)?;
    write_atomic(path, &buf)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Align-corners sample position of output index `i` in an input of `n_in` samples.
#[inline]
fn source_coord(i: usize, n_out: usize, n_in: usize) -> f32 {
    if n_out <= 1 || n_in <= 1 {
        0.0
    } else {
        i as f32 * (n_in - 1) as f32 / (n_out - 1) as f32
    }
}

/// Bilinear resize with align-corners sampling and edge clamping.
pub fn resize_bilinear(image: &ImageRgb, new_w: usize, new_h: usize) -> ImageRgb {
    assert!(new_w >= 1 && new_h >= 1, "resize target must be non-empty");
    if new_w == image.width && new_h == image.height {
        return image.clone();
    }
    let xs: Vec<(usize, usize, f32)> = (0..new_w)
        .map(|x| {
            let sx = source_coord(x, new_w, image.width);
            let x0 = (sx.floor() as usize).min(image.width - 1);
            (x0, (x0 + 1).min(image.width - 1), sx - x0 as f32)
        })
        .collect();
    let mut out = ImageRgb::new(new_w, new_h);
    for c in 0..3 {
        let src = image.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..new_h {
            let sy = source_coord(y, new_h, image.height);
            let y0 = (sy.floor() as usize).min(image.height - 1);
            let y1 = (y0 + 1).min(image.height - 1);
            let fy = sy - y0 as f32;
            let (r0, r1) = (&src[y0 * image.width..], &src[y1 * image.width..]);
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
                dst[y * new_w + x] = top + (bottom - top) * fy;
            }
        }
    }
    out
}

/// Nearest-neighbour resize for label masks, on the same sampling grid as
/// [`resize_bilinear`].
pub fn resize_nearest(mask: &LabelMask, new_w: usize, new_h: usize) -> LabelMask {
    let xs: Vec<usize> = (0..new_w)
        .map(|x| (source_coord(x, new_w, mask.width).round() as usize).min(mask.width - 1))
        .collect();
    let mut out = LabelMask::new(new_w, new_h);
    for y in 0..new_h {
        let sy = (source_coord(y, new_h, mask.height).round() as usize).min(mask.height - 1);
        for (x, &sx) in xs.iter().enumerate() {
            out.data[y * new_w + x] = mask.get(sx, sy);
        }
    }
    out
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as usize;
    let taps: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let d = i as f32 - radius as f32;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f32 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian smoothing of one plane with edge clamping.
pub fn blur_plane(src: &[f32], width: usize, height: usize, sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (i, &t) in k.iter().enumerate() {
                acc += t * row[clamp(x as isize + i as isize - r, width)];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (i, &t) in k.iter().enumerate() {
                acc += t * tmp[clamp(y as isize + i as isize - r, height) * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

pub fn gaussian_blur(image: &ImageRgb, sigma: f32) -> ImageRgb {
    let mut out = image.clone();
    for c in 0..3 {
        let blurred = blur_plane(image.channel(c), image.width, image.height, sigma);
        out.channel_mut(c).copy_from_slice(&blurred);
    }
    out
}

/// Power-law transform `out = in^gamma`.
pub fn gamma_correct(image: &ImageRgb, gamma: f32) -> ImageRgb {
    assert!(gamma > 0.0, "gamma must be positive");
    if gamma == 1.0 {
        return image.clone();
    }
    image.map(|v| v.max(0.0).powf(gamma))
}

/// Mean absolute 4-neighbour Laplacian over interior pixels, averaged over channels.
pub fn mean_abs_laplacian(image: &ImageRgb) -> f64 {
    let (w, h) = (image.width, image.height);
    if w < 3 || h < 3 {
        return 0.0;
    }
    let mut acc = 0.0f64;
    for c in 0..3 {
        let p = image.channel(c);
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let i = y * w + x;
                let lap = p[i - 1] + p[i + 1] + p[i - w] + p[i + w] - 4.0 * p[i];
                acc += lap.abs() as f64;
            }
        }
    }
    acc / (3 * (w - 2) * (h - 2)) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessParams {
    pub work_width: usize,
    pub work_height: usize,
    pub tile_size: usize,
    pub tiles_per_image: usize,
    /// Smoothing sigma; `None` uses half the downsample ratio.
    pub sigma: Option<f32>,
    pub gamma: f32,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self::desk()
    }
}

impl PreprocessParams {
    pub fn full() -> Self {
        Self {
            work_width: 1200,
            work_height: 800,
            tile_size: 512,
            tiles_per_image: 4,
            sigma: None,
            gamma: 1.0,
        }
    }

    pub fn desk() -> Self {
        Self {
            work_width: 120,
            work_height: 80,
            tile_size: 64,
            tiles_per_image: 2,
            sigma: None,
            gamma: 1.0,
        }
    }
}

/// Resize to the working size, smooth, gamma-correct, then cut random tiles.
/// The mask follows the same resize (nearest) and crops.
pub fn preprocess_field(
    image: &ImageRgb,
    mask: &LabelMask,
    rng: &mut impl Rng,
    params: &PreprocessParams,
) -> Result<Vec<(ImageRgb, LabelMask)>> {
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(Error::Data(format!(
            "image {}x{} and mask {}x{} differ",
            image.width, image.height, mask.width, mask.height
        )));
    }
    let t = params.tile_size;
    if t == 0 || t > params.work_width || t > params.work_height {
        return Err(Error::Data(format!(
            "tile {t} does not fit the {}x{} working image",
            params.work_width, params.work_height
        )));
    }
    let resized = resize_bilinear(image, params.work_width, params.work_height);
    let mask = resize_nearest(mask, params.work_width, params.work_height);
    let ratio = image.width as f32 / params.work_width as f32;
    let sigma = params.sigma.unwrap_or(ratio / 2.0);
    let smoothed = if ratio > 1.0 || params.sigma.is_some() {
        gaussian_blur(&resized, sigma)
    } else {
        resized
    };
    let prepared = gamma_correct(&smoothed, params.gamma);
    Ok((0..params.tiles_per_image)
        .map(|_| {
            let x = rng.random_range(0..=params.work_width - t);
            let y = rng.random_range(0..=params.work_height - t);
            (prepared.crop(x, y, t, t), mask.crop(x, y, t, t))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub crop_rows: usize,
    /// Distance between plants along a row, in pixels.
    pub plant_spacing: f32,
    pub plant_radius: (f32, f32),
    /// Expected weeds per 10,000 pixels, in [0, 1] scaled by `MAX_WEEDS_PER_10K`.
    pub weed_density: f32,
    pub weed_radius: (f32, f32),
    /// Feature size of the soil's low-frequency noise, in pixels.
    pub soil_scale: f32,
    pub soil_contrast: f32,
    pub seed: u64,
}

const MAX_WEEDS_PER_10K: f32 = 20.0;

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 480,
            height: 320,
            crop_rows: 3,
            plant_spacing: 70.0,
            plant_radius: (22.0, 30.0),
            weed_density: 0.12,
            weed_radius: (6.0, 14.0),
            soil_scale: 40.0,
            soil_contrast: 0.12,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.weed_density) {
            return Err(Error::Config("weed_density must lie in [0, 1]".into()));
        }
        if self.width % 32 != 0 || self.height % 32 != 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config("scene dims must be positive multiples of 32".into()));
        }
        if self.plant_radius.0 > self.plant_radius.1 || self.weed_radius.0 > self.weed_radius.1 {
            return Err(Error::Config("radius ranges must be ordered (min, max)".into()));
        }
        Ok(())
    }
}

/// Smoothly interpolated lattice noise in [0, 1].
struct ValueNoise {
    cols: usize,
    rows: usize,
    cell: f32,
    values: Vec<f32>,
}

impl ValueNoise {
    fn new(width: usize, height: usize, cell: f32, rng: &mut impl Rng) -> Self {
        let cell = cell.max(1.0);
        let cols = (width as f32 / cell).ceil() as usize + 2;
        let rows = (height as f32 / cell).ceil() as usize + 2;
        let values = (0..cols * rows).map(|_| rng.random::<f32>()).collect();
        Self { cols, rows, cell, values }
    }

    fn at(&self, x: f32, y: f32) -> f32 {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let (x0, y0) = (x0.min(self.cols - 2), y0.min(self.rows - 2));
        let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (smooth(gx - x0 as f32), smooth(gy - y0 as f32));
        let v = |x: usize, y: usize| self.values[y * self.cols + x];
        let top = v(x0, y0) + (v(x0 + 1, y0) - v(x0, y0)) * fx;
        let bottom = v(x0, y0 + 1) + (v(x0 + 1, y0 + 1) - v(x0, y0 + 1)) * fx;
        top + (bottom - top) * fy
    }
}

struct Plant {
    cx: f32,
    cy: f32,
    radius: f32,
    lobes: f32,
    phase: f32,
    /// Extra harmonics for irregular (weed) outlines.
    wobble: [(f32, f32, f32); 2],
    color: [f32; 3],
}

impl Plant {
    fn contains(&self, x: f32, y: f32, rosette: bool) -> Option<f32> {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let r = (dx * dx + dy * dy).sqrt();
        if r > self.radius * 1.5 {
            return None;
        }
        let theta = dy.atan2(dx);
        let edge = if rosette {
            self.radius * (0.45 + 0.55 * (self.lobes * theta / 2.0 + self.phase).cos().abs())
        } else {
            let mut e = 1.0;
            for (amp, freq, ph) in self.wobble {
                e += amp * (freq * theta + ph).sin();
            }
            self.radius * e
        };
        (r <= edge).then(|| r / edge.max(1e-3))
    }
}

/// Renders a field scene and its mask. Weeds are painted over crops, which
/// are painted over soil.
pub fn synth_scene(spec: &SceneSpec) -> Result<(ImageRgb, LabelMask)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let coarse = ValueNoise::new(w, h, spec.soil_scale, &mut rng);
    let fine = ValueNoise::new(w, h, spec.soil_scale / 6.0, &mut rng);
    let soil_base = [
        0.50 + rng.random_range(-0.06..0.06),
        0.37 + rng.random_range(-0.05..0.05),
        0.25 + rng.random_range(-0.04..0.04),
    ];

    let mut crops = Vec::new();
    let row_gap = h as f32 / spec.crop_rows.max(1) as f32;
    for row in 0..spec.crop_rows {
        let cy = row_gap * (row as f32 + 0.5) + rng.random_range(-0.08..0.08) * row_gap;
        let mut cx = rng.random_range(0.0..spec.plant_spacing);
        while cx < w as f32 + spec.plant_spacing {
            let shade = rng.random_range(-0.04..0.04);
            crops.push(Plant {
                cx: cx + rng.random_range(-0.15..0.15) * spec.plant_spacing,
                cy: cy + rng.random_range(-0.1..0.1) * spec.plant_spacing,
                radius: rng.random_range(spec.plant_radius.0..=spec.plant_radius.1),
                lobes: rng.random_range(4..=7) as f32,
                phase: rng.random_range(0.0..PI),
                wobble: [(0.0, 0.0, 0.0); 2],
                color: [0.16 + shade, 0.42 + shade, 0.10 + shade * 0.5],
            });
            cx += spec.plant_spacing * rng.random_range(0.85..1.15);
        }
    }

    let expected = spec.weed_density * MAX_WEEDS_PER_10K * (w * h) as f32 / 10_000.0;
    let n_weeds = if spec.weed_density == 0.0 {
        0
    } else {
        (expected * rng.random_range(0.7..1.3)).round() as usize
    };
    let weeds: Vec<Plant> = (0..n_weeds)
        .map(|_| {
            let shade = rng.random_range(-0.05..0.05);
            Plant {
                cx: rng.random_range(0.0..w as f32),
                cy: rng.random_range(0.0..h as f32),
                radius: rng.random_range(spec.weed_radius.0..=spec.weed_radius.1),
                lobes: 0.0,
                phase: 0.0,
                wobble: [
                    (rng.random_range(0.1..0.3), 3.0, rng.random_range(0.0..2.0 * PI)),
                    (rng.random_range(0.05..0.2), 5.0, rng.random_range(0.0..2.0 * PI)),
                ],
                color: [0.52 + shade, 0.72 + shade, 0.28 + shade * 0.5],
            }
        })
        .collect();

    let mut image = ImageRgb::new(w, h);
    let mut mask = LabelMask::new(w, h);
    let grain_seed = rng.random::<u64>();
    let mut grain = ChaCha8Rng::seed_from_u64(grain_seed);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let n = 0.7 * coarse.at(fx, fy) + 0.3 * fine.at(fx, fy) - 0.5;
            let g = grain.random_range(-0.03..0.03);
            let mut px = soil_base.map(|b| b + spec.soil_contrast * n + g);
            let mut class = SOIL;
            for p in &crops {
                if let Some(t) = p.contains(fx, fy, true) {
                    let shade = 1.0 - 0.25 * t;
                    px = p.color.map(|c| c * shade + g);
                    class = CROP;
                }
            }
            for p in &weeds {
                if let Some(t) = p.contains(fx, fy, false) {
                    let shade = 1.0 - 0.2 * t;
                    px = p.color.map(|c| c * shade + g);
                    class = WEED;
                }
            }
            image.set(x, y, px.map(|v| v.clamp(0.0, 1.0)));
            mask.set(x, y, class);
        }
    }
    Ok((image, mask))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShiftParams {
    pub downsample: f32,
    pub sigma: f32,
    pub gamma: f32,
    pub color_shift: [f32; 3],
}

impl Default for DomainShiftParams {
    fn default() -> Self {
        Self {
            downsample: 3.0,
            sigma: 1.2,
            gamma: 1.25,
            color_shift: [0.05, -0.03, 0.04],
        }
    }
}

impl DomainShiftParams {
    pub fn identity() -> Self {
        Self {
            downsample: 1.0,
            sigma: 0.0,
            gamma: 1.0,
            color_shift: [0.0; 3],
        }
    }
}

/// Emulates the aerial domain: lose resolution, blur, change tone, clamp.
/// Output dims always equal input dims.
pub fn domain_shift(image: &ImageRgb, params: &DomainShiftParams) -> ImageRgb {
    assert!(params.downsample >= 1.0, "downsample factor must be >= 1");
    let (w, h) = (image.width, image.height);
    let mut out = if params.downsample > 1.0 {
        let sw = ((w as f32 / params.downsample).round() as usize).max(1);
        let sh = ((h as f32 / params.downsample).round() as usize).max(1);
        resize_bilinear(&resize_bilinear(image, sw, sh), w, h)
    } else {
        image.clone()
    };
    out = gaussian_blur(&out, params.sigma);
    out = gamma_correct(&out, params.gamma);
    for c in 0..3 {
        let shift = params.color_shift[c];
        for v in out.channel_mut(c) {
            *v = (*v + shift).clamp(0.0, 1.0);
        }
    }
    out
}

/// Horizontal mirror.
pub fn flip_horizontal<T: Copy>(data: &[T], width: usize, height: usize, planes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for p in 0..planes {
        for y in 0..height {
            let row = &data[(p * height + y) * width..][..width];
            out.extend(row.iter().rev());
        }
    }
    out
}

pub fn flip_vertical<T: Copy>(data: &[T], width: usize, height: usize, planes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for p in 0..planes {
        for y in (0..height).rev() {
            out.extend_from_slice(&data[(p * height + y) * width..][..width]);
        }
    }
    out
}

/// Rotates each plane 90 degrees clockwise; the result is `height` wide.
pub fn rotate_90<T: Copy + Default>(data: &[T], width: usize, height: usize, planes: usize) -> Vec<T> {
    let mut out = vec![T::default(); data.len()];
    let plane = width * height;
    for p in 0..planes {
        for y in 0..height {
            for x in 0..width {
                // (x, y) -> (height - 1 - y, x) in a height x width raster
                let (nx, ny) = (height - 1 - y, x);
                out[p * plane + ny * height + nx] = data[p * plane + y * width + x];
            }
        }
    }
    out
}
