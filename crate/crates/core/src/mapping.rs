//! Tiled prediction over a large region of interest and the spot-spraying
//! products derived from the stitched weed map.

use std::fmt::Write as _;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::crf::{self, CrfParams};
use crate::error::{Error, Result};
use crate::imaging::{blur_plane, GrayRaster, ImageRgb, LabelMask, WEED};
use crate::network::{Model, SIZE_MULTIPLE};
use crate::tensor::{argmax_channels, Shape, Tensor};
use crate::training::stack_images;

#[derive(Debug, Clone)]
pub struct RegionOfInterest {
    pub image: ImageRgb,
    /// Ground sampling distance, millimetres per pixel.
    pub gsd_mm_per_px: f64,
}

impl RegionOfInterest {
    pub fn new(image: ImageRgb, gsd_mm_per_px: f64) -> Result<Self> {
        if !(gsd_mm_per_px > 0.0 && gsd_mm_per_px.is_finite()) {
            return Err(Error::Config("ground sampling distance must be positive".into()));
        }
        Ok(Self { image, gsd_mm_per_px })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub width: usize,
    pub height: usize,
    pub tile_size: usize,
    pub overlap: usize,
    /// Top-left corners, row-major.
    pub origins: Vec<(usize, usize)>,
}

fn axis_origins(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + tile < extent).collect();
    v.push(extent - tile);
    v.dedup();
    v
}

impl TilePlan {
    pub fn new(width: usize, height: usize, tile_size: usize, overlap: usize) -> Result<Self> {
        if tile_size == 0 || overlap >= tile_size {
            return Err(Error::Config(format!("overlap {overlap} must be below tile size {tile_size}")));
        }
        if width < tile_size || height < tile_size {
            return Err(Error::Config(format!(
                "ROI {width}x{height} is smaller than the {tile_size}px tile"
            )));
        }
        let stride = tile_size - overlap;
        let xs = axis_origins(width, tile_size, stride);
        let ys = axis_origins(height, tile_size, stride);
        let origins = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
        Ok(Self { width, height, tile_size, overlap, origins })
    }

    /// Number of tiles covering each pixel, row-major.
    pub fn coverage(&self) -> Vec<u32> {
        let mut c = vec![0u32; self.width * self.height];
        for &(x0, y0) in &self.origins {
            for y in y0..y0 + self.tile_size {
                for v in &mut c[y * self.width + x0..][..self.tile_size] {
                    *v += 1;
                }
            }
        }
        c
    }
}

pub fn plan_tiles(roi: &RegionOfInterest, tile_size: usize, overlap: usize) -> Result<TilePlan> {
    TilePlan::new(roi.image.width, roi.image.height, tile_size, overlap)
}

/// Anything that turns a batch of RGB tiles into per-class probabilities.
pub trait TilePredictor: Sync {
    fn classes(&self) -> usize;
    /// `(n, 3, t, t)` in, `(n, classes, t, t)` out.
    fn predict_batch(&self, batch: &Tensor) -> Result<Tensor>;
}

impl TilePredictor for Model {
    fn classes(&self) -> usize {
        self.config().num_classes
    }

    fn predict_batch(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.infer(batch, &[])?.probabilities)
    }
}

#[derive(Debug, Clone)]
pub struct RoiPrediction {
    pub mask: LabelMask,
    /// `(1, classes, h, w)` averaged probabilities.
    pub probabilities: Tensor,
}

pub const ROI_BATCH: usize = 8;

/// Predicts every tile, averages overlapping probabilities (sum and count,
/// divided at the end, accumulated in origin order) and takes the argmax,
/// optionally refined by the CRF on the stitched result.
pub fn predict_roi(
    predictor: &impl TilePredictor,
    roi: &RegionOfInterest,
    plan: &TilePlan,
    crf_params: Option<&CrfParams>,
) -> Result<RoiPrediction> {
    let (w, h, t) = (plan.width, plan.height, plan.tile_size);
    if (roi.image.width, roi.image.height) != (w, h) {
        return Err(Error::Config("tile plan was made for a different ROI".into()));
    }
    if t % SIZE_MULTIPLE != 0 {
        return Err(Error::Config(format!("tile size {t} is not a multiple of {SIZE_MULTIPLE}")));
    }
    let classes = predictor.classes();
    let mut origins = plan.origins.clone();
    origins.sort_unstable_by_key(|&(x, y)| (y, x));
    origins.dedup();

    let mut sum = vec![0.0f64; classes * w * h];
    let mut count = vec![0u32; w * h];
    for chunk in origins.chunks(ROI_BATCH) {
        let tiles: Vec<ImageRgb> = chunk.iter().map(|&(x, y)| roi.image.crop(x, y, t, t)).collect();
        let probs = predictor.predict_batch(&stack_images(&tiles)?)?;
        let s = probs.shape();
        if (s.n, s.c, s.h, s.w) != (chunk.len(), classes, t, t) {
            return Err(Error::Shape {
                op: "predict_roi",
                dim: "prediction",
                expected: chunk.len() * classes * t * t,
                found: s.len(),
            });
        }
        for (n, &(x0, y0)) in chunk.iter().enumerate() {
            for ty in 0..t {
                let row = (y0 + ty) * w + x0;
                for v in &mut count[row..row + t] {
                    *v += 1;
                }
                for c in 0..classes {
                    let src = &probs.plane(n, c)[ty * t..(ty + 1) * t];
                    let dst = &mut sum[c * w * h + row..][..t];
                    for (d, &p) in dst.iter_mut().zip(src) {
                        *d += p as f64;
                    }
                }
            }
        }
    }
    if count.iter().any(|&c| c == 0) {
        return Err(Error::Config("tile plan leaves pixels uncovered".into()));
    }
    let data = sum
        .iter()
        .enumerate()
        .map(|(i, s)| (s / count[i % (w * h)] as f64) as f32)
        .collect();
    let probabilities = Tensor::from_vec(Shape::new(1, classes, h, w), data)?;
    let mask = match crf_params {
        Some(p) => crf::refine(&probabilities, 0, &roi.image, p)?,
        None => LabelMask { width: w, height: h, data: argmax_channels(&probabilities) },
    };
    Ok(RoiPrediction { mask, probabilities })
}

/// Weed indicator smoothed with a normalized Gaussian.
pub fn weed_heatmap(mask: &LabelMask, sigma: f32) -> GrayRaster {
    let indicator: Vec<f32> = mask.data.iter().map(|&c| f32::from(c == WEED)).collect();
    let data = blur_plane(&indicator, mask.width, mask.height, sigma.max(0.0))
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    GrayRaster { width: mask.width, height: mask.height, data }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrescriptionMap {
    pub grid_px: usize,
    pub cols: usize,
    pub rows: usize,
    /// Row-major; `true` means spray.
    pub cells: Vec<bool>,
}

impl PrescriptionMap {
    pub fn sprayed(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.cells[row * self.cols + col]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            let row: Vec<&str> = (0..self.cols).map(|c| if self.get(c, r) { "1" } else { "0" }).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    /// One image pixel per mask pixel of the floored extent; sprayed cells white.
    pub fn to_gray8(&self) -> GrayImage {
        let g = self.grid_px;
        GrayImage::from_fn((self.cols * g) as u32, (self.rows * g) as u32, |x, y| {
            Luma([if self.get(x as usize / g, y as usize / g) { 255 } else { 0 }])
        })
    }
}

/// Grid cells of `grid_px` pixels sprayed on at least one weed pixel.
pub fn prescription(mask: &LabelMask, grid_px: usize) -> Result<PrescriptionMap> {
    prescription_with_threshold(mask, grid_px, 1)
}

/// As [`prescription`], spraying cells with at least `min_weed_pixels` weed pixels.
/// Partial strips at the right and bottom edges are dropped.
pub fn prescription_with_threshold(mask: &LabelMask, grid_px: usize, min_weed_pixels: usize) -> Result<PrescriptionMap> {
    if grid_px == 0 || min_weed_pixels == 0 {
        return Err(Error::Config("grid size and weed threshold must be at least 1".into()));
    }
    if grid_px > mask.width || grid_px > mask.height {
        return Err(Error::Config(format!(
            "grid {grid_px}px exceeds the {}x{} mask",
            mask.width, mask.height
        )));
    }
    let (cols, rows) = (mask.width / grid_px, mask.height / grid_px);
    let mut counts = vec![0usize; cols * rows];
    for y in 0..rows * grid_px {
        let row = &mask.data[y * mask.width..][..cols * grid_px];
        for (x, &c) in row.iter().enumerate() {
            if c == WEED {
                counts[(y / grid_px) * cols + x / grid_px] += 1;
            }
        }
    }
    Ok(PrescriptionMap {
        grid_px,
        cols,
        rows,
        cells: counts.into_iter().map(|n| n >= min_weed_pixels).collect(),
    })
}

/// Cell counts and rates in hundredths of a percent, so the two rates
/// always add up to exactly 100.00.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SprayStats {
    pub free_weed_grids: usize,
    pub weed_grids: usize,
    pub spraying_hundredths: u32,
}

impl SprayStats {
    pub fn from_counts(weed_grids: usize, total: usize) -> Result<Self> {
        if total == 0 || weed_grids > total {
            return Err(Error::Data(format!("{weed_grids} weed grids of {total}")));
        }
        // round half up of 10000 * weed / total
        let (w, t) = (weed_grids as u128, total as u128);
        let spraying_hundredths = ((20_000 * w + t) / (2 * t)) as u32;
        Ok(Self { free_weed_grids: total - weed_grids, weed_grids, spraying_hundredths })
    }

    pub fn total(&self) -> usize {
        self.free_weed_grids + self.weed_grids
    }

    pub fn saving_hundredths(&self) -> u32 {
        10_000 - self.spraying_hundredths
    }

    pub fn spraying_rate(&self) -> f64 {
        self.spraying_hundredths as f64 / 100.0
    }

    pub fn saving_rate(&self) -> f64 {
        self.saving_hundredths() as f64 / 100.0
    }

    pub fn spraying_percent(&self) -> String {
        percent(self.spraying_hundredths)
    }

    pub fn saving_percent(&self) -> String {
        percent(self.saving_hundredths())
    }
}

fn percent(hundredths: u32) -> String {
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

pub fn spray_stats(pmap: &PrescriptionMap) -> Result<SprayStats> {
    SprayStats::from_counts(pmap.sprayed(), pmap.cells.len())
}

pub const SPRAY_CSV_HEADER: &str = "grid_px,ground_side_cm,free_weed_grids,weed_grids,spraying_rate,saving_rate";

pub fn spray_csv_row(grid_px: usize, gsd_mm_per_px: f64, s: &SprayStats) -> String {
    format!(
        "{grid_px},{},{},{},{},{}",
        ground_side_cm(grid_px, gsd_mm_per_px),
        s.free_weed_grids,
        s.weed_grids,
        s.spraying_percent(),
        s.saving_percent()
    )
}

/// Side length in centimetres of a `grid_px` cell.
pub fn ground_side_cm(grid_px: usize, gsd_mm_per_px: f64) -> f64 {
    grid_px as f64 * gsd_mm_per_px / 10.0
}

/// Ground area in square centimetres of a `grid_px` cell.
pub fn ground_area(grid_px: usize, gsd_mm_per_px: f64) -> f64 {
    ground_side_cm(grid_px, gsd_mm_per_px).powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn fit_line(points: &[(f64, f64)]) -> Result<LinearFit> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return Err(Error::Data("a line fit needs at least two points".into()));
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Data("all x values are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let ss_res: f64 = points.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) };
    Ok(LinearFit { slope, intercept, r_squared })
}

/// Spray statistics of `mask` at each grid size.
pub fn spray_curve(mask: &LabelMask, grids: &[usize]) -> Result<Vec<(usize, SprayStats)>> {
    grids
        .iter()
        .map(|&g| Ok((g, spray_stats(&prescription(mask, g)?)?)))
        .collect()
}

/// Saving rate against ground cell side (cm) over a spray curve.
pub fn fit_saving_curve(curve: &[(usize, SprayStats)], gsd_mm_per_px: f64) -> Result<LinearFit> {
    let points: Vec<(f64, f64)> = curve
        .iter()
        .map(|(g, s)| (ground_side_cm(*g, gsd_mm_per_px), s.saving_rate()))
        .collect();
    fit_line(&points)
}
