//! Pixel-level similarity metrics between generated and reference rasters.
//!
//! The headline metric is a column-time-series DTW that tolerates small
//! vertical translations: both images are binarized, each column becomes one
//! feature vector, and the local cost is the minimum Euclidean distance over
//! integer vertical shifts up to a fraction of the image height. RMSE plus
//! six classical single-band similarity measures round out the report.

use serde::Serialize;
use thiserror::Error;

use crate::image::ImageBuffer;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("image shapes differ: {got:?} vs {want:?}")]
    ShapeMismatch { got: (usize, usize), want: (usize, usize) },
    #[error("column heights differ: {got} vs {want}")]
    HeightMismatch { got: usize, want: usize },
    #[error("image {h}x{w} is smaller than the {window}x{window} filter window")]
    WindowTooLarge { window: usize, h: usize, w: usize },
    #[error("empty image")]
    EmptyImage,
}

/// Row-major 0/1 raster; 1 means ink.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    h: usize,
    w: usize,
    bits: Vec<u8>,
}

impl BinaryImage {
    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn bit(&self, r: usize, c: usize) -> u8 {
        self.bits[r * self.w + c]
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Columns as contiguous vectors, left to right.
    pub fn columns(&self) -> Vec<Vec<u8>> {
        (0..self.w)
            .map(|c| (0..self.h).map(|r| self.bit(r, c)).collect())
            .collect()
    }

    /// Round-trip back to a raster (ink black, background white).
    pub fn to_image(&self) -> ImageBuffer {
        let data = self.bits.iter().map(|&b| if b == 1 { 0.0 } else { 1.0 }).collect();
        ImageBuffer::from_vec(self.h, self.w, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DtwConfig {
    /// Vertical slack during column matching, as a fraction of image height.
    pub shift_fraction: f64,
    /// Binarization cutoff; intensities strictly below it count as ink.
    pub threshold: f64,
}

impl Default for DtwConfig {
    fn default() -> Self {
        DtwConfig { shift_fraction: 0.10, threshold: 0.5 }
    }
}

impl DtwConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.shift_fraction) {
            return Err(format!("shift_fraction {} outside [0,1)", self.shift_fraction));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(format!("threshold {} outside (0,1)", self.threshold));
        }
        Ok(())
    }

    pub fn max_shift(&self, height: usize) -> usize {
        (self.shift_fraction * height as f64).floor() as usize
    }
}

/// Dark-is-ink thresholding: bit = 1 iff intensity < threshold.
pub fn binarize(img: &ImageBuffer, threshold: f64) -> BinaryImage {
    assert!(threshold > 0.0 && threshold < 1.0, "threshold must lie in (0,1)");
    let bits = img
        .as_slice()
        .iter()
        .map(|&p| u8::from((p as f64) < threshold))
        .collect();
    BinaryImage { h: img.h(), w: img.w(), bits }
}

/// Minimum Euclidean distance between two equal-height columns over integer
/// vertical shifts in [-max_shift, +max_shift]; rows shifted out of range are
/// compared against background 0.
pub fn column_cost(a: &[u8], b: &[u8], max_shift: usize) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::HeightMismatch { got: a.len(), want: b.len() });
    }
    Ok(column_cost_unchecked(a, b, max_shift))
}

fn column_cost_unchecked(a: &[u8], b: &[u8], max_shift: usize) -> f64 {
    let h = a.len() as isize;
    let m = max_shift as isize;
    let mut best = f64::INFINITY;
    for s in -m..=m {
        let mut acc = 0.0f64;
        for i in 0..h {
            let av = a[i as usize] as f64;
            let j = i + s;
            let bv = if (0..h).contains(&j) { b[j as usize] as f64 } else { 0.0 };
            let d = av - bv;
            acc += d * d;
        }
        let dist = acc.sqrt();
        if dist < best {
            best = dist;
        }
    }
    best
}

/// DTW alignment cost between the column sequences of two binarized images.
///
/// Step set {(1,0),(0,1),(1,1)}, no band, no path normalization; the local
/// cost is [`column_cost`] with the shift window derived from `cfg`. Heights
/// must match; widths may differ.
pub fn dtw_distance(
    gen: &ImageBuffer,
    gt: &ImageBuffer,
    cfg: &DtwConfig,
) -> Result<f64, MetricError> {
    if gen.h() != gt.h() {
        return Err(MetricError::HeightMismatch { got: gen.h(), want: gt.h() });
    }
    if gen.h() == 0 || gen.w() == 0 || gt.w() == 0 {
        return Err(MetricError::EmptyImage);
    }
    let max_shift = cfg.max_shift(gen.h());
    let xs = binarize(gen, cfg.threshold);
    let ys = binarize(gt, cfg.threshold);
    dtw_aligned_cost(&xs, &ys, max_shift)
}

/// The DP core of [`dtw_distance`] on already-binarized images, with the
/// shift window given directly instead of derived from a [`DtwConfig`].
pub fn dtw_aligned_cost(
    a: &BinaryImage,
    b: &BinaryImage,
    max_shift: usize,
) -> Result<f64, MetricError> {
    if a.h() != b.h() {
        return Err(MetricError::HeightMismatch { got: a.h(), want: b.h() });
    }
    if a.h() == 0 || a.w() == 0 || b.w() == 0 {
        return Err(MetricError::EmptyImage);
    }
    let xs = a.columns();
    let ys = b.columns();
    let n = xs.len();
    let m = ys.len();

    // Rolling two-row DP over the n x m cost lattice.
    let mut prev = vec![0.0f64; m];
    let mut curr = vec![0.0f64; m];
    for i in 0..n {
        for j in 0..m {
            let c = column_cost_unchecked(&xs[i], &ys[j], max_shift);
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => curr[j - 1],
                (_, 0) => prev[0],
                _ => prev[j].min(curr[j - 1]).min(prev[j - 1]),
            };
            curr[j] = c + best;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[m - 1])
}

/// Root-mean-square pixel error on the 0-255 intensity scale.
pub fn rmse(gen: &ImageBuffer, gt: &ImageBuffer) -> Result<f64, MetricError> {
    check_same_shape(gen, gt)?;
    if gen.as_slice().is_empty() {
        return Err(MetricError::EmptyImage);
    }
    Ok(255.0 * mean_sq_diff_unit(gen, gt).sqrt())
}

fn check_same_shape(a: &ImageBuffer, b: &ImageBuffer) -> Result<(), MetricError> {
    if a.h() != b.h() || a.w() != b.w() {
        return Err(MetricError::ShapeMismatch { got: (a.h(), a.w()), want: (b.h(), b.w()) });
    }
    Ok(())
}

fn mean_sq_diff_unit(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let n = a.as_slice().len() as f64;
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n
}

pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio in dB on the 0-255 scale, capped at 100 dB so
/// identical images stay finite.
pub fn psnr(gen: &ImageBuffer, gt: &ImageBuffer) -> Result<f64, MetricError> {
    check_same_shape(gen, gt)?;
    if gen.as_slice().is_empty() {
        return Err(MetricError::EmptyImage);
    }
    let mse = mean_sq_diff_unit(gen, gt) * 255.0 * 255.0;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const DYNAMIC_RANGE: f64 = 255.0;

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5), K1=0.01,
/// K2=0.03, dynamic range 255; mean over all valid window positions.
pub fn ssim(gen: &ImageBuffer, gt: &ImageBuffer) -> Result<f64, MetricError> {
    check_same_shape(gen, gt)?;
    let (h, w) = (gen.h(), gen.w());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::WindowTooLarge { window: SSIM_WINDOW, h, w });
    }
    let x = to_f64_255(gen);
    let y = to_f64_255(gt);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();

    let kernel = gaussian_kernel_1d(SSIM_WINDOW, SSIM_SIGMA);
    let mu_x = gaussian_filter_valid(&x, h, w, &kernel);
    let mu_y = gaussian_filter_valid(&y, h, w, &kernel);
    let e_xx = gaussian_filter_valid(&xx, h, w, &kernel);
    let e_yy = gaussian_filter_valid(&yy, h, w, &kernel);
    let e_xy = gaussian_filter_valid(&xy, h, w, &kernel);

    let c1 = (SSIM_K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * DYNAMIC_RANGE).powi(2);
    let mut acc = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sx = e_xx[i] - mx * mx;
        let sy = e_yy[i] - my * my;
        let sxy = e_xy[i] - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * sxy + c2);
        let den = (mx * mx + my * my + c1) * (sx + sy + c2);
        acc += num / den;
    }
    Ok(acc / mu_x.len() as f64)
}

fn to_f64_255(img: &ImageBuffer) -> Vec<f64> {
    img.as_slice().iter().map(|&p| p as f64 * 255.0).collect()
}

fn gaussian_kernel_1d(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size - 1) as f64 / 2.0;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode correlation with a symmetric 1D kernel applied along
/// both axes; output is (h-size+1) x (w-size+1), row-major.
fn gaussian_filter_valid(img: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let size = kernel.len();
    let wo = w - size + 1;
    let ho = h - size + 1;
    // Horizontal pass: h rows of width wo.
    let mut mid = vec![0.0f64; h * wo];
    for r in 0..h {
        let row = &img[r * w..(r + 1) * w];
        for c in 0..wo {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * row[c + k];
            }
            mid[r * wo + c] = acc;
        }
    }
    // Vertical pass: ho rows.
    let mut out = vec![0.0f64; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * mid[(r + k) * wo + c];
            }
            out[r * wo + c] = acc;
        }
    }
    out
}

const BLOCK: usize = 8;

/// Universal quality index over sliding 8x8 windows (valid positions only).
pub fn uqi(gen: &ImageBuffer, gt: &ImageBuffer) -> Result<f64, MetricError> {
    check_same_shape(gen, gt)?;
    let (h, w) = (gen.h(), gen.w());
    if h < BLOCK || w < BLOCK {
        return Err(MetricError::WindowTooLarge { window: BLOCK, h, w });
    }
    let x = to_f64_255(gt);
    let y = to_f64_255(gen);
    let sx = Integral::new(&x, h, w);
    let sy = Integral::new(&y, h, w);
    let sxx = Integral::new(&prod(&x, &x), h, w);
    let syy = Integral::new(&prod(&y, &y), h, w);
    let sxy = Integral::new(&prod(&x, &y), h, w);
    let n = (BLOCK * BLOCK) as f64;
    let mut acc = 0.0;
    let mut count = 0usize;
    for r in 0..=(h - BLOCK) {
        for c in 0..=(w - BLOCK) {
            let (a, b) = (sx.block_sum(r, c, BLOCK, BLOCK), sy.block_sum(r, c, BLOCK, BLOCK));
            let aa = sxx.block_sum(r, c, BLOCK, BLOCK);
            let bb = syy.block_sum(r, c, BLOCK, BLOCK);
            let ab = sxy.block_sum(r, c, BLOCK, BLOCK);
            let sum_mul = a * b;
            let sum_sq = a * a + b * b;
            let num = 4.0 * (n * ab - sum_mul) * sum_mul;
            let den1 = n * (aa + bb) - sum_sq;
            let den = den1 * sum_sq;
            let q = if den != 0.0 {
                num / den
            } else if den1 == 0.0 && sum_sq != 0.0 {
                2.0 * sum_mul / sum_sq
            } else {
                1.0
            };
            acc += q;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

fn prod(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Summed-area table for O(1) rectangular sums.
struct Integral {
    w: usize,
    table: Vec<f64>, // (h+1) x (w+1)
}

impl Integral {
    fn new(img: &[f64], h: usize, w: usize) -> Self {
        let mut table = vec![0.0f64; (h + 1) * (w + 1)];
        for r in 0..h {
            let mut rowsum = 0.0;
            for c in 0..w {
                rowsum += img[r * w + c];
                table[(r + 1) * (w + 1) + (c + 1)] = table[r * (w + 1) + (c + 1)] + rowsum;
            }
        }
        Integral { w, table }
    }

    fn block_sum(&self, r: usize, c: usize, bh: usize, bw: usize) -> f64 {
        let stride = self.w + 1;
        self.table[(r + bh) * stride + (c + bw)] + self.table[r * stride + c]
            - self.table[r * stride + (c + bw)]
            - self.table[(r + bh) * stride + c]
    }
}

const ERGAS_SCALE: f64 = 4.0;

/// ERGAS over non-overlapping 8x8 blocks (partial edge blocks kept at their
/// actual size), scale ratio 4; blocks whose reference mean is zero
/// contribute zero.
pub fn ergas(gen: &ImageBuffer, gt: &ImageBuffer) -> Result<f64, MetricError> {
    check_same_shape(gen, gt)?;
    if gen.as_slice().is_empty() {
        return Err(MetricError::EmptyImage);
    }
    let stats = block_stats(gen, gt);
    let mut acc = 0.0;
    for b in &stats {
        if b.gt_mean != 0.0 {
            acc += 100.0 * ERGAS_SCALE * b.mse.sqrt() / b.gt_mean;
        }
    }
    Ok(acc / stats.len() as f64)
}

/// RASE over the same block decomposition: mean block RMSE scaled by
/// 100 / (mean of reference block means). An all-zero reference divides by 1
/// instead so the report stays finite.
pub fn rase(gen: &ImageBuffer, gt: &ImageBuffer) -> Result<f64, MetricError> {
    check_same_shape(gen, gt)?;
    if gen.as_slice().is_empty() {
        return Err(MetricError::EmptyImage);
    }
    let stats = block_stats(gen, gt);
    let nblk = stats.len() as f64;
    let mean_of_means: f64 = stats.iter().map(|b| b.gt_mean).sum::<f64>() / nblk;
    let mean_rmse: f64 = stats.iter().map(|b| b.mse.sqrt()).sum::<f64>() / nblk;
    let denom = if mean_of_means == 0.0 { 1.0 } else { mean_of_means };
    Ok(100.0 * mean_rmse / denom)
}

struct BlockStat {
    mse: f64,
    gt_mean: f64,
}

fn block_stats(gen: &ImageBuffer, gt: &ImageBuffer) -> Vec<BlockStat> {
    let (h, w) = (gen.h(), gen.w());
    let mut out = Vec::new();
    let mut r0 = 0;
    while r0 < h {
        let bh = BLOCK.min(h - r0);
        let mut c0 = 0;
        while c0 < w {
            let bw = BLOCK.min(w - c0);
            let mut se = 0.0f64;
            let mut gsum = 0.0f64;
            for r in r0..r0 + bh {
                for c in c0..c0 + bw {
                    let g = gen.get(r, c) as f64 * 255.0;
                    let t = gt.get(r, c) as f64 * 255.0;
                    se += (g - t) * (g - t);
                    gsum += t;
                }
            }
            let n = (bh * bw) as f64;
            out.push(BlockStat { mse: se / n, gt_mean: gsum / n });
            c0 += bw;
        }
        r0 += bh;
    }
    out
}

/// Spatial correlation coefficient: Pearson correlation of the two images
/// after a 3x3 Laplacian high-pass (valid positions). Zero high-pass variance
/// in either image yields 0.
pub fn scc(gen: &ImageBuffer, gt: &ImageBuffer) -> Result<f64, MetricError> {
    check_same_shape(gen, gt)?;
    let (h, w) = (gen.h(), gen.w());
    if h < 3 || w < 3 {
        return Err(MetricError::WindowTooLarge { window: 3, h, w });
    }
    let hx = laplacian_valid(&to_f64_255(gen), h, w);
    let hy = laplacian_valid(&to_f64_255(gt), h, w);
    let n = hx.len() as f64;
    let mx = hx.iter().sum::<f64>() / n;
    let my = hy.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..hx.len() {
        let dx = hx[i] - mx;
        let dy = hy[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// 3x3 high-pass [[-1,-1,-1],[-1,8,-1],[-1,-1,-1]], valid mode.
fn laplacian_valid(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; (h - 2) * (w - 2)];
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let mut acc = 8.0 * img[r * w + c];
            for dr in -1i32..=1 {
                for dc in -1i32..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let rr = (r as i32 + dr) as usize;
                    let cc = (c as i32 + dc) as usize;
                    acc -= img[rr * w + cc];
                }
            }
            out[(r - 1) * (w - 2) + (c - 1)] = acc;
        }
    }
    out
}

/// Per-example metric bundle; every value is finite by construction.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricReport {
    pub dtw: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub uqi: f64,
    pub ergas: f64,
    pub scc: f64,
    pub rase: f64,
}

impl MetricReport {
    pub fn compute(
        gen: &ImageBuffer,
        gt: &ImageBuffer,
        cfg: &DtwConfig,
    ) -> Result<Self, MetricError> {
        Ok(MetricReport {
            dtw: dtw_distance(gen, gt, cfg)?,
            rmse: rmse(gen, gt)?,
            ssim: ssim(gen, gt)?,
            psnr: psnr(gen, gt)?,
            uqi: uqi(gen, gt)?,
            ergas: ergas(gen, gt)?,
            scc: scc(gen, gt)?,
            rase: rase(gen, gt)?,
        })
    }

    /// Field-wise arithmetic mean; panics on an empty slice.
    pub fn mean_of(reports: &[MetricReport]) -> MetricReport {
        assert!(!reports.is_empty(), "cannot aggregate zero reports");
        let n = reports.len() as f64;
        let mut sum = [0.0f64; 8];
        for r in reports {
            for (s, v) in sum.iter_mut().zip(r.values()) {
                *s += v;
            }
        }
        MetricReport {
            dtw: sum[0] / n,
            rmse: sum[1] / n,
            ssim: sum[2] / n,
            psnr: sum[3] / n,
            uqi: sum[4] / n,
            ergas: sum[5] / n,
            scc: sum[6] / n,
            rase: sum[7] / n,
        }
    }

    pub const FIELD_NAMES: [&'static str; 8] =
        ["dtw", "rmse", "ssim", "psnr", "uqi", "ergas", "scc", "rase"];

    pub fn values(&self) -> [f64; 8] {
        [self.dtw, self.rmse, self.ssim, self.psnr, self.uqi, self.ergas, self.scc, self.rase]
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}
