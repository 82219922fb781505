//! Chip thumbnails and run-length segment masks for the browser.

use anyhow::{bail, Result};
use image::imageops::{resize, FilterType};
use image::{ImageFormat, RgbImage};
use serde::Serialize;

use terralabel::ingest::Chip;
use terralabel::superpixels::SegmentMap;

pub const THUMBNAIL_SIZE: u32 = 256;
/// 1-based band numbers shown as red, green, blue.
pub const DEFAULT_BANDS: [usize; 3] = [4, 3, 2];

/// Linear-interpolated percentile of sorted values, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f32], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let frac = pos - lo as f64;
    sorted[lo] as f64 * (1.0 - frac) + sorted[hi] as f64 * frac
}

/// Map the 2nd and 98th percentiles to 0 and 255, clamping outside. A
/// band with no spread becomes mid grey.
pub fn stretch(plane: &[f32]) -> Vec<u8> {
    let mut sorted: Vec<f32> = plane.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(f32::total_cmp);
    let (lo, hi) = (percentile(&sorted, 0.02), percentile(&sorted, 0.98));
    if hi <= lo {
        return vec![128; plane.len()];
    }
    plane
        .iter()
        .map(|&v| {
            let t = ((v as f64 - lo) / (hi - lo) * 255.0).round();
            if t.is_nan() {
                0
            } else {
                t.clamp(0.0, 255.0) as u8
            }
        })
        .collect()
}

/// RGB composite of three 1-based bands, stretched per band and resampled
/// (nearest neighbour) to 256×256.
pub fn thumbnail(chip: &Chip, bands: [usize; 3]) -> Result<Vec<u8>> {
    let pick = |b: usize| -> Result<usize> {
        if chip.bands < 3 {
            return Ok(0);
        }
        if b == 0 || b > chip.bands {
            bail!("band {b} out of range for a {}-band chip", chip.bands);
        }
        Ok(b - 1)
    };
    let planes = bands.iter().map(|&b| Ok(stretch(chip.plane(pick(b)?)))).collect::<Result<Vec<_>>>()?;
    let n = chip.size * chip.size;
    let rgb: Vec<u8> = (0..n).flat_map(|p| [planes[0][p], planes[1][p], planes[2][p]]).collect();
    let mut img = RgbImage::from_raw(chip.size as u32, chip.size as u32, rgb).expect("buffer matches chip");
    if chip.size as u32 != THUMBNAIL_SIZE {
        img = resize(&img, THUMBNAIL_SIZE, THUMBNAIL_SIZE, FilterType::Nearest);
    }
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentRle {
    pub id: usize,
    pub pixel_count: usize,
    /// `[row, col]`.
    pub centroid: [f64; 2],
    /// `[row0, col0, row1, col1]`, end-exclusive.
    pub bbox: [usize; 4],
    /// `[start, length]` runs over row-major pixel indices.
    pub runs: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentMasks {
    pub chip_id: String,
    pub height: usize,
    pub width: usize,
    pub segments: Vec<SegmentRle>,
}

pub fn segment_masks(chip_id: &str, seg: &SegmentMap) -> SegmentMasks {
    let mut runs: Vec<Vec<[usize; 2]>> = vec![Vec::new(); seg.len()];
    let mut start = 0;
    for p in 1..=seg.labels.len() {
        if p == seg.labels.len() || seg.labels[p] != seg.labels[start] {
            runs[seg.labels[start] as usize].push([start, p - start]);
            start = p;
        }
    }
    SegmentMasks {
        chip_id: chip_id.to_string(),
        height: seg.height,
        width: seg.width,
        segments: seg
            .segments
            .iter()
            .zip(runs)
            .map(|(s, runs)| SegmentRle {
                id: s.id as usize,
                pixel_count: s.pixel_count,
                centroid: s.centroid_rc,
                bbox: s.bbox,
                runs,
            })
            .collect(),
    }
}
