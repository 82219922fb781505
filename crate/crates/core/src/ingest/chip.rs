use serde::{Deserialize, Serialize};

use super::tile::Tile;
use crate::error::{Error, Result};

pub const CHIP_SIZE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Square window of a tile, `[band][row][col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Chip {
    pub id: String,
    pub tile_id: String,
    pub grid_row: usize,
    pub grid_col: usize,
    pub size: usize,
    pub bands: usize,
    pub data: Vec<f32>,
    pub split: Split,
}

impl Chip {
    /// Standalone chip not cut from a tile.
    pub fn from_data(id: impl Into<String>, bands: usize, size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != bands * size * size {
            return Err(Error::Shape {
                op: "chip",
                lhs: vec![bands, size, size],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            id: id.into(),
            tile_id: String::new(),
            grid_row: 0,
            grid_col: 0,
            size,
            bands,
            data,
            split: Split::Train,
        })
    }

    pub fn plane(&self, band: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.data[band * n..(band + 1) * n]
    }

    pub fn pixels(&self) -> usize {
        self.size * self.size
    }

    /// Copy rotated 90° counter-clockwise `quarter_turns` times.
    pub fn rotated(&self, quarter_turns: usize) -> Chip {
        let mut out = self.clone();
        out.data = rotate_planes(&self.data, self.bands, self.size, quarter_turns);
        out
    }
}

/// Red, green and blue band indices for display (bands 4, 3, 2 of a
/// 12-band stack); single-band rasters show band 0.
pub fn display_bands(bands: usize) -> Vec<usize> {
    if bands >= 4 {
        vec![3, 2, 1]
    } else {
        vec![0]
    }
}

/// Mean of the display bands per pixel.
pub fn grey_plane(chip: &Chip) -> Vec<f64> {
    let idx = display_bands(chip.bands);
    let mut out = vec![0.0; chip.pixels()];
    for &b in &idx {
        for (o, &v) in out.iter_mut().zip(chip.plane(b)) {
            *o += v as f64 / idx.len() as f64;
        }
    }
    out
}

pub fn chip_id(tile_id: &str, row: usize, col: usize) -> String {
    format!("{tile_id}_r{row:03}_c{col:03}")
}

/// Number of whole `size`-pixel windows along each axis.
pub fn chip_grid(height: usize, width: usize, size: usize) -> Result<(usize, usize)> {
    if size == 0 || height < size || width < size {
        return Err(Error::invalid(format!(
            "tile {height}×{width} is smaller than one {size}×{size} chip"
        )));
    }
    Ok((height / size, width / size))
}

/// Cut a tile into non-overlapping chips in row-major grid order. Pixels
/// beyond the last whole window on each axis are discarded.
pub fn chip_tile(tile: &Tile, size: usize) -> Result<Vec<Chip>> {
    let (rows, cols) = chip_grid(tile.height, tile.width, size)?;
    let mut chips = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut data = Vec::with_capacity(tile.bands * size * size);
            for b in 0..tile.bands {
                let plane = tile.plane(b);
                for y in r * size..(r + 1) * size {
                    let start = y * tile.width + c * size;
                    data.extend_from_slice(&plane[start..start + size]);
                }
            }
            chips.push(Chip {
                id: chip_id(&tile.id, r, c),
                tile_id: tile.id.clone(),
                grid_row: r,
                grid_col: c,
                size,
                bands: tile.bands,
                data,
                split: Split::Train,
            });
        }
    }
    let assignment = split_assignments(chips.len());
    for (chip, split) in chips.iter_mut().zip(assignment) {
        chip.split = split;
    }
    Ok(chips)
}

/// Every fourth chip in row-major order (ordinal ≡ 3 mod 4) is held out.
pub fn split_assignments(count: usize) -> Vec<Split> {
    (0..count)
        .map(|i| if i % 4 == 3 { Split::Test } else { Split::Train })
        .collect()
}

pub fn split_chips(chips: &mut [Chip]) {
    let assignment = split_assignments(chips.len());
    for (chip, split) in chips.iter_mut().zip(assignment) {
        chip.split = split;
    }
}

/// Per-band z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

pub const STD_FLOOR: f32 = 1e-6;

impl NormStats {
    pub fn identity(bands: usize) -> Self {
        Self {
            mean: vec![0.0; bands],
            std: vec![1.0; bands],
        }
    }

    /// Moments over the training chips only.
    pub fn from_training<'a>(chips: impl IntoIterator<Item = &'a Chip>) -> Result<Self> {
        let mut acc: Option<(Vec<f64>, Vec<f64>, usize)> = None;
        for chip in chips.into_iter().filter(|c| c.split == Split::Train) {
            let (sum, sq, n) = acc.get_or_insert_with(|| (vec![0.0; chip.bands], vec![0.0; chip.bands], 0));
            if sum.len() != chip.bands {
                return Err(Error::invalid("chips disagree on band count"));
            }
            for b in 0..chip.bands {
                for &v in chip.plane(b) {
                    sum[b] += v as f64;
                    sq[b] += (v as f64) * (v as f64);
                }
            }
            *n += chip.pixels();
        }
        let (sum, sq, n) = acc.ok_or_else(|| Error::invalid("no training chips"))?;
        let n = n as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| ((q / n - (s / n).powi(2)).max(0.0).sqrt() as f32).max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }
}

pub fn normalize(chip: &Chip, stats: &NormStats) -> Chip {
    let mut out = chip.clone();
    let n = chip.pixels();
    for b in 0..chip.bands {
        let (m, s) = (stats.mean[b], stats.std[b].max(STD_FLOOR));
        for v in &mut out.data[b * n..(b + 1) * n] {
            *v = (*v - m) / s;
        }
    }
    out
}

/// Rotate each `size×size` plane 90° counter-clockwise `k` times.
pub fn rotate_planes<T: Copy>(data: &[T], planes: usize, size: usize, k: usize) -> Vec<T> {
    let n = size * size;
    let mut out = data.to_vec();
    for p in 0..planes {
        let src = &data[p * n..(p + 1) * n];
        let dst = &mut out[p * n..(p + 1) * n];
        for r in 0..size {
            for c in 0..size {
                let (nr, nc) = rotate_index(r, c, size, k);
                dst[nr * size + nc] = src[r * size + c];
            }
        }
    }
    out
}

/// Where pixel `(r, c)` lands after `k` counter-clockwise quarter turns.
pub fn rotate_index(r: usize, c: usize, size: usize, k: usize) -> (usize, usize) {
    match k % 4 {
        0 => (r, c),
        1 => (size - 1 - c, r),
        2 => (size - 1 - r, size - 1 - c),
        _ => (c, size - 1 - r),
    }
}

pub const CHIP_MAGIC: &[u8; 4] = b"CHIP";
pub const CHIP_VERSION: u16 = 1;

/// `CHIP` file: magic, `u16` version, `u16` bands, `u16` height, `u16` width,
/// then little-endian `f32` samples in `[band][row][col]` order.
pub fn encode_raster(bands: usize, height: usize, width: usize, data: &[f32]) -> Result<Vec<u8>> {
    let dim = |v: usize| u16::try_from(v).map_err(|_| Error::invalid(format!("dimension {v} exceeds u16")));
    let mut out = Vec::with_capacity(12 + data.len() * 4);
    out.extend_from_slice(CHIP_MAGIC);
    out.extend_from_slice(&CHIP_VERSION.to_le_bytes());
    out.extend_from_slice(&dim(bands)?.to_le_bytes());
    out.extend_from_slice(&dim(height)?.to_le_bytes());
    out.extend_from_slice(&dim(width)?.to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Inverse of [`encode_raster`]: `(bands, height, width, data)`.
pub fn decode_raster(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    if bytes.len() < 12 || &bytes[..4] != CHIP_MAGIC {
        return Err(Error::format("CHIP", "bad magic or short header"));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
    if u16_at(4) != CHIP_VERSION as usize {
        return Err(Error::format("CHIP", format!("unsupported version {}", u16_at(4))));
    }
    let (bands, h, w) = (u16_at(6), u16_at(8), u16_at(10));
    let payload = &bytes[12..];
    if payload.len() != bands * h * w * 4 {
        return Err(Error::format(
            "CHIP",
            format!("payload {} bytes, header implies {}", payload.len(), bands * h * w * 4),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((bands, h, w, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_tile(bands: usize, h: usize, w: usize) -> Tile {
        let data = (0..bands * h * w).map(|i| i as f32).collect();
        Tile::new("t", bands, h, w, data).unwrap()
    }

    #[test]
    fn single_chip_tile_is_identity() {
        let tile = ramp_tile(2, 256, 256);
        let chips = chip_tile(&tile, 256).unwrap();
        assert_eq!(chips.len(), 1);
        assert_eq!(chips[0].data, tile.data);
    }

    #[test]
    fn remainder_is_discarded() {
        let tile = ramp_tile(1, 600, 300);
        let chips = chip_tile(&tile, 256).unwrap();
        assert_eq!(chips.len(), 2);
        assert_eq!((chips[1].grid_row, chips[1].grid_col), (1, 0));
        // second chip starts at row 256 column 0
        assert_eq!(chips[1].data[0], (256 * 300) as f32);
        assert_eq!(chips[1].data[255 * 256 + 255], (511 * 300 + 255) as f32);
    }

    #[test]
    fn too_small_tile_errors() {
        assert!(chip_tile(&ramp_tile(1, 255, 512), 256).is_err());
    }

    #[test]
    fn split_every_fourth() {
        assert_eq!(split_assignments(4), vec![Split::Train, Split::Train, Split::Train, Split::Test]);
        let ten = split_assignments(10);
        let test: Vec<_> = (0..10).filter(|&i| ten[i] == Split::Test).collect();
        assert_eq!(test, vec![3, 7]);
        let big = split_assignments(1764);
        assert_eq!(big.iter().filter(|s| **s == Split::Test).count(), 441);
    }

    #[test]
    fn normalization_edge_cases() {
        let constant = Chip::from_data("c", 1, 4, vec![5.0; 16]).unwrap();
        let stats = NormStats::from_training([&constant]).unwrap();
        assert!(normalize(&constant, &stats).data.iter().all(|&v| v == 0.0));

        let stats = NormStats {
            mean: vec![2.0],
            std: vec![0.5],
        };
        let chip = Chip::from_data("c", 1, 1, vec![2.5]).unwrap();
        assert_eq!(normalize(&chip, &stats).data, vec![1.0]);
        let chip = Chip::from_data("c", 1, 1, vec![1.5]).unwrap();
        assert_eq!(normalize(&chip, &stats).data, vec![-1.0]);
    }

    #[test]
    fn stats_ignore_test_chips() {
        let train = Chip::from_data("a", 1, 2, vec![1.0, 1.0, 3.0, 3.0]).unwrap();
        let mut test = Chip::from_data("b", 1, 2, vec![100.0; 4]).unwrap();
        test.split = Split::Test;
        let stats = NormStats::from_training([&train, &test]).unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.std, vec![1.0]);
    }

    #[test]
    fn four_rotations_are_identity() {
        let data: Vec<u32> = (0..2 * 25).collect();
        let once = rotate_planes(&data, 2, 5, 1);
        assert_ne!(once, data);
        assert_eq!(rotate_planes(&rotate_planes(&once, 2, 5, 2), 2, 5, 1), data);
        // counter-clockwise: top-right corner moves to top-left
        assert_eq!(once[0], data[4]);
    }

    #[test]
    fn chip_file_header() {
        let bytes = encode_raster(2, 3, 1, &[0.0; 6]).unwrap();
        assert_eq!(&bytes[..4], b"CHIP");
        assert_eq!(bytes.len(), 12 + 24);
        assert!(decode_raster(&bytes[..20]).is_err());
    }
}
