//! Synthetic multi-band tiles with known material regions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{chip_id, Tile};

/// Reflectance-like 12-band signatures: water, vegetation, bare soil, built-up.
const SIGNATURES: [[f32; 12]; 4] = [
    [0.09, 0.08, 0.06, 0.04, 0.03, 0.02, 0.015, 0.012, 0.01, 0.008, 0.005, 0.003],
    [0.03, 0.04, 0.07, 0.04, 0.12, 0.30, 0.38, 0.42, 0.43, 0.40, 0.22, 0.11],
    [0.10, 0.12, 0.15, 0.19, 0.22, 0.25, 0.27, 0.29, 0.30, 0.31, 0.34, 0.30],
    [0.20, 0.21, 0.22, 0.23, 0.23, 0.24, 0.24, 0.25, 0.25, 0.25, 0.26, 0.24],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub size: usize,
    pub bands: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            size: 1024,
            bands: 12,
            seed: 0,
        }
    }
}

pub const MATERIALS: usize = 4;

#[derive(Clone, Debug)]
pub struct SyntheticTile {
    pub tile: Tile,
    /// Ground-truth material per pixel, row-major.
    pub materials: Vec<u8>,
}

/// Smooth random field: bilinear interpolation of a coarse Gaussian grid.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: usize) -> Vec<f32> {
    let g = size / cell + 2;
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let grid: Vec<f32> = (0..g * g).map(|_| normal.sample(rng)).collect();
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        let (fy, gy) = ((r % cell) as f32 / cell as f32, r / cell);
        for c in 0..size {
            let (fx, gx) = ((c % cell) as f32 / cell as f32, c / cell);
            let v = |y: usize, x: usize| grid[y * g + x];
            let top = v(gy, gx) * (1.0 - fx) + v(gy, gx + 1) * fx;
            let bottom = v(gy + 1, gx) * (1.0 - fx) + v(gy + 1, gx + 1) * fx;
            out[r * size + c] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Four material regions around jittered quadrant centres with wavy
/// borders, each with its own spectrum and texture, plus sensor noise.
pub fn synthetic_tile(cfg: &SyntheticConfig) -> Result<SyntheticTile> {
    let (n, bands) = (cfg.size, cfg.bands);
    if n < 16 || bands == 0 || bands > 12 {
        return Err(Error::invalid(format!("synthetic tile needs size ≥ 16 and 1..=12 bands, got {n}, {bands}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let q = n as f64 / 4.0;
    let jitter = q / 4.0;
    let seeds: Vec<[f64; 2]> = [[q, q], [q, 3.0 * q], [3.0 * q, q], [3.0 * q, 3.0 * q]]
        .iter()
        .map(|s| [s[0] + rng.random_range(-jitter..jitter), s[1] + rng.random_range(-jitter..jitter)])
        .collect();
    let mut order: Vec<u8> = (0..MATERIALS as u8).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let (phase_a, phase_b) = (rng.random_range(0.0..6.28), rng.random_range(0.0..6.28));
    let amp = n as f64 / 25.0;
    let mut materials = vec![0u8; n * n];
    for r in 0..n {
        for c in 0..n {
            let y = r as f64 + amp * (c as f64 / (n as f64 / 10.0) + phase_a).sin();
            let x = c as f64 + amp * (r as f64 / (n as f64 / 8.0) + phase_b).sin();
            let nearest = (0..seeds.len())
                .min_by(|&i, &j| {
                    let di = (seeds[i][0] - y).powi(2) + (seeds[i][1] - x).powi(2);
                    let dj = (seeds[j][0] - y).powi(2) + (seeds[j][1] - x).powi(2);
                    di.total_cmp(&dj)
                })
                .unwrap();
            materials[r * n + c] = order[nearest];
        }
    }
    let smooth = value_noise(&mut rng, n, 32);
    let blobs = value_noise(&mut rng, n, 12);
    let texture = |m: u8, r: usize, c: usize| -> f32 {
        let p = r * n + c;
        match m {
            0 => 0.05 * smooth[p],
            1 => 0.15 * ((c as f32 / 3.0).sin() * (r as f32 / 40.0).cos()),
            2 => 0.12 * blobs[p],
            _ => {
                if (r / 10 + c / 10) % 2 == 0 {
                    0.2
                } else {
                    -0.2
                }
            }
        }
    };
    let noise = Normal::new(0.0f32, 0.004).unwrap();
    let mut data = vec![0.0f32; bands * n * n];
    for r in 0..n {
        for c in 0..n {
            let m = materials[r * n + c];
            let t = texture(m, r, c);
            for b in 0..bands {
                let v = SIGNATURES[m as usize][b] * (1.0 + t) + noise.sample(&mut rng);
                data[b * n * n + r * n + c] = v.max(0.0);
            }
        }
    }
    let tile = Tile::new(format!("synthetic{}", cfg.seed), bands, n, n, data)?;
    Ok(SyntheticTile { tile, materials })
}

impl SyntheticTile {
    /// Majority material in a square window; ties go to the lower material.
    pub fn dominant_material(&self, row0: usize, col0: usize, size: usize) -> usize {
        let mut counts = [0usize; MATERIALS];
        for r in row0..row0 + size {
            for c in col0..col0 + size {
                counts[self.materials[r * self.tile.width + c] as usize] += 1;
            }
        }
        (0..MATERIALS).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap()
    }

    /// Dominant material of every chip, keyed by chip id.
    pub fn chip_materials(&self, chip_size: usize) -> Vec<(String, usize)> {
        let (rows, cols) = (self.tile.height / chip_size, self.tile.width / chip_size);
        (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .map(|(r, c)| {
                (
                    chip_id(&self.tile.id, r, c),
                    self.dominant_material(r * chip_size, c * chip_size, chip_size),
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regions_and_determinism() {
        let cfg = SyntheticConfig { size: 128, bands: 12, seed: 3 };
        let a = synthetic_tile(&cfg).unwrap();
        let b = synthetic_tile(&cfg).unwrap();
        assert_eq!(a.tile.data, b.tile.data);
        let mut counts = [0usize; MATERIALS];
        for &m in &a.materials {
            counts[m as usize] += 1;
        }
        for c in counts {
            assert!(c > 128 * 128 / 10, "{counts:?}");
        }
        let chips = a.chip_materials(32);
        assert_eq!(chips.len(), 16);
        assert!(a.tile.data.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}
