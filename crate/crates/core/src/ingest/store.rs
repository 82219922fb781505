use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::chip::{chip_tile, decode_raster, encode_raster, normalize, Chip, NormStats, Split, CHIP_SIZE};
use super::tile::Tile;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileEntry {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub pixel_size_m: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tiles: Vec<TileEntry>,
    pub chip_size: usize,
    pub bands: usize,
    /// Chip id → split. Ids sort in tile, row, column order.
    pub splits: BTreeMap<String, Split>,
    pub norm: NormStats,
}

/// On-disk chip container shared by every pipeline stage.
///
/// ```text
/// <root>/manifest.json
/// <root>/chips/<chip id>.chip
/// ```
/// Later stages write their artifacts under the same root.
#[derive(Clone, Debug)]
pub struct ChipStore {
    root: PathBuf,
    manifest: Manifest,
}

const MANIFEST: &str = "manifest.json";

impl ChipStore {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("chips"))?;
        let store = Self {
            root,
            manifest: Manifest {
                tiles: Vec::new(),
                chip_size: CHIP_SIZE,
                bands: 0,
                splits: BTreeMap::new(),
                norm: NormStats::identity(0),
            },
        };
        store.save_manifest()?;
        Ok(store)
    }

    /// Open an existing store, or create an empty one if `root` has no manifest.
    pub fn open_or_create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if root.join(MANIFEST).exists() {
            Self::open(root)
        } else {
            Self::create(root)
        }
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join(MANIFEST);
        if !path.exists() {
            return Err(Error::Missing(path));
        }
        let manifest = serde_json::from_slice(&fs::read(&path)?)?;
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn path(&self, relative: impl AsRef<Path>) -> PathBuf {
        self.root.join(relative)
    }

    fn chip_path(&self, id: &str) -> PathBuf {
        self.root.join("chips").join(format!("{id}.chip"))
    }

    fn save_manifest(&self) -> Result<()> {
        let tmp = self.root.join("manifest.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&self.manifest)?)?;
        fs::rename(tmp, self.root.join(MANIFEST))?;
        Ok(())
    }

    /// Chip a tile into the store and refresh normalisation statistics.
    pub fn add_tile(&mut self, tile: &Tile, size: usize) -> Result<Vec<String>> {
        if self.manifest.tiles.iter().any(|t| t.id == tile.id) {
            return Err(Error::invalid(format!("tile {} already ingested", tile.id)));
        }
        if !self.manifest.splits.is_empty() && (self.manifest.bands != tile.bands || self.manifest.chip_size != size) {
            return Err(Error::invalid("tile band count or chip size differs from store"));
        }
        let chips = chip_tile(tile, size)?;
        chips.par_iter().try_for_each(|c| -> Result<()> {
            fs::write(self.chip_path(&c.id), encode_raster(c.bands, c.size, c.size, &c.data)?)?;
            Ok(())
        })?;
        let (grid_rows, grid_cols) = (tile.height / size, tile.width / size);
        self.manifest.tiles.push(TileEntry {
            id: tile.id.clone(),
            height: tile.height,
            width: tile.width,
            grid_rows,
            grid_cols,
            pixel_size_m: tile.pixel_size_m,
        });
        self.manifest.chip_size = size;
        self.manifest.bands = tile.bands;
        for c in &chips {
            self.manifest.splits.insert(c.id.clone(), c.split);
        }
        self.refresh_norm()?;
        Ok(chips.into_iter().map(|c| c.id).collect())
    }

    /// Recompute split assignment per tile and normalisation statistics.
    pub fn resplit(&mut self) -> Result<()> {
        let splits = self.manifest.splits.keys().cloned().collect::<Vec<_>>();
        for tile in &self.manifest.tiles {
            let prefix = format!("{}_r", tile.id);
            let ids: Vec<&String> = splits.iter().filter(|id| id.starts_with(&prefix)).collect();
            for (i, id) in ids.into_iter().enumerate() {
                let split = if i % 4 == 3 { Split::Test } else { Split::Train };
                self.manifest.splits.insert(id.clone(), split);
            }
        }
        self.refresh_norm()
    }

    fn refresh_norm(&mut self) -> Result<()> {
        let train = self.ids_in(Split::Train);
        let chips = train.iter().map(|id| self.read_chip(id)).collect::<Result<Vec<_>>>()?;
        self.manifest.norm = NormStats::from_training(&chips)?;
        self.save_manifest()
    }

    pub fn chip_ids(&self) -> Vec<String> {
        self.manifest.splits.keys().cloned().collect()
    }

    pub fn ids_in(&self, split: Split) -> Vec<String> {
        self.manifest
            .splits
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.manifest.splits.get(id).copied()
    }

    pub fn read_chip(&self, id: &str) -> Result<Chip> {
        let split = self
            .split_of(id)
            .ok_or_else(|| Error::invalid(format!("unknown chip {id}")))?;
        let path = self.chip_path(id);
        if !path.exists() {
            return Err(Error::Missing(path));
        }
        let (bands, h, w, data) = decode_raster(&fs::read(path)?)?;
        if h != w {
            return Err(Error::format("CHIP", "chip is not square"));
        }
        let (tile_id, grid_row, grid_col) = parse_chip_id(id).unwrap_or_default();
        Ok(Chip {
            id: id.to_owned(),
            tile_id,
            grid_row,
            grid_col,
            size: h,
            bands,
            data,
            split,
        })
    }

    pub fn read_normalized(&self, id: &str) -> Result<Chip> {
        Ok(normalize(&self.read_chip(id)?, &self.manifest.norm))
    }

    /// Check that every manifest chip has a file and no stray files exist.
    pub fn verify(&self) -> Result<()> {
        let on_disk = fs::read_dir(self.root.join("chips"))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "chip"))
            .count();
        if on_disk != self.manifest.splits.len() {
            return Err(Error::format(
                "store",
                format!("{} chips in manifest, {on_disk} on disk", self.manifest.splits.len()),
            ));
        }
        for id in self.manifest.splits.keys() {
            if !self.chip_path(id).exists() {
                return Err(Error::Missing(self.chip_path(id)));
            }
        }
        Ok(())
    }
}

pub fn parse_chip_id(id: &str) -> Option<(String, usize, usize)> {
    let (rest, col) = id.rsplit_once("_c")?;
    let (tile, row) = rest.rsplit_once("_r")?;
    Some((tile.to_owned(), row.parse().ok()?, col.parse().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(id: &str, h: usize, w: usize) -> Tile {
        let data = (0..2 * h * w).map(|i| (i as f32 * 0.37).sin()).collect();
        Tile::new(id, 2, h, w, data).unwrap()
    }

    #[test]
    fn store_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ChipStore::create(dir.path()).unwrap();
        let t = tile("a", 70, 50);
        let ids = store.add_tile(&t, 16).unwrap();
        assert_eq!(ids.len(), 4 * 3);
        let reopened = ChipStore::open(dir.path()).unwrap();
        reopened.verify().unwrap();
        let chips = chip_tile(&t, 16).unwrap();
        for c in &chips {
            assert_eq!(&reopened.read_chip(&c.id).unwrap(), c);
        }
        assert_eq!(reopened.ids_in(Split::Test).len(), 3);
    }

    #[test]
    fn verify_detects_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ChipStore::create(dir.path()).unwrap();
        let ids = store.add_tile(&tile("a", 32, 32), 16).unwrap();
        fs::remove_file(dir.path().join("chips").join(format!("{}.chip", ids[0]))).unwrap();
        assert!(store.verify().is_err());
    }

    #[test]
    fn resplit_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ChipStore::create(dir.path()).unwrap();
        store.add_tile(&tile("a", 48, 48), 16).unwrap();
        let before = store.manifest().clone();
        store.resplit().unwrap();
        assert_eq!(&before, store.manifest());
    }

    #[test]
    fn chip_id_parsing() {
        assert_eq!(parse_chip_id("S2_x_r004_c017"), Some(("S2_x".into(), 4, 17)));
        assert_eq!(parse_chip_id("nope"), None);
    }
}
