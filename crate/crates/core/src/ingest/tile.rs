use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A full multi-band acquisition, stored `[band][row][col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub id: String,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub pixel_size_m: f32,
    pub data: Vec<f32>,
}

/// Sidecar describing a band-interleaved `.bin` raster.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TileHeader {
    pub id: String,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_pixel_size")]
    pub pixel_size_m: f32,
}

fn default_pixel_size() -> f32 {
    10.0
}

impl Tile {
    pub fn new(id: impl Into<String>, bands: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if bands == 0 {
            return Err(Error::invalid("tile needs at least one band"));
        }
        if data.len() != bands * height * width {
            return Err(Error::Shape {
                op: "tile",
                lhs: vec![bands, height, width],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            id: id.into(),
            bands,
            height,
            width,
            pixel_size_m: 10.0,
            data,
        })
    }

    pub fn plane(&self, band: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[band * n..(band + 1) * n]
    }

    pub fn pixel(&self, row: usize, col: usize) -> Vec<f32> {
        let n = self.height * self.width;
        (0..self.bands).map(|b| self.data[b * n + row * self.width + col]).collect()
    }

    pub fn header(&self) -> TileHeader {
        TileHeader {
            id: self.id.clone(),
            bands: self.bands,
            height: self.height,
            width: self.width,
            pixel_size_m: self.pixel_size_m,
        }
    }

    /// Read a raw little-endian `f32` raster with its `.json` sidecar. The
    /// sidecar path is the raster path with its extension replaced.
    ///
    /// Geospatial formats are not parsed here; convert them externally
    /// (e.g. `gdal_translate -of ENVI -ot Float32 -co INTERLEAVE=BSQ`) and
    /// write the sidecar by hand.
    pub fn read_raw(path: &Path) -> Result<Self> {
        let sidecar = path.with_extension("json");
        if !sidecar.exists() {
            return Err(Error::Missing(sidecar));
        }
        let header: TileHeader = serde_json::from_slice(&fs::read(&sidecar)?)?;
        let bytes = fs::read(path)?;
        let expected = header.bands * header.height * header.width * 4;
        if bytes.len() != expected {
            return Err(Error::format(
                "tile",
                format!("{} bytes on disk, header implies {expected}", bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut tile = Tile::new(header.id, header.bands, header.height, header.width, data)?;
        tile.pixel_size_m = header.pixel_size_m;
        Ok(tile)
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes)?;
        fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&self.header())?)?;
        Ok(())
    }

    /// Read a directory of single-band greyscale PNGs (8 or 16 bit), one per
    /// band, ordered by file name.
    pub fn read_png_stack(dir: &Path, id: impl Into<String>) -> Result<Self> {
        let mut files: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::invalid(format!("no PNG bands in {}", dir.display())));
        }
        let mut data = Vec::new();
        let mut dims = None;
        for f in &files {
            let img = image::open(f)
                .map_err(|e| Error::format("png", format!("{}: {e}", f.display())))?
                .into_luma16();
            let d = (img.height() as usize, img.width() as usize);
            if *dims.get_or_insert(d) != d {
                return Err(Error::format("png", format!("{} has mismatched size", f.display())));
            }
            data.extend(img.into_raw().into_iter().map(f32::from));
        }
        let (h, w) = dims.unwrap();
        Tile::new(id, files.len(), h, w, data)
    }
}
