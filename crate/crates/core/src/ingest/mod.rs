//! Tile loading, chipping, train/test split and the on-disk chip store.

mod chip;
mod store;
mod tile;

pub use chip::{
    chip_grid, chip_id, chip_tile, decode_raster, display_bands, encode_raster, grey_plane, normalize, rotate_index, rotate_planes,
    split_assignments, split_chips, Chip, NormStats, Split, CHIP_SIZE, STD_FLOOR,
};
pub use store::{parse_chip_id, ChipStore, Manifest, TileEntry};
pub use tile::{Tile, TileHeader};
