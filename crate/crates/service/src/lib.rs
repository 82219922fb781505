//! Pipeline driver and HTTP labelling service over a chip store.

pub mod artifacts;
pub mod commands;
pub mod labels;
pub mod render;
pub mod server;
