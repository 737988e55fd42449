//! File formats: PPM/PGM rasters, minimal PNG encoding (for embedding
//! rasters into SVG overlays), and SVG figure emission.

pub mod image;
pub mod png;
pub mod ppm;
pub mod svg;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: {detail} at byte {offset}")]
    Malformed {
        path: String,
        detail: String,
        offset: usize,
    },
}
