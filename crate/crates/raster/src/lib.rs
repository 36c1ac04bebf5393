//! RGB raster preprocessing: gap detection and filling, temporal cloud
//! compositing, grid tiling and multi-resolution bucket voting.

mod io;
mod mask;
mod ops;
mod vote;

pub use io::{read_image, read_pbm, read_ppm, write_image, write_pbm, write_ppm};
pub use mask::GapMask;
pub use ops::{
    cloud_composite, cloud_mask, detect_gaps, detect_gaps_with, fill_swath, luminance_milli,
    tile_grid, FillStrategy, GridTile, DEFAULT_MIN_GAP_AREA, DEFAULT_TAU,
};
pub use vote::{multires_search, multires_search_by, Vote};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("pixel buffer has {actual} bytes, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error("tile must have positive width and height")]
    EmptyTile,
    #[error("dimensions {0}x{1} do not match {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("compositing needs at least 2 tiles, got {0}")]
    StackTooSmall(usize),
    #[error("every pixel is masked; nothing to copy from")]
    NoSourcePixels,
    #[error("patch size must be positive")]
    ZeroPatch,
    #[error("patch {patch} exceeds image {width}x{height}")]
    PatchTooLarge {
        patch: usize,
        width: usize,
        height: usize,
    },
    #[error("no patch sizes given")]
    NoPatchSizes,
    #[error("malformed {format} data: {reason}")]
    Format {
        format: &'static str,
        reason: String,
    },
    #[error(transparent)]
    Index(#[from] curare_core::index::IndexError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterTile {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    /// RGB value marking missing data.
    pub gap_sentinel: [u8; 3],
}

impl RasterTile {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyTile);
        }
        if pixels.len() != width * height * 3 {
            return Err(RasterError::BufferSize {
                expected: width * height * 3,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
            gap_sentinel: [0, 0, 0],
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self, RasterError> {
        Self::new(width, height, rgb.repeat(width * height))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copy of the `w x h` window at `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self, RasterError> {
        if x + w > self.width || y + h > self.height {
            return Err(RasterError::DimensionMismatch(
                x + w,
                y + h,
                self.width,
                self.height,
            ));
        }
        let mut out = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            out.extend_from_slice(&self.pixels[start..start + w * 3]);
        }
        let mut tile = Self::new(w, h, out)?;
        tile.gap_sentinel = self.gap_sentinel;
        Ok(tile)
    }

    fn same_shape(&self, other: &Self) -> Result<(), RasterError> {
        if self.width != other.width || self.height != other.height {
            return Err(RasterError::DimensionMismatch(
                other.width,
                other.height,
                self.width,
                self.height,
            ));
        }
        Ok(())
    }
}
