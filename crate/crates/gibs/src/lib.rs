//! Product catalog search, the geographic tile grid and bounded-parallel
//! tile downloads.

mod catalog;
mod download;
mod grid;
#[cfg(feature = "mock-server")]
pub mod mock;

pub use catalog::{search_products, Product, ProductCatalog};
pub use download::{
    default_endpoint, download, endpoint_from_env, read_manifest, tile_path, DownloadConfig,
    DownloadReport, DownloadRequest, ManifestRow, TileStatus, DEFAULT_ENDPOINT, ENDPOINT_ENV,
    MANIFEST_NAME,
};
pub use grid::{bbox_to_tiles, grid_size, tile_bounds, tile_of_point, BBox, TileId, MAX_ZOOM};

#[derive(Debug, thiserror::Error)]
pub enum GibsError {
    #[error("invalid bounding box: {0}")]
    BBox(String),
    #[error("zoom {zoom} exceeds the maximum of {max}")]
    Zoom { zoom: u32, max: u32 },
    #[error("catalog: {0}")]
    Catalog(String),
    #[error("unknown product {0:?}")]
    UnknownProduct(String),
    #[error("invalid request: {0}")]
    Request(String),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("all {0} tiles failed; see manifest for details")]
    AllFailed(usize),
    #[error("http client: {0}")]
    Client(#[from] reqwest::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
