use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Result};
use chrono::NaiveDate;
use clap::Subcommand;
use curare_gibs::{
    download, endpoint_from_env, search_products, BBox, DownloadConfig, DownloadRequest, GibsError,
    ProductCatalog,
};

#[derive(Subcommand)]
pub enum GibsCommand {
    /// Download every tile of a product over a date range and region.
    Download {
        #[arg(long)]
        product: String,
        #[arg(long)]
        from: NaiveDate,
        #[arg(long)]
        to: NaiveDate,
        /// `lat_min,lat_max,lon_min,lon_max` in degrees.
        #[arg(long, allow_hyphen_values = true)]
        bbox: BBox,
        #[arg(long)]
        zoom: u32,
        #[arg(long)]
        out: PathBuf,
        /// Parallel fetches.
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
        /// Retries per tile after the first attempt.
        #[arg(long, default_value_t = 3)]
        retries: u32,
        /// First retry delay; doubled on each further retry.
        #[arg(long, default_value_t = 500)]
        backoff_ms: u64,
        #[arg(long, default_value_t = 30)]
        timeout_secs: u64,
        /// Endpoint URL template; overrides the environment.
        #[arg(long)]
        endpoint: Option<String>,
        /// Product catalog JSON; the bundled snapshot when absent.
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Keyword search over product titles and descriptions.
    Search {
        keywords: Vec<String>,
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
}

fn catalog(path: Option<&PathBuf>) -> Result<ProductCatalog> {
    Ok(match path {
        Some(p) => ProductCatalog::load(p)?,
        None => ProductCatalog::bundled(),
    })
}

pub fn run(cmd: GibsCommand) -> Result<()> {
    match cmd {
        GibsCommand::Download {
            product,
            from,
            to,
            bbox,
            zoom,
            out,
            concurrency,
            retries,
            backoff_ms,
            timeout_secs,
            endpoint,
            catalog: catalog_path,
        } => {
            let catalog = catalog(catalog_path.as_ref())?;
            let Some(entry) = catalog.get(&product) else {
                return Err(GibsError::UnknownProduct(product).into());
            };
            if zoom > entry.tile_matrix_max_level {
                return Err(GibsError::Zoom {
                    zoom,
                    max: entry.tile_matrix_max_level,
                }
                .into());
            }
            if concurrency == 0 {
                bail!("concurrency must be at least 1");
            }
            let defaults = DownloadConfig::default();
            let cfg = DownloadConfig {
                endpoint: endpoint.unwrap_or_else(endpoint_from_env),
                concurrency,
                retries,
                backoff_base: Duration::from_millis(backoff_ms),
                timeout: Duration::from_secs(timeout_secs),
                extension: entry.extension().to_string(),
                matrix_set: entry.tile_matrix_set.clone().unwrap_or(defaults.matrix_set),
            };
            let req = DownloadRequest {
                product_id: product,
                date_from: from,
                date_to: to,
                bbox,
                zoom,
                out_dir: out,
            };
            let report = download(&req, &cfg)?;
            println!("fetched\t{}", report.fetched);
            println!("skipped\t{}", report.skipped);
            println!("failed\t{}", report.failed);
            println!("manifest\t{}", report.manifest_path.display());
            if report.failed > 0 {
                log::warn!(
                    "{} tiles failed; they are listed in the manifest",
                    report.failed
                );
            }
            Ok(())
        }
        GibsCommand::Search {
            keywords,
            catalog: catalog_path,
        } => {
            let catalog = catalog(catalog_path.as_ref())?;
            for p in search_products(&catalog, &keywords) {
                println!("{}\t{}", p.product_id, p.title);
            }
            Ok(())
        }
    }
}
