use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Subcommand;
use curare_raster::{
    cloud_composite, cloud_mask, detect_gaps_with, fill_swath, read_image, read_pbm, tile_grid,
    write_image, write_pbm, FillStrategy, GapMask, DEFAULT_MIN_GAP_AREA, DEFAULT_TAU,
};

#[derive(Subcommand)]
pub enum PrepCommand {
    /// Fill swath gaps in one image.
    Fill {
        /// none, random_rgb, pixel_rgb or neighbor_rgb.
        #[arg(long, default_value = "neighbor_rgb")]
        strategy: FillStrategy,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Gap mask (PBM); detected from black runs when absent.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Smallest black region treated as a gap.
        #[arg(long, default_value_t = DEFAULT_MIN_GAP_AREA)]
        min_area: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-pixel darkest composite of co-registered days.
    Composite {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Cloud mask output (PBM). A path containing `{i}` gets one mask
        /// per input; otherwise the union over all inputs is written.
        #[arg(long)]
        mask_out: Option<String>,
        /// Luminance excess over the composite marking a cloud.
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: u32,
    },
    /// Cut an image into non-overlapping square patches.
    Tile {
        #[arg(long)]
        patch: usize,
        #[arg(long = "in")]
        input: PathBuf,
        /// Directory receiving `{stem}_{row}_{col}.{ext}` patches.
        #[arg(long)]
        out_dir: PathBuf,
        /// ppm or png.
        #[arg(long, default_value = "png", value_parser = ["ppm", "png"])]
        format: String,
    },
}

pub fn run(cmd: PrepCommand) -> Result<()> {
    match cmd {
        PrepCommand::Fill {
            strategy,
            input,
            out,
            mask,
            min_area,
            seed,
        } => {
            let tile = read_image(&input)?;
            let mask = match mask {
                Some(p) => read_pbm(&p)?,
                None => detect_gaps_with(&tile, min_area),
            };
            let filled = fill_swath(&tile, &mask, strategy, seed)?;
            write_image(&filled, &out)?;
            println!("gap_pixels\t{}", mask.count());
            Ok(())
        }
        PrepCommand::Composite {
            inputs,
            out,
            mask_out,
            tau,
        } => {
            let stack = inputs
                .iter()
                .map(|p| read_image(p))
                .collect::<Result<Vec<_>, _>>()?;
            let composite = cloud_composite(&stack)?;
            write_image(&composite, &out)?;
            let Some(template) = mask_out else {
                return Ok(());
            };
            let masks = stack
                .iter()
                .map(|t| cloud_mask(t, &composite, tau))
                .collect::<Result<Vec<_>, _>>()?;
            if template.contains("{i}") {
                for (i, m) in masks.iter().enumerate() {
                    let path = PathBuf::from(template.replace("{i}", &i.to_string()));
                    write_pbm(m, &path)?;
                    println!("cloud_pixels\t{i}\t{}", m.count());
                }
            } else {
                let mut union = GapMask::empty(composite.width(), composite.height());
                for m in &masks {
                    for (i, _) in m.bits().iter().enumerate().filter(|(_, &b)| b) {
                        union.set(i % union.width(), i / union.width(), true);
                    }
                }
                write_pbm(&union, Path::new(&template))?;
                println!("cloud_pixels\t{}", union.count());
            }
            Ok(())
        }
        PrepCommand::Tile {
            patch,
            input,
            out_dir,
            format,
        } => {
            let image = read_image(&input)?;
            let Some(stem) = input.file_stem().map(|s| s.to_string_lossy().into_owned()) else {
                bail!("input path has no file name");
            };
            fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            let tiles = tile_grid(&image, patch)?;
            for t in &tiles {
                write_image(
                    &t.tile,
                    &out_dir.join(format!("{stem}_{}_{}.{format}", t.row, t.col)),
                )?;
            }
            println!("tiles\t{}", tiles.len());
            Ok(())
        }
    }
}
