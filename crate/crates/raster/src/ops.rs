use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::{GapMask, RasterError, RasterTile};

pub const DEFAULT_MIN_GAP_AREA: usize = 16;
pub const DEFAULT_TAU: u32 = 40;

/// Luminance scaled by 1000: `299 R + 587 G + 114 B`. Integer so that
/// comparisons and thresholds are exact.
pub fn luminance_milli(rgb: [u8; 3]) -> u32 {
    299 * rgb[0] as u32 + 587 * rgb[1] as u32 + 114 * rgb[2] as u32
}

/// Sentinel-valued pixels in 4-connected components of at least
/// [`DEFAULT_MIN_GAP_AREA`] pixels.
pub fn detect_gaps(tile: &RasterTile) -> GapMask {
    detect_gaps_with(tile, DEFAULT_MIN_GAP_AREA)
}

pub fn detect_gaps_with(tile: &RasterTile, min_area: usize) -> GapMask {
    let (w, h) = (tile.width(), tile.height());
    let is_gap: Vec<bool> = tile
        .pixels()
        .chunks_exact(3)
        .map(|p| p == tile.gap_sentinel)
        .collect();
    let mut seen = vec![false; w * h];
    let mut mask = GapMask::empty(w, h);
    let mut stack = Vec::new();
    let mut component = Vec::new();
    for start in 0..w * h {
        if !is_gap[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        component.clear();
        while let Some(i) = stack.pop() {
            component.push(i);
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if is_gap[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if component.len() >= min_area {
            for &i in &component {
                mask.set(i % w, i / w, true);
            }
        }
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FillStrategy {
    #[default]
    None,
    RandomRgb,
    PixelRgb,
    NeighborRgb,
}

impl std::str::FromStr for FillStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "random_rgb" => Ok(Self::RandomRgb),
            "pixel_rgb" => Ok(Self::PixelRgb),
            "neighbor_rgb" => Ok(Self::NeighborRgb),
            other => Err(format!("unknown fill strategy {other:?}")),
        }
    }
}

pub fn fill_swath(
    tile: &RasterTile,
    mask: &GapMask,
    strategy: FillStrategy,
    seed: u64,
) -> Result<RasterTile, RasterError> {
    let (w, h) = (tile.width(), tile.height());
    if mask.width() != w || mask.height() != h {
        return Err(RasterError::DimensionMismatch(
            mask.width(),
            mask.height(),
            w,
            h,
        ));
    }
    let mut out = tile.clone();
    if mask.is_empty() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match strategy {
        FillStrategy::None => {}
        FillStrategy::RandomRgb => {
            let color: [u8; 3] = rng.random();
            for i in masked(mask) {
                out.set(i % w, i / w, color);
            }
        }
        FillStrategy::PixelRgb => {
            for i in masked(mask) {
                out.set(i % w, i / w, rng.random());
            }
        }
        FillStrategy::NeighborRgb => {
            if mask.count() == w * h {
                return Err(RasterError::NoSourcePixels);
            }
            let bits = mask.bits();
            let targets: Vec<usize> = masked(mask).collect();
            let sources: Vec<usize> = targets
                .par_iter()
                .map(|&i| nearest_unmasked(bits, w, h, i))
                .collect();
            for (&t, &s) in targets.iter().zip(&sources) {
                out.set(t % w, t / w, tile.get(s % w, s / w));
            }
        }
    }
    Ok(out)
}

fn masked(mask: &GapMask) -> impl Iterator<Item = usize> + '_ {
    mask.bits()
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| i)
}

/// Nearest unmasked pixel by euclidean distance, ties to the lowest
/// row-major index. Scans square rings outward; a ring at Chebyshev radius
/// `r` holds only pixels with squared distance `>= r^2`.
fn nearest_unmasked(bits: &[bool], w: usize, h: usize, i: usize) -> usize {
    let (cx, cy) = ((i % w) as i64, (i / w) as i64);
    let mut best: Option<(i64, usize)> = None;
    let max_r = w.max(h) as i64;
    for r in 1..=max_r {
        if best.is_some_and(|(d, _)| d < r * r) {
            break;
        }
        let mut consider = |x: i64, y: i64| {
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                return;
            }
            let j = y as usize * w + x as usize;
            if bits[j] {
                return;
            }
            let d = (x - cx).pow(2) + (y - cy).pow(2);
            if best.is_none_or(|(bd, bj)| d < bd || (d == bd && j < bj)) {
                best = Some((d, j));
            }
        };
        for x in cx - r..=cx + r {
            consider(x, cy - r);
            consider(x, cy + r);
        }
        for y in cy - r + 1..cy + r {
            consider(cx - r, y);
            consider(cx + r, y);
        }
    }
    best.expect("at least one unmasked pixel").1
}

/// Per pixel, the value from the stack member with the lowest luminance;
/// ties go to the earliest member.
pub fn cloud_composite(stack: &[RasterTile]) -> Result<RasterTile, RasterError> {
    if stack.len() < 2 {
        return Err(RasterError::StackTooSmall(stack.len()));
    }
    let first = &stack[0];
    for t in &stack[1..] {
        first.same_shape(t)?;
    }
    let n = first.width() * first.height();
    let mut out = first.clone();
    let px = |t: &RasterTile, i: usize| -> [u8; 3] {
        let p = &t.pixels()[i * 3..i * 3 + 3];
        [p[0], p[1], p[2]]
    };
    for i in 0..n {
        let mut best = px(first, i);
        let mut best_l = luminance_milli(best);
        for t in &stack[1..] {
            let c = px(t, i);
            let l = luminance_milli(c);
            if l < best_l {
                best = c;
                best_l = l;
            }
        }
        out.set(i % first.width(), i / first.width(), best);
    }
    Ok(out)
}

/// Pixels whose luminance exceeds the composite's by more than `tau`.
pub fn cloud_mask(
    tile: &RasterTile,
    composite: &RasterTile,
    tau: u32,
) -> Result<GapMask, RasterError> {
    composite.same_shape(tile)?;
    let bits = tile
        .pixels()
        .chunks_exact(3)
        .zip(composite.pixels().chunks_exact(3))
        .map(|(a, b)| {
            let la = luminance_milli([a[0], a[1], a[2]]) as i64;
            let lb = luminance_milli([b[0], b[1], b[2]]) as i64;
            la - lb > tau as i64 * 1000
        })
        .collect();
    GapMask::from_bits(tile.width(), tile.height(), bits)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridTile {
    pub row: usize,
    pub col: usize,
    pub tile: RasterTile,
}

/// Non-overlapping `patch x patch` tiles in row-major order; right and
/// bottom remainders are dropped.
pub fn tile_grid(image: &RasterTile, patch: usize) -> Result<Vec<GridTile>, RasterError> {
    if patch == 0 {
        return Err(RasterError::ZeroPatch);
    }
    if patch > image.width().min(image.height()) {
        return Err(RasterError::PatchTooLarge {
            patch,
            width: image.width(),
            height: image.height(),
        });
    }
    let mut out = Vec::new();
    for row in 0..image.height() / patch {
        for col in 0..image.width() / patch {
            out.push(GridTile {
                row,
                col,
                tile: image.crop(col * patch, row * patch, patch, patch)?,
            });
        }
    }
    Ok(out)
}
