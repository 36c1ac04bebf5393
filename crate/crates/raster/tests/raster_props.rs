use std::sync::Arc;

use curare_core::index::{FacetFilter, IndexConfig, VectorIndex};
use curare_core::store::{EmbeddingSet, ItemMeta};
use curare_core::Metric;
use curare_raster::{
    cloud_composite, cloud_mask, detect_gaps, fill_swath, luminance_milli, multires_search,
    multires_search_by, tile_grid, FillStrategy, GapMask, RasterTile,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tile(w: usize, h: usize, rng: &mut ChaCha8Rng, max: u8) -> RasterTile {
    let pixels = (0..w * h * 3).map(|_| rng.random_range(0..=max)).collect();
    RasterTile::new(w, h, pixels).unwrap()
}

/// Random rectangles and strips plus scattered pixels; at least one pixel
/// stays unmasked.
fn random_mask(w: usize, h: usize, rng: &mut ChaCha8Rng) -> GapMask {
    let mut m = GapMask::empty(w, h);
    for _ in 0..rng.random_range(1..5) {
        let x0 = rng.random_range(0..w);
        let y0 = rng.random_range(0..h);
        let x1 = rng.random_range(x0..w) + 1;
        let y1 = rng.random_range(y0..h) + 1;
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(x, y, true);
            }
        }
    }
    for _ in 0..w * h / 10 {
        m.set(rng.random_range(0..w), rng.random_range(0..h), true);
    }
    if m.count() == w * h {
        m.set(rng.random_range(0..w), rng.random_range(0..h), false);
    }
    m
}

/// Scans every unmasked pixel in row-major order and keeps the first with
/// the smallest squared distance.
fn oracle_neighbor_fill(tile: &RasterTile, mask: &GapMask) -> RasterTile {
    let (w, h) = (tile.width(), tile.height());
    let mut out = tile.clone();
    for ty in 0..h {
        for tx in 0..w {
            if !mask.get(tx, ty) {
                continue;
            }
            let mut best: Option<(i64, [u8; 3])> = None;
            for sy in 0..h {
                for sx in 0..w {
                    if mask.get(sx, sy) {
                        continue;
                    }
                    let dx = sx as i64 - tx as i64;
                    let dy = sy as i64 - ty as i64;
                    let d = dx * dx + dy * dy;
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, tile.get(sx, sy)));
                    }
                }
            }
            out.set(tx, ty, best.unwrap().1);
        }
    }
    out
}

#[test]
fn neighbor_fill_matches_brute_force_on_random_tiles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..20 {
        let w = rng.random_range(1..=64);
        let h = rng.random_range(1..=64);
        let tile = random_tile(w, h, &mut rng, 255);
        let mask = random_mask(w, h, &mut rng);
        let got = fill_swath(&tile, &mask, FillStrategy::NeighborRgb, case).unwrap();
        assert_eq!(
            got,
            oracle_neighbor_fill(&tile, &mask),
            "case {case} ({w}x{h})"
        );
        for y in 0..h {
            for x in 0..w {
                if !mask.get(x, y) {
                    assert_eq!(got.get(x, y), tile.get(x, y));
                }
            }
        }
    }
}

#[test]
fn neighbor_fill_of_64x64_tile_with_band() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tile = random_tile(64, 64, &mut rng, 255);
    for y in 28..36 {
        for x in 0..64 {
            tile.set(x, y, tile.gap_sentinel);
        }
    }
    let mask = detect_gaps(&tile);
    assert_eq!(mask.count(), 64 * 8);
    let got = fill_swath(&tile, &mask, FillStrategy::NeighborRgb, 0).unwrap();
    assert_eq!(got, oracle_neighbor_fill(&tile, &mask));
    for x in 0..64 {
        assert_eq!(got.get(x, 28), tile.get(x, 27));
        assert_eq!(got.get(x, 31), tile.get(x, 27));
        assert_eq!(got.get(x, 32), tile.get(x, 36));
        assert_eq!(got.get(x, 35), tile.get(x, 36));
    }
}

#[test]
fn all_masked_neighbor_fill_is_an_error() {
    let tile = RasterTile::filled(4, 4, [0, 0, 0]).unwrap();
    let mask = GapMask::from_bits(4, 4, vec![true; 16]).unwrap();
    assert!(fill_swath(&tile, &mask, FillStrategy::NeighborRgb, 0).is_err());
    assert!(fill_swath(&tile, &mask, FillStrategy::RandomRgb, 0).is_ok());
}

#[test]
fn mismatched_mask_is_rejected() {
    let tile = RasterTile::filled(4, 4, [1, 2, 3]).unwrap();
    assert!(fill_swath(&tile, &GapMask::empty(4, 5), FillStrategy::None, 0).is_err());
}

#[test]
fn random_and_pixel_fills_are_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tile = random_tile(20, 20, &mut rng, 255);
    let mut mask = GapMask::empty(20, 20);
    for y in 5..15 {
        for x in 5..15 {
            mask.set(x, y, true);
        }
    }
    for s in [FillStrategy::RandomRgb, FillStrategy::PixelRgb] {
        let a = fill_swath(&tile, &mask, s, 9).unwrap();
        assert_eq!(a, fill_swath(&tile, &mask, s, 9).unwrap());
        let colors: std::collections::BTreeSet<[u8; 3]> = (0..400)
            .filter(|i| mask.bits()[*i])
            .map(|i| a.get(i % 20, i / 20))
            .collect();
        match s {
            FillStrategy::RandomRgb => assert_eq!(colors.len(), 1),
            _ => assert!(colors.len() > 1),
        }
    }
}

fn dark_base(w: usize, h: usize, seed: u64) -> RasterTile {
    random_tile(w, h, &mut ChaCha8Rng::seed_from_u64(seed), 120)
}

/// Three days over one base, each with white blobs at its own columns.
fn cloudy_days(base: &RasterTile) -> Vec<(RasterTile, GapMask)> {
    let (w, h) = (base.width(), base.height());
    (0..3)
        .map(|day| {
            let mut t = base.clone();
            let mut m = GapMask::empty(w, h);
            for blob in 0..2 {
                let x0 = day * 20 + 2;
                let y0 = blob * 30 + 5;
                for y in y0..y0 + 12 {
                    for x in x0..x0 + 14 {
                        t.set(x, y, [255, 255, 255]);
                        m.set(x, y, true);
                    }
                }
            }
            (t, m)
        })
        .collect()
}

#[test]
fn composite_recovers_base_and_masks_recover_blobs() {
    let base = dark_base(64, 64, 3);
    let days = cloudy_days(&base);
    let stack: Vec<RasterTile> = days.iter().map(|(t, _)| t.clone()).collect();
    let composite = cloud_composite(&stack).unwrap();
    assert_eq!(composite, base);
    for (t, m) in &days {
        assert_eq!(&cloud_mask(t, &composite, 40).unwrap(), m);
        assert!(cloud_mask(t, &composite, 255).unwrap().is_empty());
        assert!(cloud_mask(&composite, &composite, 0).unwrap().is_empty());
    }
}

#[test]
fn composite_rejects_bad_stacks() {
    let a = RasterTile::filled(4, 4, [1, 1, 1]).unwrap();
    let b = RasterTile::filled(4, 5, [1, 1, 1]).unwrap();
    assert!(cloud_composite(std::slice::from_ref(&a)).is_err());
    assert!(cloud_composite(&[a.clone(), b.clone()]).is_err());
    assert!(cloud_mask(&a, &b, 40).is_err());
}

#[test]
fn darker_tile_wins_everywhere() {
    let a = RasterTile::filled(8, 8, [10, 10, 10]).unwrap();
    let b = dark_base(8, 8, 1);
    let b = RasterTile::new(
        8,
        8,
        b.pixels()
            .iter()
            .map(|p| p.saturating_add(20).max(11))
            .collect(),
    )
    .unwrap();
    assert_eq!(cloud_composite(&[b.clone(), a.clone()]).unwrap(), a);
    assert_eq!(cloud_composite(&[a.clone(), b]).unwrap(), a);
}

#[test]
fn tile_grid_reassembles_divisible_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (w, h, p) in [(64, 64, 32), (48, 32, 16), (30, 30, 5), (7, 7, 7)] {
        let img = random_tile(w, h, &mut rng, 255);
        let tiles = tile_grid(&img, p).unwrap();
        assert_eq!(tiles.len(), (w / p) * (h / p));
        let mut out = RasterTile::filled(w, h, [0, 0, 0]).unwrap();
        for g in &tiles {
            for y in 0..p {
                for x in 0..p {
                    out.set(g.col * p + x, g.row * p + y, g.tile.get(x, y));
                }
            }
        }
        assert_eq!(out, img);
    }
    let img = RasterTile::filled(65, 64, [1, 2, 3]).unwrap();
    assert_eq!(tile_grid(&img, 32).unwrap().len(), 4);
    assert!(tile_grid(&img, 0).is_err());
    assert!(tile_grid(&img, 65).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn detect_then_no_fill_is_identity(w in 1usize..40, h in 1usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tile = random_tile(w, h, &mut rng, 3);
        tile.gap_sentinel = [0, 0, 0];
        for _ in 0..rng.random_range(0..4) {
            let y = rng.random_range(0..h);
            for x in 0..w {
                tile.set(x, y, [0, 0, 0]);
            }
        }
        let mask = detect_gaps(&tile);
        prop_assert_eq!(fill_swath(&tile, &mask, FillStrategy::None, seed).unwrap(), tile.clone());
        for i in 0..w * h {
            if mask.bits()[i] {
                prop_assert_eq!(tile.get(i % w, i / w), [0, 0, 0]);
            }
        }
    }

    #[test]
    fn neighbor_fill_leaves_no_holes(w in 1usize..24, h in 1usize..24, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tile = random_tile(w, h, &mut rng, 255);
        let mask = random_mask(w, h, &mut rng);
        let got = fill_swath(&tile, &mask, FillStrategy::NeighborRgb, seed).unwrap();
        prop_assert_eq!(got, oracle_neighbor_fill(&tile, &mask));
    }

    #[test]
    fn composite_is_idempotent_and_order_invariant(
        w in 1usize..16,
        h in 1usize..16,
        n in 2usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack: Vec<RasterTile> = (0..n).map(|_| random_tile(w, h, &mut rng, 255)).collect();
        let c = cloud_composite(&stack).unwrap();
        prop_assert_eq!(cloud_composite(&[c.clone(), c.clone()]).unwrap(), c.clone());
        let mut rev = stack.clone();
        rev.reverse();
        let r = cloud_composite(&rev).unwrap();
        for y in 0..h {
            for x in 0..w {
                let lums: Vec<u32> = stack.iter().map(|t| luminance_milli(t.get(x, y))).collect();
                let min = *lums.iter().min().unwrap();
                prop_assert_eq!(luminance_milli(c.get(x, y)), min);
                prop_assert_eq!(luminance_milli(r.get(x, y)), min);
                let first = lums.iter().position(|&l| l == min).unwrap();
                prop_assert_eq!(c.get(x, y), stack[first].get(x, y));
                if lums.iter().filter(|&&l| l == min).count() == 1 {
                    prop_assert_eq!(c.get(x, y), r.get(x, y));
                }
            }
        }
    }

    #[test]
    fn grid_count_is_floor_product(w in 1usize..80, h in 1usize..80, p in 1usize..40) {
        let img = RasterTile::filled(w, h, [9, 9, 9]).unwrap();
        match tile_grid(&img, p) {
            Ok(t) => prop_assert_eq!(t.len(), (w / p) * (h / p)),
            Err(_) => prop_assert!(p > w.min(h)),
        }
    }
}

/// 8x8 block-mean luminance in [0, 1].
fn embed(t: &RasterTile) -> Vec<f32> {
    let (bw, bh) = (t.width() / 8, t.height() / 8);
    let mut out = Vec::with_capacity(64);
    for by in 0..8 {
        for bx in 0..8 {
            let mut s = 0u64;
            for y in by * bh..(by + 1) * bh {
                for x in bx * bw..(bx + 1) * bw {
                    s += luminance_milli(t.get(x, y)) as u64;
                }
            }
            out.push(s as f32 / (bw * bh) as f32 / 255_000.0);
        }
    }
    out
}

fn index_of(vectors: Vec<Vec<f32>>, metric: Metric) -> VectorIndex {
    let meta = (0..vectors.len())
        .map(|i| ItemMeta::new(format!("it{i:04}"), ""))
        .collect();
    let set = Arc::new(EmbeddingSet::new(64, vectors.concat(), meta).unwrap());
    let cfg = IndexConfig {
        metric,
        ..IndexConfig::default()
    };
    VectorIndex::build(set, &cfg).unwrap()
}

#[test]
fn single_tile_vote_ranking_equals_query_ranking() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..50 {
        let metric = if case % 2 == 0 {
            Metric::Cosine
        } else {
            Metric::Euclidean
        };
        let vectors = (0..40)
            .map(|_| embed(&random_tile(32, 32, &mut rng, 255)))
            .collect();
        let index = index_of(vectors, metric);
        let img = random_tile(32, 32, &mut rng, 255);
        let k = rng.random_range(1..=40);
        let votes = multires_search(&index, embed, &img, &[32], k).unwrap();
        let hits = index.query(&embed(&img), k, None, 4).unwrap();
        let v: Vec<&str> = votes.iter().map(|v| v.item_id.as_str()).collect();
        let q: Vec<&str> = hits.iter().map(|h| h.item_id.as_str()).collect();
        assert_eq!(v, q, "case {case}");
    }
}

/// Random colors constant over `cell x cell` blocks.
fn blocky_tile(w: usize, h: usize, cell: usize, rng: &mut ChaCha8Rng) -> RasterTile {
    let mut t = RasterTile::filled(w, h, [0, 0, 0]).unwrap();
    for by in 0..h / cell {
        for bx in 0..w / cell {
            let c: [u8; 3] = rng.random();
            for y in 0..cell {
                for x in 0..cell {
                    t.set(bx * cell + x, by * cell + y, c);
                }
            }
        }
    }
    t
}

#[test]
fn quadrant_items_take_the_top_four_buckets() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = blocky_tile(64, 64, 4, &mut rng);
    let mut vectors: Vec<Vec<f32>> = (0..200)
        .map(|_| embed(&blocky_tile(32, 32, 4, &mut rng)))
        .collect();
    let planted = [17usize, 60, 123, 190];
    for (g, &row) in tile_grid(&img, 32).unwrap().iter().zip(&planted) {
        vectors[row] = embed(&g.tile);
    }
    let index = index_of(vectors, Metric::Euclidean);
    let votes = multires_search(&index, embed, &img, &[32], 3).unwrap();
    let mut top: Vec<String> = votes[..4].iter().map(|v| v.item_id.clone()).collect();
    top.sort();
    let want: Vec<String> = planted.iter().map(|r| format!("it{r:04}")).collect();
    assert_eq!(top, want);
}

#[test]
fn votes_are_nonnegative_and_monotone_in_patches() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let vectors = (0..60)
        .map(|_| embed(&random_tile(16, 16, &mut rng, 255)))
        .collect();
    let index = index_of(vectors, Metric::Cosine);
    let img = random_tile(64, 64, &mut rng, 255);
    let base = multires_search(&index, embed, &img, &[64], 5).unwrap();
    let more = multires_search(&index, embed, &img, &[64, 32, 16], 5).unwrap();
    for v in &base {
        assert!(v.score >= 0.0);
        let after = more.iter().find(|m| m.item_id == v.item_id).unwrap();
        assert!(after.score >= v.score);
    }
    assert!(more.iter().all(|v| v.score >= 0.0));
    assert!(more.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn empty_universe_and_empty_patch_list() {
    let index = index_of(vec![vec![0.5; 64]; 3], Metric::Cosine);
    let img = RasterTile::filled(32, 32, [5, 5, 5]).unwrap();
    let nothing = FacetFilter {
        product: Some("absent".into()),
        ..FacetFilter::default()
    };
    let votes = multires_search_by(&index, embed, &img, &[32, 16], 4, Some(&nothing), |m| {
        m.item_id.clone()
    })
    .unwrap();
    assert!(votes.is_empty());
    assert!(multires_search(&index, embed, &img, &[], 4).is_err());
}

#[test]
fn buckets_aggregate_by_parent() {
    let vectors = (0..6).map(|i| vec![1.0 + i as f32; 64]).collect();
    let index = index_of(vectors, Metric::Euclidean);
    let img = RasterTile::filled(32, 32, [5, 5, 5]).unwrap();
    let parent = |m: &ItemMeta| {
        if m.item_id.as_str() < "it0003" {
            "a".to_string()
        } else {
            "b".to_string()
        }
    };
    let votes = multires_search_by(&index, embed, &img, &[32], 6, None, parent).unwrap();
    assert_eq!(votes.len(), 2);
    assert_eq!(votes[0].item_id, "a");
    assert!(votes[0].score > votes[1].score);
}
