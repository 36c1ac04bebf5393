use std::collections::HashMap;

use curare_core::index::{FacetFilter, VectorIndex};
use curare_core::store::ItemMeta;

use crate::ops::tile_grid;
use crate::{RasterError, RasterTile};

#[derive(Debug, Clone, PartialEq)]
pub struct Vote {
    pub item_id: String,
    pub score: f64,
}

/// Bucket voting with one bucket per indexed item.
pub fn multires_search<E>(
    index: &VectorIndex,
    embed: E,
    image: &RasterTile,
    patch_sizes: &[usize],
    k: usize,
) -> Result<Vec<Vote>, RasterError>
where
    E: Fn(&RasterTile) -> Vec<f32>,
{
    multires_search_by(index, embed, image, patch_sizes, k, None, |m| {
        m.item_id.clone()
    })
}

/// Tiles `image` at every patch size, queries `k` neighbors per tile and
/// adds `1 / (1 + distance)` to the bucket of each hit. Buckets are ranked by
/// total weight descending, then bucket id ascending. Only items passing
/// `filter` are searched.
#[allow(clippy::too_many_arguments)]
pub fn multires_search_by<E, B>(
    index: &VectorIndex,
    embed: E,
    image: &RasterTile,
    patch_sizes: &[usize],
    k: usize,
    filter: Option<&FacetFilter>,
    bucket_of: B,
) -> Result<Vec<Vote>, RasterError>
where
    E: Fn(&RasterTile) -> Vec<f32>,
    B: Fn(&ItemMeta) -> String,
{
    if patch_sizes.is_empty() {
        return Err(RasterError::NoPatchSizes);
    }
    let mut buckets: HashMap<String, f64> = HashMap::new();
    for &patch in patch_sizes {
        for cell in tile_grid(image, patch)? {
            let v = embed(&cell.tile);
            for hit in index.query(&v, k, filter, index.default_nprobe())? {
                *buckets
                    .entry(bucket_of(index.set().meta(hit.row_id)))
                    .or_default() += 1.0 / (1.0 + hit.distance);
            }
        }
    }
    let mut votes: Vec<Vote> = buckets
        .into_iter()
        .map(|(item_id, score)| Vote { item_id, score })
        .collect();
    votes.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.item_id.cmp(&b.item_id))
    });
    Ok(votes)
}
