use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::GibsError;

const SNAPSHOT: &str = include_str!("../data/catalog.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Product {
    pub product_id: String,
    pub title: String,
    pub description: String,
    pub tile_matrix_max_level: u32,
    /// MIME type of the served tiles.
    pub format: String,
    /// Tile matrix set substituted for `{matrix_set}` in endpoint templates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile_matrix_set: Option<String>,
}

impl Product {
    /// File extension for the product's tile format.
    pub fn extension(&self) -> &str {
        match self.format.as_str() {
            "image/jpeg" | "image/jpg" => "jpg",
            "image/png" => "png",
            "image/tiff" => "tif",
            other => other.rsplit('/').next().unwrap_or("bin"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProductCatalog {
    products: Vec<Product>,
}

impl ProductCatalog {
    pub fn new(products: Vec<Product>) -> Result<Self, GibsError> {
        let mut seen = BTreeSet::new();
        for p in &products {
            if !seen.insert(p.product_id.as_str()) {
                return Err(GibsError::Catalog(format!(
                    "duplicate product_id {:?}",
                    p.product_id
                )));
            }
        }
        Ok(Self { products })
    }

    /// The snapshot bundled with the crate.
    pub fn bundled() -> Self {
        Self::from_json(SNAPSHOT).expect("bundled catalog is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, GibsError> {
        let products: Vec<Product> =
            serde_json::from_str(text).map_err(|e| GibsError::Catalog(e.to_string()))?;
        Self::new(products)
    }

    pub fn load(path: &Path) -> Result<Self, GibsError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn products(&self) -> &[Product] {
        &self.products
    }

    pub fn get(&self, product_id: &str) -> Option<&Product> {
        self.products.iter().find(|p| p.product_id == product_id)
    }
}

/// Products whose title or description contains every keyword, ignoring
/// case. Ranked by total keyword occurrences descending, then product_id.
/// Blank keywords are ignored; none left means the whole catalog.
pub fn search_products<'a, S: AsRef<str>>(
    catalog: &'a ProductCatalog,
    keywords: &[S],
) -> Vec<&'a Product> {
    let keys: Vec<String> = keywords
        .iter()
        .map(|k| k.as_ref().trim().to_lowercase())
        .filter(|k| !k.is_empty())
        .collect();
    let mut hits: Vec<(usize, &Product)> = catalog
        .products
        .iter()
        .filter_map(|p| {
            let text = format!("{}\n{}", p.title, p.description).to_lowercase();
            let mut total = 0;
            for k in &keys {
                let n = text.matches(k.as_str()).count();
                if n == 0 {
                    return None;
                }
                total += n;
            }
            Some((total, p))
        })
        .collect();
    hits.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then_with(|| a.1.product_id.cmp(&b.1.product_id))
    });
    hits.into_iter().map(|(_, p)| p).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_snapshot_loads() {
        let c = ProductCatalog::bundled();
        assert!(c.products().len() >= 10);
        let v = c.get("VIIRS_SNPP_CorrectedReflectance_TrueColor").unwrap();
        assert_eq!(v.extension(), "jpg");
    }

    #[test]
    fn duplicates_are_rejected() {
        let text = r#"[{"product_id":"a","title":"","description":"","tile_matrix_max_level":1,"format":"image/png"},
                       {"product_id":"a","title":"","description":"","tile_matrix_max_level":1,"format":"image/png"}]"#;
        assert!(ProductCatalog::from_json(text).is_err());
    }
}
