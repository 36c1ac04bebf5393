use std::str::FromStr;

use crate::GibsError;

/// Deepest zoom whose column count fits a `u32`.
pub const MAX_ZOOM: u32 = 30;

/// Rectangle in degrees with positive area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BBox {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self, GibsError> {
        let b = Self {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn whole_globe() -> Self {
        Self {
            lat_min: -90.0,
            lat_max: 90.0,
            lon_min: -180.0,
            lon_max: 180.0,
        }
    }

    pub fn validate(&self) -> Result<(), GibsError> {
        let lat_ok = |v: f64| (-90.0..=90.0).contains(&v);
        let lon_ok = |v: f64| (-180.0..=180.0).contains(&v);
        if !(lat_ok(self.lat_min) && lat_ok(self.lat_max)) {
            return Err(GibsError::BBox("latitude outside [-90, 90]".into()));
        }
        if !(lon_ok(self.lon_min) && lon_ok(self.lon_max)) {
            return Err(GibsError::BBox("longitude outside [-180, 180]".into()));
        }
        if self.lat_min >= self.lat_max {
            return Err(GibsError::BBox("lat_min must be below lat_max".into()));
        }
        if self.lon_min >= self.lon_max {
            return Err(GibsError::BBox("lon_min must be below lon_max".into()));
        }
        Ok(())
    }
}

/// Parses `lat_min,lat_max,lon_min,lon_max`.
impl FromStr for BBox {
    type Err = GibsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| GibsError::BBox(format!("{s:?}: {e}")))?;
        match parts[..] {
            [a, b, c, d] => Self::new(a, b, c, d),
            _ => Err(GibsError::BBox(format!(
                "{s:?}: expected lat_min,lat_max,lon_min,lon_max"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TileId {
    pub col: u32,
    pub row: u32,
}

/// `(columns, rows)` at `zoom`: `2^(z+1) x 2^z`.
pub fn grid_size(zoom: u32) -> Result<(u32, u32), GibsError> {
    if zoom > MAX_ZOOM {
        return Err(GibsError::Zoom {
            zoom,
            max: MAX_ZOOM,
        });
    }
    Ok((1u32 << (zoom + 1), 1u32 << zoom))
}

/// Fractional grid coordinates. Multiplying before dividing keeps tile
/// edges exact.
fn grid_x(lon: f64, cols: u32) -> f64 {
    (lon + 180.0) * cols as f64 / 360.0
}

fn grid_y(lat: f64, rows: u32) -> f64 {
    (90.0 - lat) * rows as f64 / 180.0
}

/// Tile containing a point; points on the east or south edge fall into the
/// last column or row.
pub fn tile_of_point(lat: f64, lon: f64, zoom: u32) -> Result<TileId, GibsError> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(GibsError::BBox(format!(
            "point ({lat}, {lon}) off the globe"
        )));
    }
    let (cols, rows) = grid_size(zoom)?;
    Ok(TileId {
        col: (grid_x(lon, cols).floor() as u32).min(cols - 1),
        row: (grid_y(lat, rows).floor() as u32).min(rows - 1),
    })
}

/// `(lat_min, lat_max, lon_min, lon_max)` of a tile.
pub fn tile_bounds(tile: TileId, zoom: u32) -> Result<BBox, GibsError> {
    let (cols, rows) = grid_size(zoom)?;
    if tile.col >= cols || tile.row >= rows {
        return Err(GibsError::BBox(format!(
            "tile {tile:?} outside zoom {zoom}"
        )));
    }
    let w = 360.0 / cols as f64;
    let h = 180.0 / rows as f64;
    Ok(BBox {
        lat_min: 90.0 - (tile.row + 1) as f64 * h,
        lat_max: 90.0 - tile.row as f64 * h,
        lon_min: -180.0 + tile.col as f64 * w,
        lon_max: -180.0 + (tile.col + 1) as f64 * w,
    })
}

/// Tiles sharing positive area with `bbox`, row-major.
pub fn bbox_to_tiles(bbox: &BBox, zoom: u32) -> Result<Vec<TileId>, GibsError> {
    bbox.validate()?;
    let (cols, rows) = grid_size(zoom)?;
    let span = |lo: f64, hi: f64, n: u32| {
        let first = (lo.floor() as u32).min(n - 1);
        let last = ((hi.ceil() as u32).max(1) - 1).clamp(first, n - 1);
        first..=last
    };
    let col_span = span(grid_x(bbox.lon_min, cols), grid_x(bbox.lon_max, cols), cols);
    let row_span = span(grid_y(bbox.lat_max, rows), grid_y(bbox.lat_min, rows), rows);
    Ok(row_span
        .flat_map(|row| col_span.clone().map(move |col| TileId { col, row }))
        .collect())
}
