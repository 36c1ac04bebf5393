//! PPM (P6), PBM (P4) and PNG raster files.

use std::fs;
use std::path::Path;

use crate::{GapMask, RasterError, RasterTile};

fn format_err(format: &'static str, reason: impl Into<String>) -> RasterError {
    RasterError::Format {
        format,
        reason: reason.into(),
    }
}

/// Reads whitespace-separated header tokens, skipping `#` comments.
/// Returns the tokens and the offset of the byte after the single
/// whitespace that ends the header.
fn header(
    bytes: &[u8],
    count: usize,
    format: &'static str,
) -> Result<(Vec<String>, usize), RasterError> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(format_err(format, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return Err(format_err(format, "missing raster data"));
    }
    Ok((tokens, i + 1))
}

fn dims(tokens: &[String], format: &'static str) -> Result<(usize, usize), RasterError> {
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format_err(format, format!("bad number {s:?}")))
    };
    Ok((parse(&tokens[1])?, parse(&tokens[2])?))
}

pub fn read_ppm(path: &Path) -> Result<RasterTile, RasterError> {
    let bytes = fs::read(path)?;
    let (tokens, offset) = header(&bytes, 4, "PPM")?;
    if tokens[0] != "P6" {
        return Err(format_err("PPM", "expected P6 magic"));
    }
    let (w, h) = dims(&tokens, "PPM")?;
    if tokens[3] != "255" {
        return Err(format_err("PPM", "only maxval 255 is supported"));
    }
    let data = &bytes[offset..];
    if data.len() != w * h * 3 {
        return Err(format_err(
            "PPM",
            format!("{} data bytes for {w}x{h}", data.len()),
        ));
    }
    RasterTile::new(w, h, data.to_vec())
}

pub fn write_ppm(tile: &RasterTile, path: &Path) -> Result<(), RasterError> {
    let mut out = format!("P6\n{} {}\n255\n", tile.width(), tile.height()).into_bytes();
    out.extend_from_slice(tile.pixels());
    fs::write(path, out)?;
    Ok(())
}

/// Writes a mask as packed PBM; set bits are black (1).
pub fn write_pbm(mask: &GapMask, path: &Path) -> Result<(), RasterError> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = format!("P4\n{w} {h}\n").into_bytes();
    let stride = w.div_ceil(8);
    for y in 0..h {
        let mut row = vec![0u8; stride];
        for x in 0..w {
            if mask.get(x, y) {
                row[x / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend(row);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pbm(path: &Path) -> Result<GapMask, RasterError> {
    let bytes = fs::read(path)?;
    let (tokens, offset) = header(&bytes, 3, "PBM")?;
    if tokens[0] != "P4" {
        return Err(format_err("PBM", "expected P4 magic"));
    }
    let (w, h) = dims(&tokens, "PBM")?;
    let stride = w.div_ceil(8);
    let data = &bytes[offset..];
    if data.len() != stride * h {
        return Err(format_err(
            "PBM",
            format!("{} data bytes for {w}x{h}", data.len()),
        ));
    }
    let bits = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            data[y * stride + x / 8] & (0x80 >> (x % 8)) != 0
        })
        .collect();
    GapMask::from_bits(w, h, bits)
}

fn is_ppm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// Reads PPM by extension, anything else through the PNG decoder.
pub fn read_image(path: &Path) -> Result<RasterTile, RasterError> {
    if is_ppm(path) {
        return read_ppm(path);
    }
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    RasterTile::new(w as usize, h as usize, img.into_raw())
}

pub fn write_image(tile: &RasterTile, path: &Path) -> Result<(), RasterError> {
    if is_ppm(path) {
        return write_ppm(tile, path);
    }
    let img = image::RgbImage::from_raw(
        tile.width() as u32,
        tile.height() as u32,
        tile.pixels().to_vec(),
    )
    .expect("buffer length checked at construction");
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_pbm_png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..5 * 3 * 3).map(|i| (i * 7) as u8).collect();
        let t = RasterTile::new(5, 3, pixels).unwrap();
        for name in ["a.ppm", "a.png"] {
            let p = dir.path().join(name);
            write_image(&t, &p).unwrap();
            assert_eq!(read_image(&p).unwrap(), t);
        }
        let bits: Vec<bool> = (0..11 * 3).map(|i| i % 3 == 0).collect();
        let m = GapMask::from_bits(11, 3, bits).unwrap();
        let p = dir.path().join("m.pbm");
        write_pbm(&m, &p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 8 + 2 * 3);
        assert_eq!(read_pbm(&p).unwrap(), m);
    }

    #[test]
    fn ppm_header_comments_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([1, 2, 3, 4, 5, 6]);
        std::fs::write(&p, &bytes).unwrap();
        assert_eq!(read_ppm(&p).unwrap().get(1, 0), [4, 5, 6]);
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(read_ppm(&p).is_err());
        std::fs::write(&p, b"P3\n1 1\n255\n0 0 0").unwrap();
        assert!(read_ppm(&p).is_err());
    }
}
