//! Image loading and PNG encoding.
//!
//! 2-D images are PNG or PGM/PNM grayscale. Volumes (and float images) are
//! raw arrays with a JSON header, addressed by the `.json` file name.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use image::{GrayImage, ImageFormat, RgbaImage};

use regmark_core::{GridGeometry, ScalarField};

/// Joins `name` onto `root`, refusing anything that is not a plain file name.
pub fn resolve(root: &Path, name: &str) -> anyhow::Result<PathBuf> {
    let plain = !name.is_empty()
        && name != "."
        && name != ".."
        && !name.contains(['/', '\\'])
        && !name.starts_with('.');
    if !plain {
        bail!("{name:?} is not a plain file name");
    }
    Ok(root.join(name))
}

pub fn load_image(path: &Path) -> anyhow::Result<ScalarField> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    if ext == "json" || ext == "raw" {
        return ScalarField::read_raw(&path.with_extension(""))
            .with_context(|| format!("reading raw image {}", path.display()));
    }
    let img = image::ImageReader::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .with_guessed_format()?
        .decode()
        .with_context(|| format!("decoding {}", path.display()))?;
    let gray = img.to_luma16();
    let (w, h) = gray.dimensions();
    // 8-bit sources widen by ×257, so this maps them back to 0..=255 exactly
    let values = gray.pixels().map(|p| p.0[0] as f64 / 257.0).collect();
    Ok(ScalarField::new(GridGeometry::pixels(vec![w as usize, h as usize])?, values)?)
}

/// Display window for an image: 0..255 when the values already fit, else the value range.
pub fn display_range(field: &ScalarField) -> (f64, f64) {
    let (lo, hi) = field.range();
    if lo >= 0.0 && hi <= 255.0 {
        (0.0, 255.0)
    } else {
        (lo, hi)
    }
}

fn to_u8(v: f64, lo: f64, hi: f64) -> u8 {
    let span = if hi > lo { hi - lo } else { 1.0 };
    (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(img: image::DynamicImage) -> anyhow::Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Grayscale PNG of a `width × height` row-major slab windowed to `[lo, hi]`.
pub fn gray_png(width: usize, height: usize, values: &[f64], lo: f64, hi: f64) -> anyhow::Result<Vec<u8>> {
    let pixels = values.iter().map(|&v| to_u8(v, lo, hi)).collect();
    let img = GrayImage::from_raw(width as u32, height as u32, pixels).context("pixel buffer size mismatch")?;
    encode(img.into())
}

pub fn rgba_png(width: usize, height: usize, rgba: Vec<u8>) -> anyhow::Result<Vec<u8>> {
    let img = RgbaImage::from_raw(width as u32, height as u32, rgba).context("pixel buffer size mismatch")?;
    encode(img.into())
}

/// Region of interest in pixel units; `z` picks the slice of a volume.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Deserialize)]
pub struct TileRequest {
    pub x: Option<usize>,
    pub y: Option<usize>,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub z: Option<usize>,
}

/// Crops `field` to the requested tile, clipped to the image, as a PNG.
pub fn tile_png(field: &ScalarField, tile: &TileRequest) -> anyhow::Result<Vec<u8>> {
    let shape = &field.geometry.shape;
    let (nx, ny) = (shape[0], shape[1]);
    let z = tile.z.unwrap_or(0);
    if shape.len() == 3 && z >= shape[2] {
        bail!("slice {z} is outside a volume with {} slices", shape[2]);
    }
    let x0 = tile.x.unwrap_or(0);
    let y0 = tile.y.unwrap_or(0);
    let x1 = x0.saturating_add(tile.width.unwrap_or(nx)).min(nx);
    let y1 = y0.saturating_add(tile.height.unwrap_or(ny)).min(ny);
    if x0 >= x1 || y0 >= y1 {
        bail!("tile lies outside the {nx}x{ny} image");
    }
    let plane = z * nx * ny;
    let mut values = Vec::with_capacity((x1 - x0) * (y1 - y0));
    for y in y0..y1 {
        let row = plane + y * nx;
        values.extend_from_slice(&field.values[row + x0..row + x1]);
    }
    let (lo, hi) = display_range(field);
    gray_png(x1 - x0, y1 - y0, &values, lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolve_rejects_paths() {
        let root = Path::new("/data");
        assert!(resolve(root, "fixed.png").is_ok());
        for bad in ["", "..", "../x.png", "a/b.png", ".hidden", "a\\b"] {
            assert!(resolve(root, bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn png_round_trip_preserves_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<f64> = (0..12).map(|i| (i * 20) as f64).collect();
        let png = gray_png(4, 3, &values, 0.0, 255.0).unwrap();
        let path = dir.path().join("t.png");
        std::fs::write(&path, png).unwrap();
        let field = load_image(&path).unwrap();
        assert_eq!(field.geometry.shape, vec![4, 3]);
        assert_eq!(field.values, values);
    }

    #[test]
    fn tile_is_clipped_to_the_image() {
        let geometry = GridGeometry::pixels(vec![5, 4]).unwrap();
        let field = ScalarField::new(geometry, (0..20).map(|v| v as f64).collect()).unwrap();
        let png = tile_png(
            &field,
            &TileRequest {
                x: Some(3),
                y: Some(2),
                width: Some(10),
                height: Some(10),
                z: None,
            },
        )
        .unwrap();
        let img = image::load_from_memory(&png).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (2, 2));
        assert_eq!(img.get_pixel(0, 0).0[0], 13);
        assert_eq!(img.get_pixel(1, 1).0[0], 19);
        assert!(tile_png(&field, &TileRequest { x: Some(5), ..Default::default() }).is_err());
    }
}
