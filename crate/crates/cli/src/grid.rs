//! Tiles synthetic images into a PNG for visual inspection.

use std::io::Cursor;

use anyhow::{bail, Result};
use dfcil_core::data::Normalizer;
use image::{ImageFormat, Rgb, RgbImage};
use ndarray::Array4;

const COLUMNS: usize = 8;
const GAP: usize = 1;

/// Undoes `normalizer`, clamps to `[0, 1]` and lays images out eight per row.
pub fn encode_png(images: &Array4<f64>, normalizer: Option<&Normalizer>) -> Result<Vec<u8>> {
    let (n, c, h, w) = images.dim();
    if n == 0 || !(c == 1 || c == 3) {
        bail!("cannot tile {n} images with {c} channels");
    }
    let cols = COLUMNS.min(n);
    let rows = n.div_ceil(cols);
    let width = cols * (w + GAP) - GAP;
    let height = rows * (h + GAP) - GAP;
    let mut canvas = RgbImage::new(width as u32, height as u32);
    for k in 0..n {
        let (x0, y0) = ((k % cols) * (w + GAP), (k / cols) * (h + GAP));
        for y in 0..h {
            for x in 0..w {
                let mut px = [0u8; 3];
                for (ch, p) in px.iter_mut().enumerate() {
                    let src = if c == 1 { 0 } else { ch };
                    let v = images[[k, src, y, x]];
                    let v = normalizer.map_or(v, |nz| nz.denormalize(src, v));
                    *p = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
                canvas.put_pixel((x0 + x) as u32, (y0 + y) as u32, Rgb(px));
            }
        }
    }
    let mut buf = Cursor::new(Vec::new());
    canvas.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_with_gaps() {
        let imgs = Array4::from_elem((10, 3, 4, 4), 0.5);
        let png = encode_png(&imgs, None).unwrap();
        let decoded = image::load_from_memory(&png).unwrap().to_rgb8();
        assert_eq!(decoded.dimensions(), (8 * 5 - 1, 2 * 5 - 1));
        assert_eq!(decoded.get_pixel(0, 0).0, [128, 128, 128]);
        assert_eq!(decoded.get_pixel(4, 0).0, [0, 0, 0]);
    }
}
