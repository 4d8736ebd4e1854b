//! 8-bit RGB image input/output and resampling.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageError, Rgb, RgbImage};

/// Reads a PNG or binary PPM/PGM image as 8-bit RGB.
pub fn read_rgb(path: &Path) -> Result<RgbImage, ImageError> {
    Ok(image::open(path)?.to_rgb8())
}

/// Writes a binary PPM (P6).
pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<(), ImageError> {
    let mut w = BufWriter::new(File::create(path).map_err(ImageError::IoError)?);
    PnmEncoder::new(&mut w)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)?;
    w.flush().map_err(ImageError::IoError)
}

/// Bilinear resampling to `width × height` with pixel-center alignment:
/// destination pixel `x` samples source coordinate `(x + 0.5)·sx − 0.5`,
/// the same mapping as [`crate::geom::Intrinsics::rescaled`].
pub fn resize_bilinear(src: &RgbImage, width: u32, height: u32) -> RgbImage {
    let (sw, sh) = (src.width(), src.height());
    if (sw, sh) == (width, height) {
        return src.clone();
    }
    let sx = sw as f64 / width as f64;
    let sy = sh as f64 / height as f64;
    let mut out = RgbImage::new(width, height);
    for y in 0..height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as u32;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f64;
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as u32;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f64;
            let mut px = [0u8; 3];
            for (c, out_c) in px.iter_mut().enumerate() {
                let at = |xx: u32, yy: u32| src.get_pixel(xx, yy).0[c] as f64;
                let top = at(x0, y0) * (1.0 - wx) + at(x1, y0) * wx;
                let bottom = at(x0, y1) * (1.0 - wx) + at(x1, y1) * wx;
                *out_c = (top * (1.0 - wy) + bottom * wy).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(x, y, Rgb(px));
        }
    }
    out
}
