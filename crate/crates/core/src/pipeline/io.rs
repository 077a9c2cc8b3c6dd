//! Binary PPM (P6) and PGM (P5) images mapped to `[0, 1]`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image(format!("{}: {e}", path.display()))
}

/// Reads an 8-bit PPM or PGM as `[3, H, W]`; gray images are replicated
/// across the three channels.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let mut reader = ImageReader::open(path)?;
    reader.set_format(ImageFormat::Pnm);
    let img = reader.decode().map_err(|e| image_err(path, e))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(image_err(path, "empty image"));
    }
    let raw = rgb.as_raw();
    Tensor::new(&[3, h, w], {
        let mut planes = vec![0.0f32; 3 * h * w];
        for p in 0..h * w {
            for c in 0..3 {
                planes[c * h * w + p] = raw[3 * p + c] as f32 / 255.0;
            }
        }
        planes
    })
}

/// Writes `[3, H, W]` as P6 or `[1, H, W]` / `[H, W]` as P5, clamping to
/// `[0, 1]` and rounding to 8 bits.
pub fn write_image(path: &Path, x: &Tensor) -> Result<()> {
    let (c, h, w) = match *x.shape() {
        [c @ (1 | 3), h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => return dim_err(format!("cannot write {:?} as an image", x.shape())),
    };
    let data = x.data();
    let mut bytes = vec![0u8; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            bytes[c * p + ch] = (data[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let (subtype, color) = if c == 3 {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    } else {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    };
    let file = BufWriter::new(File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(subtype)
        .write_image(&bytes, w as u32, h as u32, color)
        .map_err(|e| image_err(path, e))
}
