//! Reading and writing 8-bit PNG/PGM/PPM images.

use std::path::Path;

use image::{ColorType, DynamicImage, GrayImage, RgbImage};

use super::{Dataset, ImageBuf};
use crate::error::{Error, Result};

/// Decodes an image file. Gray sources stay single-channel, everything else
/// becomes RGB; alpha is discarded.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageBuf> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?.with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?;
    Ok(from_dynamic(img))
}

pub fn from_dynamic(img: DynamicImage) -> ImageBuf {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::L16 | ColorType::La16 => {
            ImageBuf { width: w, height: h, channels: 1, data: img.to_luma8().into_raw() }
        }
        _ => ImageBuf { width: w, height: h, channels: 3, data: img.to_rgb8().into_raw() },
    }
}

/// Encodes by file extension (`png`, `pgm`, `ppm`, ...).
pub fn write_image(img: &ImageBuf, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width as u32, img.height as u32);
    let dynamic = if img.channels == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, img.data.clone()).expect("buffer size checked"))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, img.data.clone()).expect("buffer size checked"))
    };
    let dynamic = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        // PGM only holds gray data.
        Some("pgm") => DynamicImage::ImageLuma8(dynamic.to_luma8()),
        _ => dynamic,
    };
    dynamic.save(path)?;
    Ok(())
}

/// Loads pixels for every image from `dir/file_name`. Decoded sizes must
/// agree with the annotation document.
pub fn load_pixels(ds: &mut Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for img in &mut ds.images {
        let buf = read_image(dir.join(&img.file_name))?;
        if (buf.width, buf.height) != (img.width, img.height) {
            return Err(Error::Parse(format!(
                "{} decodes to {}×{}, annotations say {}×{}",
                img.file_name, buf.width, buf.height, img.width, img.height
            )));
        }
        img.pixels = Some(buf);
    }
    Ok(())
}

/// Writes every loaded image to `dir/file_name`; images without pixels are
/// skipped.
pub fn save_pixels(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for img in &ds.images {
        if let Some(px) = &img.pixels {
            write_image(px, dir.join(&img.file_name))?;
        }
    }
    Ok(())
}
