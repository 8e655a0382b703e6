//! PNG input and output; samples map to [0, 1] as `value / 255`.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use metacodec::checkpoint::write_atomic;
use metacodec::ImageTensor;

use crate::error::{PipelineError, Result};

pub fn image_from_rgb8(img: &RgbImage) -> ImageTensor {
    let (w, h) = img.dimensions();
    ImageTensor::from_fn(h as usize, w as usize, |y, x, c| f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0)
}

pub fn image_to_rgb8(x: &ImageTensor) -> RgbImage {
    RgbImage::from_fn(x.width() as u32, x.height() as u32, |col, row| {
        let px = |c: usize| (x.data[[row as usize, col as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn load_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| PipelineError::Image(format!("{}: {e}", path.display())))?;
    Ok(image_from_rgb8(&img.to_rgb8()))
}

pub fn encode_png(x: &ImageTensor) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    image_to_rgb8(x).write_to(&mut out, ImageFormat::Png).map_err(|e| PipelineError::Image(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn save_png(path: &Path, x: &ImageTensor) -> Result<()> {
    write_atomic(path, &encode_png(x)?)?;
    Ok(())
}

/// Sorted `*.png` files of a directory.
pub fn png_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// The image rounded to 8-bit samples, as it would be read back from a PNG.
pub fn to_8bit(x: &ImageTensor) -> ImageTensor {
    ImageTensor { data: x.data.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0) }
}
