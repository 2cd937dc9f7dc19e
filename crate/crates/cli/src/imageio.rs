//! PNG conversion for RGB grids with channels in `[0, 1]`.

use std::path::Path;

use pointmap_core::geom::Grid;
use pointmap_core::synth::RgbImage;
use pointmap_core::{Error, Result};

pub fn read_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
        .collect();
    Grid::from_vec(w as usize, h as usize, data)
}

pub fn write_rgb(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let buf: Vec<u8> = img
        .data
        .iter()
        .flat_map(|px| px.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    image::save_buffer(
        path.as_ref(),
        &buf,
        img.width as u32,
        img.height as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|e| Error::Format(e.to_string()))
}

/// Sub-image `w x h` at `(x0, y0)`.
pub fn crop_rgb(img: &RgbImage, x0: usize, y0: usize, w: usize, h: usize) -> Result<RgbImage> {
    if x0 + w > img.width || y0 + h > img.height {
        return Err(Error::invalid("crop exceeds image"));
    }
    Ok(Grid::from_fn(w, h, |i, j| img.data[(j + y0) * img.width + i + x0]))
}

/// Bilinear (triangle filter) resize.
pub fn resize_rgb(img: &RgbImage, w: usize, h: usize) -> RgbImage {
    let buf: image::Rgb32FImage = image::ImageBuffer::from_fn(img.width as u32, img.height as u32, |i, j| {
        let px = img.get(i as usize, j as usize);
        image::Rgb([px[0] as f32, px[1] as f32, px[2] as f32])
    });
    let out = image::imageops::resize(&buf, w as u32, h as u32, image::imageops::FilterType::Triangle);
    Grid::from_fn(w, h, |i, j| {
        let p = out.get_pixel(i as u32, j as u32);
        [p[0] as f64, p[1] as f64, p[2] as f64]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantized_identity() {
        let dir = tempfile::tempdir().unwrap();
        let img = Grid::from_fn(5, 3, |i, j| [i as f64 / 4.0, j as f64 / 2.0, 0.5]);
        let p = dir.path().join("a.png");
        write_rgb(&p, &img).unwrap();
        let back = read_rgb(&p).unwrap();
        assert_eq!(back.dims(), (5, 3));
        for (a, b) in img.data.iter().zip(&back.data) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        let c = crop_rgb(&img, 1, 1, 3, 2).unwrap();
        assert_eq!(c.data[0], img.data[6]);
        assert!(crop_rgb(&img, 3, 0, 3, 1).is_err());
    }

    #[test]
    fn resize_of_constant_image_is_constant() {
        let img = Grid::filled(12, 8, [0.25, 0.5, 0.75]);
        let r = resize_rgb(&img, 6, 4);
        assert_eq!(r.dims(), (6, 4));
        for px in &r.data {
            for c in 0..3 {
                assert!((px[c] - img.data[0][c]).abs() < 1e-6);
            }
        }
    }
}
