//! 8-bit RGB image files as `[3, H, W]` tensors in `[0, 1]`.
//!
//! PNG goes through the `image` crate; binary PPM (P6, maxval 255) is handled
//! here. Both share the same quantization: `p / 255` on read, and on write
//! `round(255·x)` (half away from zero) clamped to `0..=255`.

use std::fs;
use std::path::Path;

use image::{DynamicImage, ImageFormat};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageKind {
    Png,
    Ppm,
}

impl ImageKind {
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "png" => Some(ImageKind::Png),
            "ppm" | "pnm" => Some(ImageKind::Ppm),
            _ => None,
        }
    }
}

pub fn quantize(v: f32) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn image_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn planar_from_interleaved(w: usize, h: usize, rgb: &[u8]) -> Result<Tensor> {
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

fn interleaved_from_planar(image: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = match *image.shape() {
        [3, h, w] | [1, 3, h, w] => (h, w),
        _ => {
            return Err(Error::InvalidShape {
                op: "write_image",
                shape: image.shape().to_vec(),
                reason: "expected [3, H, W]".into(),
            })
        }
    };
    let plane = w * h;
    let src = image.data();
    let mut out = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(src[c * plane + i]));
        }
    }
    Ok((w, h, out))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    match ImageKind::from_path(path) {
        Some(ImageKind::Ppm) => read_ppm(path),
        Some(ImageKind::Png) => read_png(path),
        None => Err(image_err(
            path,
            "unsupported file extension (expected .png or .ppm)",
        )),
    }
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    match ImageKind::from_path(path) {
        Some(ImageKind::Ppm) => write_ppm(path, image),
        Some(ImageKind::Png) => write_png(path, image),
        None => Err(image_err(
            path,
            "unsupported file extension (expected .png or .ppm)",
        )),
    }
}

fn read_png(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| image_err(path, e.to_string()))?;
    let rgb = match decoded {
        DynamicImage::ImageRgb8(img) => img,
        DynamicImage::ImageRgba8(img) => DynamicImage::ImageRgba8(img).to_rgb8(),
        other => {
            return Err(image_err(
                path,
                format!(
                    "unsupported colour type {:?} (expected 8-bit RGB or RGBA)",
                    other.color()
                ),
            ))
        }
    };
    let (w, h) = rgb.dimensions();
    planar_from_interleaved(w as usize, h as usize, rgb.as_raw())
}

fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let (w, h, rgb) = interleaved_from_planar(image)?;
    let buffer = image::RgbImage::from_raw(w as u32, h as u32, rgb)
        .ok_or_else(|| image_err(path, "buffer size mismatch"))?;
    buffer
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_err(path, e.to_string()))
}

fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut header = Vec::with_capacity(4);
    while header.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(image_err(path, "truncated PPM header"));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if header[0] != "P6" {
        return Err(image_err(
            path,
            format!("unsupported PPM magic `{}` (expected P6)", header[0]),
        ));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| image_err(path, format!("invalid PPM {what} `{s}`")))
    };
    let (w, h, maxval) = (
        parse(&header[1], "width")?,
        parse(&header[2], "height")?,
        parse(&header[3], "maxval")?,
    );
    if maxval != 255 {
        return Err(image_err(
            path,
            format!("unsupported PPM maxval {maxval} (expected 255)"),
        ));
    }
    if w == 0 || h == 0 {
        return Err(image_err(path, "empty image"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes
        .get(pos..pos + 3 * w * h)
        .ok_or_else(|| image_err(path, "truncated PPM raster"))?;
    planar_from_interleaved(w, h, raster)
}

fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (w, h, rgb) = interleaved_from_planar(image)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_away_from_zero() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.2), 255);
        assert_eq!(quantize(-0.1), 0);
    }

    #[test]
    fn half_grey_reads_back_as_128() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.png", "a.ppm"] {
            let path = dir.path().join(name);
            write_image(&path, &Tensor::full(&[3, 2, 3], 0.5)).unwrap();
            let back = read_image(&path).unwrap();
            assert_eq!(back.shape(), &[3, 2, 3]);
            assert!(back.data().iter().all(|&v| v == 128.0 / 255.0), "{name}");
        }
    }

    #[test]
    fn zero_image_is_a_fixed_point_and_formats_agree() {
        let dir = tempfile::tempdir().unwrap();
        let zeros = Tensor::zeros(&[3, 4, 5]);
        let p = dir.path().join("z.png");
        write_image(&p, &zeros).unwrap();
        assert_eq!(read_image(&p).unwrap(), zeros);

        let ramp =
            Tensor::from_vec(&[3, 4, 5], (0..60).map(|i| i as f32 / 59.0).collect()).unwrap();
        let (png, ppm) = (dir.path().join("r.png"), dir.path().join("r.ppm"));
        write_image(&png, &ramp).unwrap();
        write_image(&ppm, &ramp).unwrap();
        let (a, b) = (read_image(&png).unwrap(), read_image(&ppm).unwrap());
        assert_eq!(a, b);
        assert!(a.max_abs_diff(&ramp) <= 1.0 / 510.0 + 1e-7);
    }

    #[test]
    fn rejects_unsupported_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bmp");
        assert!(write_image(&p, &Tensor::zeros(&[3, 2, 2])).is_err());
        let bad = dir.path().join("bad.ppm");
        fs::write(&bad, b"P6\n2 2\n65535\n").unwrap();
        assert!(read_image(&bad).is_err());
        let short = dir.path().join("short.ppm");
        fs::write(&short, b"P6\n2 2\n255\n\x01\x02").unwrap();
        assert!(read_image(&short).is_err());
        let grey16 = dir.path().join("g.png");
        image::ImageBuffer::<image::Luma<u16>, _>::from_raw(1, 1, vec![7u16])
            .unwrap()
            .save(&grey16)
            .unwrap();
        assert!(read_image(&grey16).is_err());
    }
}
