//! 8-bit PNG and PPM images as `[H, W, 3]` tensors in [0, 1], and
//! single-channel PFM depth maps.

use std::fs;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::diffcore::Tensor;
use crate::error::{Error, PathContext, Result};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn check_rgb(img: &Tensor<f64>) -> Result<(usize, usize)> {
    match img.shape() {
        [h, w, 3] => Ok((*h, *w)),
        s => Err(Error::Image(format!("expected an [H, W, 3] image, got {s:?}"))),
    }
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

pub fn read_image(path: &Path) -> Result<Tensor<f64>> {
    match extension(path).as_str() {
        "png" => read_png(path),
        "ppm" | "pnm" => parse_ppm(&fs::read(path).at(path)?),
        e => Err(Error::Image(format!("unsupported image extension '{e}' in {}", path.display()))),
    }
}

pub fn write_image(path: &Path, img: &Tensor<f64>) -> Result<()> {
    match extension(path).as_str() {
        "png" => write_png(path, img),
        "ppm" | "pnm" => fs::write(path, encode_ppm(img)?).at(path),
        e => Err(Error::Image(format!("unsupported image extension '{e}' in {}", path.display()))),
    }
}

fn read_png(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let rgb = match img {
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) | DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            img.to_rgb8()
        }
        other => {
            return Err(Error::Image(format!(
                "{}: unsupported bit depth ({:?}); only 8-bit images are read",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Tensor::new(&[h, w, 3], rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect())
}

fn write_png(path: &Path, img: &Tensor<f64>) -> Result<()> {
    let (h, w) = check_rgb(img)?;
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let buf: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(w as u32, h as u32, bytes).ok_or_else(|| Error::Image("image buffer size".into()))?;
    buf.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Grayscale PNG of an `[H, W]` map in [0, 1].
pub fn write_gray_png(path: &Path, map: &Tensor<f64>) -> Result<()> {
    let (h, w) = match map.shape() {
        [h, w] | [h, w, 1] => (*h, *w),
        s => return Err(Error::Image(format!("expected an [H, W] map, got {s:?}"))),
    };
    let bytes: Vec<u8> = map.data().iter().map(|&v| quantize(v)).collect();
    let buf: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(w as u32, h as u32, bytes).ok_or_else(|| Error::Image("image buffer size".into()))?;
    buf.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Binary (P6) PPM.
pub fn encode_ppm(img: &Tensor<f64>) -> Result<Vec<u8>> {
    let (h, w) = check_rgb(img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// P6 or P3 PPM with a maximum value up to 255.
pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let bad = |m: &str| Error::Image(format!("PPM: {m}"));
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let num = |s: String| s.parse::<usize>().map_err(|_| bad(&format!("bad number '{s}'")));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Image(format!("PPM: unsupported bit depth (maxval {maxval}); only 8-bit images are read")));
    }
    let n = w * h * 3;
    let scale = maxval as f64;
    let data: Vec<f64> = match magic.as_str() {
        "P6" => {
            let start = pos + 1;
            let raw = bytes.get(start..start + n).ok_or_else(|| bad("pixel data is truncated"))?;
            raw.iter().map(|&b| b as f64 / scale).collect()
        }
        "P3" => (0..n).map(|_| token().and_then(num).map(|v| v as f64 / scale)).collect::<Result<_>>()?,
        m => return Err(bad(&format!("unsupported magic '{m}'"))),
    };
    if data.iter().any(|v| *v > 1.0) {
        return Err(bad("sample exceeds maxval"));
    }
    Tensor::new(&[h, w, 3], data)
}

/// Single-channel little-endian PFM (`Pf`), rows stored bottom to top.
pub fn write_pfm(path: &Path, map: &Tensor<f64>) -> Result<()> {
    let (h, w) = match map.shape() {
        [h, w] | [h, w, 1] => (*h, *w),
        s => return Err(Error::Image(format!("expected an [H, W] map, got {s:?}"))),
    };
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(map.data()[y * w + x] as f32).to_le_bytes());
        }
    }
    fs::write(path, out).at(path)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<Tensor<f64>> {
    let bytes = fs::read(path).at(path)?;
    let bad = |m: String| Error::Image(format!("{}: {m}", path.display()));
    let mut lines = Vec::new();
    let mut pos = 0;
    while lines.len() < 3 {
        let end = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated PFM header".into()))?;
        lines.push(String::from_utf8_lossy(&bytes[pos..pos + end]).trim().to_string());
        pos += end + 1;
    }
    if lines[0] != "Pf" {
        return Err(bad(format!("expected a single-channel 'Pf' map, got '{}'", lines[0])));
    }
    let dims: Vec<usize> = lines[1].split_whitespace().filter_map(|t| t.parse().ok()).collect();
    let [w, h] = dims[..] else { return Err(bad(format!("bad PFM size line '{}'", lines[1]))) };
    let scale: f64 = lines[2].parse().map_err(|_| bad(format!("bad PFM scale '{}'", lines[2])))?;
    let little = scale < 0.0;
    let raw = bytes.get(pos..pos + 4 * w * h).ok_or_else(|| bad("PFM data is truncated".into()))?;
    let mut data = vec![0.0; w * h];
    for (k, c) in raw.chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, x) = (k / w, k % w);
        data[(h - 1 - row) * w + x] = v as f64;
    }
    Tensor::new(&[h, w], data)
}
