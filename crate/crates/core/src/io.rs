//! File formats: PNG images and masks, PFM and 16-bit PNG depth.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::warp::{Image, InstanceMask, ValidityMask};

/// Divisor of 16-bit PNG depth: stored value / 256 = meters, 0 = no data.
pub const PNG_DEPTH_SCALE: f64 = 256.0;

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

/// Reads a PNG as an RGB image in `[0, 1]`; gray and alpha inputs are
/// converted.
pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(image_err(path))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    let eight_bit = matches!(
        img.color(),
        image::ColorType::L8
            | image::ColorType::La8
            | image::ColorType::Rgb8
            | image::ColorType::Rgba8
    );
    if eight_bit {
        for (i, px) in img.into_rgb8().pixels().enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = px[c] as f64 / 255.0;
            }
        }
    } else {
        for (i, px) in img.into_rgb16().pixels().enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = px[c] as f64 / 65535.0;
            }
        }
    }
    Image::new(w, h, 3, data).map_err(|e| Error::format(path, e.to_string()))
}

/// 8-bit quantization used when writing images.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an RGB (or single-channel) image as 8-bit PNG.
pub fn write_image(image: &Image, path: &Path) -> Result<()> {
    let (w, h) = (image.width(), image.height());
    match image.channels() {
        3 => {
            let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
                let at = |c| quantize_u8(image.at(c, x as usize, y as usize));
                Rgb([at(0), at(1), at(2)])
            });
            buf.save(path).map_err(image_err(path))
        }
        1 => {
            let buf = ImageBuffer::<Luma<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
                Luma([quantize_u8(image.at(0, x as usize, y as usize))])
            });
            buf.save(path).map_err(image_err(path))
        }
        c => Err(Error::invalid(format!(
            "cannot write a {c}-channel image as PNG"
        ))),
    }
}

/// Writes a validity mask as an 8-bit PNG (255 valid, 0 invalid).
pub fn write_mask(mask: &ValidityMask, path: &Path) -> Result<()> {
    let w = mask.width();
    let buf = ImageBuffer::<Luma<u8>, _>::from_fn(w as u32, mask.height() as u32, |x, y| {
        Luma([if mask.is_valid(y as usize * w + x as usize) {
            255
        } else {
            0
        }])
    });
    buf.save(path).map_err(image_err(path))
}

/// Reads a mask PNG; any nonzero value is valid.
pub fn read_mask(path: &Path) -> Result<ValidityMask> {
    let img = image::open(path).map_err(image_err(path))?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    ValidityMask::new(w, h, img.pixels().map(|p| p[0] != 0).collect())
}

/// Writes instance labels as a 16-bit gray PNG.
pub fn write_instances(mask: &InstanceMask, path: &Path) -> Result<()> {
    let (w, h) = (mask.width(), mask.height());
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, mask.labels().to_vec())
        .ok_or_else(|| Error::shape("instance mask buffer size"))?;
    buf.save(path).map_err(image_err(path))
}

/// Reads instance labels from an 8- or 16-bit gray PNG.
pub fn read_instances(path: &Path) -> Result<InstanceMask> {
    let img = image::open(path).map_err(image_err(path))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels: Vec<u16> = match img {
        image::DynamicImage::ImageLuma8(b) => b.pixels().map(|p| p[0] as u16).collect(),
        image::DynamicImage::ImageLuma16(b) => b.pixels().map(|p| p[0]).collect(),
        other => {
            return Err(Error::format(
                path,
                format!(
                    "instance mask must be single-channel, got {:?}",
                    other.color()
                ),
            ))
        }
    };
    InstanceMask::new(w, h, labels)
}

/// Writes depth as a single-channel little-endian PFM (rows bottom-up).
pub fn write_pfm(depth: &DepthMap, path: &Path) -> Result<()> {
    let (w, h) = (depth.width(), depth.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * w * h);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(depth.at(x, y) as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn pfm_header_line(r: &mut impl BufRead, path: &Path, field: &str) -> Result<String> {
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let line = line.trim().to_string();
    if line.is_empty() {
        return Err(Error::format(path, format!("missing PFM {field}")));
    }
    Ok(line)
}

/// Reads a PFM as a depth map. Color PFMs are rejected; non-positive or
/// non-finite values are holes.
pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    match pfm_header_line(&mut r, path, "magic")?.as_str() {
        "Pf" => {}
        "PF" => return Err(Error::format(path, "three-channel PFM is not a depth map")),
        m => return Err(Error::format(path, format!("bad PFM magic {m:?}"))),
    }
    let dims = pfm_header_line(&mut r, path, "dimensions")?;
    let parsed: Vec<usize> = dims
        .split_whitespace()
        .filter_map(|t| t.parse().ok())
        .collect();
    let &[w, h] = parsed.as_slice() else {
        return Err(Error::format(path, format!("bad PFM dimensions {dims:?}")));
    };
    let scale: f64 = pfm_header_line(&mut r, path, "scale")?
        .parse()
        .map_err(|_| Error::format(path, "bad PFM scale"))?;
    if scale == 0.0 {
        return Err(Error::format(path, "PFM scale must be nonzero"));
    }
    let little = scale < 0.0;
    let mut bytes = Vec::with_capacity(4 * w * h);
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 4 * w * h {
        return Err(Error::format(
            path,
            format!(
                "PFM payload has {} bytes, expected {}",
                bytes.len(),
                4 * w * h
            ),
        ));
    }
    let mut values = vec![0.0; w * h];
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().expect("chunks of four");
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        } as f64;
        let (row, x) = (h - 1 - i / w, i % w);
        values[row * w + x] = if v.is_finite() && v > 0.0 { v } else { 0.0 };
    }
    DepthMap::with_holes(w, h, values).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes depth as a 16-bit PNG in units of 1/256 m; values beyond the
/// 16-bit range saturate.
pub fn write_depth_png(depth: &DepthMap, path: &Path) -> Result<()> {
    let (w, h) = (depth.width(), depth.height());
    let buf = ImageBuffer::<Luma<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
        Luma([(depth.at(x as usize, y as usize) * PNG_DEPTH_SCALE)
            .round()
            .clamp(0.0, 65535.0) as u16])
    });
    buf.save(path).map_err(image_err(path))
}

/// Reads a 16-bit PNG depth map; zero marks missing ground truth.
pub fn read_depth_png(path: &Path) -> Result<DepthMap> {
    let img = image::open(path).map_err(image_err(path))?;
    let image::DynamicImage::ImageLuma16(b) = img else {
        return Err(Error::format(
            path,
            "depth PNG must be 16-bit single-channel",
        ));
    };
    let (w, h) = (b.width() as usize, b.height() as usize);
    let values = b.pixels().map(|p| p[0] as f64 / PNG_DEPTH_SCALE).collect();
    DepthMap::with_holes(w, h, values)
}

/// Reads depth from `.pfm` or 16-bit `.png`.
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    if has_extension(path, "pfm") {
        read_pfm(path)
    } else if has_extension(path, "png") {
        read_depth_png(path)
    } else {
        Err(Error::format(path, "depth files must be .pfm or .png"))
    }
}

/// Writes depth to `.pfm` or 16-bit `.png` by extension.
pub fn write_depth(depth: &DepthMap, path: &Path) -> Result<()> {
    if has_extension(path, "pfm") {
        write_pfm(depth, path)
    } else if has_extension(path, "png") {
        write_depth_png(depth, path)
    } else {
        Err(Error::format(path, "depth files must be .pfm or .png"))
    }
}

pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> DepthMap {
        DepthMap::new(w, h, (0..w * h).map(|i| 0.5 + i as f64 * 0.37).collect()).unwrap()
    }

    #[test]
    fn pfm_round_trip_is_exact_in_f32() {
        let d = ramp(5, 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        write_pfm(&d, &p).unwrap();
        let back = read_pfm(&p).unwrap();
        for (a, b) in back.values().iter().zip(d.values()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn pfm_rows_are_stored_bottom_up() {
        let d = ramp(2, 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        write_pfm(&d, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let payload = &bytes[bytes.len() - 16..];
        let first = f32::from_le_bytes(payload[..4].try_into().unwrap());
        assert_eq!(first as f64, d.at(0, 1) as f32 as f64);
    }

    #[test]
    fn big_endian_pfm_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("be.pfm");
        let mut bytes = b"Pf\n1 2\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        bytes.extend_from_slice(&7.0f32.to_be_bytes());
        fs::write(&p, bytes).unwrap();
        let d = read_pfm(&p).unwrap();
        assert_eq!(d.values(), &[7.0, 2.5]);
    }

    #[test]
    fn truncated_pfm_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pfm");
        fs::write(&p, b"Pf\n4 4\n-1.0\n\0\0\0\0").unwrap();
        assert!(matches!(read_pfm(&p), Err(Error::Format { .. })));
        fs::write(&p, b"P6\n4 4\n-1.0\n").unwrap();
        assert!(matches!(read_pfm(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn png_depth_uses_256_per_meter() {
        let d = DepthMap::with_holes(3, 1, vec![0.0, 1.5, 80.25]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        write_depth(&d, &p).unwrap();
        let back = read_depth(&p).unwrap();
        assert_eq!(back.values(), d.values());
    }

    #[test]
    fn image_and_masks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..3 * 6).map(|i| (i * 14) as f64 / 255.0).collect();
        let img = Image::new(3, 2, 3, data).unwrap();
        let p = dir.path().join("i.png");
        write_image(&img, &p).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);

        let mask = ValidityMask::new(3, 2, vec![true, false, true, true, false, false]).unwrap();
        write_mask(&mask, &p).unwrap();
        assert_eq!(read_mask(&p).unwrap(), mask);

        let inst = InstanceMask::new(3, 2, vec![0, 1, 300, 0, 2, 2]).unwrap();
        write_instances(&inst, &p).unwrap();
        assert_eq!(read_instances(&p).unwrap(), inst);
    }
}
