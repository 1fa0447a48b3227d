//! File helpers: atomic writes and PNG encoding of image tensors.

use std::io::Cursor;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes `bytes` to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Quantizes `[0,1]` to 8 bits with rounding.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[3,H,W]` tensor in `[0,1]` as an 8-bit RGB PNG.
pub fn encode_rgb_png(img: &Tensor) -> Result<Vec<u8>> {
    let [3, h, w] = img.shape() else {
        return Err(Error::invalid(format!("expected [3,H,W] image, got {:?}", img.shape())));
    };
    let (h, w) = (*h, *w);
    let d = img.data();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[h * w + i]), to_u8(d[2 * h * w + i])])
    });
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Decodes any 8-bit PNG as a `[3,H,W]` tensor in `[0,1]`.
pub fn decode_rgb_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = p.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Encodes a `[1,H,W]` or `[H,W]` depth map as 16-bit PNG with `value = depth / scale`.
pub fn encode_depth_png(depth: &Tensor, scale: f64) -> Result<Vec<u8>> {
    let (h, w) = match depth.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(Error::invalid(format!("expected [1,H,W] depth, got {s:?}"))),
    };
    let d = depth.data();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = d[y as usize * w + x as usize] / scale;
        Luma([v.round().clamp(0.0, u16::MAX as f64) as u16])
    });
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Decodes a 16-bit PNG depth map to `[1,H,W]` world units.
pub fn decode_depth_png(bytes: &[u8], scale: f64) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0[0] as f64 * scale).collect();
    Tensor::new(vec![1, h, w], data)
}

/// Rounds colour to the 8-bit grid and depth to the `scale` grid, in place.
pub fn quantize_rgb(img: &Tensor) -> Tensor {
    img.map(|v| to_u8(v) as f64 / 255.0)
}

pub fn quantize_depth(depth: &Tensor, scale: f64) -> Tensor {
    depth.map(|v| (v / scale).round().clamp(0.0, u16::MAX as f64) * scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trips_quantized_values() {
        let img = Tensor::new(vec![3, 2, 3], (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        let q = quantize_rgb(&img);
        let back = decode_rgb_png(&encode_rgb_png(&img).unwrap()).unwrap();
        assert_eq!(back, q);
        let depth = Tensor::new(vec![1, 2, 2], vec![1.75, 2.5001, 3.14159, 5.25]).unwrap();
        let q = quantize_depth(&depth, 1e-4);
        let back = decode_depth_png(&encode_depth_png(&depth, 1e-4).unwrap(), 1e-4).unwrap();
        assert_eq!(back, q);
        assert!(back.max_abs_diff(&depth) <= 0.5e-4 + 1e-12);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
