//! Image file I/O: 8-bit PNG for color, PFM for float depth/normal maps.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

/// Write a color image as 8-bit PNG. Values are clamped to [0, 1].
pub fn write_png(path: &Path, width: u32, height: u32, pixels: &[[f64; 3]]) -> io::Result<()> {
    assert_eq!(pixels.len(), (width * height) as usize);
    let mut buf = Vec::with_capacity(pixels.len() * 3);
    for p in pixels {
        for c in p {
            buf.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img: image::RgbImage = image::ImageBuffer::from_raw(width, height, buf)
        .expect("pixel buffer size mismatch");
    img.save(path).map_err(io::Error::other)
}

/// Read a PNG (or any supported raster) into [0, 1] RGB floats.
pub fn read_png(path: &Path) -> io::Result<(u32, u32, Vec<[f64; 3]>)> {
    let img = image::open(path).map_err(io::Error::other)?.to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img
        .pixels()
        .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
        .collect();
    Ok((w, h, pixels))
}

/// Write a single-channel float image as a little-endian PFM (`Pf`).
pub fn write_pfm_gray(path: &Path, width: u32, height: u32, values: &[f64]) -> io::Result<()> {
    assert_eq!(values.len(), (width * height) as usize);
    let mut out = Vec::with_capacity(values.len() * 4 + 32);
    write!(out, "Pf\n{} {}\n-1.0\n", width, height)?;
    // PFM stores rows bottom to top.
    for y in (0..height).rev() {
        for x in 0..width {
            let v = values[(y * width + x) as usize] as f32;
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)
}

/// Write a three-channel float image as a little-endian PFM (`PF`).
pub fn write_pfm_rgb(path: &Path, width: u32, height: u32, values: &[[f64; 3]]) -> io::Result<()> {
    assert_eq!(values.len(), (width * height) as usize);
    let mut out = Vec::with_capacity(values.len() * 12 + 32);
    write!(out, "PF\n{} {}\n-1.0\n", width, height)?;
    for y in (0..height).rev() {
        for x in 0..width {
            for c in values[(y * width + x) as usize] {
                out.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, out)
}

/// Read a PFM file. Returns `(width, height, channels, row-major top-to-bottom data)`.
pub fn read_pfm(path: &Path) -> io::Result<(u32, u32, usize, Vec<f64>)> {
    let data = fs::read(path)?;
    let mut pos = 0usize;
    let mut token = |data: &[u8]| -> io::Result<String> {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated PFM header"));
        }
        let tok = String::from_utf8_lossy(&data[start..pos]).into_owned();
        pos += 1; // single whitespace after each header token
        Ok(tok)
    };
    let magic = token(&data)?;
    let channels = match magic.as_str() {
        "PF" => 3usize,
        "Pf" => 1usize,
        other => {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("not a PFM file (magic {other:?})"),
            ))
        }
    };
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let width: u32 = token(&data)?.parse().map_err(|_| bad("bad PFM width"))?;
    let height: u32 = token(&data)?.parse().map_err(|_| bad("bad PFM height"))?;
    let scale: f64 = token(&data)?.parse().map_err(|_| bad("bad PFM scale"))?;
    let little_endian = scale < 0.0;
    let n = (width as usize) * (height as usize) * channels;
    if data.len() < pos + n * 4 {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated PFM data"));
    }
    let mut values = vec![0.0f64; n];
    let row_len = width as usize * channels;
    for row in 0..height as usize {
        // File rows run bottom to top.
        let dst_row = height as usize - 1 - row;
        for i in 0..row_len {
            let off = pos + (row * row_len + i) * 4;
            let raw: [u8; 4] = data[off..off + 4].try_into().unwrap();
            let v = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            values[dst_row * row_len + i] = v as f64;
        }
    }
    Ok((width, height, channels, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let pixels: Vec<[f64; 3]> = (0..12)
            .map(|i| [(i % 3) as f64 / 2.0, (i % 4) as f64 / 3.0, (i % 5) as f64 / 4.0])
            .collect();
        write_png(&path, 4, 3, &pixels).unwrap();
        let (w, h, back) = read_png(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        for (a, b) in pixels.iter().zip(&back) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn pfm_round_trip_gray_and_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let gray = dir.path().join("d.pfm");
        let values: Vec<f64> = (0..6).map(|i| i as f64 * 0.25 - 0.5).collect();
        write_pfm_gray(&gray, 3, 2, &values).unwrap();
        let (w, h, ch, back) = read_pfm(&gray).unwrap();
        assert_eq!((w, h, ch), (3, 2, 1));
        for (a, b) in values.iter().zip(&back) {
            assert!((a - b).abs() < 1e-6);
        }

        let rgb = dir.path().join("n.pfm");
        let pix: Vec<[f64; 3]> = (0..6).map(|i| [i as f64, -(i as f64), 0.5 * i as f64]).collect();
        write_pfm_rgb(&rgb, 2, 3, &pix).unwrap();
        let (w, h, ch, back) = read_pfm(&rgb).unwrap();
        assert_eq!((w, h, ch), (2, 3, 3));
        for (i, p) in pix.iter().enumerate() {
            for c in 0..3 {
                assert!((p[c] - back[i * 3 + c]).abs() < 1e-6);
            }
        }
    }
}
