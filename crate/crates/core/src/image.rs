//! Dense row-major images and their file formats (PNG, PPM, PFM, 16-bit depth PNG).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// H x W x 3 color image, row-major, channels interleaved, nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Argument(format!(
                "{} values cannot form a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Single channel as a scalar plane.
    pub fn channel(&self, c: usize) -> ScalarImage {
        ScalarImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().skip(c).step_by(3).copied().collect(),
        }
    }

    /// Rounds through 8-bit storage, as a PNG round trip would.
    pub fn quantized_u8(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| image_error(path, e))
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(|e| image_error(path, e))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data: img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        })
    }

    /// Binary PPM (P6, maxval 255).
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_rgb8());
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::parse(path, 0, other.to_string()),
    }
}

/// H x W scalar plane (depth, alpha), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// Sidecar describing how 16-bit depth PNG codes map to scene units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthPngSidecar {
    /// Scene units per code: `depth = code * scale`.
    pub scale: f64,
}

impl ScalarImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Argument(format!(
                "{} values cannot form a {width}x{height} plane",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Rounds through 32-bit storage, as a PFM round trip would.
    pub fn quantized_f32(&self) -> Self {
        self.map(|v| v as f32 as f64)
    }

    /// Little-endian grayscale PFM (`Pf`, negative scale), rows stored bottom-up.
    pub fn write_pfm(&self, path: &Path) -> Result<()> {
        let mut out = format!("Pf\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                out.extend_from_slice(&(self.get(x, y) as f32).to_le_bytes());
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_pfm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse_pfm(&bytes, path)
    }

    fn parse_pfm(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0usize;
        let next_token = |pos: &mut usize| -> Result<(String, usize)> {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            let start = *pos;
            while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if start == *pos {
                return Err(Error::parse(path, start as u64, "unexpected end of PFM header"));
            }
            Ok((String::from_utf8_lossy(&bytes[start..*pos]).into_owned(), start))
        };
        let (magic, at) = next_token(&mut pos)?;
        if magic != "Pf" {
            return Err(Error::parse(
                path,
                at as u64,
                format!("expected grayscale PFM magic `Pf`, found `{magic}`"),
            ));
        }
        let dim = |pos: &mut usize| -> Result<usize> {
            let (tok, at) = next_token(pos)?;
            tok.parse()
                .map_err(|_| Error::parse(path, at as u64, format!("bad dimension `{tok}`")))
        };
        let width = dim(&mut pos)?;
        let height = dim(&mut pos)?;
        let (scale_tok, at) = next_token(&mut pos)?;
        let scale: f64 = scale_tok
            .parse()
            .map_err(|_| Error::parse(path, at as u64, format!("bad scale `{scale_tok}`")))?;
        if scale >= 0.0 {
            return Err(Error::parse(
                path,
                at as u64,
                "big-endian PFM is not supported",
            ));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = width * height * 4;
        if bytes.len() < pos + need {
            return Err(Error::parse(
                path,
                bytes.len() as u64,
                format!(
                    "truncated raster: expected {need} bytes after header, found {}",
                    bytes.len().saturating_sub(pos)
                ),
            ));
        }
        let mut out = Self::new(width, height);
        for (row, chunk) in bytes[pos..pos + need].chunks_exact(width * 4).enumerate() {
            let y = height - 1 - row;
            for (x, v) in chunk.chunks_exact(4).enumerate() {
                out.set(x, y, f32::from_le_bytes([v[0], v[1], v[2], v[3]]) as f64);
            }
        }
        Ok(out)
    }

    /// 16-bit grayscale PNG plus `<path>.json` sidecar carrying the scale.
    pub fn write_depth_png16(&self, path: &Path) -> Result<DepthPngSidecar> {
        let max = self.data.iter().cloned().fold(0.0f64, f64::max);
        let scale = if max > 0.0 { max / 65535.0 } else { 1.0 };
        let codes: Vec<u16> = self
            .data
            .iter()
            .map(|&d| (d.max(0.0) / scale).round().min(65535.0) as u16)
            .collect();
        let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
            self.width as u32,
            self.height as u32,
            codes,
        )
        .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| image_error(path, e))?;
        let sidecar = DepthPngSidecar { scale };
        let side_path = sidecar_path(path);
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::File::create(&side_path)
            .and_then(|mut f| f.write_all(json.as_bytes()))
            .map_err(|e| Error::io(&side_path, e))?;
        Ok(sidecar)
    }

    /// Grayscale 8-bit PNG of `value / max` for quick inspection.
    pub fn write_visualization_png(&self, path: &Path) -> Result<()> {
        let max = self.data.iter().cloned().fold(0.0f64, f64::max);
        let norm = if max > 0.0 { max } else { 1.0 };
        let buf = image::GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| to_u8(v / norm)).collect(),
        )
        .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| image_error(path, e))
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let img = ScalarImage::from_vec(3, 2, vec![0.1, 1.0, 2.5, 3.25, 1e3, 7.0]).unwrap();
        img.write_pfm(&path).unwrap();
        let back = ScalarImage::read_pfm(&path).unwrap();
        assert_eq!(back, img.quantized_f32());
    }

    #[test]
    fn truncated_pfm_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        ScalarImage::filled(4, 4, 1.0).write_pfm(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        match ScalarImage::read_pfm(&path) {
            Err(Error::Parse { offset, path: p, .. }) => {
                assert_eq!(offset, (bytes.len() - 10) as u64);
                assert_eq!(p, path);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn png_round_trip_is_u8_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let img = Image::from_fn(5, 3, |x, y| [x as f64 / 4.0, y as f64 / 2.0, 0.3]);
        img.write_png(&path).unwrap();
        assert_eq!(Image::read_png(&path).unwrap(), img.quantized_u8());
    }

    #[test]
    fn ppm_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        Image::filled(4, 2, [1.0, 0.0, 0.5]).write_ppm(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n4 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 4 * 2 * 3);
        assert_eq!(&bytes[11..14], &[255, 0, 128]);
    }

    #[test]
    fn depth_png16_sidecar_scale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let img = ScalarImage::from_vec(2, 1, vec![0.0, 6.5535]).unwrap();
        let side = img.write_depth_png16(&path).unwrap();
        assert!((side.scale - 1e-4).abs() < 1e-15);
        let json = fs::read_to_string(dir.path().join("d.png.json")).unwrap();
        let parsed: DepthPngSidecar = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, side);
    }
}
