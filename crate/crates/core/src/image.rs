//! RGB image with real-valued pixels in `[0, 1]`, PNG I/O and resampling.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions must be positive, got {height}x{width}")]
    EmptyDimensions { height: usize, width: usize },
    #[error("pixel buffer has {got} values, expected {expected}")]
    BufferSize { got: usize, expected: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("png decode error on {path}: {message}")]
    Decode { path: String, message: String },
    #[error("png encode error on {path}: {message}")]
    Encode { path: String, message: String },
}

/// Interleaved RGB, row-major: the value of channel `c` at `(y, x)` lives at
/// `(y * width + x) * 3 + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::EmptyDimensions { height, width });
        }
        let expected = height * width * CHANNELS;
        if data.len() != expected {
            return Err(ImageError::BufferSize {
                got: data.len(),
                expected,
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        Self {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    /// Edge-replicating access for signed coordinates.
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize, c: usize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(y, x, c)
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Bilinear resampling with half-pixel centers.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        assert!(height > 0 && width > 0, "empty resize target");
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = Image::filled(height, width, 0.0);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                for c in 0..CHANNELS {
                    let top = self.get(y0, x0, c) * (1.0 - wx) + self.get(y0, x1, c) * wx;
                    let bottom = self.get(y1, x0, c) * (1.0 - wx) + self.get(y1, x1, c) * wx;
                    out.set(y, x, c, top * (1.0 - wy) + bottom * wy);
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.height, self.width, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }

    /// Window of size `height`x`width` whose top-left corner sits at
    /// `(top, left)` in a copy of this image padded by edge replication.
    pub fn crop_padded(&self, top: isize, left: isize, height: usize, width: usize) -> Image {
        Image::from_fn(height, width, |y, x, c| {
            self.get_clamped(top + y as isize, left + x as isize, c)
        })
    }

    /// Quantizes to 8-bit RGB with `round(v * 255)`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Image, ImageError> {
        Image::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let display = path.display().to_string();
        let file = File::create(path).map_err(|source| ImageError::Io {
            path: display.clone(),
            source,
        })?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let encode = |e: png::EncodingError| ImageError::Encode {
            path: display.clone(),
            message: e.to_string(),
        };
        let mut writer = encoder.write_header().map_err(encode)?;
        writer.write_image_data(&self.to_rgb8()).map_err(encode)?;
        writer.finish().map_err(encode)
    }

    pub fn load_png(path: &Path) -> Result<Image, ImageError> {
        let display = path.display().to_string();
        let file = File::open(path).map_err(|source| ImageError::Io {
            path: display.clone(),
            source,
        })?;
        let decode = |message: String| ImageError::Decode {
            path: display.clone(),
            message,
        };
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::normalize_to_color8());
        let mut reader = decoder.read_info().map_err(|e| decode(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| decode("image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| decode(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let bytes = &buf[..info.buffer_size()];
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => bytes.to_vec(),
            png::ColorType::Rgba => bytes
                .chunks_exact(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .collect(),
            png::ColorType::Grayscale => bytes.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => bytes
                .chunks_exact(2)
                .flat_map(|p| [p[0], p[0], p[0]])
                .collect(),
            other => return Err(decode(format!("unsupported color type {other:?}"))),
        };
        Image::from_rgb8(h, w, &rgb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_constant_and_identity() {
        let img = Image::filled(7, 9, 0.3);
        let r = img.resize(4, 5);
        assert!(r.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        let g = Image::from_fn(5, 6, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 11.0);
        assert_eq!(g.resize(5, 6), g);
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Image::from_fn(3, 4, |y, x, c| ((y + x + c) % 5) as f64 / 4.0);
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!((back.height(), back.width()), (3, 4));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(matches!(Image::new(0, 3, vec![]), Err(ImageError::EmptyDimensions { .. })));
        assert!(matches!(Image::new(1, 1, vec![0.0; 2]), Err(ImageError::BufferSize { .. })));
    }

    #[test]
    fn flip_and_padded_crop() {
        let img = Image::from_fn(2, 3, |_, x, _| x as f64);
        assert_eq!(img.flip_horizontal().get(0, 0, 0), 2.0);
        let c = img.crop_padded(-1, -1, 2, 3);
        assert_eq!(c.get(0, 0, 0), 0.0);
        assert_eq!(c.get(1, 2, 0), 1.0);
        assert_eq!(img.crop_padded(0, 0, 2, 3), img);
    }
}
