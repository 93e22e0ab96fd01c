//! Integer label images (PGM) for the mock segmenter, plus PGM debug dumps
//! of dense attention maps.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{GraymapHeader, PnmEncoder, SampleEncoding};
use image::{DynamicImage, ExtendedColorType};
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("label image {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("label image {path}: unsupported pixel format {format:?}")]
    Format { path: String, format: image::ColorType },
    #[error("label {0} does not fit in 16 bits")]
    Overflow(u32),
    #[error("crop {x},{y} {w}x{h} outside {width}x{height} image")]
    Crop {
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },
}

/// Row-major integer labels; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u32>,
}

impl LabelImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> u32 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, label: u32) {
        self.data[y as usize * self.width as usize + x as usize] = label;
    }

    pub fn fill_rect(&mut self, x1: u32, y1: u32, x2: u32, y2: u32, label: u32) {
        for y in y1..y2 {
            for x in x1..x2 {
                self.set(x, y, label);
            }
        }
    }

    pub fn crop(&self, x: u32, y: u32, w: u32, h: u32) -> Result<LabelImage, LabelError> {
        if x.checked_add(w).is_none_or(|r| r > self.width) || y.checked_add(h).is_none_or(|b| b > self.height) {
            return Err(LabelError::Crop {
                x,
                y,
                w,
                h,
                width: self.width,
                height: self.height,
            });
        }
        let mut out = LabelImage::new(w, h);
        for yy in 0..h {
            for xx in 0..w {
                out.set(xx, yy, self.get(x + xx, y + yy));
            }
        }
        Ok(out)
    }

    /// Reads an 8- or 16-bit grayscale PGM.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, LabelError> {
        let path = path.as_ref();
        let err = |source| LabelError::Image {
            path: path.display().to_string(),
            source,
        };
        let img = image::ImageReader::open(path)
            .map_err(|e| err(image::ImageError::IoError(e)))?
            .with_guessed_format()
            .map_err(|e| err(image::ImageError::IoError(e)))?
            .decode()
            .map_err(err)?;
        let (width, height) = (img.width(), img.height());
        let data = match img {
            DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
            DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(u32::from).collect(),
            other => {
                return Err(LabelError::Format {
                    path: path.display().to_string(),
                    format: other.color(),
                })
            }
        };
        Ok(LabelImage { width, height, data })
    }

    /// Writes a binary 16-bit PGM.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LabelError> {
        let raw = self
            .data
            .iter()
            .map(|&v| u16::try_from(v).map_err(|_| LabelError::Overflow(v)))
            .collect::<Result<Vec<u16>, _>>()?;
        write_pgm16(path.as_ref(), self.width, self.height, raw)
    }
}

fn write_pgm16(path: &Path, width: u32, height: u32, raw: Vec<u16>) -> Result<(), LabelError> {
    let err = |source| LabelError::Image {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(|e| err(image::ImageError::IoError(e)))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_header(
            GraymapHeader {
                encoding: SampleEncoding::Binary,
                height,
                width,
                maxwhite: 65535,
            }
            .into(),
        )
        .encode(&raw[..], width, height, ExtendedColorType::L16)
        .map_err(err)
}

/// Dumps a dense map as a 16-bit PGM scaled so its maximum is 65535.
pub fn dump_dense_map(path: impl AsRef<Path>, dense: &Array2<f64>) -> Result<(), LabelError> {
    let (h, w) = dense.dim();
    let max = dense.fold(0.0f64, |m, &v| m.max(v));
    let scale = if max > 0.0 { 65535.0 / max } else { 0.0 };
    let raw = dense.iter().map(|&v| (v * scale).round().clamp(0.0, 65535.0) as u16).collect();
    write_pgm16(path.as_ref(), w as u32, h as u32, raw)
}
