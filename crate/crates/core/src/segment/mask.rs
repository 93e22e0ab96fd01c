//! Binary masks, run-length encoding and box algebra.
//!
//! RLE here is **row-major**: runs scan `y` then `x`, alternate
//! background/foreground and always start with a background run (which may
//! be zero). This is not the column-major COCO convention.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("empty mask")]
    Empty,
    #[error("rle counts sum to {sum}, expected {expected}")]
    CountSum { sum: u64, expected: u64 },
    #[error("zero-length run at index {0}")]
    ZeroRun(usize),
    #[error("mask dimensions differ: {a:?} vs {b:?}")]
    Dimensions { a: (u32, u32), b: (u32, u32) },
}

/// Decoded binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Run-length encoded mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegMask {
    pub width: u32,
    pub height: u32,
    pub rle: Vec<u32>,
}

impl SegMask {
    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn validate(&self) -> Result<(), MaskError> {
        let expected = u64::from(self.width) * u64::from(self.height);
        let sum = self.rle.iter().map(|&c| u64::from(c)).sum::<u64>();
        if sum != expected {
            return Err(MaskError::CountSum { sum, expected });
        }
        if let Some(i) = self.rle.iter().skip(1).position(|&c| c == 0) {
            return Err(MaskError::ZeroRun(i + 1));
        }
        Ok(())
    }

    pub fn encode(bitmap: &Bitmap) -> Self {
        let mut rle = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in &bitmap.bits {
            if b == current {
                run += 1;
            } else {
                rle.push(run);
                current = b;
                run = 1;
            }
        }
        if run > 0 || rle.is_empty() {
            rle.push(run);
        }
        SegMask {
            width: bitmap.width,
            height: bitmap.height,
            rle,
        }
    }

    pub fn decode(&self) -> Result<Bitmap, MaskError> {
        self.validate()?;
        let mut bits = Vec::with_capacity(self.width as usize * self.height as usize);
        for (i, &c) in self.rle.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
        }
        Ok(Bitmap {
            width: self.width,
            height: self.height,
            bits,
        })
    }

    /// Foreground pixel count, straight from the runs.
    pub fn area(&self) -> u64 {
        self.rle.iter().skip(1).step_by(2).map(|&c| u64::from(c)).sum()
    }
}

/// Half-open pixel rectangle `[x1, x2) x [y1, y2)`, serialized as
/// `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct PixelBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl From<[u32; 4]> for PixelBox {
    fn from([x1, y1, x2, y2]: [u32; 4]) -> Self {
        PixelBox { x1, y1, x2, y2 }
    }
}

impl From<PixelBox> for [u32; 4] {
    fn from(b: PixelBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl PixelBox {
    pub fn as_f64(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2].map(f64::from)
    }

    pub fn area(&self) -> u64 {
        u64::from(self.x2.saturating_sub(self.x1)) * u64::from(self.y2.saturating_sub(self.y1))
    }

    pub fn translate(&self, dx: u32, dy: u32) -> Self {
        PixelBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }
}

/// Tight bounding box of the foreground.
pub fn mask_to_box(mask: &SegMask) -> Result<PixelBox, MaskError> {
    mask.validate()?;
    let w = u64::from(mask.width);
    let (mut x1, mut y1, mut x2, mut y2) = (u64::MAX, u64::MAX, 0u64, 0u64);
    let mut pos = 0u64;
    for (i, &c) in mask.rle.iter().enumerate() {
        let c = u64::from(c);
        if i % 2 == 1 && c > 0 {
            let (first, last) = (pos, pos + c - 1);
            let (fy, ly) = (first / w, last / w);
            y1 = y1.min(fy);
            y2 = y2.max(ly + 1);
            if fy == ly {
                x1 = x1.min(first % w);
                x2 = x2.max(last % w + 1);
            } else {
                // run wraps a row boundary, so it touches both image edges
                x1 = 0;
                x2 = w;
            }
        }
        pos += c;
    }
    if y2 == 0 {
        return Err(MaskError::Empty);
    }
    Ok(PixelBox {
        x1: x1 as u32,
        y1: y1 as u32,
        x2: x2 as u32,
        y2: y2 as u32,
    })
}

/// IoU of two `[x1, y1, x2, y2]` rectangles; 0 when the union is empty.
pub fn iou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn box_iou(a: &PixelBox, b: &PixelBox) -> f64 {
    iou_xyxy(a.as_f64(), b.as_f64())
}

/// Pixel IoU of two same-sized masks; 0 when both are empty.
pub fn mask_iou(a: &SegMask, b: &SegMask) -> Result<f64, MaskError> {
    if a.dims() != b.dims() {
        return Err(MaskError::Dimensions {
            a: a.dims(),
            b: b.dims(),
        });
    }
    let (da, db) = (a.decode()?, b.decode()?);
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in da.bits.iter().zip(&db.bits) {
        inter += u64::from(x && y);
        union += u64::from(x || y);
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_full_encodings() {
        let empty = Bitmap::new(4, 3);
        assert_eq!(SegMask::encode(&empty).rle, vec![12]);
        let full = Bitmap {
            width: 4,
            height: 3,
            bits: vec![true; 12],
        };
        assert_eq!(SegMask::encode(&full).rle, vec![0, 12]);
        assert_eq!(SegMask::encode(&full).decode().unwrap(), full);
    }

    #[test]
    fn validation_errors() {
        let m = SegMask {
            width: 2,
            height: 2,
            rle: vec![1, 2],
        };
        assert!(matches!(m.validate(), Err(MaskError::CountSum { .. })));
        let m = SegMask {
            width: 2,
            height: 2,
            rle: vec![1, 0, 3],
        };
        assert_eq!(m.validate(), Err(MaskError::ZeroRun(1)));
    }

    #[test]
    fn single_pixel_box() {
        let mut b = Bitmap::new(7, 5);
        b.set(3, 2, true);
        assert_eq!(
            mask_to_box(&SegMask::encode(&b)).unwrap(),
            PixelBox::from([3, 2, 4, 3])
        );
    }

    #[test]
    fn wrapping_run_box() {
        let mut b = Bitmap::new(4, 3);
        b.set(3, 0, true);
        b.set(0, 1, true);
        assert_eq!(
            mask_to_box(&SegMask::encode(&b)).unwrap(),
            PixelBox::from([0, 0, 4, 2])
        );
    }

    #[test]
    fn empty_mask_has_no_box() {
        let m = SegMask::encode(&Bitmap::new(3, 3));
        assert_eq!(mask_to_box(&m).unwrap_err().to_string(), "empty mask");
    }

    #[test]
    fn box_iou_cases() {
        let a = PixelBox::from([0, 0, 2, 2]);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &PixelBox::from([5, 5, 6, 6])), 0.0);
        assert_eq!(box_iou(&a, &PixelBox::from([1, 1, 3, 3])), 1.0 / 7.0);
        let degenerate = PixelBox::from([1, 1, 1, 1]);
        assert_eq!(box_iou(&degenerate, &degenerate), 0.0);
    }

    #[test]
    fn mask_iou_cases() {
        let mut a = Bitmap::new(4, 4);
        let mut b = Bitmap::new(4, 4);
        a.set(0, 0, true);
        a.set(1, 0, true);
        b.set(1, 0, true);
        let (ma, mb) = (SegMask::encode(&a), SegMask::encode(&b));
        assert_eq!(mask_iou(&ma, &mb).unwrap(), 0.5);
        let empty = SegMask::encode(&Bitmap::new(4, 4));
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 0.0);
        let other = SegMask::encode(&Bitmap::new(2, 2));
        assert!(mask_iou(&ma, &other).is_err());
    }

    #[test]
    fn box_serializes_as_array() {
        let b = PixelBox::from([1, 2, 3, 4]);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1,2,3,4]");
    }
}
