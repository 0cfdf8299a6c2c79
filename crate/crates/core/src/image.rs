//! 8-bit RGB images, frame strips and binary PPM output.

use std::io::Write;
use std::path::Path;

use autodiff::Tensor;

use crate::error::{io_err, CoreError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB.
    pub data: Vec<u8>,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Image {
    /// From an `[H, W, 3]` tensor with values in `[0, 1]` (clamped).
    pub fn from_frame(frame: &Tensor) -> Result<Self> {
        let s = frame.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(CoreError::InvalidArgument(format!(
                "expected an [H, W, 3] frame, got {s:?}"
            )));
        }
        Ok(Self {
            width: s[1],
            height: s[0],
            data: frame.data().iter().map(|&v| to_u8(v)).collect(),
        })
    }

    /// Grid of frames, one row per sequence, separated by `gap` white pixels.
    pub fn strip(rows: &[Vec<Tensor>], gap: usize) -> Result<Self> {
        let first = rows
            .iter()
            .flat_map(|r| r.first())
            .next()
            .ok_or_else(|| CoreError::InvalidArgument("empty strip".into()))?;
        let (h, w) = (first.shape()[0], first.shape()[1]);
        let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
        let width = cols * w + cols.saturating_sub(1) * gap;
        let height = rows.len() * h + rows.len().saturating_sub(1) * gap;
        let mut data = vec![255u8; width * height * 3];
        for (r, row) in rows.iter().enumerate() {
            for (c, frame) in row.iter().enumerate() {
                let img = Image::from_frame(frame)?;
                if (img.height, img.width) != (h, w) {
                    return Err(CoreError::InvalidArgument("frames in a strip differ in size".into()));
                }
                let (oy, ox) = (r * (h + gap), c * (w + gap));
                for y in 0..h {
                    let dst = ((oy + y) * width + ox) * 3;
                    data[dst..dst + w * 3].copy_from_slice(&img.data[y * w * 3..(y + 1) * w * 3]);
                }
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&self.to_ppm()).map_err(io_err(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_clamping() {
        let t = Tensor::new(vec![1, 2, 3], vec![0.0, 0.5, 1.0, -1.0, 2.0, 0.2]).unwrap();
        let img = Image::from_frame(&t).unwrap();
        assert_eq!(img.data, vec![0, 128, 255, 0, 255, 51]);
        let ppm = img.to_ppm();
        assert!(ppm.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(ppm.len(), 11 + 6);
    }

    #[test]
    fn strip_lays_out_rows_with_gaps() {
        let a = Tensor::zeros(&[2, 2, 3]);
        let s = Image::strip(&[vec![a.clone(), a.clone()], vec![a]], 1).unwrap();
        assert_eq!((s.width, s.height), (5, 5));
        // gap column is white, frames are black
        assert_eq!(&s.data[0..3], &[0, 0, 0]);
        assert_eq!(&s.data[6..9], &[255, 255, 255]);
    }
}
