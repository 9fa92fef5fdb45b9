//! Planar rasters and the `RBR1` container.
//!
//! ```text
//! "RBR1" | u8 dtype (0 = u8, 1 = f32) | u32 channels | u32 height | u32 width | samples
//! ```
//! Samples are channel-major, row-major within a channel; integers and
//! floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{ensure, Error, Result};

const MAGIC: &[u8; 4] = b"RBR1";

/// Sample types an `RBR1` file can carry.
pub trait Sample: Copy + Default + PartialEq + std::fmt::Debug {
    const DTYPE: u8;
    const WIDTH: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Sample for u8 {
    const DTYPE: u8 = 0;
    const WIDTH: usize = 1;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

impl Sample for f32 {
    const DTYPE: u8 = 1;
    const WIDTH: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

/// A `channels × height × width` planar image.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<P = u8> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<P>,
}

impl<P: Sample> Raster<P> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<P>) -> Result<Self> {
        ensure!(
            channels > 0 && height > 0 && width > 0,
            "raster extents must be positive, got {channels}x{height}x{width}"
        );
        ensure!(
            data.len() == channels * height * width,
            "raster {channels}x{height}x{width} needs {} samples, got {}",
            channels * height * width,
            data.len()
        );
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: P) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> P {
        self.data[c * self.plane() + y * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: P) {
        let plane = self.plane();
        self.data[c * plane + y * self.width + x] = v;
    }

    pub fn same_extent<Q>(&self, other: &Raster<Q>) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Copy out the window `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        ensure!(
            y0 + h <= self.height && x0 + w <= self.width && h > 0 && w > 0,
            "crop {h}x{w} at ({y0},{x0}) exceeds raster {}x{}",
            self.height,
            self.width
        );
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in y0..y0 + h {
                let row = c * self.plane() + y * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Ok(Self {
            channels: self.channels,
            height: h,
            width: w,
            data,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.data.len() * P::WIDTH);
        out.extend_from_slice(MAGIC);
        out.push(P::DTYPE);
        for d in [self.channels, self.height, self.width] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }
}

/// An `RBR1` raster of either sample type.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyRaster {
    U8(Raster<u8>),
    F32(Raster<f32>),
}

fn parse_typed<P: Sample>(c: usize, h: usize, w: usize, body: &[u8]) -> Result<Raster<P>> {
    let need = c * h * w * P::WIDTH;
    if body.len() < need {
        return Err(Error::format(format!(
            "raster body truncated: {} bytes for {c}x{h}x{w}, need {need}",
            body.len()
        )));
    }
    if body.len() > need {
        return Err(Error::format(format!(
            "raster body has {} trailing bytes",
            body.len() - need
        )));
    }
    let data = body.chunks_exact(P::WIDTH).map(P::read_le).collect();
    Ok(Raster {
        channels: c,
        height: h,
        width: w,
        data,
    })
}

/// Decode an in-memory `RBR1` image.
pub fn decode_raster(bytes: &[u8]) -> Result<AnyRaster> {
    if bytes.len() < 17 {
        return Err(Error::format(format!(
            "raster header truncated ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(format!(
            "bad raster magic {:?}, expected \"RBR1\"",
            &bytes[..4]
        )));
    }
    let dims: Vec<usize> = bytes[5..17]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::format(format!("raster shape {c}x{h}x{w} has a zero extent")));
    }
    let body = &bytes[17..];
    match bytes[4] {
        0 => Ok(AnyRaster::U8(parse_typed(c, h, w, body)?)),
        1 => Ok(AnyRaster::F32(parse_typed(c, h, w, body)?)),
        other => Err(Error::format(format!("unknown raster dtype code {other}"))),
    }
}

pub fn read_raster(path: &Path) -> Result<AnyRaster> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Read a raster that must hold `u8` samples (images and label maps).
pub fn read_u8_raster(path: &Path) -> Result<Raster<u8>> {
    match read_raster(path)? {
        AnyRaster::U8(r) => Ok(r),
        AnyRaster::F32(_) => Err(Error::format(format!("{}: dtype is f32, expected u8", path.display()))),
    }
}

/// Read a single-channel class-index raster.
pub fn read_label_raster(path: &Path) -> Result<Raster<u8>> {
    let r = read_u8_raster(path)?;
    if r.channels != 1 {
        return Err(Error::format(format!(
            "{}: label raster has {} channels, expected 1",
            path.display(),
            r.channels
        )));
    }
    Ok(r)
}

pub fn write_raster<P: Sample>(path: &Path, raster: &Raster<P>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&raster.to_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let r = Raster::new(2, 1, 3, vec![1u8, 2, 3, 4, 5, 6]).unwrap();
        let b = r.to_bytes();
        assert_eq!(&b[..4], b"RBR1");
        assert_eq!(b[4], 0);
        assert_eq!(&b[5..9], &2u32.to_le_bytes());
        assert_eq!(&b[9..13], &1u32.to_le_bytes());
        assert_eq!(&b[13..17], &3u32.to_le_bytes());
        assert_eq!(&b[17..], &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn f32_round_trip() {
        let r = Raster::new(1, 2, 2, vec![0.5f32, -1.0, f32::MAX, 3.25]).unwrap();
        assert_eq!(decode_raster(&r.to_bytes()).unwrap(), AnyRaster::F32(r));
    }

    #[test]
    fn truncated_and_corrupt_inputs_are_format_errors() {
        let r = Raster::new(3, 4, 4, vec![7u8; 48]).unwrap();
        let bytes = r.to_bytes();
        for cut in [0, 3, 10, 20, bytes.len() - 1] {
            assert!(
                matches!(decode_raster(&bytes[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        let err = decode_raster(&bad).unwrap_err().to_string();
        assert!(err.contains("dtype"), "{err}");
        let mut bad = bytes;
        bad[3] = b'2';
        assert!(decode_raster(&bad).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn crop_window() {
        let r = Raster::new(1, 3, 3, (0u8..9).collect()).unwrap();
        let c = r.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.data, vec![4, 5, 7, 8]);
        assert!(r.crop(2, 2, 2, 2).is_err());
    }
}
