//! Netpbm export (binary P6/P5) for eyeballing images, label maps and
//! difference heat maps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::raster::Raster;
use crate::error::{ensure, Error, Result};

fn write_netpbm(path: &Path, magic: &str, w: usize, h: usize, body: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "{magic}\n{w} {h}\n255\n")
        .and_then(|_| out.write_all(body))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

/// Write a 3-channel raster as P6.
pub fn write_ppm(path: &Path, rgb: &Raster<u8>) -> Result<()> {
    ensure!(rgb.channels == 3, "PPM export needs 3 channels, got {}", rgb.channels);
    let plane = rgb.plane();
    let mut body = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            body.push(rgb.data[c * plane + i]);
        }
    }
    write_netpbm(path, "P6", rgb.width, rgb.height, &body)
}

/// Write a 1-channel raster as P5.
pub fn write_pgm(path: &Path, grey: &Raster<u8>) -> Result<()> {
    ensure!(grey.channels == 1, "PGM export needs 1 channel, got {}", grey.channels);
    write_netpbm(path, "P5", grey.width, grey.height, &grey.data)
}

/// Min-max scale an `h × w` field to grey levels; a flat field maps to 0.
pub fn heat_map(values: &[f32], h: usize, w: usize) -> Result<Raster<u8>> {
    ensure!(
        values.len() == h * w,
        "heat map needs {} values, got {}",
        h * w,
        values.len()
    );
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let data = values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (255.0 * (v - lo) / span).round() as u8
            } else {
                0
            }
        })
        .collect();
    Raster::new(1, h, w, data)
}

/// Display colour of a change class; background is black.
pub fn class_colour(class: u8) -> [u8; 3] {
    const TABLE: [[u8; 3]; 12] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
    ];
    TABLE[class as usize % TABLE.len()]
}

/// Blend class colours over an image at half opacity; background pixels
/// keep the image.
pub fn overlay(image: &Raster<u8>, classes: &Raster<u8>) -> Result<Raster<u8>> {
    ensure!(
        image.channels == 3 && classes.channels == 1 && image.same_extent(classes),
        "overlay needs a 3-channel image and a 1-channel map of equal extents"
    );
    let plane = image.plane();
    let mut out = image.clone();
    for i in 0..plane {
        let k = classes.data[i];
        if k == 0 {
            continue;
        }
        let col = class_colour(k);
        for (c, &tint) in col.iter().enumerate() {
            let v = &mut out.data[c * plane + i];
            *v = ((*v as u16 + tint as u16) / 2) as u8;
        }
    }
    Ok(out)
}
