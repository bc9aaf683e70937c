//! Grayscale PPM heatmaps of SPD maps.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use spdkit::SpdMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VizMode {
    /// L2 norm of each pixel's descriptor.
    Norm,
    /// One bin channel, radius ring `i` and angle sector `j`.
    Bin(usize, usize),
}

impl FromStr for VizMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "norm" {
            return Ok(Self::Norm);
        }
        let bad = || format!("invalid mode `{s}` (expected `norm` or `bin:I,J`)");
        let rest = s.strip_prefix("bin:").ok_or_else(bad)?;
        let (i, j) = rest.split_once(',').ok_or_else(bad)?;
        Ok(Self::Bin(i.trim().parse().map_err(|_| bad())?, j.trim().parse().map_err(|_| bad())?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BadBinIndex {
    pub bin: (usize, usize),
    pub m: usize,
    pub n: usize,
}

impl fmt::Display for BadBinIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "bin ({}, {}) is outside a {}x{} descriptor",
            self.bin.0, self.bin.1, self.m, self.n
        )
    }
}

impl std::error::Error for BadBinIndex {}

/// Scalar value per pixel for `mode`, row-major.
pub fn channel(map: &SpdMap, mode: VizMode) -> Result<Vec<f64>, BadBinIndex> {
    let (w, h) = (map.width(), map.height());
    let pick: Box<dyn Fn(&[f64]) -> f64> = match mode {
        VizMode::Norm => Box::new(|d| d.iter().map(|v| v * v).sum::<f64>().sqrt()),
        VizMode::Bin(i, j) => {
            if i >= map.m() || j >= map.n() {
                return Err(BadBinIndex {
                    bin: (i, j),
                    m: map.m(),
                    n: map.n(),
                });
            }
            let k = i * map.n() + j;
            Box::new(move |d| d[k])
        }
    };
    Ok((0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| pick(map.pixel(x, y))).collect())
}

/// Min-max scales to `0..=255`. A constant image maps to black if it is
/// zero and to white otherwise.
pub fn scale_to_u8(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else if v != 0.0 {
                255
            } else {
                0
            }
        })
        .collect()
}

/// Binary `P6` image with equal RGB channels.
pub fn write_ppm<W: Write>(mut out: W, width: usize, height: usize, gray: &[u8]) -> io::Result<()> {
    write!(out, "P6\n{width} {height}\n255\n")?;
    let rgb: Vec<u8> = gray.iter().flat_map(|&g| [g, g, g]).collect();
    out.write_all(&rgb)?;
    out.flush()
}
