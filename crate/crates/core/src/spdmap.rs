//! Dense per-image descriptor maps: assembly, pooling and the `SPD1` file format.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::ingest::{extract_instances, InstanceMap};
use crate::spd::{self, bin_index, BinFn, BinSpec, Point, RadialScale, SpdError};

pub const MAGIC: [u8; 4] = *b"SPD1";
const HEADER_LEN: usize = 4 + 4 * 4;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("{width}x{height} map is not divisible by pooling factor {factor}")]
    NonDivisibleDims {
        width: usize,
        height: usize,
        factor: usize,
    },
    #[error("pooling factor {0} is not a power of two")]
    InvalidFactor(usize),
    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad SPD1 data: {0}")]
    Format(String),
}

/// `height x width` grid of `m * n` bin vectors, pixel-major row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMap {
    width: usize,
    height: usize,
    m: usize,
    n: usize,
    data: Vec<f64>,
}

impl SpdMap {
    pub fn zeros(width: usize, height: usize, m: usize, n: usize) -> Self {
        Self {
            width,
            height,
            m,
            n,
            data: vec![0.0; width * height * m * n],
        }
    }

    pub fn from_data(width: usize, height: usize, m: usize, n: usize, data: Vec<f64>) -> Result<Self, MapError> {
        if data.len() != width * height * m * n {
            return Err(MapError::Format(format!(
                "{} values for {width}x{height}x{m}x{n}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            m,
            n,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bins(&self) -> usize {
        self.m * self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let b = self.bins();
        let i = (y * self.width + x) * b;
        &self.data[i..i + b]
    }

    pub fn pixel_sum(&self, x: usize, y: usize) -> f64 {
        self.pixel(x, y).iter().sum()
    }

    /// The map as it will read back from an `SPD1` file.
    pub fn quantized(&self) -> Self {
        Self {
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
            ..self.clone()
        }
    }

    /// Byte-level equality of the stored values, with NaN payloads and
    /// signed zeros distinguished.
    pub fn bit_eq(&self, other: &Self) -> bool {
        (self.width, self.height, self.m, self.n) == (other.width, other.height, other.m, other.n)
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Same map translated by `(dx, dy)` into a `width x height` canvas;
    /// pixels shifted off the canvas are dropped.
    pub fn shifted(&self, dx: isize, dy: isize, width: usize, height: usize) -> Self {
        let mut out = Self::zeros(width, height, self.m, self.n);
        let b = self.bins();
        for y in 0..self.height {
            for x in 0..self.width {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx as usize >= width || ny as usize >= height {
                    continue;
                }
                let dst = (ny as usize * width + nx as usize) * b;
                out.data[dst..dst + b].copy_from_slice(self.pixel(x, y));
            }
        }
        out
    }
}

/// Bookkeeping gathered while assembling a map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MapStats {
    pub instances: usize,
    pub instance_pixels: usize,
    /// Pixels that received the zero vector because their distances all vanished.
    pub degenerate_pixels: usize,
    /// `(instance id, contour length)` in ascending ID order.
    pub contour_sizes: Vec<(u32, usize)>,
}

#[derive(Debug, Clone, Copy)]
pub struct MapOptions {
    /// Worker threads; 1 selects the serial path, 0 uses all available.
    pub threads: usize,
    pub bin: BinFn,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            threads: 1,
            bin: bin_index,
        }
    }
}

impl MapOptions {
    pub fn threads(threads: usize) -> Self {
        Self {
            threads,
            ..Self::default()
        }
    }
}

struct PreparedInstance {
    contour: Vec<Point>,
    /// Shared max distance in [`RadialScale::Instance`] mode.
    max_raw: f64,
}

/// Serial map assembly.
pub fn compute_map(inst: &InstanceMap, spec: &BinSpec) -> SpdMap {
    compute_map_with(inst, spec, &MapOptions::default())
        .expect("normalized distances never exceed the outer edge")
        .0
}

pub fn compute_map_parallel(inst: &InstanceMap, spec: &BinSpec, threads: usize) -> SpdMap {
    compute_map_with(inst, spec, &MapOptions::threads(threads))
        .expect("normalized distances never exceed the outer edge")
        .0
}

pub fn compute_map_with(
    inst: &InstanceMap,
    spec: &BinSpec,
    opts: &MapOptions,
) -> Result<(SpdMap, MapStats), SpdError> {
    let regions = extract_instances(inst);
    let mut stats = MapStats {
        instances: regions.len(),
        ..MapStats::default()
    };
    let mut prepared = HashMap::with_capacity(regions.len());
    for region in &regions {
        let contour: Vec<Point> = region.contour.iter().copied().map(Point::from).collect();
        let max_raw = match spec.scale() {
            RadialScale::Instance => spd::diameter(&contour),
            RadialScale::Point => f64::NAN,
        };
        stats.instance_pixels += region.interior.len();
        stats.contour_sizes.push((region.id, contour.len()));
        // Distances all vanish only for a one-pixel instance.
        if region.interior.len() == 1 {
            stats.degenerate_pixels += 1;
        }
        prepared.insert(region.id, PreparedInstance { contour, max_raw });
    }

    let (w, h) = (inst.width(), inst.height());
    let bins = spec.bins();
    let mut map = SpdMap::zeros(w, h, spec.m(), spec.n());
    let fill = |idx: usize, out: &mut [f64]| -> Result<(), SpdError> {
        let id = inst.ids()[idx];
        if id == 0 {
            return Ok(());
        }
        let p = &prepared[&id];
        let o = Point::new((idx % w) as f64, (idx / w) as f64);
        let max_raw = match spec.scale() {
            RadialScale::Instance => p.max_raw,
            RadialScale::Point => spd::farthest_distance(o, &p.contour)?,
        };
        spd::accumulate(o, &p.contour, spec, max_raw, opts.bin, out)?;
        Ok(())
    };

    if bins == 0 {
        return Ok((map, stats));
    }
    if opts.threads == 1 {
        for (idx, out) in map.data.chunks_mut(bins).enumerate() {
            fill(idx, out)?;
        }
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .expect("thread pool construction");
        pool.install(|| {
            map.data
                .par_chunks_mut(bins)
                .enumerate()
                .try_for_each(|(idx, out)| fill(idx, out))
        })?;
    }
    Ok((map, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolMode {
    #[default]
    Average,
    /// Take the pixel nearest each block center (rounding down-right).
    Nearest,
}

pub fn pool_map(map: &SpdMap, factor: usize, mode: PoolMode) -> Result<SpdMap, MapError> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(MapError::InvalidFactor(factor));
    }
    if map.width % factor != 0 || map.height % factor != 0 {
        return Err(MapError::NonDivisibleDims {
            width: map.width,
            height: map.height,
            factor,
        });
    }
    let (w, h) = (map.width / factor, map.height / factor);
    let bins = map.bins();
    let mut out = SpdMap::zeros(w, h, map.m, map.n);
    let norm = 1.0 / (factor * factor) as f64;
    for by in 0..h {
        for bx in 0..w {
            let dst = (by * w + bx) * bins;
            let acc = &mut out.data[dst..dst + bins];
            match mode {
                PoolMode::Average => {
                    for y in by * factor..(by + 1) * factor {
                        for x in bx * factor..(bx + 1) * factor {
                            for (a, v) in acc.iter_mut().zip(map.pixel(x, y)) {
                                *a += v;
                            }
                        }
                    }
                    acc.iter_mut().for_each(|a| *a *= norm);
                }
                PoolMode::Nearest => {
                    let half = factor / 2;
                    acc.copy_from_slice(map.pixel(bx * factor + half, by * factor + half));
                }
            }
        }
    }
    Ok(out)
}

pub fn write_to<W: Write>(map: &SpdMap, mut w: W) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    for dim in [map.height, map.width, map.m, map.n] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(map.data.len() * 4);
    for &v in &map.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()
}

pub fn read_from<R: Read>(mut r: R) -> Result<SpdMap, MapError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|source| MapError::Io {
        path: "<reader>".into(),
        source,
    })?;
    decode(&bytes)
}

pub fn decode(bytes: &[u8]) -> Result<SpdMap, MapError> {
    if bytes.len() < HEADER_LEN {
        return Err(MapError::Format(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(MapError::Format(format!("bad magic {:02x?}", &bytes[..4])));
    }
    let field = |i: usize| {
        let o = 4 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
    };
    let (height, width, m, n) = (field(0), field(1), field(2), field(3));
    let count = [height, width, m, n]
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| MapError::Format("header dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if Some(payload.len()) != count.checked_mul(4) {
        return Err(MapError::Format(format!(
            "header {height}x{width}x{m}x{n} needs {count} f32 values, payload has {} bytes",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    SpdMap::from_data(width, height, m, n, data)
}

pub fn serialize(map: &SpdMap, path: &Path) -> Result<(), MapError> {
    let io = |source| MapError::Io {
        path: path.display().to_string(),
        source,
    };
    let f = File::create(path).map_err(io)?;
    write_to(map, BufWriter::new(f)).map_err(io)
}

pub fn deserialize(path: &Path) -> Result<SpdMap, MapError> {
    let f = File::open(path).map_err(|source| MapError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_from(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_instance() -> InstanceMap {
        let mut ids = vec![0; 25];
        for y in 1..4 {
            for x in 1..4 {
                ids[y * 5 + x] = 1;
            }
        }
        InstanceMap::new(5, 5, ids).unwrap()
    }

    #[test]
    fn empty_instance_map_gives_zero_map() {
        let inst = InstanceMap::new(4, 3, vec![0; 12]).unwrap();
        let map = compute_map(&inst, &BinSpec::default());
        assert_eq!((map.width(), map.height(), map.bins()), (4, 3, 72));
        assert!(map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn square_instance_has_unit_sums() {
        for scale in [RadialScale::Instance, RadialScale::Point] {
            let spec = BinSpec::default().with_scale(scale);
            let (map, stats) = compute_map_with(&square_instance(), &spec, &MapOptions::default()).unwrap();
            let mut nonzero = 0;
            for y in 0..5 {
                for x in 0..5 {
                    let s = map.pixel_sum(x, y);
                    if s != 0.0 {
                        nonzero += 1;
                        assert!((s - 1.0).abs() < 1e-12);
                    }
                }
            }
            assert_eq!(nonzero, 9);
            assert_eq!(stats.instances, 1);
            assert_eq!(stats.instance_pixels, 9);
            assert_eq!(stats.contour_sizes, vec![(1, 8)]);
        }
    }

    #[test]
    fn point_scale_matches_per_point_descriptor() {
        let spec = BinSpec::default().with_scale(RadialScale::Point);
        let inst = square_instance();
        let map = compute_map(&inst, &spec);
        let region = &extract_instances(&inst)[0];
        let contour: Vec<Point> = region.contour.iter().map(|&p| p.into()).collect();
        for p in &region.interior {
            let d = spd::descriptor(Point::from(*p), &contour, &spec).unwrap();
            assert_eq!(map.pixel(p.x as usize, p.y as usize), d.values());
        }
    }

    #[test]
    fn single_pixel_instance_is_zero_and_counted() {
        let mut ids = vec![0; 9];
        ids[4] = 5;
        let inst = InstanceMap::new(3, 3, ids).unwrap();
        let (map, stats) = compute_map_with(&inst, &BinSpec::default(), &MapOptions::default()).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.degenerate_pixels, 1);
    }

    #[test]
    fn disjoint_instances_are_independent() {
        let spec = BinSpec::new(4, 4).unwrap();
        let mut a = vec![0; 8 * 6];
        let mut b = vec![0; 8 * 6];
        for y in 0..3 {
            for x in 0..3 {
                a[y * 8 + x] = 1;
            }
        }
        for y in 2..6 {
            for x in 4..8 {
                b[y * 8 + x] = 2;
            }
        }
        let both: Vec<u32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let ma = compute_map(&InstanceMap::new(8, 6, a).unwrap(), &spec);
        let mb = compute_map(&InstanceMap::new(8, 6, b).unwrap(), &spec);
        let mab = compute_map(&InstanceMap::new(8, 6, both).unwrap(), &spec);
        let union: Vec<f64> = ma.data().iter().zip(mb.data()).map(|(x, y)| x + y).collect();
        assert_eq!(mab.data(), union.as_slice());
    }

    #[test]
    fn pool_identity_and_means() {
        let map = compute_map(&square_instance(), &BinSpec::default());
        assert_eq!(pool_map(&map, 1, PoolMode::Average).unwrap(), map);

        let d: Vec<f64> = (0..4).map(|i| i as f64 * 0.25).collect();
        let same = SpdMap::from_data(2, 2, 2, 2, d.repeat(4)).unwrap();
        assert_eq!(pool_map(&same, 2, PoolMode::Average).unwrap().data(), d.as_slice());

        let mut half = vec![0.0; 16];
        half[0] = 1.0;
        half[4 + 1] = 0.5;
        half[4 + 2] = 0.5;
        let mixed = SpdMap::from_data(2, 2, 2, 2, half).unwrap();
        let pooled = pool_map(&mixed, 2, PoolMode::Average).unwrap();
        assert_eq!(pooled.pixel_sum(0, 0), 0.5);
    }

    #[test]
    fn pool_rejects_bad_factors() {
        let map = SpdMap::zeros(6, 4, 1, 1);
        assert!(matches!(pool_map(&map, 3, PoolMode::Average), Err(MapError::InvalidFactor(3))));
        assert!(matches!(
            pool_map(&map, 4, PoolMode::Average),
            Err(MapError::NonDivisibleDims { .. })
        ));
        assert_eq!(pool_map(&map, 2, PoolMode::Nearest).unwrap().width(), 3);
    }

    #[test]
    fn header_layout_is_little_endian() {
        let map = SpdMap::from_data(2, 1, 1, 1, vec![1.0, 0.5]).unwrap();
        let mut bytes = Vec::new();
        write_to(&map, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], &[0x53, 0x50, 0x44, 0x31]);
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 8);
    }

    #[test]
    fn corrupt_files_rejected() {
        let map = compute_map(&square_instance(), &BinSpec::default());
        let mut bytes = Vec::new();
        write_to(&map, &mut bytes).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(MapError::Format(_))));

        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(MapError::Format(_))));
        assert!(matches!(decode(&bytes[..10]), Err(MapError::Format(_))));

        let mut header = MAGIC.to_vec();
        for d in [4u32, 4, 1, 1] {
            header.extend(d.to_le_bytes());
        }
        header.extend([0u8; 8]);
        assert!(matches!(decode(&header), Err(MapError::Format(_))));
    }
}
