//! Loading of semantic/instance label maps and per-instance point sets.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor4;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {format} input: {reason}")]
    Format { format: &'static str, reason: String },
    #[error("class id {class} is out of range for {num_classes} classes")]
    ClassOutOfRange { class: u32, num_classes: usize },
    #[error("label map is {label_w}x{label_h} but instance map is {inst_w}x{inst_h}")]
    DimensionMismatch {
        label_w: usize,
        label_h: usize,
        inst_w: usize,
        inst_h: usize,
    },
}

/// On-disk encodings accepted for label and instance maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapFormat {
    /// Binary PGM (`P5`), 8- or 16-bit samples.
    Pgm,
    /// Palette PNG; the palette index is the ID.
    PngIndexed,
    /// Plain comma-separated integers, one image row per line.
    Csv,
}

impl MapFormat {
    /// Guess the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "pgm" => Some(Self::Pgm),
            "png" => Some(Self::PngIndexed),
            "csv" | "txt" => Some(Self::Csv),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Pgm => "pgm",
            Self::PngIndexed => "png",
            Self::Csv => "csv",
        }
    }
}

impl std::str::FromStr for MapFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pgm" => Ok(Self::Pgm),
            "png" | "png-indexed" => Ok(Self::PngIndexed),
            "csv" | "raw-csv" => Ok(Self::Csv),
            other => Err(format!("unknown map format `{other}` (expected pgm, png-indexed or raw-csv)")),
        }
    }
}

/// A pixel coordinate, `x` to the right and `y` down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pixel {
    pub x: u32,
    pub y: u32,
}

impl Pixel {
    pub const fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }
}

/// Width x height grid of integer IDs, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
struct IdGrid {
    width: usize,
    height: usize,
    ids: Vec<u32>,
}

impl IdGrid {
    fn new(width: usize, height: usize, ids: Vec<u32>) -> Result<Self, IngestError> {
        if ids.len() != width * height {
            return Err(IngestError::Format {
                format: "grid",
                reason: format!("{} values for a {width}x{height} grid", ids.len()),
            });
        }
        Ok(Self { width, height, ids })
    }
}

/// Per-pixel semantic class IDs (0 = unlabeled).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    grid: IdGrid,
}

/// Per-pixel instance IDs (0 = no instance).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    grid: IdGrid,
}

macro_rules! grid_accessors {
    ($ty:ident, $field:ident) => {
        impl $ty {
            pub fn new(width: usize, height: usize, $field: Vec<u32>) -> Result<Self, IngestError> {
                Ok(Self {
                    grid: IdGrid::new(width, height, $field)?,
                })
            }

            pub fn width(&self) -> usize {
                self.grid.width
            }

            pub fn height(&self) -> usize {
                self.grid.height
            }

            pub fn $field(&self) -> &[u32] {
                &self.grid.ids
            }

            pub fn get(&self, x: usize, y: usize) -> u32 {
                self.grid.ids[y * self.grid.width + x]
            }
        }
    };
}

grid_accessors!(LabelMap, classes);
grid_accessors!(InstanceMap, ids);

impl LabelMap {
    /// One more than the largest class ID present.
    pub fn num_classes(&self) -> usize {
        self.grid.ids.iter().copied().max().map_or(0, |m| m as usize + 1)
    }

    pub fn check_pairing(&self, inst: &InstanceMap) -> Result<(), IngestError> {
        if self.width() != inst.width() || self.height() != inst.height() {
            return Err(IngestError::DimensionMismatch {
                label_w: self.width(),
                label_h: self.height(),
                inst_w: inst.width(),
                inst_h: inst.height(),
            });
        }
        Ok(())
    }
}

impl InstanceMap {
    /// Distinct nonzero IDs in ascending order.
    pub fn instance_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.grid.ids.iter().copied().filter(|&id| id != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Pixels of one instance and the subset of them lying on its boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceRegion {
    pub id: u32,
    /// Row-major order.
    pub interior: Vec<Pixel>,
    /// Row-major order.
    pub contour: Vec<Pixel>,
}

pub fn load_label_map(path: &Path, format: MapFormat) -> Result<LabelMap, IngestError> {
    let grid = load_grid(path, format)?;
    Ok(LabelMap { grid })
}

pub fn load_instance_map(path: &Path, format: MapFormat) -> Result<InstanceMap, IngestError> {
    let grid = load_grid(path, format)?;
    Ok(InstanceMap { grid })
}

fn load_grid(path: &Path, format: MapFormat) -> Result<IdGrid, IngestError> {
    let io_err = |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(io_err)?;
    match format {
        MapFormat::Pgm => decode_pgm(&bytes),
        MapFormat::PngIndexed => decode_png(&bytes),
        MapFormat::Csv => decode_csv(&bytes),
    }
}

fn format_err(format: MapFormat, reason: impl Into<String>) -> IngestError {
    IngestError::Format {
        format: format.name(),
        reason: reason.into(),
    }
}

fn decode_pgm(bytes: &[u8]) -> Result<IdGrid, IngestError> {
    let err = |r: &str| format_err(MapFormat::Pgm, r);
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(err("missing P5 magic"));
    }
    // Header: magic, width, height, maxval separated by whitespace, with
    // `#` comments allowed; exactly one whitespace byte precedes the raster.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("header field is not a number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err("header not terminated by whitespace"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(err("maxval must be in 1..=65535"));
    }
    let sample = if maxval < 256 { 1 } else { 2 };
    let raster = &bytes[pos..];
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(sample))
        .ok_or_else(|| err("dimensions overflow"))?;
    if raster.len() != expected {
        return Err(err(&format!(
            "header says {width}x{height} ({expected} bytes) but raster holds {} bytes",
            raster.len()
        )));
    }
    let ids = if sample == 1 {
        raster.iter().map(|&b| b as u32).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
            .collect()
    };
    IdGrid::new(width, height, ids)
}

fn decode_png(bytes: &[u8]) -> Result<IdGrid, IngestError> {
    let err = |r: String| format_err(MapFormat::PngIndexed, r);
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| err(e.to_string()))?;
    let (width, height) = (frame.width as usize, frame.height as usize);
    let depth = frame.bit_depth as usize;
    match frame.color_type {
        png::ColorType::Indexed | png::ColorType::Grayscale => {}
        other => return Err(err(format!("expected an indexed or grayscale PNG, got {other:?}"))),
    }
    let mut ids = Vec::with_capacity(width * height);
    for row in buf[..frame.buffer_size()].chunks_exact(frame.line_size) {
        match depth {
            16 => ids.extend(
                row.chunks_exact(2)
                    .take(width)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32),
            ),
            8 => ids.extend(row.iter().take(width).map(|&b| b as u32)),
            1 | 2 | 4 => {
                let per_byte = 8 / depth;
                let mask = (1u8 << depth) - 1;
                ids.extend((0..width).map(|x| {
                    let byte = row[x / per_byte];
                    let shift = 8 - depth * (x % per_byte + 1);
                    ((byte >> shift) & mask) as u32
                }));
            }
            _ => return Err(err(format!("unsupported bit depth {depth}"))),
        }
    }
    IdGrid::new(width, height, ids)
}

fn decode_csv(bytes: &[u8]) -> Result<IdGrid, IngestError> {
    let text = std::str::from_utf8(bytes).map_err(|_| format_err(MapFormat::Csv, "not UTF-8"))?;
    let mut width = None;
    let mut ids = Vec::new();
    let mut height = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = 0;
        for cell in line.split(',') {
            let v: u32 = cell.trim().parse().map_err(|_| {
                format_err(
                    MapFormat::Csv,
                    format!("line {}: `{}` is not a non-negative integer", lineno + 1, cell.trim()),
                )
            })?;
            ids.push(v);
            row += 1;
        }
        match width {
            None => width = Some(row),
            Some(w) if w != row => {
                return Err(format_err(
                    MapFormat::Csv,
                    format!("line {} has {row} values, expected {w}", lineno + 1),
                ))
            }
            _ => {}
        }
        height += 1;
    }
    let width = width.ok_or_else(|| format_err(MapFormat::Csv, "empty file"))?;
    IdGrid::new(width, height, ids)
}

/// Group pixels by nonzero instance ID and mark boundary pixels.
///
/// A pixel is on the contour when any of its 8 neighbours carries a
/// different ID or falls outside the image.
pub fn extract_instances(inst: &InstanceMap) -> Vec<InstanceRegion> {
    let (w, h) = (inst.width(), inst.height());
    let mut regions: BTreeMap<u32, InstanceRegion> = BTreeMap::new();
    for y in 0..h {
        for x in 0..w {
            let id = inst.get(x, y);
            if id == 0 {
                continue;
            }
            let region = regions.entry(id).or_insert_with(|| InstanceRegion {
                id,
                interior: Vec::new(),
                contour: Vec::new(),
            });
            let p = Pixel::new(x as u32, y as u32);
            region.interior.push(p);
            if is_boundary(inst, x, y) {
                region.contour.push(p);
            }
        }
    }
    regions.into_values().collect()
}

fn is_boundary(inst: &InstanceMap, x: usize, y: usize) -> bool {
    let (w, h) = (inst.width(), inst.height());
    if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
        return true;
    }
    let id = inst.get(x, y);
    (y - 1..=y + 1).any(|ny| (x - 1..=x + 1).any(|nx| inst.get(nx, ny) != id))
}

/// Expand class IDs into a `1 x C x H x W` indicator tensor.
pub fn one_hot(labels: &LabelMap, num_classes: usize) -> Result<Tensor4, IngestError> {
    let (w, h) = (labels.width(), labels.height());
    let mut out = Tensor4::zeros([1, num_classes, h, w]);
    for (i, &class) in labels.classes().iter().enumerate() {
        if class as usize >= num_classes {
            return Err(IngestError::ClassOutOfRange { class, num_classes });
        }
        out.data_mut()[class as usize * h * w + i] = 1.0;
    }
    Ok(out)
}
