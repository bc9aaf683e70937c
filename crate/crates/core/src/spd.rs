//! Shape-aware position descriptor of a single point.
//!
//! For a pole `o` and a set of contour points, every contour point is
//! expressed in polar coordinates around `o`, the distances are rescaled so
//! that the largest one equals 2, and the points are counted into an
//! `m x n` log-polar histogram which is then divided by the number of
//! contour points.
//!
//! Radius bins use inclusive upper edges: bin `i` holds the distances in
//! `(edge[i-1], edge[i]]`, and bin 0 absorbs everything down to zero. The
//! outermost edge is 2, so the farthest contour point is always counted.
//! Angles are measured as `atan2(dx, -dy)` in image coordinates (x right,
//! y down) and wrapped into `[0, 2π)`.

use std::f64::consts::PI;

use thiserror::Error;

use crate::ingest::Pixel;

/// Tolerance for distances a hair above the outermost edge.
const EDGE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpdError {
    #[error("contour is empty")]
    EmptyContour,
    #[error("all contour points coincide with the pole")]
    DegenerateDistance,
    #[error("polar coordinate out of range: r = {r}, theta = {theta}")]
    OutOfRange { r: f64, theta: f64 },
    #[error("invalid bin specification: {0}")]
    InvalidSpec(String),
}

/// A point in real-valued image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn scaled(self, k: f64) -> Self {
        Self::new(self.x * k, self.y * k)
    }

    pub fn offset(self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy)
    }
}

impl From<Pixel> for Point {
    fn from(p: Pixel) -> Self {
        Self::new(p.x as f64, p.y as f64)
    }
}

/// What the raw distances are divided by (after halving).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RadialScale {
    /// Largest distance between any interior point of the instance and any
    /// contour point, shared by every pole of that instance.
    #[default]
    Instance,
    /// Largest distance from the current pole, so each descriptor reaches
    /// the outermost ring.
    Point,
}

impl std::str::FromStr for RadialScale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "instance" => Ok(Self::Instance),
            "point" => Ok(Self::Point),
            other => Err(format!("unknown radial scale `{other}` (expected instance or point)")),
        }
    }
}

/// Histogram layout: `m` radius intervals by `n` angle intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct BinSpec {
    r_edges: Vec<f64>,
    n: usize,
    scale: RadialScale,
}

impl Default for BinSpec {
    fn default() -> Self {
        Self::new(12, 6).expect("default bin spec is valid")
    }
}

impl BinSpec {
    /// Log-uniform radius edges `2 * 2^-(m-1-i)`, ending at exactly 2.
    pub fn new(m: usize, n: usize) -> Result<Self, SpdError> {
        if m == 0 || m > 1023 {
            return Err(SpdError::InvalidSpec(format!("m = {m} must be in 1..=1023")));
        }
        let edges = (0..m).map(|i| 2.0 * 2f64.powi(-((m - 1 - i) as i32))).collect();
        Self::with_edges(edges, n)
    }

    pub fn with_edges(r_edges: Vec<f64>, n: usize) -> Result<Self, SpdError> {
        if r_edges.is_empty() || n == 0 {
            return Err(SpdError::InvalidSpec("m and n must be at least 1".into()));
        }
        if r_edges.windows(2).any(|w| !(w[0] < w[1])) || !(r_edges[0] > 0.0) {
            return Err(SpdError::InvalidSpec("radius edges must be positive and strictly increasing".into()));
        }
        if *r_edges.last().unwrap() != 2.0 {
            return Err(SpdError::InvalidSpec("outermost radius edge must be 2.0".into()));
        }
        Ok(Self {
            r_edges,
            n,
            scale: RadialScale::Instance,
        })
    }

    pub fn with_scale(mut self, scale: RadialScale) -> Self {
        self.scale = scale;
        self
    }

    pub fn m(&self) -> usize {
        self.r_edges.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bins(&self) -> usize {
        self.m() * self.n
    }

    pub fn r_edges(&self) -> &[f64] {
        &self.r_edges
    }

    pub fn scale(&self) -> RadialScale {
        self.scale
    }

    fn angle_width(&self) -> f64 {
        2.0 * PI / self.n as f64
    }
}

/// Contour points around a pole: normalized distances and angles.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarOffsets {
    pub r: Vec<f64>,
    pub theta: Vec<f64>,
}

/// Normalized log-polar histogram, radius-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdDescriptor {
    values: Vec<f64>,
    m: usize,
    n: usize,
    degenerate: bool,
}

impl SpdDescriptor {
    fn zeros(spec: &BinSpec) -> Self {
        Self {
            values: vec![0.0; spec.bins()],
            m: spec.m(),
            n: spec.n(),
            degenerate: false,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, radius_bin: usize, angle_bin: usize) -> f64 {
        self.values[radius_bin * self.n + angle_bin]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    /// True when every contour point sat on the pole and the zero vector was emitted.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn l1_distance(&self, other: &Self) -> f64 {
        l1(&self.values, &other.values)
    }
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[inline]
fn raw_offset(o: Point, c: Point) -> (f64, f64, f64) {
    let dx = o.x - c.x;
    let dy = o.y - c.y;
    ((dx * dx + dy * dy).sqrt(), dx, dy)
}

#[inline]
fn wrapped_angle(dx: f64, dy: f64) -> f64 {
    let t = dx.atan2(-dy);
    if t < 0.0 {
        t + 2.0 * PI
    } else {
        t
    }
}

pub fn polar_transform(o: Point, contour: &[Point]) -> Result<PolarOffsets, SpdError> {
    if contour.is_empty() {
        return Err(SpdError::EmptyContour);
    }
    let mut r = Vec::with_capacity(contour.len());
    let mut theta = Vec::with_capacity(contour.len());
    let mut max_raw = 0.0f64;
    for &c in contour {
        let (raw, dx, dy) = raw_offset(o, c);
        max_raw = max_raw.max(raw);
        r.push(raw);
        theta.push(wrapped_angle(dx, dy));
    }
    if max_raw == 0.0 {
        return Err(SpdError::DegenerateDistance);
    }
    let half = max_raw / 2.0;
    for v in &mut r {
        *v /= half;
    }
    Ok(PolarOffsets { r, theta })
}

/// Signature shared by [`bin_index`] and test doubles of it.
pub type BinFn = fn(f64, f64, &BinSpec) -> Result<(usize, usize), SpdError>;

pub fn bin_index(r: f64, theta: f64, spec: &BinSpec) -> Result<(usize, usize), SpdError> {
    let edges = spec.r_edges();
    let outer = edges[edges.len() - 1];
    let in_range = r >= 0.0 && r <= outer + EDGE_EPS && theta >= 0.0 && theta < 2.0 * PI + EDGE_EPS;
    if !in_range {
        return Err(SpdError::OutOfRange { r, theta });
    }
    let radius_bin = edges.iter().position(|&e| r <= e).unwrap_or(edges.len() - 1);
    let angle_bin = ((theta / spec.angle_width()).floor() as usize).min(spec.n() - 1);
    Ok((radius_bin, angle_bin))
}

/// Descriptor of `o` with distances normalized by `o`'s own farthest contour point.
pub fn descriptor(o: Point, contour: &[Point], spec: &BinSpec) -> Result<SpdDescriptor, SpdError> {
    let max_raw = farthest_distance(o, contour)?;
    descriptor_with(o, contour, spec, max_raw, bin_index)
}

/// Descriptor of `o` with an externally supplied maximum distance, as used
/// when one normalization is shared across an instance.
pub fn descriptor_with_max(
    o: Point,
    contour: &[Point],
    spec: &BinSpec,
    max_raw: f64,
) -> Result<SpdDescriptor, SpdError> {
    descriptor_with(o, contour, spec, max_raw, bin_index)
}

pub fn descriptor_with(
    o: Point,
    contour: &[Point],
    spec: &BinSpec,
    max_raw: f64,
    bin: BinFn,
) -> Result<SpdDescriptor, SpdError> {
    let mut d = SpdDescriptor::zeros(spec);
    d.degenerate = !accumulate(o, contour, spec, max_raw, bin, &mut d.values)?;
    Ok(d)
}

/// Writes the normalized histogram into `out` (length `m * n`, assumed zeroed).
/// Returns `false` for the degenerate zero-distance case, leaving `out` zero.
pub(crate) fn accumulate(
    o: Point,
    contour: &[Point],
    spec: &BinSpec,
    max_raw: f64,
    bin: BinFn,
    out: &mut [f64],
) -> Result<bool, SpdError> {
    if contour.is_empty() {
        return Err(SpdError::EmptyContour);
    }
    if max_raw == 0.0 {
        return Ok(false);
    }
    let half = max_raw / 2.0;
    let n = spec.n();
    let mut counts = vec![0u32; out.len()];
    for &c in contour {
        let (raw, dx, dy) = raw_offset(o, c);
        let (i, j) = bin(raw / half, wrapped_angle(dx, dy), spec)?;
        counts[i * n + j] += 1;
    }
    let total = contour.len() as f64;
    for (v, &k) in out.iter_mut().zip(&counts) {
        *v = k as f64 / total;
    }
    Ok(true)
}

pub fn farthest_distance(o: Point, contour: &[Point]) -> Result<f64, SpdError> {
    if contour.is_empty() {
        return Err(SpdError::EmptyContour);
    }
    Ok(contour.iter().map(|&c| raw_offset(o, c).0).fold(0.0, f64::max))
}

/// Largest pairwise distance within a point set.
///
/// For a pixel instance this equals the largest interior-to-contour
/// distance: the farthest point of the instance from any contour point is
/// an extreme point of the pixel set, and extreme pixels always lie on the
/// contour. Only the convex hull is scanned.
pub fn diameter(points: &[Point]) -> f64 {
    let hull = convex_hull(points);
    let mut best = 0.0f64;
    for (i, &a) in hull.iter().enumerate() {
        for &b in &hull[i + 1..] {
            best = best.max(raw_offset(a, b).0);
        }
    }
    best
}

fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: Point, a: Point, b: Point| (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}
