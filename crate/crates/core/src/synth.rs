//! Synthetic instance maps for tests, benchmarks and the self-test.

use rand::Rng;

use crate::ingest::InstanceMap;

/// Builder over a zeroed ID canvas; later shapes overwrite earlier ones.
#[derive(Debug, Clone)]
pub struct Canvas {
    width: usize,
    height: usize,
    ids: Vec<u32>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ids: vec![0; width * height],
        }
    }

    fn put(&mut self, x: i64, y: i64, id: u32) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.ids[y as usize * self.width + x as usize] = id;
        }
    }

    pub fn rect(mut self, x0: i64, y0: i64, w: i64, h: i64, id: u32) -> Self {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                self.put(x, y, id);
            }
        }
        self
    }

    /// Filled disc of pixels whose centers lie within `r` of `(cx, cy)`.
    pub fn disc(mut self, cx: f64, cy: f64, r: f64, id: u32) -> Self {
        let (y0, y1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
        let (x0, x1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy <= r * r {
                    self.put(x, y, id);
                }
            }
        }
        self
    }

    /// Axis-aligned filled ellipse.
    pub fn ellipse(mut self, cx: f64, cy: f64, rx: f64, ry: f64, id: u32) -> Self {
        for y in (cy - ry).floor() as i64..=(cy + ry).ceil() as i64 {
            for x in (cx - rx).floor() as i64..=(cx + rx).ceil() as i64 {
                let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                if dx * dx + dy * dy <= 1.0 {
                    self.put(x, y, id);
                }
            }
        }
        self
    }

    /// Rear-view car silhouette with its bounding box at `(x0, y0)`;
    /// `unit` scales every part (body 16 by 8 units overall).
    pub fn car(self, x0: i64, y0: i64, unit: i64, id: u32) -> Self {
        let u = unit;
        self.rect(x0 + 3 * u, y0, 10 * u, 3 * u, id) // cabin
            .rect(x0, y0 + 3 * u, 16 * u, 4 * u, id) // body
            .rect(x0 + u, y0 + 7 * u, 3 * u, u, id) // left wheel
            .rect(x0 + 12 * u, y0 + 7 * u, 3 * u, u, id) // right wheel
    }

    pub fn build(self) -> InstanceMap {
        InstanceMap::new(self.width, self.height, self.ids).expect("canvas dims are consistent")
    }
}

/// A map of up to `max_instances` random rectangles and ellipses.
pub fn random_instance_map<R: Rng>(rng: &mut R, width: usize, height: usize, max_instances: u32) -> InstanceMap {
    let mut canvas = Canvas::new(width, height);
    let count = rng.gen_range(1..=max_instances.max(1));
    for id in 1..=count {
        let cx = rng.gen_range(0.0..width as f64);
        let cy = rng.gen_range(0.0..height as f64);
        let sx = rng.gen_range(0.5..(width as f64 / 2.0).max(1.0));
        let sy = rng.gen_range(0.5..(height as f64 / 2.0).max(1.0));
        canvas = if rng.gen_bool(0.5) {
            canvas.rect(
                (cx - sx) as i64,
                (cy - sy) as i64,
                (2.0 * sx).ceil() as i64,
                (2.0 * sy).ceil() as i64,
                id,
            )
        } else {
            canvas.ellipse(cx, cy, sx, sy, id)
        };
    }
    canvas.build()
}

/// Street-like scene: cars, discs and blocks scattered over the canvas.
pub fn scene<R: Rng>(rng: &mut R, width: usize, height: usize, instances: u32) -> InstanceMap {
    let mut canvas = Canvas::new(width, height);
    for id in 1..=instances {
        let x = rng.gen_range(0..width as i64);
        let y = rng.gen_range(0..height as i64);
        canvas = match id % 3 {
            0 => canvas.car(x - 16, y - 8, rng.gen_range(1..=3), id),
            1 => canvas.disc(x as f64, y as f64, rng.gen_range(4.0..24.0), id),
            _ => canvas.rect(x, y, rng.gen_range(6..48), rng.gen_range(6..48), id),
        };
    }
    canvas.build()
}
