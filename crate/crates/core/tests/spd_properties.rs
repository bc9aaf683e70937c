use proptest::prelude::*;
use spdkit::ingest::extract_instances;
use spdkit::oracle::{self, MaxOver};
use spdkit::spd::{self, descriptor, l1, BinSpec, Point, RadialScale};
use spdkit::spdmap::compute_map;
use spdkit::synth::Canvas;

fn contour_of(inst: &spdkit::InstanceMap) -> Vec<Point> {
    extract_instances(inst)[0].contour.iter().map(|&p| p.into()).collect()
}

#[test]
fn filled_square_center_matches_oracle_bitwise() {
    let inst = Canvas::new(21, 21).rect(0, 0, 21, 21, 1).build();
    let contour = contour_of(&inst);
    let spec = BinSpec::default();
    let d = descriptor(Point::new(10.0, 10.0), &contour, &spec).unwrap();
    let c: Vec<(f64, f64)> = contour.iter().map(|p| (p.x, p.y)).collect();
    let want = &oracle::instance_descriptors(&[(10.0, 10.0)], &c, spec.r_edges(), spec.n(), MaxOver::Row)[0];
    assert_eq!(d.values(), want.as_slice());
    assert!((d.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn square_center_descriptor_by_hand() {
    // 21x21 square, pole at the center: 80 contour pixels at distances
    // between 10 and 10√2, so under the pole's own max all land in the two
    // outermost rings (edge 1.0 corresponds to distance 5√2 ≈ 7.07).
    let inst = Canvas::new(21, 21).rect(0, 0, 21, 21, 1).build();
    let contour = contour_of(&inst);
    assert_eq!(contour.len(), 80);
    let d = descriptor(Point::new(10.0, 10.0), &contour, &BinSpec::default()).unwrap();
    let outer: f64 = (0..6).map(|j| d.get(11, j)).sum();
    assert_eq!(outer, 1.0);
    // Four-fold symmetry: sectors 0 and 3 (down and up) see the same counts.
    assert_eq!(d.get(11, 0), d.get(11, 3));
}

fn arb_points(max: usize) -> impl Strategy<Value = Vec<(i32, i32)>> {
    prop::collection::vec((-40i32..40, -40i32..40), 1..max)
}

proptest! {
    #[test]
    fn sums_to_one(pole in (-40i32..40, -40i32..40), pts in arb_points(60), m in 1usize..14, n in 1usize..10) {
        let spec = BinSpec::new(m, n).unwrap();
        let o = Point::new(pole.0 as f64, pole.1 as f64);
        let contour: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x as f64, y as f64)).collect();
        let d = descriptor(o, &contour, &spec).unwrap();
        prop_assert!(d.values().iter().all(|&v| v >= 0.0));
        let s: f64 = d.values().iter().sum();
        if d.is_degenerate() {
            prop_assert_eq!(s, 0.0);
        } else {
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn translation_is_exact(pole in (-40i32..40, -40i32..40), pts in arb_points(40), t in (-500i32..500, -500i32..500)) {
        let spec = BinSpec::default();
        let o = Point::new(pole.0 as f64, pole.1 as f64);
        let contour: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x as f64, y as f64)).collect();
        let moved: Vec<Point> = contour.iter().map(|p| p.offset(t.0 as f64, t.1 as f64)).collect();
        let a = descriptor(o, &contour, &spec).unwrap();
        let b = descriptor(o.offset(t.0 as f64, t.1 as f64), &moved, &spec).unwrap();
        prop_assert_eq!(a.values(), b.values());
    }

    #[test]
    fn real_valued_scaling_is_exact(pole in (-40i32..40, -40i32..40), pts in arb_points(40), k in prop::sample::select(vec![0.5, 2.0, 10.0])) {
        let spec = BinSpec::default();
        let o = Point::new(pole.0 as f64, pole.1 as f64);
        let contour: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x as f64, y as f64)).collect();
        let scaled: Vec<Point> = contour.iter().map(|p| p.scaled(k)).collect();
        let a = descriptor(o, &contour, &spec).unwrap();
        let b = descriptor(o.scaled(k), &scaled, &spec).unwrap();
        prop_assert_eq!(a.values(), b.values());
    }

    #[test]
    fn matches_literal_oracle(pole in (-30i32..30, -30i32..30), pts in arb_points(50), m in 1usize..13, n in 1usize..9) {
        let spec = BinSpec::new(m, n).unwrap();
        let o = Point::new(pole.0 as f64, pole.1 as f64);
        let contour: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x as f64, y as f64)).collect();
        let d = descriptor(o, &contour, &spec).unwrap();
        let c: Vec<(f64, f64)> = contour.iter().map(|p| (p.x, p.y)).collect();
        let want = &oracle::instance_descriptors(&[(o.x, o.y)], &c, spec.r_edges(), n, MaxOver::Row)[0];
        for (a, b) in d.values().iter().zip(want) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn polar_radii_in_range(pole in (-40i32..40, -40i32..40), pts in arb_points(40)) {
        let o = Point::new(pole.0 as f64, pole.1 as f64);
        let contour: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x as f64, y as f64)).collect();
        if let Ok(p) = spd::polar_transform(o, &contour) {
            prop_assert_eq!(p.r.iter().copied().fold(0.0, f64::max), 2.0);
            prop_assert!(p.r.iter().all(|&r| (0.0..=2.0).contains(&r)));
            prop_assert!(p.theta.iter().all(|&t| (0.0..2.0 * std::f64::consts::PI).contains(&t)));
        }
    }
}

fn disc_center_descriptor(radius: f64, scale: RadialScale) -> Vec<f64> {
    let size = (2.0 * radius) as usize + 9;
    let c = (size / 2) as f64;
    let inst = Canvas::new(size, size).disc(c, c, radius, 1).build();
    let map = compute_map(&inst, &BinSpec::default().with_scale(scale));
    map.pixel(c as usize, c as usize).to_vec()
}

#[test]
fn rasterized_disc_scale_robustness() {
    for scale in [RadialScale::Instance, RadialScale::Point] {
        let small = disc_center_descriptor(20.0, scale);
        let large = disc_center_descriptor(40.0, scale);
        let d = l1(&small, &large);
        assert!(d <= 0.2, "{scale:?}: L1 = {d}");
    }
}

/// Relative position inside a bounding box, mapped to a pixel.
fn at(x0: i64, y0: i64, w: i64, h: i64, fx: f64, fy: f64) -> (usize, usize) {
    ((x0 as f64 + fx * (w - 1) as f64).round() as usize, (y0 as f64 + fy * (h - 1) as f64).round() as usize)
}

fn discriminability_ratio(canvas_a: Canvas, box_a: (i64, i64, i64, i64), canvas_b: Canvas, box_b: (i64, i64, i64, i64), parts: &[(f64, f64)], scale: RadialScale) -> f64 {
    let spec = BinSpec::default().with_scale(scale);
    let (ma, mb) = (compute_map(&canvas_a.build(), &spec), compute_map(&canvas_b.build(), &spec));
    let desc = |m: &spdkit::SpdMap, b: (i64, i64, i64, i64), p: (f64, f64)| {
        let (x, y) = at(b.0, b.1, b.2, b.3, p.0, p.1);
        let v = m.pixel(x, y).to_vec();
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9, "part point must be inside the instance");
        v
    };
    let mut worst_corr = 0.0f64;
    let mut best_non = f64::INFINITY;
    for (i, &p) in parts.iter().enumerate() {
        for (j, &q) in parts.iter().enumerate() {
            let d = l1(&desc(&ma, box_a, p), &desc(&mb, box_b, q));
            if i == j {
                worst_corr = worst_corr.max(d);
            } else {
                best_non = best_non.min(d);
            }
        }
    }
    worst_corr / best_non
}

#[test]
fn square_parts_are_discriminable() {
    let parts = [(0.5, 0.5), (0.1, 0.1), (0.9, 0.5)];
    for scale in [RadialScale::Instance, RadialScale::Point] {
        let a = Canvas::new(80, 80).rect(5, 5, 21, 21, 1);
        let b = Canvas::new(80, 80).rect(30, 20, 41, 41, 1);
        let r = discriminability_ratio(a, (5, 5, 21, 21), b, (30, 20, 41, 41), &parts, scale);
        assert!(r < 0.5, "{scale:?}: ratio {r}");
    }
}

#[test]
fn car_parts_are_discriminable() {
    // left wheel, cabin center, body center
    let parts = [(2.5 / 16.0, 7.4 / 8.0), (0.5, 1.5 / 8.0), (0.5, 5.0 / 8.0)];
    for scale in [RadialScale::Instance, RadialScale::Point] {
        let a = Canvas::new(120, 80).car(4, 6, 2, 1);
        let b = Canvas::new(120, 80).car(30, 20, 5, 1);
        let r = discriminability_ratio(a, (4, 6, 32, 16), b, (30, 20, 80, 40), &parts, scale);
        assert!(r < 0.5, "{scale:?}: ratio {r}");
    }
}

#[test]
fn default_radial_scale_is_instance() {
    assert_eq!(BinSpec::default().scale(), RadialScale::Instance);
    assert_eq!("point".parse::<RadialScale>().unwrap(), RadialScale::Point);
    assert!("nope".parse::<RadialScale>().is_err());
}
