//! Embedded property suite run by `spdkit selftest`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ingest::extract_instances;
use crate::losses::{hinge_d, total_loss, LossParts, LossWeights};
use crate::oracle::{self, MaxOver};
use crate::safm::{self, SafmConfig, SafmParams};
use crate::spd::{bin_index, descriptor_with, BinFn, BinSpec, Point, RadialScale};
use crate::spdmap::{self, compute_map_with, MapOptions};
use crate::synth;

#[derive(Debug, Clone)]
pub struct PropertyResult {
    pub name: &'static str,
    pub checks: usize,
    pub failure: Option<String>,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, Default)]
pub struct SelftestReport {
    pub results: Vec<PropertyResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(PropertyResult::passed)
    }

    pub fn failed(&self) -> impl Iterator<Item = &PropertyResult> {
        self.results.iter().filter(|r| !r.passed())
    }
}

/// Alternative bin functions with known defects, for mutation checks.
pub mod mutants {
    use super::*;
    use crate::spd::SpdError;

    /// Shifts every radius one ring outward.
    pub fn bin_index_off_by_one(r: f64, theta: f64, spec: &BinSpec) -> Result<(usize, usize), SpdError> {
        let (i, j) = bin_index(r, theta, spec)?;
        Ok(((i + 1).min(spec.m() - 1), j))
    }
}

struct Ctx {
    bin: BinFn,
    rng: ChaCha8Rng,
}

type Check = fn(&mut Ctx) -> Result<usize, String>;

/// Runs every property with the descriptor path using `bin`.
pub fn run(bin: BinFn, seed: u64) -> SelftestReport {
    let checks: [(&'static str, Check); 8] = [
        ("bin-index-examples", bin_examples),
        ("oracle-equivalence", oracle_equivalence),
        ("sum-to-one", sum_to_one),
        ("translation-invariance", translation_invariance),
        ("continuous-scale-invariance", scale_invariance),
        ("serial-parallel-determinism", determinism),
        ("spd1-round-trip", round_trip),
        ("safm-zero-init-identity", safm_identity),
    ];
    let mut ctx = Ctx {
        bin,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut report = SelftestReport::default();
    for (name, check) in checks {
        let (checks, failure) = match check(&mut ctx) {
            Ok(n) => (n, None),
            Err(e) => (0, Some(e)),
        };
        report.results.push(PropertyResult { name, checks, failure });
    }
    let losses = loss_values();
    report.results.push(PropertyResult {
        name: "loss-unit-values",
        checks: 3,
        failure: losses.err(),
    });
    report
}

fn bin_examples(ctx: &mut Ctx) -> Result<usize, String> {
    let spec = BinSpec::default();
    let cases = [
        ((2.0, 0.0), (11, 0)),
        ((0.0, 0.0), (0, 0)),
        ((1.0, PI), (10, 3)),
        ((1.5, 2.0 * PI - 1e-9), (11, 5)),
    ];
    for ((r, t), want) in cases {
        let got = (ctx.bin)(r, t, &spec).map_err(|e| e.to_string())?;
        if got != want {
            return Err(format!("bin({r}, {t}) = {got:?}, expected {want:?}"));
        }
    }
    Ok(cases.len())
}

fn map_with(ctx: &Ctx, inst: &crate::ingest::InstanceMap, spec: &BinSpec, threads: usize) -> Result<Vec<f64>, String> {
    let opts = MapOptions { threads, bin: ctx.bin };
    compute_map_with(inst, spec, &opts)
        .map(|(m, _)| m.data().to_vec())
        .map_err(|e| e.to_string())
}

fn oracle_equivalence(ctx: &mut Ctx) -> Result<usize, String> {
    let mut n = 0;
    for trial in 0..12 {
        let (w, h) = (ctx.rng.gen_range(4..32), ctx.rng.gen_range(4..32));
        let inst = synth::random_instance_map(&mut ctx.rng, w, h, 4);
        for (scale, over) in [(RadialScale::Instance, MaxOver::Matrix), (RadialScale::Point, MaxOver::Row)] {
            let spec = BinSpec::default().with_scale(scale);
            let got = map_with(ctx, &inst, &spec, 1)?;
            let want = oracle::dense_map(&inst, spec.r_edges(), spec.n(), over);
            if let Some(i) = (0..got.len()).find(|&i| (got[i] - want[i]).abs() > 1e-9) {
                return Err(format!("trial {trial} ({scale:?}): entry {i} is {} vs oracle {}", got[i], want[i]));
            }
            n += 1;
        }
    }
    Ok(n)
}

fn sum_to_one(ctx: &mut Ctx) -> Result<usize, String> {
    let spec = BinSpec::default();
    let inst = synth::random_instance_map(&mut ctx.rng, 24, 24, 5);
    let data = map_with(ctx, &inst, &spec, 1)?;
    let singles: Vec<u32> = extract_instances(&inst)
        .into_iter()
        .filter(|r| r.interior.len() == 1)
        .map(|r| r.id)
        .collect();
    for (px, row) in data.chunks(spec.bins()).enumerate() {
        let id = inst.ids()[px];
        let s: f64 = row.iter().sum();
        let expect = if id == 0 || singles.contains(&id) { 0.0 } else { 1.0 };
        if (s - expect).abs() > 1e-9 {
            return Err(format!("pixel {px} (id {id}) sums to {s}"));
        }
    }
    Ok(data.len() / spec.bins())
}

fn translation_invariance(ctx: &mut Ctx) -> Result<usize, String> {
    let spec = BinSpec::default();
    let base = synth::Canvas::new(40, 40).car(2, 2, 2, 1).build();
    let base_map = spdmap::SpdMap::from_data(40, 40, 12, 6, map_with(ctx, &base, &spec, 1)?).unwrap();
    for _ in 0..3 {
        let (dx, dy) = (ctx.rng.gen_range(0..6), ctx.rng.gen_range(0..6));
        let moved = synth::Canvas::new(40, 40).car(2 + dx, 2 + dy, 2, 1).build();
        let got = map_with(ctx, &moved, &spec, 1)?;
        let want = base_map.shifted(dx as isize, dy as isize, 40, 40);
        if got != want.data() {
            return Err(format!("shift ({dx}, {dy}) changed descriptors"));
        }
    }
    Ok(3)
}

fn scale_invariance(ctx: &mut Ctx) -> Result<usize, String> {
    let spec = BinSpec::default();
    let contour: Vec<Point> = (0..24)
        .map(|_| Point::new(ctx.rng.gen_range(-20..20) as f64, ctx.rng.gen_range(-20..20) as f64))
        .collect();
    let o = Point::new(1.0, 2.0);
    let base = descriptor_with(o, &contour, &spec, max_dist(o, &contour), ctx.bin).map_err(|e| e.to_string())?;
    for k in [0.5, 2.0, 10.0] {
        let c: Vec<Point> = contour.iter().map(|p| p.scaled(k)).collect();
        let ok = o.scaled(k);
        let d = descriptor_with(ok, &c, &spec, max_dist(ok, &c), ctx.bin).map_err(|e| e.to_string())?;
        if d.values() != base.values() {
            return Err(format!("scale {k} changed the descriptor"));
        }
    }
    Ok(3)
}

fn max_dist(o: Point, c: &[Point]) -> f64 {
    crate::spd::farthest_distance(o, c).unwrap_or(0.0)
}

fn determinism(ctx: &mut Ctx) -> Result<usize, String> {
    let spec = BinSpec::default();
    let inst = synth::scene(&mut ctx.rng, 96, 64, 8);
    let serial = map_with(ctx, &inst, &spec, 1)?;
    let parallel = map_with(ctx, &inst, &spec, 4)?;
    let same = serial.iter().zip(&parallel).all(|(a, b)| a.to_bits() == b.to_bits());
    if !same {
        return Err("parallel output differs from serial output".into());
    }
    Ok(1)
}

fn round_trip(ctx: &mut Ctx) -> Result<usize, String> {
    let spec = BinSpec::new(4, 3).unwrap();
    let inst = synth::random_instance_map(&mut ctx.rng, 16, 12, 3);
    let map = spdmap::SpdMap::from_data(16, 12, 4, 3, map_with(ctx, &inst, &spec, 1)?).unwrap();
    let mut bytes = Vec::new();
    spdmap::write_to(&map, &mut bytes).map_err(|e| e.to_string())?;
    let back = spdmap::decode(&bytes).map_err(|e| e.to_string())?;
    if !back.bit_eq(&map.quantized()) {
        return Err("decoded map differs".into());
    }
    bytes[3] = b'2';
    if spdmap::decode(&bytes).is_ok() {
        return Err("wrong magic accepted".into());
    }
    Ok(2)
}

fn safm_identity(ctx: &mut Ctx) -> Result<usize, String> {
    let cfg = SafmConfig {
        classes: 3,
        spd_channels: 6,
        embed: 4,
        hidden: 4,
        features: 3,
    };
    let params = SafmParams::zeros(&cfg);
    for _ in 0..5 {
        let x = safm::random_inputs(&cfg, 2, 5, 5, &mut ctx.rng);
        let out = safm::safm_forward(&x, &params).map_err(|e| e.to_string())?;
        if out != safm::normalize(&x.f_prev).0 {
            return Err("zero parameters did not reduce to plain normalization".into());
        }
    }
    Ok(5)
}

fn loss_values() -> Result<(), String> {
    let check = |name: &str, got: f64, want: f64| {
        if (got - want).abs() > 1e-12 {
            Err(format!("{name} = {got}, expected {want}"))
        } else {
            Ok(())
        }
    };
    check("hinge_d(2, -2)", hinge_d(&[2.0], &[-2.0]).map_err(|e| e.to_string())?, 0.0)?;
    check("hinge_d(0, 0)", hinge_d(&[0.0], &[0.0]).map_err(|e| e.to_string())?, 2.0)?;
    let ones = LossParts {
        adv_g: 1.0,
        fm: 1.0,
        perc: 1.0,
        seg: 1.0,
    };
    check("total_loss(1,1,1,1)", total_loss(&ones, &LossWeights::default()), 22.0)
}
