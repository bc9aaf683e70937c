use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spdkit::ingest::extract_instances;
use spdkit::spd::{descriptor, descriptor_with_max, diameter, BinSpec, Point, RadialScale};
use spdkit::spdmap::{
    compute_map, compute_map_parallel, deserialize, pool_map, serialize, PoolMode, SpdMap,
};
use spdkit::synth;

fn per_pixel_reference(inst: &spdkit::InstanceMap, spec: &BinSpec) -> SpdMap {
    let mut data = vec![0.0; inst.width() * inst.height() * spec.bins()];
    for region in extract_instances(inst) {
        let contour: Vec<Point> = region.contour.iter().map(|&p| p.into()).collect();
        let max = diameter(&contour);
        for p in &region.interior {
            let o = Point::from(*p);
            let d = match spec.scale() {
                RadialScale::Point => descriptor(o, &contour, spec).unwrap(),
                RadialScale::Instance => descriptor_with_max(o, &contour, spec, max).unwrap(),
            };
            let dst = (p.y as usize * inst.width() + p.x as usize) * spec.bins();
            data[dst..dst + spec.bins()].copy_from_slice(d.values());
        }
    }
    SpdMap::from_data(inst.width(), inst.height(), spec.m(), spec.n(), data).unwrap()
}

#[test]
fn compute_map_equals_per_pixel_descriptors() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for size in [8usize, 23, 40, 64] {
        let inst = synth::random_instance_map(&mut rng, size, size, 5);
        for scale in [RadialScale::Instance, RadialScale::Point] {
            let spec = BinSpec::default().with_scale(scale);
            assert_eq!(compute_map(&inst, &spec), per_pixel_reference(&inst, &spec), "{size} {scale:?}");
        }
    }
}

#[test]
fn three_by_three_instance() {
    let inst = synth::Canvas::new(3, 3).rect(0, 0, 3, 3, 4).build();
    let map = compute_map(&inst, &BinSpec::default());
    for y in 0..3 {
        for x in 0..3 {
            assert!((map.pixel_sum(x, y) - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn parallel_matches_serial_bytes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inst = synth::scene(&mut rng, 128, 96, 12);
    let spec = BinSpec::default();
    let serial = compute_map(&inst, &spec);
    for threads in [0, 2, 3, 8] {
        assert!(compute_map_parallel(&inst, &spec, threads).bit_eq(&serial), "threads = {threads}");
    }
}

#[test]
fn file_round_trip_at_storage_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inst = synth::random_instance_map(&mut rng, 30, 20, 4);
    let map = compute_map(&inst, &BinSpec::default());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.spd");
    serialize(&map, &path).unwrap();
    let back = deserialize(&path).unwrap();
    assert!(back.bit_eq(&map.quantized()));
    serialize(&back, &path).unwrap();
    assert!(deserialize(&path).unwrap().bit_eq(&back));
}

fn arb_map() -> impl Strategy<Value = SpdMap> {
    (1usize..5, 1usize..5, 1usize..4, 1usize..4).prop_flat_map(|(bw, bh, m, n)| {
        let (w, h) = (bw * 4, bh * 4);
        prop::collection::vec(0.0f64..1.0, w * h * m * n)
            .prop_map(move |d| SpdMap::from_data(w, h, m, n, d).unwrap())
    })
}

proptest! {
    #[test]
    fn pooling_conserves_block_sums(map in arb_map(), f in prop::sample::select(vec![1usize, 2, 4])) {
        let pooled = pool_map(&map, f, PoolMode::Average).unwrap();
        for by in 0..pooled.height() {
            for bx in 0..pooled.width() {
                let mut src = 0.0;
                for y in by * f..(by + 1) * f {
                    for x in bx * f..(bx + 1) * f {
                        src += map.pixel_sum(x, y);
                    }
                }
                let avg = src / (f * f) as f64;
                prop_assert!((pooled.pixel_sum(bx, by) - avg).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn serialization_round_trips(map in arb_map()) {
        let mut bytes = Vec::new();
        spdkit::spdmap::write_to(&map, &mut bytes).unwrap();
        let back = spdkit::spdmap::decode(&bytes).unwrap();
        prop_assert!(back.bit_eq(&map.quantized()));
    }
}
