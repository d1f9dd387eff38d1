use proptest::prelude::*;
use terranav::scene::{
    cell_size, generate_scene, GenerationParams, ObjectCategory, SceneDescriptor, SceneInstance, Shape, ShapeKind,
    WorldObjectDescriptor,
};
use terranav::terrain::{Heightmap, SceneType, SceneTypeSpec};

/// Flat, dry, 100 m map cut into 1 m cells with an object that fits
/// anywhere.
fn permissive_flat() -> SceneDescriptor {
    SceneDescriptor {
        name: "PermissiveFlat".into(),
        base_map: SceneTypeSpec {
            base_amplitude: 0.0,
            water_fraction: 0.0,
            ..SceneTypeSpec::built_in(SceneType::Meadow).unwrap()
        },
        cell_min: 1.0,
        cell_max: 1.0,
        objects: vec![WorldObjectDescriptor {
            object_id: "pebble".into(),
            category: ObjectCategory::Rock,
            shape: Shape { kind: ShapeKind::Sphere, radius: 0.1, height: 0.1 },
            size_min: 1.0,
            size_max: 1.0,
            max_inclination: 0.0,
            max_ground_slope: 89.0,
            weight: 1.0,
        }],
    }
}

fn with_cells(cmin: f64, cmax: f64) -> SceneDescriptor {
    SceneDescriptor { cell_min: cmin, cell_max: cmax, ..permissive_flat() }
}

fn ulps_apart(a: f64, b: f64) -> u64 {
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
}

#[test]
fn cell_size_endpoints_and_midpoint() {
    let d = with_cells(2.0, 10.0);
    assert_eq!(cell_size(&d, 0.0), 2.0);
    assert_eq!(cell_size(&d, 1.0), 10.0);
    assert_eq!(cell_size(&d, 0.5), 6.0);
}

proptest! {
    #[test]
    fn cell_size_matches_closed_form(cmin in 0.01f64..50.0, extra in 0.0f64..50.0, g in 0.0f64..=1.0) {
        let cmax = cmin + extra;
        let d = with_cells(cmin, cmax);
        prop_assert!(ulps_apart(cell_size(&d, g), cmin + g * (cmax - cmin)) <= 1);
        prop_assert_eq!(cell_size(&d, 0.0), cmin);
        prop_assert_eq!(cell_size(&d, 1.0), cmax);
        prop_assert!(ulps_apart(cell_size(&d, 0.5), (cmin + cmax) / 2.0) <= 1);
    }
}

#[test]
fn placement_counts_are_binomial() {
    let desc = permissive_flat();
    let cells = 10_000.0f64;
    for d in [0.1, 0.5, 1.0] {
        let sd = (cells * d * (1.0 - d)).sqrt();
        for seed in 0..20 {
            let scene = generate_scene(&desc, &GenerationParams::new(d, 0.0, 10.0, seed)).unwrap();
            let n = scene.placed_objects().len() as f64;
            assert!((n - d * cells).abs() <= 4.0 * sd, "D={d} seed {seed}: {n} objects");
        }
    }
}

#[test]
fn difficulty_endpoints_are_exact() {
    let desc = permissive_flat();
    for seed in 0..5 {
        let empty = generate_scene(&desc, &GenerationParams::new(0.0, 0.0, 10.0, seed)).unwrap();
        assert!(empty.placed_objects().is_empty());
        let full = generate_scene(&desc, &GenerationParams::new(1.0, 0.0, 10.0, seed)).unwrap();
        let mut per_cell = vec![0u32; 10_000];
        for obj in full.placed_objects() {
            let col = (obj.position[0].floor() as usize).min(99);
            let row = (obj.position[1].floor() as usize).min(99);
            per_cell[row * 100 + col] += 1;
        }
        assert!(per_cell.iter().all(|&c| c == 1));
    }
}

/// Bilinear elevation straight from the sample lattice.
fn oracle_height(hm: &Heightmap, x: f64, y: f64) -> f64 {
    let r = hm.cell_resolution();
    let i = ((x / r).floor() as usize).min(hm.width_cells() - 2);
    let j = ((y / r).floor() as usize).min(hm.height_cells() - 2);
    let (tx, ty) = (x / r - i as f64, y / r - j as f64);
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    lerp(
        lerp(hm.sample(i, j), hm.sample(i + 1, j), tx),
        lerp(hm.sample(i, j + 1), hm.sample(i + 1, j + 1), tx),
        ty,
    )
}

/// Central-difference slope in degrees, one-sided at the map border.
fn oracle_slope(hm: &Heightmap, x: f64, y: f64) -> f64 {
    let r = hm.cell_resolution();
    let (x0, x1) = ((x - r).max(0.0), (x + r).min(hm.extent_x()));
    let (y0, y1) = ((y - r).max(0.0), (y + r).min(hm.extent_y()));
    let gx = (oracle_height(hm, x1, y) - oracle_height(hm, x0, y)) / (x1 - x0);
    let gy = (oracle_height(hm, x, y1) - oracle_height(hm, x, y0)) / (y1 - y0);
    gx.hypot(gy).atan().to_degrees()
}

fn slope_violations(scene: &SceneInstance) -> usize {
    let desc = scene.descriptor();
    scene
        .placed_objects()
        .iter()
        .filter(|obj| {
            let limit = desc.objects.iter().find(|o| o.object_id == obj.descriptor).unwrap().max_ground_slope;
            // The oracle may differ from the library in the last bits.
            oracle_slope(scene.heightmap(), obj.position[0], obj.position[1]) > limit + 1e-9
        })
        .count()
}

#[test]
fn no_placement_violates_its_slope_limit() {
    let desc = SceneDescriptor::built_in(SceneType::VolcanicField).unwrap();
    let (mut placed, mut violations) = (0, 0);
    for seed in 0..100 {
        let scene = generate_scene(&desc, &GenerationParams::new(1.0, (seed % 5) as f64 / 4.0, 10.0, seed)).unwrap();
        placed += scene.placed_objects().len();
        violations += slope_violations(&scene);
    }
    assert!(placed > 1000, "only {placed} objects placed");
    assert_eq!(violations, 0);
}

#[test]
fn generation_is_bit_reproducible() {
    for scene_type in [SceneType::Meadow, SceneType::Forest, SceneType::VolcanicField, SceneType::ArcticGlacier] {
        let desc = SceneDescriptor::built_in(scene_type).unwrap();
        let p = GenerationParams::new(0.7, 0.25, 15.0, 99);
        let (a, b) = (generate_scene(&desc, &p).unwrap(), generate_scene(&desc, &p).unwrap());
        let bits = |s: &SceneInstance| s.heightmap().elevations().iter().map(|h| h.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.material_map().materials(), b.material_map().materials());
        assert_eq!(a.placed_objects(), b.placed_objects());
        assert_eq!(serde_json::to_string(&a.to_export(true)).unwrap(), serde_json::to_string(&b.to_export(true)).unwrap());
    }
}
