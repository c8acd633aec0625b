use std::f64::consts::{FRAC_PI_2, PI, TAU};

use ktn::geometry::{
    build_tangent_sampling_map, equirect_to_sphere, gnomonic_forward, gnomonic_inverse,
    sphere_to_equirect, target_kernel_shape, GridSpec, KernelShape, SphereCoord, TangentGrid,
    MAX_KERNEL_SIDE,
};
use proptest::prelude::*;

fn grid() -> GridSpec {
    GridSpec::equirect(80).unwrap()
}

/// Shapes at every whole degree strictly between the poles.
fn shapes_per_degree(k: usize, g: GridSpec) -> Vec<(u32, KernelShape)> {
    (1..180)
        .map(|d| {
            (
                d,
                target_kernel_shape((d as f64).to_radians(), k, g.pitch(), g).unwrap(),
            )
        })
        .collect()
}

#[test]
fn kernel_sides_are_odd_and_capped() {
    for k in [3, 5] {
        for (d, s) in shapes_per_degree(k, grid()) {
            assert!(s.h % 2 == 1 && s.w % 2 == 1, "{d}°: {s:?}");
            assert!(
                s.h <= MAX_KERNEL_SIDE && s.w <= MAX_KERNEL_SIDE,
                "{d}°: {s:?}"
            );
            assert!(s.dilation >= 1);
            let (eh, ew) = s.extent();
            assert!(eh >= s.h && ew >= s.w);
        }
    }
}

#[test]
fn shapes_mirror_about_the_equator() {
    let g = grid();
    for d in 1..90 {
        let n = target_kernel_shape((d as f64).to_radians(), 5, g.pitch(), g).unwrap();
        let s = target_kernel_shape(((180 - d) as f64).to_radians(), 5, g.pitch(), g).unwrap();
        assert_eq!(n, s, "{d}° vs {}°", 180 - d);
    }
}

#[test]
fn footprint_width_grows_towards_the_poles() {
    let shapes = shapes_per_degree(5, grid());
    // walking from the equator to the north pole (90° → 1°)
    let widths: Vec<usize> = shapes[..90]
        .iter()
        .rev()
        .map(|(_, s)| s.extent().1)
        .collect();
    for w in widths.windows(2) {
        assert!(w[1] >= w[0], "{widths:?}");
    }
    let at = |deg: usize| shapes[deg - 1].1;
    assert_eq!(at(90).w, 5, "no stretching at the equator");
    assert!(at(10).extent().1 > at(45).extent().1);
}

#[test]
fn near_pole_kernels_hit_the_cap_and_dilate() {
    let g = grid();
    let s = target_kernel_shape(1f64.to_radians(), 5, g.pitch(), g).unwrap();
    assert_eq!(s.w, MAX_KERNEL_SIDE);
    assert!(s.dilation > 1);
    assert!(target_kernel_shape(0.0, 5, g.pitch(), g).is_err());
}

#[test]
fn tangent_sampling_rows_sum_to_one() {
    let g = grid();
    for d in (1..180).step_by(7) {
        for phi in [0.0, 1.3, 5.9] {
            let c = SphereCoord::new((d as f64).to_radians(), phi).unwrap();
            for side in [5, 14, 32] {
                let tg = TangentGrid::with_step(c, g.pitch(), side).unwrap();
                let m = build_tangent_sampling_map(&tg, g).unwrap();
                for s in m.weight_sums() {
                    assert!((s - 1.0).abs() < 1e-6, "θ={d}° side {side}: {s}");
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn gnomonic_round_trip(theta in 0.05..PI - 0.05, phi in 0.0..TAU, du in -0.6..0.6f64, dv in -0.6..0.6f64) {
        let c = SphereCoord::new(theta, phi).unwrap();
        let p = gnomonic_inverse(c, du, dv);
        let (u, v) = gnomonic_forward(c, p).unwrap();
        prop_assert!((u - du).abs() < 1e-9 && (v - dv).abs() < 1e-9);
        let q = gnomonic_inverse(c, u, v);
        prop_assert!(p.angle_to(q) < 1e-9);
    }

    #[test]
    fn tangent_point_maps_to_origin(theta in 0.01..PI - 0.01, phi in 0.0..TAU) {
        let c = SphereCoord::new(theta, phi).unwrap();
        let (u, v) = gnomonic_forward(c, c).unwrap();
        prop_assert!(u.abs() < 1e-12 && v.abs() < 1e-12);
    }

    #[test]
    fn pixel_sphere_round_trip(x in 0.0..160.0f64, y in 0.001..79.999f64) {
        let g = grid();
        let p = equirect_to_sphere(x, y, g).unwrap();
        let (x2, y2) = sphere_to_equirect(p, g);
        let dx = (x2 - x).abs().min(160.0 - (x2 - x).abs());
        prop_assert!(dx < 1e-9 && (y2 - y).abs() < 1e-9, "({x}, {y}) -> ({x2}, {y2})");
    }
}

#[test]
fn far_hemisphere_is_rejected() {
    let c = SphereCoord::new(FRAC_PI_2, 0.0).unwrap();
    let antipode = SphereCoord::new(FRAC_PI_2, PI).unwrap();
    assert!(gnomonic_forward(c, antipode).is_err());
}
