//! Kernel footprints on the equirectangular grid and the gnomonic round trip.
//!
//! ```text
//! cargo run --release --example geometry
//! ```

use ktn::geometry::{
    gnomonic_forward, gnomonic_inverse, target_kernel_shape, GridSpec, SphereCoord,
};

fn main() -> ktn::Result<()> {
    let grid = GridSpec::equirect(80)?;
    println!(
        "grid {}×{}, pitch {:.4} rad",
        grid.width,
        grid.height,
        grid.pitch()
    );
    println!(
        "{:>6}  {:>7}  {:>8}  {:>9}",
        "θ (°)", "h × w", "dilation", "extent w"
    );
    for deg in [1, 5, 10, 20, 30, 45, 60, 75, 90] {
        let s = target_kernel_shape((deg as f64).to_radians(), 5, grid.pitch(), grid)?;
        println!(
            "{deg:>6}  {:>3}×{:<3}  {:>8}  {:>9}",
            s.h,
            s.w,
            s.dilation,
            s.extent().1
        );
    }

    let c = SphereCoord::new(0.4, 2.0)?;
    let p = gnomonic_inverse(c, 0.3, -0.2);
    let (u, v) = gnomonic_forward(c, p)?;
    println!(
        "tangent (0.3, -0.2) → sphere ({:.4}, {:.4}) → tangent ({u:.12}, {v:.12})",
        p.theta, p.phi
    );
    Ok(())
}
