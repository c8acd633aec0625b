//! The analytic projection of a planar 5×5 kernel onto a few row groups.
//!
//! Each group owns a bilinear resampling matrix from the source taps to the
//! taps of its (larger, possibly dilated) equirectangular kernel.

use ktn::geometry::GridSpec;
use ktn::ktn::{projected_kernel, RowGroupTable};
use ktn::Tensor;

fn main() -> ktn::Result<()> {
    let table = RowGroupTable::new(GridSpec::equirect(80)?, 5)?;
    // a single-channel cross-shaped kernel
    let k = Tensor::from_fn(&[5, 5, 1, 1], |i| {
        if i / 5 == 2 || i % 5 == 2 {
            1.0
        } else {
            0.0
        }
    });
    for g in [0, 2, 7] {
        let group = &table.groups[g];
        let p = table.analytic_projection(g)?;
        let nnz = p.data.iter().filter(|v| **v != 0.0).count();
        println!(
            "group {g}: rows {:?}, θ = {:.1}°, kernel {}×{} dilation {}, matrix {}×{} with {nnz} non-zeros",
            group.rows(),
            group.theta.to_degrees(),
            group.shape.h,
            group.shape.w,
            group.shape.dilation,
            p.rows,
            p.cols
        );
        let t = projected_kernel(&table, &k, g)?;
        let (h, w) = (t.weights.dims()[0], t.weights.dims()[1]);
        if w <= 25 {
            for y in 0..h {
                let row: String = (0..w).map(|x| shade(t.weights.data()[y * w + x])).collect();
                println!("    {row}");
            }
        }
        println!(
            "    mass {:.4} (source {:.1})",
            t.weights.data().iter().sum::<f64>(),
            k.data().iter().sum::<f64>()
        );
    }
    Ok(())
}

fn shade(v: f64) -> char {
    match v {
        v if v > 0.5 => '#',
        v if v > 0.2 => '+',
        v if v > 0.02 => '.',
        _ => ' ',
    }
}
