//! A freshly initialised transformer reproduces the analytic projection;
//! once its parameters move, the kernels it generates move with them.

use ktn::geometry::GridSpec;
use ktn::ktn::{ktn_forward, parameter_count, projected_kernel, KtnLayer, RowGroupTable};
use ktn::nn::normal_init;
use ktn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ktn::Result<()> {
    let (cin, cout) = (32, 64);
    let table = RowGroupTable::for_layer(GridSpec::equirect(80)?, 2, 5)?;
    let mut layer = KtnLayer::new(table, cin, 0, 0.01);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut k = Tensor::zeros(&[5, 5, cin, cout]);
    normal_init(k.data_mut(), 0.1, &mut rng);

    let diff = |layer: &KtnLayer| -> ktn::Result<f64> {
        let mut worst: f64 = 0.0;
        for g in 0..layer.table.len() {
            let a = ktn_forward(layer, &k, g)?;
            let b = projected_kernel(&layer.table, &k, g)?;
            worst = worst.max(a.weights.max_abs_diff(&b.weights));
        }
        Ok(worst)
    };
    println!("{} row groups on the conv2 grid", layer.table.len());
    println!(
        "fresh transformer vs projection: max |Δ| = {:.2e}",
        diff(&layer)?
    );
    for b in &mut layer.blocks {
        normal_init(&mut b.depthwise.weights, 0.05, &mut rng);
    }
    println!(
        "after perturbing the last depthwise layers: max |Δ| = {:.2e}",
        diff(&layer)?
    );

    let c = parameter_count(&layer, cout);
    println!(
        "projections {} + blocks {} = {} parameters, vs {} for untied per-group kernels ({:.2}%)",
        c.projections,
        c.blocks,
        c.overhead(),
        c.untied_kernels,
        100.0 * c.overhead_ratio_vs_untied()
    );
    Ok(())
}
