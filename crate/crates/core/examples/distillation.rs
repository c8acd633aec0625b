//! Distil the first transformer layer from a random source network on
//! synthetic blob images: cache tangent-plane targets, then fit.
//!
//! No labels are involved; the loss only asks the spherical convolution to
//! reproduce what the planar network sees on undistorted tangent patches.

use ktn::distill::{
    compute_target_entry, evaluate_layer_loss, layer_grid, train_ktn_layer, DistillRecipe, Lattice,
    DEFAULT_STRIDES,
};
use ktn::geometry::GridSpec;
use ktn::nn::{normal_init, HPadding};
use ktn::source_cnn::SourceCnn;
use ktn::sphconv::SphericalNetwork;
use ktn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blobs(rng: &mut ChaCha8Rng, grid: GridSpec) -> Tensor {
    let centres: Vec<(f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.gen_range(0.0..grid.height as f64),
                rng.gen_range(0.0..grid.width as f64),
                rng.gen_range(2.0..8.0),
            )
        })
        .collect();
    Tensor::from_fn(&[grid.height, grid.width, 1], |i| {
        let (y, x) = ((i / grid.width) as f64, (i % grid.width) as f64);
        centres
            .iter()
            .map(|&(cy, cx, r)| {
                let dx = (x - cx).abs().min(grid.width as f64 - (x - cx).abs());
                (-((y - cy).powi(2) + dx * dx) / (2.0 * r * r)).exp()
            })
            .sum::<f64>()
            .min(1.0)
    })
}

fn main() -> ktn::Result<()> {
    let grid = GridSpec::equirect(80)?;
    let mut source = SourceCnn::random(0, 0.1, HPadding::Zero);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    normal_init(&mut source.convs[0].bias, 0.05, &mut rng);

    let l = 1;
    let lattice = Lattice::new(DEFAULT_STRIDES[l - 1])?;
    let positions = lattice.positions(layer_grid(grid, l));
    let images: Vec<Tensor> = (0..24).map(|_| blobs(&mut rng, grid)).collect();
    let entries = images
        .iter()
        .map(|img| compute_target_entry(img, grid, &source, l, lattice))
        .collect::<ktn::Result<Vec<_>>>()?;
    let (train, held_out) = entries.split_at(16);
    println!(
        "{} target positions per image, {} training / {} held-out images",
        positions.len(),
        train.len(),
        held_out.len()
    );

    let layer = SphericalNetwork::fresh_ktn_layers(grid, 0, 0.01)?.remove(0);
    let before = evaluate_layer_loss(&layer, &source.convs[0], held_out, &positions)?;
    let recipe = DistillRecipe {
        epochs: 8,
        batch_size: 4,
        lr: 3e-3,
        lr_decay_epoch: 6,
        ..DistillRecipe::default()
    };
    let (layer, curve) = train_ktn_layer(
        layer,
        &source.convs[0],
        train,
        &positions,
        &recipe,
        0,
        |e, loss| println!("epoch {e} mean loss {loss:.6}"),
    )?;
    let after = evaluate_layer_loss(&layer, &source.convs[0], held_out, &positions)?;
    println!(
        "training loss {:.6} → {:.6}",
        curve.initial,
        curve.epochs.last().copied().unwrap_or(f64::NAN)
    );
    println!("held-out loss {before:.6} → {after:.6}");
    Ok(())
}
