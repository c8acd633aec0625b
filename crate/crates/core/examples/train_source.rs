//! Train the planar source network on a slice of MNIST.
//!
//! ```text
//! cargo run --release --example train_source -- /path/to/mnist [n_train]
//! ```

use ktn::data::{load_mnist, Split};
use ktn::source_cnn::{accuracy, train_source, TrainRecipe};

fn main() -> ktn::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "data/mnist".into());
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(3000);
    let train = load_mnist(&dir, Split::Train)?.truncated(n);
    let test = load_mnist(&dir, Split::Test)?.truncated(1000);
    let recipe = TrainRecipe {
        epochs: 2,
        lr_decay_epoch: 1,
        ..TrainRecipe::default()
    };
    let model = train_source(&train, &recipe, 0, |s| {
        println!(
            "epoch {} lr {:.0e} loss {:.4} train acc {:.3}",
            s.epoch + 1,
            s.lr,
            s.mean_loss,
            s.train_accuracy
        )
    })?;
    println!(
        "{} parameters, test accuracy {:.3}",
        model.param_count(),
        accuracy(&model, &test)?
    );
    Ok(())
}
