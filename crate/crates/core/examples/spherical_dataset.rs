//! Back-project a few MNIST digits onto the sphere and draw them.
//!
//! ```text
//! cargo run --release --example spherical_dataset -- /path/to/mnist
//! ```

use ktn::data::spherical::build_range;
use ktn::data::{load_mnist, DatasetParams, Split};

fn main() -> ktn::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "data/mnist".into());
    let mnist = load_mnist(&dir, Split::Test)?;
    // a smaller canvas keeps the terminal drawing readable
    let params = DatasetParams {
        height: 40,
        ..DatasetParams::default()
    };
    // every test digit is placed once at each polar angle
    let samples = build_range(
        &mnist,
        Split::Test,
        0,
        &params,
        0..params.test_thetas_deg.len(),
    )?;
    for s in samples.iter().step_by(3) {
        println!(
            "label {} at θ = {:.0}°, φ = {:.0}°",
            s.label,
            s.theta_center.to_degrees(),
            s.phi_center.to_degrees()
        );
        let (h, w, _) = s.image.hwc()?;
        for y in 0..h {
            let row: String = (0..w)
                .map(|x| match s.image.data()[y * w + x] {
                    v if v > 0.5 => '#',
                    v if v > 0.1 => '.',
                    _ => ' ',
                })
                .collect();
            if row.trim().is_empty() {
                continue; // keep the drawing compact
            }
            println!("{y:>3} |{row}|");
        }
    }
    Ok(())
}
