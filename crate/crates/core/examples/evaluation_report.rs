//! Print the report of a finished pipeline run together with its gates.
//!
//! ```text
//! cargo run --release --example evaluation_report -- /path/to/workspace
//! ```

use ktn::eval::{evaluate_gates, read_report};

fn main() -> ktn::Result<()> {
    let ws = std::env::args()
        .nth(1)
        .or_else(|| std::env::var("KTN_WORKSPACE").ok())
        .unwrap_or_else(|| "workspace".into());
    let report = read_report(std::path::Path::new(&ws).join("reports"))?;
    for m in &report.methods {
        let bins: Vec<String> = m
            .accuracy
            .bins
            .iter()
            .map(|b| format!("{:.0}°:{:.3}", b.theta_deg, b.accuracy))
            .collect();
        println!(
            "{:<10} mean {:.4}  [{}]",
            m.method.as_str(),
            m.accuracy.mean,
            bins.join(" ")
        );
        if let Some(r) = &m.rmse_ground_truth {
            println!("{:<10} RMSE per layer (ground-truth inputs) {r:.5?}", "");
        }
        println!(
            "{:<10} {:.1} ms/image, {} parameters",
            "", m.ms_per_image, m.params_total
        );
    }
    if let Some(t) = &report.transfer {
        println!(
            "transfer: KTN_A on B {:.4}, KTN_B on B {:.4}",
            t.ktn_a_on_b, t.ktn_b_on_b
        );
    }
    for g in evaluate_gates(&report) {
        println!(
            "{} {:<9} {}",
            if g.passed { "PASS" } else { "FAIL" },
            g.name,
            g.detail
        );
    }
    Ok(())
}
