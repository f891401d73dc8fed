//! Switch the pipeline's stages on one at a time and score every rung on the
//! same held-out scenes.
//!
//! The ladder trains by progressive enablement — each rung starts from the
//! previous rung's weights with its newly enabled stage at the neutral
//! initialization — so a score drop means the stage itself hurt, not that a
//! fresh random start landed badly. Expect a few minutes in release mode.

use cobev::harness::sweep::run_ablation;
use cobev::harness::Config;
use cobev::Result;

fn main() -> Result<()> {
    let cfg = Config::compact();
    let start = std::time::Instant::now();
    let rows = run_ablation(&cfg, 7)?;
    println!("five rungs trained in {:.0}s\n", start.elapsed().as_secs_f64());

    println!(
        "{:<16} {:>8} {:>8} {:>10} {:>10}",
        "variant", "ap50", "ap70", "mean gap", "trainable"
    );
    for row in &rows {
        println!(
            "{:<16} {:>8.4} {:>8.4} {:>10.4} {:>10}",
            row.name, row.metrics.ap50, row.metrics.ap70, row.metrics.mean_gap, row.trainable
        );
    }
    let baseline = rows.first().expect("ladder is never empty").metrics.ap50;
    let full = rows.last().expect("ladder is never empty").metrics.ap50;
    println!("\nfull pipeline gains {:+.3} ap50 over the no-collaboration baseline", full - baseline);
    Ok(())
}
