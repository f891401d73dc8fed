//! Train the full collaborative model once, then measure how detection
//! quality degrades as localization error grows — under the Gaussian family
//! it was trained with and under heavier-tailed Laplace errors it never saw.
//!
//! Expect a couple of minutes in release mode; every row reuses the same
//! held-out scenes and noise draws, so the levels are directly comparable.

use cobev::geometry::NoiseKind;
use cobev::harness::sweep::run_noise_sweep;
use cobev::harness::Config;
use cobev::Result;

fn main() -> Result<()> {
    let cfg = Config::compact();
    let kinds = [NoiseKind::Gaussian, NoiseKind::Laplace];
    let levels = cfg.eval.sweep_levels.clone();

    let start = std::time::Instant::now();
    let (bundle, sweeps) = run_noise_sweep(&cfg, &kinds, &levels, 7)?;
    println!(
        "trained {} epochs in {:.0}s; sweeping {} levels x {} families\n",
        bundle.history.len(),
        start.elapsed().as_secs_f64(),
        levels.len(),
        kinds.len()
    );

    println!("{:<10} {:>14} {:>14}", "noise", "gaussian ap50", "laplace ap50");
    for (i, &level) in levels.iter().enumerate() {
        println!(
            "{:<10} {:>14.4} {:>14.4}",
            format!("{level:.1}m/{level:.1}deg"),
            sweeps[0][i].metrics.ap50,
            sweeps[1][i].metrics.ap50
        );
    }
    println!("\ncsv form (noise_level,ap50,ap70):");
    for (kind, rows) in kinds.iter().zip(&sweeps) {
        println!("  {kind:?}:");
        for row in rows {
            println!("    {}", row.csv_line());
        }
    }
    Ok(())
}
