//! From raw points to a bird's-eye-view feature map: bin a synthetic cloud
//! into pillars, embed and max-pool per cell, then refine with the
//! convolutional backbone.

use cobev::harness::train::nth_scenario;
use cobev::harness::Config;
use cobev::pillar::{pillarize, Backbone, PillarEncoder};
use cobev::{Real, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let cfg = Config::compact();
    let meta = cfg.meta();
    let sc = nth_scenario(&cfg, &meta, 7, "scenario", 0)?;

    let cloud = &sc.ego_now.cloud;
    println!("ego cloud: {} points", cloud.len());

    let pillars = pillarize(cloud, &meta);
    let kept = pillars.cells.len();
    let mut occupied: Vec<usize> = pillars.cells.clone();
    occupied.sort_unstable();
    occupied.dedup();
    println!(
        "kept {} points in {} occupied pillars (of {} cells); densest pillar holds {}",
        kept,
        occupied.len(),
        meta.h * meta.w,
        densest(&pillars.cells)
    );

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let encoder = PillarEncoder::new(cfg.model.channels, &mut rng);
    let backbone = Backbone::new(cfg.model.channels, cfg.model.backbone_depth, &mut rng);

    let raw = encoder.forward(cloud, &meta)?;
    let refined = backbone.forward(&raw)?;
    println!("encoded map {:?} -> backbone output {:?}", raw.shape(), refined.shape());
    println!(
        "activation coverage: {:.1}% of cells nonzero raw, {:.1}% after backbone",
        nonzero_share(&raw.to_vec()) * 100.0,
        nonzero_share(&refined.to_vec()) * 100.0
    );
    // Max pooling keeps per-cell magnitudes bounded by the strongest point
    // embedding, so downstream stages see a stable scale.
    let max = refined.to_vec().iter().fold(0.0 as Real, |m, v| m.max(v.abs()));
    println!("largest backbone activation: {max:.3}");
    Ok(())
}

fn densest(cells: &[usize]) -> usize {
    use std::collections::HashMap;
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &c in cells {
        *counts.entry(c).or_default() += 1;
    }
    counts.values().copied().max().unwrap_or(0)
}

fn nonzero_share(values: &[Real]) -> Real {
    let nz = values.iter().filter(|v| v.abs() > 1e-9).count();
    nz as Real / values.len() as Real
}
