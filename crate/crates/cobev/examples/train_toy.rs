//! Train the full collaborative detector on the compact profile, print the
//! loss trajectory, and score it on held-out scenes.

use cobev::harness::{evaluate, train_model, Ablation, Config};
use cobev::Result;

fn main() -> Result<()> {
    let cfg = Config::compact();
    let seed = 7;
    let meta = cfg.meta();
    println!(
        "grid {}x{} cells  |  {} channels  |  {} train scenes  |  {} epochs",
        meta.h, meta.w, cfg.model.channels, cfg.scenario.train_scenarios, cfg.train.epochs
    );

    let start = std::time::Instant::now();
    let bundle = train_model(&cfg, Ablation::full(), seed)?;
    for h in &bundle.history {
        println!(
            "epoch {:2}  lr {:.4}  loss {:8.4}  detection {:8.4}  imitation {:7.4}  gap {:7.4}",
            h.epoch, h.lr, h.loss, h.detection, h.imitation, h.gap
        );
    }
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());

    let metrics = evaluate(&bundle.model, &cfg, &cfg.noise_spec(), seed)?;
    println!(
        "held-out: ap50 {:.3}  ap70 {:.3}  mean remote gap {:.4}  ({} detections)",
        metrics.ap50, metrics.ap70, metrics.mean_gap, metrics.detections
    );
    Ok(())
}
