//! Fold a delayed, ego-motion-warped previous frame into the current one.
//!
//! The recipe mirrors the live pipeline: stamp the stale map with a delay
//! code, warp it into the current frame, then let a learned per-cell gate
//! decide how much history to keep.

use cobev::geometry::{warp_between_poses, GridMeta, Pose};
use cobev::temporal::{apply_delay_embedding, delay_embedding, TemporalFusion};
use cobev::tensor::Tensor;
use cobev::{Real, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let channels = 8;
    let meta = GridMeta::centered(6.0, 3.0, 0.5, -3.0, 2.0);

    // The delay code is a fixed sin/cos ladder over channels; nearby delays
    // get nearby codes, and a zero delay is still distinguishable from "no
    // code" on the odd (cosine) channels.
    for delay in [0.0, 0.1, 0.3] {
        let code = delay_embedding(delay, 6);
        let rendered: Vec<String> = code.iter().map(|v| format!("{v:+.2}")).collect();
        println!("delay {delay:.1}s -> code [{}]", rendered.join(", "));
    }

    // Previous frame: captured 0.1 s ago, one cell behind the current pose.
    let prev_pose = Pose::planar(-0.5, 0.0, 0.0);
    let now_pose = Pose::planar(0.0, 0.0, 0.0);
    let prev = bump_map(channels, &meta, -1.0, 0.0);
    let now = bump_map(channels, &meta, 0.0, 0.0);

    let stamped = apply_delay_embedding(&prev, 0.1)?;
    let aligned = warp_between_poses(&stamped, &prev_pose, &now_pose, &meta)?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fusion = TemporalFusion::new(channels, &mut rng);
    let fused = fusion.forward(&now, &aligned)?;
    println!("fused map shape {:?}", fused.shape());

    // The gate is sigmoid-valued per cell; report how much of the current
    // frame it keeps on average against the recalled history.
    let keep = mean(&now.to_vec());
    let fused_mean = mean(&fused.to_vec());
    println!("mean activation: current {keep:.4}, fused {fused_mean:.4}");

    // History matters where the current view is empty: compare the fused map
    // against the current one at the cell the old bump occupied.
    let idx = cell_index(&meta, -1.0, 0.0);
    let c0_now = now.to_vec()[idx];
    let c0_fused = fused.to_vec()[idx];
    println!("at the previous bump's cell: current {c0_now:.4}, fused {c0_fused:.4}");
    Ok(())
}

/// A [C, H, W] map whose first channel carries a Gaussian bump at (x, y).
fn bump_map(channels: usize, meta: &GridMeta, x0: Real, y0: Real) -> Tensor {
    let mut data = vec![0.0; channels * meta.h * meta.w];
    for r in 0..meta.h {
        for c in 0..meta.w {
            let (x, y) = meta.cell_center(r, c);
            let d2 = (x - x0) * (x - x0) + (y - y0) * (y - y0);
            data[r * meta.w + c] = (-d2 as Real).exp();
        }
    }
    Tensor::from_vec(&[channels, meta.h, meta.w], data).expect("consistent shape")
}

fn cell_index(meta: &GridMeta, x: Real, y: Real) -> usize {
    let (col, row) = meta.to_cell(x, y);
    (row.round() as usize) * meta.w + col.round() as usize
}

fn mean(v: &[Real]) -> Real {
    v.iter().sum::<Real>() / v.len() as Real
}
