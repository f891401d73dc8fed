//! Learned off-grid sampling, taken apart.
//!
//! Each cell predicts a handful of sampling points (as tanh-bounded offsets
//! from itself), gathers the value map there bilinearly, and blends the
//! gathers with softmax weights. Two degenerate settings make the machinery
//! transparent: zero offsets reproduce the input exactly, and a fixed
//! one-cell left/right pair turns the stage into a hand-checkable blur.

use cobev::fusion::DeformableAttention;
use cobev::tensor::Tensor;
use cobev::{Real, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let (channels, heads, points) = (4, 2, 2);
    let (h, w) = (6, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut deform = DeformableAttention::new(channels, heads, points, &mut rng)?;

    // Degenerate setting 1: pass-through. Zero offsets sample each cell at
    // itself, uniform weights average identical gathers, and identity
    // projections leave values alone.
    deform.reset_to_passthrough();
    let x = ramp_map(channels, h, w);
    let y = deform.attend(&x)?;
    println!(
        "pass-through branch, max deviation from input: {:.1e}",
        max_abs_diff(&x.to_vec(), &y.to_vec())
    );

    // Degenerate setting 2: a +-1-cell horizontal stencil. The offset head
    // applies tanh then scales by the 3-cell bound, so atanh(1/3) in the
    // bias lands each point exactly one cell out.
    let one_cell = (1.0 as Real / 3.0).atanh();
    let mut bias = vec![0.0; heads * points * 2];
    for m in 0..heads {
        bias[(m * points) * 2] = one_cell; // point 0: one cell right
        bias[(m * points + 1) * 2] = -one_cell; // point 1: one cell left
    }
    deform.offset_b.set_data(&bias);

    let blurred = deform.attend(&x)?;
    // On a linear ramp the neighbor average equals the center, so interior
    // cells are untouched; only the clipped borders move.
    println!(
        "ramp under the stencil, max interior deviation: {:.1e}",
        interior_diff(&x.to_vec(), &blurred.to_vec(), h, w)
    );

    let step = step_map(channels, h, w);
    let smoothed = deform.attend(&step)?;
    let row: Vec<Real> = step.to_vec()[..w].to_vec();
    let out: Vec<Real> = smoothed.to_vec()[..w].to_vec();
    println!("step row in : {}", fmt_row(&row));
    println!("step row out: {}   (edges average across the jump)", fmt_row(&out));
    Ok(())
}

/// First-channel values increase linearly with the column; other channels
/// scale that ramp.
fn ramp_map(channels: usize, h: usize, w: usize) -> Tensor {
    let mut data = vec![0.0; channels * h * w];
    for c in 0..channels {
        for r in 0..h {
            for col in 0..w {
                data[(c * h + r) * w + col] = (c + 1) as Real * col as Real;
            }
        }
    }
    Tensor::from_vec(&[channels, h, w], data).expect("consistent shape")
}

fn step_map(channels: usize, h: usize, w: usize) -> Tensor {
    let mut data = vec![0.0; channels * h * w];
    for c in 0..channels {
        for r in 0..h {
            for col in 0..w {
                data[(c * h + r) * w + col] = if col >= w / 2 { 1.0 } else { 0.0 };
            }
        }
    }
    Tensor::from_vec(&[channels, h, w], data).expect("consistent shape")
}

fn max_abs_diff(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).fold(0.0 as Real, |m, (x, y)| m.max((x - y).abs()))
}

fn interior_diff(a: &[Real], b: &[Real], h: usize, w: usize) -> Real {
    let mut worst: Real = 0.0;
    let plane = h * w;
    for idx in 0..a.len() {
        let col = (idx % plane) % w;
        if col == 0 || col == w - 1 {
            continue;
        }
        worst = worst.max((a[idx] - b[idx]).abs());
    }
    worst
}

fn fmt_row(row: &[Real]) -> String {
    let cells: Vec<String> = row.iter().map(|v| format!("{v:.2}")).collect();
    cells.join(" ")
}
