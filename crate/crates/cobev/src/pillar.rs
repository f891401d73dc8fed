//! Point-cloud rasterization into learned bird's-eye-view features.
//!
//! Points are binned into vertical pillars (one per grid cell), each point is
//! embedded by a shared linear layer, and every pillar keeps the
//! elementwise maximum over its points — so a pillar's feature is independent
//! of point ordering. Scattering the pillar vectors onto the grid yields a
//! `[C, H, W]` map that a small convolutional backbone then smooths.

use rand::Rng;

use crate::bev::PointCloud;
use crate::geometry::GridMeta;
use crate::init;
use crate::tensor::Tensor;
use crate::{Real, Result};

/// Per-point descriptor length: x, y, z, intensity, and the planar offset
/// from the pillar center.
pub const POINT_FEATURES: usize = 6;

/// Points binned to grid cells, with raw per-point descriptors.
pub struct Pillars {
    /// `[POINT_FEATURES, N]` column per kept point.
    pub features: Tensor,
    /// Linear cell index (`row * w + col`) per kept point.
    pub cells: Vec<usize>,
}

/// Bin a cloud onto the grid, dropping points outside the x-y extent or the
/// z slab. Descriptors are normalized to roughly [-1, 1]: planar coordinates
/// by the grid half-extent, height by the z slab, and the offset from the
/// containing cell's center by half a cell — so activations stay well scaled
/// regardless of the grid's physical size.
pub fn pillarize(cloud: &PointCloud, meta: &GridMeta) -> Pillars {
    let mut cols = Vec::new();
    let mut kept = Vec::new();
    for p in &cloud.points {
        if p.z < meta.z_min || p.z > meta.z_max {
            continue;
        }
        let cx = ((p.x - meta.x_min) / meta.resolution).floor();
        let cy = ((p.y - meta.y_min) / meta.resolution).floor();
        if cx < 0.0 || cy < 0.0 || cx >= meta.w as Real || cy >= meta.h as Real {
            continue;
        }
        let (col, row) = (cx as usize, cy as usize);
        cols.push(row * meta.w + col);
        kept.push((*p, row, col));
    }
    let n = kept.len();
    let x_half = meta.w as Real * meta.resolution / 2.0;
    let y_half = meta.h as Real * meta.resolution / 2.0;
    let (x_mid, y_mid) = (meta.x_min + x_half, meta.y_min + y_half);
    let z_half = ((meta.z_max - meta.z_min) / 2.0).max(1e-6);
    let z_mid = (meta.z_min + meta.z_max) / 2.0;
    let mut data = vec![0.0; POINT_FEATURES * n];
    for (i, (p, row, col)) in kept.iter().enumerate() {
        let (ccx, ccy) = meta.cell_center(*row, *col);
        data[i] = (p.x - x_mid) / x_half;
        data[n + i] = (p.y - y_mid) / y_half;
        data[2 * n + i] = (p.z - z_mid) / z_half;
        data[3 * n + i] = p.intensity;
        data[4 * n + i] = (p.x - ccx) / (meta.resolution / 2.0);
        data[5 * n + i] = (p.y - ccy) / (meta.resolution / 2.0);
    }
    Pillars {
        features: Tensor::from_vec(&[POINT_FEATURES, n], data).expect("consistent by construction"),
        cells: cols,
    }
}

/// Scatter `[C, N]` per-point features onto a `[C, h, w]` grid, keeping the
/// maximum per cell and channel. Cells with no points stay zero. Gradients
/// flow to each cell's winning point (first point on exact ties).
pub fn scatter_max(features: &Tensor, cells: &[usize], h: usize, w: usize) -> Result<Tensor> {
    if features.rank() != 2 || features.shape()[1] != cells.len() {
        return Err(crate::Error::shape(
            "pillar scatter",
            format!("[C, {}]", cells.len()),
            format!("{:?}", features.shape()),
        ));
    }
    let c = features.shape()[0];
    let n = cells.len();
    if let Some(&bad) = cells.iter().find(|&&cell| cell >= h * w) {
        return Err(crate::Error::shape(
            "pillar scatter",
            format!("cell indices below {}", h * w),
            format!("{bad}"),
        ));
    }
    let f = features.data();
    let mut data = vec![0.0; c * h * w];
    let mut winner = vec![usize::MAX; c * h * w];
    for ci in 0..c {
        for i in 0..n {
            let slot = ci * h * w + cells[i];
            let v = f[ci * n + i];
            if winner[slot] == usize::MAX || v > f[ci * n + winner[slot]] {
                data[slot] = v;
                winner[slot] = i;
            }
        }
    }
    drop(f);
    let backward = move |ctx: &crate::tensor::BackwardCtx| {
        let p = &ctx.parents[0];
        if !p.requires_grad() {
            return;
        }
        let mut buf = vec![0.0; c * n];
        for (slot, &win) in winner.iter().enumerate() {
            if win != usize::MAX {
                let ci = slot / (h * w);
                buf[ci * n + win] += ctx.grad[slot];
            }
        }
        p.accumulate_grad(&buf);
    };
    Ok(Tensor::from_op(
        vec![c, h, w],
        data,
        vec![features.clone()],
        Box::new(backward),
    ))
}

/// Shared per-point embedding followed by max aggregation onto the grid.
pub struct PillarEncoder {
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    channels: usize,
}

impl PillarEncoder {
    pub fn new(channels: usize, rng: &mut impl Rng) -> PillarEncoder {
        PillarEncoder {
            embed_w: init::kaiming_uniform(rng, &[channels, POINT_FEATURES], POINT_FEATURES),
            embed_b: init::zeros_param(&[channels]),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.embed_w.clone(), self.embed_b.clone()]
    }

    /// Embed and rasterize one cloud to `[C, H, W]` on `meta`'s grid.
    pub fn forward(&self, cloud: &PointCloud, meta: &GridMeta) -> Result<Tensor> {
        let pillars = pillarize(cloud, meta);
        if pillars.cells.is_empty() {
            return Ok(Tensor::zeros(&[self.channels, meta.h, meta.w]));
        }
        let n = pillars.cells.len();
        let embedded = self
            .embed_w
            .matmul(&pillars.features)?
            .add(&self.embed_b.reshape(&[self.channels, 1])?)?
            .relu();
        debug_assert_eq!(embedded.shape(), &[self.channels, n]);
        scatter_max(&embedded, &pillars.cells, meta.h, meta.w)
    }
}

/// Two same-padding 3x3 convolutions with relu, keeping `[C, H, W]`.
pub struct Backbone {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl Backbone {
    pub fn new(channels: usize, depth: usize, rng: &mut impl Rng) -> Backbone {
        let layers = (0..depth)
            .map(|_| {
                (
                    init::kaiming_uniform(rng, &[channels, channels, 3, 3], channels * 9),
                    init::zeros_param(&[channels]),
                )
            })
            .collect();
        Backbone { layers }
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.clone(), b.clone()])
            .collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (w, b) in &self.layers {
            h = h.conv2d(w, b, 1, 1)?.relu();
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::Point;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn meta() -> GridMeta {
        GridMeta { h: 4, w: 6, resolution: 0.5, x_min: -1.5, y_min: -1.0, z_min: -1.0, z_max: 1.0 }
    }

    fn pt(x: Real, y: Real, z: Real, i: Real) -> Point {
        Point { x, y, z, intensity: i }
    }

    #[test]
    fn pillarize_bins_and_filters() {
        let cloud = PointCloud {
            points: vec![
                pt(-1.4, -0.9, 0.0, 1.0), // cell (0, 0)
                pt(0.8, 0.7, 0.5, 0.5),   // cell (3, 4)
                pt(0.0, 0.0, 5.0, 1.0),   // above the z slab
                pt(9.0, 0.0, 0.0, 1.0),   // outside x extent
            ],
        };
        let m = meta();
        let p = pillarize(&cloud, &m);
        assert_eq!(p.cells, vec![0, 3 * m.w + 4]);
        assert_eq!(p.features.shape(), &[POINT_FEATURES, 2]);
    }

    #[test]
    fn pillarize_offsets_vanish_at_cell_centers() {
        let m = meta();
        let (cx, cy) = m.cell_center(1, 2);
        let p = pillarize(&PointCloud { points: vec![pt(cx, cy, 0.0, 1.0)] }, &m);
        let f = p.features.to_vec();
        assert_eq!(f[4], 0.0);
        assert_eq!(f[5], 0.0);
    }

    #[test]
    fn scatter_max_keeps_largest_per_cell() {
        let f = Tensor::param(&[1, 3], vec![2.0, 5.0, 3.0]).unwrap();
        let out = scatter_max(&f, &[1, 1, 2], 1, 4).unwrap();
        assert_eq!(out.to_vec(), vec![0.0, 5.0, 3.0, 0.0]);
    }

    #[test]
    fn scatter_max_routes_gradient_to_winner() {
        let f = Tensor::param(&[1, 3], vec![2.0, 5.0, 3.0]).unwrap();
        let out = scatter_max(&f, &[1, 1, 2], 1, 4).unwrap();
        out.sum().backward().unwrap();
        assert_eq!(f.grad().unwrap(), vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn scatter_max_rejects_out_of_grid_cells() {
        let f = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        assert!(scatter_max(&f, &[4], 1, 4).is_err());
    }

    #[test]
    fn encoder_output_ignores_point_order() {
        let m = meta();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = PillarEncoder::new(8, &mut rng);
        let pts = vec![
            pt(0.1, 0.2, 0.0, 0.3),
            pt(0.15, 0.22, 0.1, 0.9),
            pt(-1.0, -0.5, -0.2, 0.1),
        ];
        let fwd = enc.forward(&PointCloud { points: pts.clone() }, &m).unwrap();
        let mut rev_pts = pts;
        rev_pts.reverse();
        let rev = enc.forward(&PointCloud { points: rev_pts }, &m).unwrap();
        for (a, b) in fwd.to_vec().iter().zip(rev.to_vec()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn encoder_handles_empty_cloud() {
        let m = meta();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = PillarEncoder::new(4, &mut rng);
        let out = enc.forward(&PointCloud::new(), &m).unwrap();
        assert_eq!(out.shape(), &[4, m.h, m.w]);
        assert!(out.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backbone_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bb = Backbone::new(4, 2, &mut rng);
        let x = Tensor::full(&[4, 5, 7], 0.3);
        let y = bb.forward(&x).unwrap();
        assert_eq!(y.shape(), &[4, 5, 7]);
        assert_eq!(bb.params().len(), 4);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let m = GridMeta { h: 2, w: 3, resolution: 1.0, x_min: 0.0, y_min: 0.0, z_min: -1.0, z_max: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let enc = PillarEncoder::new(3, &mut rng);
        let cloud = PointCloud {
            points: vec![pt(0.5, 0.5, 0.1, 0.8), pt(0.6, 0.4, -0.2, 0.2), pt(2.5, 1.5, 0.0, 1.0)],
        };
        let params = enc.params();
        let worst = crate::tensor::grad_check(
            || Ok(enc.forward(&cloud, &m)?.square().sum()),
            &params,
            1e-5,
        )
        .unwrap();
        assert!(worst < 1e-6, "worst relative error {worst}");
    }
}
