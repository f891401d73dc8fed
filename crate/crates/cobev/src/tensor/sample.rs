//! Bilinear sampling of feature maps at fractional grid locations.

use super::{BackwardCtx, Tensor};
use crate::{Error, Real, Result};

/// Map a normalized coordinate in [-1, 1] to a fractional cell index, with
/// -1 and +1 landing on the centers of the first and last cells.
#[inline]
fn denormalize(u: Real, extent: usize) -> Real {
    0.5 * (u + 1.0) * (extent as Real - 1.0)
}

#[inline]
fn tap(data: &[Real], h: usize, w: usize, y: isize, x: isize) -> Real {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        data[y as usize * w + x as usize]
    }
}

impl Tensor {
    /// Sample `[C, H, W]` at the locations in `grid` (`[H', W', 2]`, last axis
    /// ordered x-then-y in normalized coordinates). Locations outside the map
    /// read zeros, fading contributions linearly at the border. Differentiable
    /// with respect to both the feature map and the grid.
    pub fn bilinear_sample(&self, grid: &Tensor) -> Result<Tensor> {
        if self.rank() != 3 || grid.rank() != 3 || grid.shape()[2] != 2 {
            return Err(Error::shape(
                "bilinear sample",
                "[C, H, W] with grid [H', W', 2]",
                format!("{:?} with {:?}", self.shape(), grid.shape()),
            ));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (gh, gw) = (grid.shape()[0], grid.shape()[1]);

        let x = self.data();
        let g = grid.data();
        let mut data = vec![0.0; c * gh * gw];
        for gy in 0..gh {
            for gx in 0..gw {
                let u = g[(gy * gw + gx) * 2];
                let v = g[(gy * gw + gx) * 2 + 1];
                let sx = denormalize(u, w);
                let sy = denormalize(v, h);
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = sx - x0;
                let fy = sy - y0;
                let (x0, y0) = (x0 as isize, y0 as isize);
                for ci in 0..c {
                    let plane = &x[ci * h * w..(ci + 1) * h * w];
                    let v00 = tap(plane, h, w, y0, x0);
                    let v10 = tap(plane, h, w, y0, x0 + 1);
                    let v01 = tap(plane, h, w, y0 + 1, x0);
                    let v11 = tap(plane, h, w, y0 + 1, x0 + 1);
                    data[(ci * gh + gy) * gw + gx] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10)
                        + fy * ((1.0 - fx) * v01 + fx * v11);
                }
            }
        }
        drop(x);
        drop(g);

        let backward = move |ctx: &BackwardCtx| {
            let (px, pg) = (&ctx.parents[0], &ctx.parents[1]);
            let x = px.data();
            let g = pg.data();
            let grad = ctx.grad;
            let mut gx = vec![0.0; c * h * w];
            let mut ggrid = vec![0.0; gh * gw * 2];
            for gy in 0..gh {
                for gxi in 0..gw {
                    let u = g[(gy * gw + gxi) * 2];
                    let v = g[(gy * gw + gxi) * 2 + 1];
                    let sx = denormalize(u, w);
                    let sy = denormalize(v, h);
                    let x0f = sx.floor();
                    let y0f = sy.floor();
                    let fx = sx - x0f;
                    let fy = sy - y0f;
                    let (x0, y0) = (x0f as isize, y0f as isize);
                    let mut du = 0.0;
                    let mut dv = 0.0;
                    for ci in 0..c {
                        let go = grad[(ci * gh + gy) * gw + gxi];
                        if go == 0.0 {
                            continue;
                        }
                        let plane = &x[ci * h * w..(ci + 1) * h * w];
                        let v00 = tap(plane, h, w, y0, x0);
                        let v10 = tap(plane, h, w, y0, x0 + 1);
                        let v01 = tap(plane, h, w, y0 + 1, x0);
                        let v11 = tap(plane, h, w, y0 + 1, x0 + 1);
                        // Input gradient: the four corner weights.
                        let gx_plane = &mut gx[ci * h * w..(ci + 1) * h * w];
                        let mut bump = |y: isize, xq: isize, wgt: Real| {
                            if y >= 0 && xq >= 0 && y < h as isize && xq < w as isize {
                                gx_plane[y as usize * w + xq as usize] += wgt * go;
                            }
                        };
                        bump(y0, x0, (1.0 - fx) * (1.0 - fy));
                        bump(y0, x0 + 1, fx * (1.0 - fy));
                        bump(y0 + 1, x0, (1.0 - fx) * fy);
                        bump(y0 + 1, x0 + 1, fx * fy);
                        // Location gradient in fractional-cell units.
                        du += go * ((1.0 - fy) * (v10 - v00) + fy * (v11 - v01));
                        dv += go * ((1.0 - fx) * (v01 - v00) + fx * (v11 - v10));
                    }
                    // Chain through the [-1, 1] -> cell-index map.
                    ggrid[(gy * gw + gxi) * 2] = du * 0.5 * (w as Real - 1.0);
                    ggrid[(gy * gw + gxi) * 2 + 1] = dv * 0.5 * (h as Real - 1.0);
                }
            }
            drop(x);
            drop(g);
            if px.requires_grad() {
                px.accumulate_grad(&gx);
            }
            if pg.requires_grad() {
                pg.accumulate_grad(&ggrid);
            }
        };
        Ok(Tensor::from_op(
            vec![c, gh, gw],
            data,
            vec![self.clone(), grid.clone()],
            Box::new(backward),
        ))
    }
}
