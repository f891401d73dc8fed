//! Agent poses, frame transforms and the feature-map warp chain.
//!
//! A pose is six numbers `(x, y, z, roll, yaw, pitch)` giving an agent's
//! position and orientation in the world frame. Feature maps live on
//! ego-centered bird's-eye-view grids; aligning a map from another agent (or
//! another time) onto the local grid goes through a fixed chain:
//!
//! 1. relative rigid transform between the two world poses,
//! 2. restriction to a planar affine on the x-y plane,
//! 3. conjugation into fractional cell coordinates,
//! 4. conjugation into normalized [-1, 1] coordinates,
//! 5. inverse-map sampling grid fed to bilinear interpolation.

use nalgebra::Matrix4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result, Tensor};

/// Position and orientation in the world frame. Angles are radians; the
/// rotation applies yaw about z, then pitch about y, then roll about x
/// (`R = Rz * Ry * Rx`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: Real,
    pub y: Real,
    pub z: Real,
    pub roll: Real,
    pub yaw: Real,
    pub pitch: Real,
}

impl Pose {
    pub fn new(x: Real, y: Real, z: Real, roll: Real, yaw: Real, pitch: Real) -> Pose {
        Pose { x, y, z, roll, yaw, pitch }
    }

    /// Planar pose: position and heading only.
    pub fn planar(x: Real, y: Real, yaw: Real) -> Pose {
        Pose { x, y, z: 0.0, roll: 0.0, yaw, pitch: 0.0 }
    }

    pub fn origin() -> Pose {
        Pose::planar(0.0, 0.0, 0.0)
    }

    /// Homogeneous matrix taking local coordinates to world coordinates.
    pub fn to_world(&self) -> Matrix4<Real> {
        let (sr, cr) = self.roll.sin_cos();
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        let rz = Matrix4::new(
            cy, -sy, 0.0, 0.0, //
            sy, cy, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        );
        let ry = Matrix4::new(
            cp, 0.0, sp, 0.0, //
            0.0, 1.0, 0.0, 0.0, //
            -sp, 0.0, cp, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        );
        let rx = Matrix4::new(
            1.0, 0.0, 0.0, 0.0, //
            0.0, cr, -sr, 0.0, //
            0.0, sr, cr, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        );
        let mut m = rz * ry * rx;
        m[(0, 3)] = self.x;
        m[(1, 3)] = self.y;
        m[(2, 3)] = self.z;
        m
    }

    /// Map a point from this pose's local frame into the world frame.
    pub fn local_to_world(&self, p: [Real; 3]) -> [Real; 3] {
        let m = self.to_world();
        let v = m * nalgebra::Vector4::new(p[0], p[1], p[2], 1.0);
        [v[0], v[1], v[2]]
    }
}

/// Homogeneous transform mapping coordinates in `from`'s local frame to
/// coordinates in `to`'s local frame.
pub fn relative_transform(from: &Pose, to: &Pose) -> Result<Matrix4<Real>> {
    let inv = to
        .to_world()
        .try_inverse()
        .ok_or_else(|| Error::Singular("pose matrix is not invertible".into()))?;
    Ok(inv * from.to_world())
}

/// Planar affine map `p -> A p + t`, stored row-major as `[[a, b, tx], [c, d, ty]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2 {
    pub m: [[Real; 3]; 2],
}

impl Affine2 {
    pub fn identity() -> Affine2 {
        Affine2 { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] }
    }

    pub fn translation(tx: Real, ty: Real) -> Affine2 {
        Affine2 { m: [[1.0, 0.0, tx], [0.0, 1.0, ty]] }
    }

    pub fn rotation(theta: Real) -> Affine2 {
        let (s, c) = theta.sin_cos();
        Affine2 { m: [[c, -s, 0.0], [s, c, 0.0]] }
    }

    pub fn apply(&self, x: Real, y: Real) -> (Real, Real) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.m[0][2],
            self.m[1][0] * x + self.m[1][1] * y + self.m[1][2],
        )
    }

    /// `self` after `other`: `(self ∘ other)(p) = self(other(p))`.
    pub fn compose(&self, other: &Affine2) -> Affine2 {
        let a = &self.m;
        let b = &other.m;
        let mut m = [[0.0; 3]; 2];
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
            m[i][2] = a[i][0] * b[0][2] + a[i][1] * b[1][2] + a[i][2];
        }
        Affine2 { m }
    }

    pub fn inverse(&self) -> Result<Affine2> {
        let [[a, b, tx], [c, d, ty]] = self.m;
        let det = a * d - b * c;
        if det.abs() < 1e-12 {
            return Err(Error::Singular(format!("affine determinant {det}")));
        }
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Affine2 {
            m: [[ia, ib, -(ia * tx + ib * ty)], [ic, id, -(ic * tx + id * ty)]],
        }
        .pipe_ok()
    }

    fn pipe_ok(self) -> Result<Affine2> {
        Ok(self)
    }
}

/// Restrict a rigid 3-D transform to the bird's-eye x-y plane.
///
/// Valid for the planar motions this pipeline produces (roll and pitch stay
/// zero); z translation and out-of-plane rotation terms are dropped.
pub fn planar_affine(m: &Matrix4<Real>) -> Affine2 {
    Affine2 {
        m: [
            [m[(0, 0)], m[(0, 1)], m[(0, 3)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 3)]],
        ],
    }
}

/// Geometry of a bird's-eye-view feature grid.
///
/// Row `i` spans y, column `j` spans x; the center of cell `(i, j)` sits at
/// metric `(x_min + (j + 0.5) * resolution, y_min + (i + 0.5) * resolution)`.
/// Points with z outside `[z_min, z_max]` are dropped when rasterizing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub h: usize,
    pub w: usize,
    pub resolution: Real,
    pub x_min: Real,
    pub y_min: Real,
    pub z_min: Real,
    pub z_max: Real,
}

impl GridMeta {
    /// Grid centered on the ego origin covering `[-x_half, x_half] x
    /// [-y_half, y_half]`.
    pub fn centered(x_half: Real, y_half: Real, resolution: Real, z_min: Real, z_max: Real) -> GridMeta {
        let w = (2.0 * x_half / resolution).round() as usize;
        let h = (2.0 * y_half / resolution).round() as usize;
        GridMeta { h, w, resolution, x_min: -x_half, y_min: -y_half, z_min, z_max }
    }

    /// Metric center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (Real, Real) {
        (
            self.x_min + (col as Real + 0.5) * self.resolution,
            self.y_min + (row as Real + 0.5) * self.resolution,
        )
    }

    /// Fractional cell coordinates `(col, row)` of a metric point.
    pub fn to_cell(&self, x: Real, y: Real) -> (Real, Real) {
        (
            (x - self.x_min) / self.resolution - 0.5,
            (y - self.y_min) / self.resolution - 0.5,
        )
    }

    /// Cell-coordinate to metric map as an affine.
    fn cell_to_metric(&self) -> Affine2 {
        Affine2 {
            m: [
                [self.resolution, 0.0, self.x_min + 0.5 * self.resolution],
                [0.0, self.resolution, self.y_min + 0.5 * self.resolution],
            ],
        }
    }
}

/// Conjugate a metric-space affine into fractional cell coordinates
/// `(col, row)`: `metric_to_cell ∘ T ∘ cell_to_metric`.
pub fn discretize_affine(t_metric: &Affine2, meta: &GridMeta) -> Result<Affine2> {
    let c2m = meta.cell_to_metric();
    let m2c = c2m.inverse()?;
    Ok(m2c.compose(&t_metric.compose(&c2m)))
}

/// Conjugate a cell-space affine into normalized coordinates where -1 and +1
/// are the centers of the first and last cells along each axis.
pub fn normalize_affine(t_cells: &Affine2, meta: &GridMeta) -> Result<Affine2> {
    let sx = (meta.w.max(2) - 1) as Real / 2.0;
    let sy = (meta.h.max(2) - 1) as Real / 2.0;
    // cell = s * (norm + 1)  per axis.
    let n2c = Affine2 { m: [[sx, 0.0, sx], [0.0, sy, sy]] };
    let c2n = n2c.inverse()?;
    Ok(c2n.compose(&t_cells.compose(&n2c)))
}

/// Sampling grid `[h, w, 2]` holding `map` applied to each cell's normalized
/// coordinates; feeding it to bilinear interpolation realizes the inverse
/// warp.
pub fn build_sampling_grid(map: &Affine2, h: usize, w: usize) -> Tensor {
    let mut g = Vec::with_capacity(h * w * 2);
    let sx = (w.max(2) - 1) as Real;
    let sy = (h.max(2) - 1) as Real;
    for i in 0..h {
        for j in 0..w {
            let u = 2.0 * j as Real / sx - 1.0;
            let v = 2.0 * i as Real / sy - 1.0;
            let (su, sv) = map.apply(u, v);
            g.push(su);
            g.push(sv);
        }
    }
    Tensor::from_vec(&[h, w, 2], g).expect("consistent by construction")
}

/// Resample `features` (`[C, H, W]` on `meta`'s grid in the source frame) onto
/// the same grid in the destination frame, where `t_metric` maps source
/// coordinates to destination coordinates. Regions with no source coverage
/// come out zero.
pub fn warp_features(features: &Tensor, t_metric: &Affine2, meta: &GridMeta) -> Result<Tensor> {
    if features.rank() != 3 || features.shape()[1] != meta.h || features.shape()[2] != meta.w {
        return Err(Error::shape(
            "feature warp",
            format!("[C, {}, {}]", meta.h, meta.w),
            format!("{:?}", features.shape()),
        ));
    }
    let cells = discretize_affine(t_metric, meta)?;
    let norm = normalize_affine(&cells, meta)?;
    let grid = build_sampling_grid(&norm.inverse()?, meta.h, meta.w);
    features.bilinear_sample(&grid)
}

/// Convenience: warp `features` from `from`'s grid onto `to`'s grid.
pub fn warp_between_poses(features: &Tensor, from: &Pose, to: &Pose, meta: &GridMeta) -> Result<Tensor> {
    let rel = relative_transform(from, to)?;
    warp_features(features, &planar_affine(&rel), meta)
}

/// Distribution family for simulated localization error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Laplace,
}

/// Localization error model: independent draws added to x, y (std
/// `sigma_t` meters) and yaw (std `sigma_r` radians). z, roll and pitch are
/// assumed perfectly known. The Laplace variant matches the Gaussian's
/// standard deviation, not its scale parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub sigma_t: Real,
    pub sigma_r: Real,
}

impl NoiseSpec {
    pub fn off() -> NoiseSpec {
        NoiseSpec { kind: NoiseKind::Gaussian, sigma_t: 0.0, sigma_r: 0.0 }
    }

    pub fn is_off(&self) -> bool {
        self.sigma_t == 0.0 && self.sigma_r == 0.0
    }

    fn draw(&self, sigma: Real, rng: &mut impl Rng) -> Real {
        if sigma == 0.0 {
            return 0.0;
        }
        match self.kind {
            NoiseKind::Gaussian => {
                let n = rand_distr::Normal::new(0.0, sigma).expect("positive sigma");
                rng.sample::<Real, _>(n)
            }
            NoiseKind::Laplace => {
                // Inverse-CDF draw with scale b = sigma / sqrt(2), so the
                // variance is sigma^2.
                let b = sigma / (2.0 as Real).sqrt();
                let u: Real = rng.gen_range(-0.5..0.5);
                -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
        }
    }
}

/// Apply one localization-error draw to a pose.
pub fn perturb_pose(pose: &Pose, spec: &NoiseSpec, rng: &mut impl Rng) -> Pose {
    let mut p = *pose;
    p.x += spec.draw(spec.sigma_t, rng);
    p.y += spec.draw(spec.sigma_t, rng);
    p.yaw += spec.draw(spec.sigma_r, rng);
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const PI: Real = std::f64::consts::PI as Real;

    fn assert_near(a: Real, b: Real, tol: Real) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn quarter_turn_pose_maps_forward_point_left() {
        let pose = Pose::new(1.0, 2.0, 0.0, 0.0, PI / 2.0, 0.0);
        let p = pose.local_to_world([1.0, 0.0, 0.0]);
        assert_near(p[0], 1.0, 1e-12);
        assert_near(p[1], 3.0, 1e-12);
        assert_near(p[2], 0.0, 1e-12);
    }

    #[test]
    fn relative_transform_between_equal_poses_is_identity() {
        let pose = Pose::new(3.0, -1.0, 0.5, 0.1, 0.7, -0.2);
        let rel = relative_transform(&pose, &pose).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_near(rel[(i, j)], if i == j { 1.0 } else { 0.0 }, 1e-12);
            }
        }
    }

    #[test]
    fn relative_transform_agrees_with_world_roundtrip() {
        let a = Pose::planar(5.0, 2.0, 0.3);
        let b = Pose::planar(-1.0, 4.0, -1.1);
        let rel = relative_transform(&a, &b).unwrap();
        let p_local = [2.0, -3.0, 0.0];
        let p_world = a.local_to_world(p_local);
        // Express the same world point in b's frame directly.
        let inv = b.to_world().try_inverse().unwrap();
        let expect = inv * nalgebra::Vector4::new(p_world[0], p_world[1], p_world[2], 1.0);
        let got = rel * nalgebra::Vector4::new(p_local[0], p_local[1], p_local[2], 1.0);
        for k in 0..3 {
            assert_near(got[k], expect[k], 1e-12);
        }
    }

    #[test]
    fn planar_affine_of_yaw_pose_is_rotation_plus_translation() {
        let rel = relative_transform(&Pose::planar(2.0, 1.0, PI / 2.0), &Pose::origin()).unwrap();
        let aff = planar_affine(&rel);
        let (x, y) = aff.apply(1.0, 0.0);
        assert_near(x, 2.0, 1e-12);
        assert_near(y, 2.0, 1e-12);
    }

    #[test]
    fn affine_inverse_composes_to_identity() {
        let t = Affine2::rotation(0.4).compose(&Affine2::translation(1.5, -2.0));
        let round = t.compose(&t.inverse().unwrap());
        for i in 0..2 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_near(round.m[i][j], expect, 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_affine_has_no_inverse() {
        let t = Affine2 { m: [[1.0, 2.0, 0.0], [2.0, 4.0, 0.0]] };
        assert!(t.inverse().is_err());
    }

    #[test]
    fn metric_translation_discretizes_to_cell_translation() {
        let meta = GridMeta::centered(4.0, 4.0, 0.5, -1.0, 1.0);
        let t = Affine2::translation(3.0 * meta.resolution, -2.0 * meta.resolution);
        let cells = discretize_affine(&t, &meta).unwrap();
        let (x, y) = cells.apply(5.0, 7.0);
        assert_near(x, 8.0, 1e-12);
        assert_near(y, 5.0, 1e-12);
    }

    #[test]
    fn metric_rotation_fixes_grid_center_cell() {
        let meta = GridMeta::centered(4.0, 4.0, 0.5, -1.0, 1.0);
        let cells = discretize_affine(&Affine2::rotation(1.0), &meta).unwrap();
        let c = (meta.w as Real - 1.0) / 2.0;
        let (x, y) = cells.apply(c, c);
        assert_near(x, c, 1e-12);
        assert_near(y, c, 1e-12);
    }

    #[test]
    fn half_width_cell_shift_normalizes_to_w_over_w_minus_1() {
        let meta = GridMeta { h: 8, w: 8, resolution: 1.0, x_min: 0.0, y_min: 0.0, z_min: 0.0, z_max: 1.0 };
        let shift = Affine2::translation(meta.w as Real / 2.0, 0.0);
        let norm = normalize_affine(&shift, &meta).unwrap();
        let expect = meta.w as Real / (meta.w as Real - 1.0);
        assert_near(norm.m[0][2], expect, 1e-12);
        assert_near(norm.m[1][2], 0.0, 1e-12);
    }

    #[test]
    fn identity_warp_reproduces_features() {
        let meta = GridMeta::centered(2.0, 2.0, 0.5, -1.0, 1.0);
        let n = meta.h * meta.w;
        let f = Tensor::from_vec(&[2, meta.h, meta.w], (0..2 * n).map(|v| v as Real * 0.3).collect()).unwrap();
        let warped = warp_features(&f, &Affine2::identity(), &meta).unwrap();
        for (a, b) in f.to_vec().iter().zip(warped.to_vec()) {
            assert_near(*a, b, 1e-12);
        }
    }

    #[test]
    fn integer_cell_translation_shifts_features() {
        let meta = GridMeta::centered(3.0, 3.0, 1.0, -1.0, 1.0);
        let (h, w) = (meta.h, meta.w);
        let mut f = vec![0.0; h * w];
        f[2 * w + 1] = 5.0; // row 2, col 1
        let f = Tensor::from_vec(&[1, h, w], f).unwrap();
        // Source coordinates shifted by +2 cells in x: feature shows up two
        // columns to the right on the destination grid.
        let t = Affine2::translation(2.0 * meta.resolution, 0.0);
        let warped = warp_features(&f, &t, &meta).unwrap().to_vec();
        for i in 0..h {
            for j in 0..w {
                let expect = if i == 2 && j == 3 { 5.0 } else { 0.0 };
                assert_near(warped[i * w + j], expect, 1e-12);
            }
        }
    }

    #[test]
    fn translation_out_of_range_fills_zero() {
        let meta = GridMeta::centered(2.0, 2.0, 1.0, -1.0, 1.0);
        let f = Tensor::full(&[1, meta.h, meta.w], 3.0);
        let t = Affine2::translation(100.0, 0.0);
        let warped = warp_features(&f, &t, &meta).unwrap().to_vec();
        assert!(warped.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn quarter_turn_warp_permutes_cells() {
        let meta = GridMeta::centered(2.0, 2.0, 0.5, -1.0, 1.0);
        let (h, w) = (meta.h, meta.w);
        assert_eq!(h, w);
        let f = Tensor::from_vec(&[1, h, w], (0..h * w).map(|v| v as Real).collect()).unwrap();
        let warped = warp_features(&f, &Affine2::rotation(PI / 2.0), &meta).unwrap().to_vec();
        let src = f.to_vec();
        for i in 0..h {
            for j in 0..w {
                // Destination (i, j) reads source (row = w-1-j, col = i).
                assert_near(warped[i * w + j], src[(w - 1 - j) * w + i], 1e-9);
            }
        }
    }

    #[test]
    fn warp_between_poses_matches_manual_chain() {
        let meta = GridMeta::centered(4.0, 4.0, 0.5, -1.0, 1.0);
        let f = Tensor::from_vec(
            &[1, meta.h, meta.w],
            (0..meta.h * meta.w).map(|v| (v as Real).sin()).collect(),
        )
        .unwrap();
        let from = Pose::planar(1.0, 0.5, 0.2);
        let to = Pose::planar(-0.5, 1.0, -0.1);
        let direct = warp_between_poses(&f, &from, &to, &meta).unwrap();
        let rel = relative_transform(&from, &to).unwrap();
        let manual = warp_features(&f, &planar_affine(&rel), &meta).unwrap();
        for (a, b) in direct.to_vec().iter().zip(manual.to_vec()) {
            assert_near(*a, b, 1e-12);
        }
    }

    #[test]
    fn zero_noise_leaves_pose_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = Pose::planar(1.0, 2.0, 0.3);
        let q = perturb_pose(&p, &NoiseSpec::off(), &mut rng);
        assert_eq!(p, q);
    }

    #[test]
    fn perturbation_touches_only_x_y_yaw() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = Pose::new(1.0, 2.0, 3.0, 0.1, 0.2, 0.3);
        let spec = NoiseSpec { kind: NoiseKind::Gaussian, sigma_t: 0.5, sigma_r: 0.1 };
        let q = perturb_pose(&p, &spec, &mut rng);
        assert_eq!(q.z, p.z);
        assert_eq!(q.roll, p.roll);
        assert_eq!(q.pitch, p.pitch);
        assert_ne!(q.x, p.x);
        assert_ne!(q.y, p.y);
        assert_ne!(q.yaw, p.yaw);
    }

    fn sample_moments(kind: NoiseKind, sigma: Real, n: usize) -> (Real, Real) {
        let spec = NoiseSpec { kind, sigma_t: sigma, sigma_r: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let base = Pose::origin();
        let draws: Vec<Real> = (0..n).map(|_| perturb_pose(&base, &spec, &mut rng).x).collect();
        let mean = draws.iter().sum::<Real>() / n as Real;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<Real>() / n as Real;
        let m4 = draws.iter().map(|d| (d - mean).powi(4)).sum::<Real>() / n as Real;
        (var.sqrt(), m4 / (var * var))
    }

    #[test]
    fn gaussian_noise_has_requested_spread() {
        let (sd, kurt) = sample_moments(NoiseKind::Gaussian, 0.2, 20_000);
        assert!(sd > 0.19 && sd < 0.21, "sd {sd}");
        assert!(kurt > 2.7 && kurt < 3.3, "kurtosis {kurt}");
    }

    #[test]
    fn laplace_noise_matches_std_but_has_heavy_tails() {
        let (sd, kurt) = sample_moments(NoiseKind::Laplace, 0.2, 50_000);
        assert!(sd > 0.19 && sd < 0.21, "sd {sd}");
        assert!(kurt > 5.0 && kurt < 7.0, "kurtosis {kurt}");
    }
}
