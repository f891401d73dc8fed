//! Domain-gap compensation for remote feature maps.
//!
//! Infrastructure lidars see the scene from a different height and density
//! than vehicle lidars, so their BEV features land in a different region of
//! feature space. A small residual stack of depthwise-separable convolutions
//! nudges remote features toward the local distribution; the channel-softmax
//! KL divergence quantifies how far apart two maps still are.

use rand::Rng;

use crate::init;
use crate::tensor::Tensor;
use crate::{Error, Real, Result};

/// Depthwise 3x3 followed by pointwise 1x1; keeps `[C, H, W]`.
pub struct SeparableConv {
    pub dw_w: Tensor,
    pub dw_b: Tensor,
    pub pw_w: Tensor,
    pub pw_b: Tensor,
}

impl SeparableConv {
    pub fn new(channels: usize, rng: &mut impl Rng) -> SeparableConv {
        SeparableConv {
            dw_w: init::kaiming_uniform(rng, &[channels, 3, 3], 9),
            dw_b: init::zeros_param(&[channels]),
            pw_w: init::kaiming_uniform(rng, &[channels, channels], channels),
            pw_b: init::zeros_param(&[channels]),
        }
    }

    /// All-zero filters: the layer outputs zero regardless of input.
    pub fn zeroed(channels: usize) -> SeparableConv {
        SeparableConv {
            dw_w: init::zeros_param(&[channels, 3, 3]),
            dw_b: init::zeros_param(&[channels]),
            pw_w: init::zeros_param(&[channels, channels]),
            pw_b: init::zeros_param(&[channels]),
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.dw_w.clone(), self.dw_b.clone(), self.pw_w.clone(), self.pw_b.clone()]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.depthwise_conv2d(&self.dw_w, &self.dw_b, 1, 1)?
            .conv1x1(&self.pw_w, &self.pw_b)
    }
}

/// One residual unit: two separable convolutions with a relu between, plus a
/// per-channel gated skip: `next = conv2(relu(conv1(x))) + gate * x`.
pub struct CompensationBlock {
    pub conv1: SeparableConv,
    pub conv2: SeparableConv,
    pub gate: Tensor,
}

impl CompensationBlock {
    /// The second convolution's pointwise tail starts at zero, so a fresh
    /// block is exactly its gated skip and the conv path only engages once
    /// training moves the tail.
    pub fn new(channels: usize, rng: &mut impl Rng) -> CompensationBlock {
        let conv1 = SeparableConv::new(channels, rng);
        let mut conv2 = SeparableConv::new(channels, rng);
        conv2.pw_w = init::zeros_param(&[channels, channels]);
        CompensationBlock { conv1, conv2, gate: init::const_param(&[channels], 1.0) }
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        p.push(self.gate.clone());
        p
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.shape()[0];
        let body = self.conv2.forward(&self.conv1.forward(x)?.relu())?;
        let skip = x.mul(&self.gate.reshape(&[c, 1, 1])?)?;
        body.add(&skip)
    }
}

/// The full compensator: three residual units and a gated merge back into the
/// original map, `out = relu(x + gate * stack(x))`.
pub struct FeatureCompensation {
    pub blocks: Vec<CompensationBlock>,
    pub merge_gate: Tensor,
    channels: usize,
}

impl FeatureCompensation {
    pub const BLOCKS: usize = 3;

    /// The merge gate starts at zero: a fresh compensator rectifies its input
    /// and nothing more, and the learned correction fades in as the gate
    /// opens.
    pub fn new(channels: usize, rng: &mut impl Rng) -> FeatureCompensation {
        FeatureCompensation {
            blocks: (0..Self::BLOCKS).map(|_| CompensationBlock::new(channels, rng)).collect(),
            merge_gate: init::zeros_param(&[channels]),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p: Vec<Tensor> = self.blocks.iter().flat_map(|b| b.params()).collect();
        p.push(self.merge_gate.clone());
        p
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 3 || x.shape()[0] != self.channels {
            return Err(Error::shape(
                "feature compensation",
                format!("[{}, H, W]", self.channels),
                format!("{:?}", x.shape()),
            ));
        }
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        let scaled = h.mul(&self.merge_gate.reshape(&[self.channels, 1, 1])?)?;
        Ok(x.add(&scaled)?.relu())
    }
}

/// Mean over cells of `KL(softmax_C(p) || softmax_C(q))` for two `[C, H, W]`
/// maps: how surprised a channel distribution drawn from `p` would be under
/// `q`. Zero iff the per-cell channel profiles match; always nonnegative.
pub fn channel_kl(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    if p.shape() != q.shape() || p.rank() != 3 {
        return Err(Error::shape(
            "channel KL",
            "two maps [C, H, W]",
            format!("{:?} with {:?}", p.shape(), q.shape()),
        ));
    }
    let cells = (p.shape()[1] * p.shape()[2]) as Real;
    let sp = p.softmax(0)?;
    let diff = p.log_softmax(0)?.sub(&q.log_softmax(0)?)?;
    Ok(sp.mul(&diff)?.sum().mul_scalar(1.0 / cells))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeroed_stack_with_unit_gates_doubles_nonnegative_input() {
        // Every conv outputs zero, all gates are one: each block passes its
        // input through, and the merge computes relu(x + x) = 2x for x >= 0.
        let c = 3;
        let mut comp = FeatureCompensation {
            blocks: (0..FeatureCompensation::BLOCKS)
                .map(|_| CompensationBlock {
                    conv1: SeparableConv::zeroed(c),
                    conv2: SeparableConv::zeroed(c),
                    gate: init::const_param(&[c], 1.0),
                })
                .collect(),
            merge_gate: init::const_param(&[c], 1.0),
            channels: c,
        };
        let x = Tensor::from_vec(&[3, 2, 2], (0..12).map(|v| v as Real * 0.5).collect()).unwrap();
        let y = comp.forward(&x).unwrap();
        for (a, b) in x.to_vec().iter().zip(y.to_vec()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        // Gate of zero reduces the merge to relu(x).
        comp.merge_gate = init::zeros_param(&[c]);
        let y = comp.forward(&x).unwrap();
        for (a, b) in x.to_vec().iter().zip(y.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fresh_compensator_passes_nonnegative_maps_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let comp = FeatureCompensation::new(3, &mut rng);
        let x = Tensor::from_vec(&[3, 2, 2], (0..12).map(|v| v as Real * 0.3).collect()).unwrap();
        let y = comp.forward(&x).unwrap();
        for (a, b) in x.to_vec().iter().zip(y.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let comp = FeatureCompensation::new(5, &mut rng);
        let x = Tensor::full(&[5, 4, 6], 0.2);
        assert_eq!(comp.forward(&x).unwrap().shape(), &[5, 4, 6]);
        assert!(comp.forward(&Tensor::zeros(&[4, 4, 6])).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut comp = FeatureCompensation::new(2, &mut rng);
        // Non-zero conv tails and merge gate so every path carries gradient
        // and no rectifier sits exactly on its kink.
        for b in &mut comp.blocks {
            b.conv2.pw_w = init::kaiming_uniform(&mut rng, &[2, 2], 2);
        }
        comp.merge_gate = init::const_param(&[2], 0.9);
        let x = Tensor::param(&[2, 3, 3], (0..18).map(|v| (v as Real * 0.37).sin()).collect()).unwrap();
        let mut params = comp.params();
        params.push(x.clone());
        let worst =
            crate::tensor::grad_check(|| Ok(comp.forward(&x)?.square().sum()), &params, 1e-5).unwrap();
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn channel_kl_matches_hand_computation() {
        // softmax of [ln 0.9, ln 0.1] is [0.9, 0.1]; against uniform [0.5, 0.5]:
        // KL = 0.9 ln 1.8 + 0.1 ln 0.2.
        let p = Tensor::from_vec(&[2, 1, 1], vec![(0.9 as Real).ln(), (0.1 as Real).ln()]).unwrap();
        let q = Tensor::zeros(&[2, 1, 1]);
        let kl = channel_kl(&p, &q).unwrap().item();
        let expect = 0.9 * (1.8 as Real).ln() + 0.1 * (0.2 as Real).ln();
        assert!((kl - expect).abs() < 1e-12, "{kl} vs {expect}");
        assert!((expect - 0.368064).abs() < 1e-6);
    }

    #[test]
    fn channel_kl_of_identical_maps_is_zero() {
        let p = Tensor::from_vec(&[3, 2, 2], (0..12).map(|v| (v as Real).cos()).collect()).unwrap();
        let kl = channel_kl(&p, &p).unwrap().item();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn channel_kl_is_nonnegative_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let a: Vec<Real> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: Vec<Real> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let p = Tensor::from_vec(&[3, 2, 2], a).unwrap();
            let q = Tensor::from_vec(&[3, 2, 2], b).unwrap();
            assert!(channel_kl(&p, &q).unwrap().item() >= -1e-12);
        }
    }

    #[test]
    fn channel_kl_gradient_matches_finite_differences() {
        let p = Tensor::param(&[2, 2, 2], vec![0.3, -0.1, 0.2, 0.9, -0.5, 0.1, 0.0, 0.4]).unwrap();
        let q = Tensor::param(&[2, 2, 2], vec![-0.2, 0.6, 0.1, -0.3, 0.2, 0.0, 0.5, -0.1]).unwrap();
        let params = [p.clone(), q.clone()];
        let worst = crate::tensor::grad_check(|| channel_kl(&p, &q), &params, 1e-5).unwrap();
        assert!(worst < 1e-7, "worst relative error {worst}");
    }
}
