//! Temporal context: transmission-delay encoding and fusion of the previous
//! frame into the current one.
//!
//! Remote features arrive late. The delay is stamped onto the feature map as
//! a sinusoidal per-channel code so downstream layers can condition on it,
//! and the ego's previous feature map — warped into the current frame — is
//! merged through a learned gate.

use rand::Rng;

use crate::init;
use crate::tensor::Tensor;
use crate::{Error, Real, Result};

/// Sinusoidal code for a scalar delay (seconds), one value per channel:
/// channel pairs `(2k, 2k+1)` hold `sin` and `cos` of the delay scaled by a
/// geometric frequency ladder, so nearby delays get nearby codes and the
/// zero delay maps to `[0, 1, 0, 1, ...]`.
pub fn delay_embedding(delay: Real, channels: usize) -> Vec<Real> {
    let mut e = Vec::with_capacity(channels);
    for k in 0..channels {
        let pair = (k / 2) as Real;
        let freq = (10_000.0 as Real).powf(-2.0 * pair / channels as Real);
        let phase = delay * freq;
        e.push(if k % 2 == 0 { phase.sin() } else { phase.cos() });
    }
    e
}

/// Add the delay code to every cell of a `[C, H, W]` map.
pub fn apply_delay_embedding(features: &Tensor, delay: Real) -> Result<Tensor> {
    if features.rank() != 3 {
        return Err(Error::shape("delay embedding", "[C, H, W]", format!("{:?}", features.shape())));
    }
    let c = features.shape()[0];
    let code = Tensor::from_vec(&[c, 1, 1], delay_embedding(delay, c))?;
    features.add(&code)
}

/// Gated merge of the current feature map with the warped previous one.
///
/// Both inputs are `[C, H, W]` in the current frame. A per-cell gate decides
/// how much of the current map to keep against a learned mix of both:
/// `out = g * current + (1 - g) * mix(concat)`.
pub struct TemporalFusion {
    pub gate_w: Tensor,
    pub gate_b: Tensor,
    pub mix_w: Tensor,
    pub mix_b: Tensor,
    channels: usize,
}

impl TemporalFusion {
    pub fn new(channels: usize, rng: &mut impl Rng) -> TemporalFusion {
        TemporalFusion {
            gate_w: init::kaiming_uniform(rng, &[channels, 2 * channels], 2 * channels),
            gate_b: init::zeros_param(&[channels]),
            mix_w: init::kaiming_uniform(rng, &[channels, 2 * channels], 2 * channels),
            mix_b: init::zeros_param(&[channels]),
            channels,
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![
            self.gate_w.clone(),
            self.gate_b.clone(),
            self.mix_w.clone(),
            self.mix_b.clone(),
        ]
    }

    pub fn forward(&self, current: &Tensor, previous_warped: &Tensor) -> Result<Tensor> {
        if current.shape() != previous_warped.shape()
            || current.rank() != 3
            || current.shape()[0] != self.channels
        {
            return Err(Error::shape(
                "temporal fusion",
                format!("two maps [{}, H, W]", self.channels),
                format!("{:?} with {:?}", current.shape(), previous_warped.shape()),
            ));
        }
        let cat = Tensor::concat(&[current.clone(), previous_warped.clone()], 0)?;
        let gate = cat.conv1x1(&self.gate_w, &self.gate_b)?.sigmoid();
        let mix = cat.conv1x1(&self.mix_w, &self.mix_b)?.relu();
        let keep = gate.mul(current)?;
        let inject = gate.neg().add_scalar(1.0).mul(&mix)?;
        keep.add(&inject)
    }
}
