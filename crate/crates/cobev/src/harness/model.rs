//! The assembled collaborative detector: shared encoder, temporal fusion on
//! the ego branch, delay stamping and compensation on remote branches,
//! cross-agent fusion, and the detection head.

use rand::Rng;

use super::config::Config;
use super::scenario::Scenario;
use crate::bev::AgentType;
use crate::compensation::{channel_kl, FeatureCompensation};
use crate::detection::{decode_and_nms, Detection, DetectionHead};
use crate::fusion::{average_fuse, CollaborativeFusion};
use crate::geometry::{perturb_pose, warp_between_poses, GridMeta, NoiseSpec};
use crate::pillar::{Backbone, PillarEncoder};
use crate::temporal::{apply_delay_embedding, TemporalFusion};
use crate::{Error, Real, Result, Tensor};

/// Which optional stages are active. The ablation study switches these on
/// cumulatively, in the declaration order below.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Ablation {
    /// Imitate a frozen reference model trained on pooled raw points.
    pub distill: bool,
    /// Compensate remote maps and penalize their distribution gap.
    pub compensate: bool,
    /// Cross-agent attention; off falls back to plain averaging.
    pub attention: bool,
    /// Deformable refinement after cross-agent fusion.
    pub deformable: bool,
}

impl Ablation {
    pub fn full() -> Ablation {
        Ablation { distill: true, compensate: true, attention: true, deformable: true }
    }

    pub fn baseline() -> Ablation {
        Ablation { distill: false, compensate: false, attention: false, deformable: false }
    }

    /// Cumulative ladder walked by the ablation study.
    pub fn ladder() -> [(&'static str, Ablation); 5] {
        let base = Ablation::baseline();
        [
            ("baseline", base),
            ("+distill", Ablation { distill: true, ..base }),
            ("+compensation", Ablation { distill: true, compensate: true, ..base }),
            (
                "+attention",
                Ablation { distill: true, compensate: true, attention: true, ..base },
            ),
            ("+deformable", Ablation::full()),
        ]
    }
}

/// Everything one forward pass over a scene produces.
pub struct ScenarioForward {
    /// Fused map consumed by the head, `[C, H, W]`.
    pub fused: Tensor,
    /// Raw head output, `[7, H, W]`.
    pub head_out: Tensor,
    /// Mean divergence between compensated remote maps and the (detached)
    /// ego map; present only when compensation ran on at least one remote.
    pub gap: Option<Tensor>,
}

pub struct Model {
    pub meta: GridMeta,
    /// Seconds between consecutive ego frames; delays are stamped in frames.
    pub frame_dt: Real,
    pub ablation: Ablation,
    pub encoder: PillarEncoder,
    pub backbone: Backbone,
    pub temporal: TemporalFusion,
    pub compensation: FeatureCompensation,
    /// Optional symmetric compensation of the ego map.
    pub ego_compensation: Option<FeatureCompensation>,
    pub fusion: CollaborativeFusion,
    pub head: DetectionHead,
}

impl Model {
    /// Every stage is constructed regardless of the ablation switches, in a
    /// fixed order, so two models built from identical generator state share
    /// identical weights stage by stage.
    pub fn new(cfg: &Config, ablation: Ablation, rng: &mut impl Rng) -> Result<Model> {
        let m = &cfg.model;
        let encoder = PillarEncoder::new(m.channels, rng);
        let backbone = Backbone::new(m.channels, m.backbone_depth, rng);
        let temporal = TemporalFusion::new(m.channels, rng);
        let compensation = FeatureCompensation::new(m.channels, rng);
        let ego_compensation =
            if m.compensate_both { Some(FeatureCompensation::new(m.channels, rng)) } else { None };
        let fusion = CollaborativeFusion::new(
            m.channels,
            m.attn_heads,
            m.attn_head_dim,
            m.attn_scope,
            m.deform_heads,
            m.deform_points,
            rng,
        )?;
        let head = DetectionHead::new(m.channels, rng);
        Ok(Model {
            meta: cfg.meta(),
            frame_dt: cfg.scenario.frame_dt,
            ablation,
            encoder,
            backbone,
            temporal,
            compensation,
            ego_compensation,
            fusion,
            head,
        })
    }

    /// All parameters in a stable order, active or not.
    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.backbone.params());
        p.extend(self.temporal.params());
        p.extend(self.compensation.params());
        if let Some(c) = &self.ego_compensation {
            p.extend(c.params());
        }
        p.extend(self.fusion.params());
        p.extend(self.head.params());
        p
    }

    /// Parameters the optimizer should touch under the current switches.
    pub fn trainable_params(&self) -> Vec<Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.backbone.params());
        p.extend(self.temporal.params());
        if self.ablation.compensate {
            p.extend(self.compensation.params());
            if let Some(c) = &self.ego_compensation {
                p.extend(c.params());
            }
        }
        if self.ablation.attention {
            p.extend(self.fusion.hetero.params());
        }
        if self.ablation.deformable {
            p.extend(self.fusion.deform.params());
        }
        p.extend(self.head.params());
        p
    }

    /// Scalar count of trainable weights under the current switches.
    pub fn trainable_len(&self) -> usize {
        self.trainable_params().iter().map(|p| p.len()).sum()
    }

    /// Run the full pipeline over one scene. Localization noise is drawn per
    /// agent from `rng`; the teacher never sees it.
    pub fn forward_scenario(
        &self,
        sc: &Scenario,
        noise: &NoiseSpec,
        rng: &mut impl Rng,
    ) -> Result<ScenarioForward> {
        // Ego branch: current frame plus the previous one warped by odometry
        // (assumed exact), gated together.
        let now = self.backbone.forward(&self.encoder.forward(&sc.ego_now.cloud, &self.meta)?)?;
        let prev = self.backbone.forward(&self.encoder.forward(&sc.ego_prev.cloud, &self.meta)?)?;
        let prev_warped =
            warp_between_poses(&prev, &sc.ego_prev.pose, &sc.ego_now.pose, &self.meta)?;
        let mut ego = self.temporal.forward(&now, &prev_warped)?;
        if self.ablation.compensate {
            if let Some(comp) = &self.ego_compensation {
                ego = comp.forward(&ego)?;
            }
        }

        // Remote branches align against the pose the ego broadcasts, which
        // carries its own localization error.
        let ego_broadcast = perturb_pose(&sc.ego_now.pose, noise, rng);
        let mut agents = vec![(AgentType::Vehicle, ego.clone())];
        let mut gaps: Vec<Tensor> = Vec::new();
        for remote in &sc.remotes {
            let feat =
                self.backbone.forward(&self.encoder.forward(&remote.cloud, &self.meta)?)?;
            let aged = apply_delay_embedding(&feat, -remote.capture_time / self.frame_dt)?;
            let noisy_pose = perturb_pose(&remote.pose, noise, rng);
            let warped = warp_between_poses(&aged, &noisy_pose, &ego_broadcast, &self.meta)?;
            let processed = if self.ablation.compensate {
                let c = self.compensation.forward(&warped)?;
                gaps.push(channel_kl(&ego.detach(), &c)?);
                c
            } else {
                warped
            };
            agents.push((AgentType::Infrastructure, processed));
        }

        let fused = if self.ablation.attention {
            let merged = self.fusion.hetero.forward(&agents)?;
            if self.ablation.deformable {
                self.fusion.deform.forward(&merged)?
            } else {
                merged
            }
        } else {
            average_fuse(&agents)?
        };
        let head_out = self.head.forward(&fused)?;

        let gap = match gaps.len() {
            0 => None,
            1 => Some(gaps.pop().expect("checked length")),
            n => {
                let mut acc = gaps[0].clone();
                for g in &gaps[1..] {
                    acc = acc.add(g)?;
                }
                Some(acc.mul_scalar(1.0 / n as Real))
            }
        };
        Ok(ScenarioForward { fused, head_out, gap })
    }

    /// Forward plus box decoding, for evaluation.
    pub fn detect(
        &self,
        sc: &Scenario,
        noise: &NoiseSpec,
        rng: &mut impl Rng,
        score_threshold: Real,
        nms_iou: Real,
    ) -> Result<Vec<Detection>> {
        let f = self.forward_scenario(sc, noise, rng)?;
        decode_and_nms(&f.head_out, &self.meta, score_threshold, nms_iou)
    }

    /// Snapshot of every weight, in `params()` order.
    pub fn state(&self) -> Vec<Vec<Real>> {
        self.params().iter().map(|p| p.to_vec()).collect()
    }

    /// Restore a snapshot taken from a structurally identical model.
    pub fn load_state(&self, state: &[Vec<Real>]) -> Result<()> {
        let params = self.params();
        if params.len() != state.len() {
            return Err(Error::shape(
                "model state",
                format!("{} tensors", params.len()),
                format!("{} tensors", state.len()),
            ));
        }
        for (i, (p, s)) in params.iter().zip(state).enumerate() {
            if p.len() != s.len() {
                return Err(Error::shape(
                    "model state",
                    format!("tensor {i} of {} values", p.len()),
                    format!("{} values", s.len()),
                ));
            }
            p.set_data(s);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::HEAD_CHANNELS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::harness::testutil::{tiny_config, tiny_scenario};

    #[test]
    fn forward_produces_expected_shapes() {
        let cfg = tiny_config();
        let sc = tiny_scenario(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::new(&cfg, Ablation::full(), &mut rng).unwrap();
        let f = model.forward_scenario(&sc, &NoiseSpec::off(), &mut rng).unwrap();
        let meta = cfg.meta();
        assert_eq!(f.fused.shape(), &[cfg.model.channels, meta.h, meta.w]);
        assert_eq!(f.head_out.shape(), &[HEAD_CHANNELS, meta.h, meta.w]);
        assert!(f.gap.is_some());
        assert!(f.gap.unwrap().item().is_finite());
    }

    #[test]
    fn gap_disappears_when_compensation_is_off() {
        let cfg = tiny_config();
        let sc = tiny_scenario(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Model::new(&cfg, Ablation::baseline(), &mut rng).unwrap();
        let f = model.forward_scenario(&sc, &NoiseSpec::off(), &mut rng).unwrap();
        assert!(f.gap.is_none());
    }

    #[test]
    fn ladder_models_share_weights_stage_by_stage() {
        let cfg = tiny_config();
        let a = Model::new(&cfg, Ablation::baseline(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = Model::new(&cfg, Ablation::full(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x.to_vec(), y.to_vec());
        }
    }

    #[test]
    fn trainable_counts_grow_monotonically_along_the_ladder() {
        let cfg = tiny_config();
        let mut prev = 0usize;
        for (i, (name, ab)) in Ablation::ladder().iter().enumerate() {
            let model =
                Model::new(&cfg, *ab, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let count = model.trainable_len();
            if i == 1 {
                // The imitation term adds a loss, not weights.
                assert_eq!(count, prev, "{name}");
            } else if i > 0 {
                assert!(count > prev, "{name}: {count} vs {prev}");
            }
            prev = count;
        }
    }

    #[test]
    fn forward_is_deterministic_for_a_fixed_noise_stream() {
        let cfg = tiny_config();
        let sc = tiny_scenario(&cfg);
        let model = Model::new(&cfg, Ablation::full(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let spec = cfg.noise_spec();
        let a = model
            .forward_scenario(&sc, &spec, &mut ChaCha8Rng::seed_from_u64(11))
            .unwrap();
        let b = model
            .forward_scenario(&sc, &spec, &mut ChaCha8Rng::seed_from_u64(11))
            .unwrap();
        assert_eq!(a.head_out.to_vec(), b.head_out.to_vec());
    }

    #[test]
    fn state_roundtrip_restores_outputs() {
        let cfg = tiny_config();
        let sc = tiny_scenario(&cfg);
        let model = Model::new(&cfg, Ablation::full(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let before = model
            .forward_scenario(&sc, &NoiseSpec::off(), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap()
            .head_out
            .to_vec();
        let snapshot = model.state();
        for p in model.params() {
            let bumped: Vec<Real> = p.to_vec().iter().map(|v| v + 0.1).collect();
            p.set_data(&bumped);
        }
        model.load_state(&snapshot).unwrap();
        let after = model
            .forward_scenario(&sc, &NoiseSpec::off(), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap()
            .head_out
            .to_vec();
        assert_eq!(before, after);
    }
}
