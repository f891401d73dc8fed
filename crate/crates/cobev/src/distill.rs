//! Knowledge distillation from an early-fusion teacher.
//!
//! The teacher sees what no deployed agent can: every agent's raw points,
//! merged in the ego frame with exact poses and no transmission delay. It is
//! trained on the detection task alone, then frozen; the student's fused
//! features are pulled toward the teacher's through a channel-distribution
//! KL term.

use rand::Rng;

use crate::bev::PointCloud;
use crate::compensation::channel_kl;
use crate::detection::DetectionHead;
use crate::geometry::{relative_transform, GridMeta, Pose};
use crate::pillar::{Backbone, PillarEncoder};
use crate::tensor::Tensor;
use crate::Result;

/// Merge per-agent clouds into the ego frame using exact poses.
pub fn union_cloud(agents: &[(Pose, &PointCloud)], ego: &Pose) -> Result<PointCloud> {
    let mut merged = PointCloud::new();
    for (pose, cloud) in agents {
        let rel = relative_transform(pose, ego)?;
        merged.points.extend(cloud.transform(&rel).points);
    }
    Ok(merged)
}

/// Early-fusion reference model: pillar encoder, backbone and detection head
/// over the union cloud.
pub struct Teacher {
    pub encoder: PillarEncoder,
    pub backbone: Backbone,
    pub head: DetectionHead,
}

impl Teacher {
    pub fn new(channels: usize, backbone_depth: usize, rng: &mut impl Rng) -> Teacher {
        Teacher {
            encoder: PillarEncoder::new(channels, rng),
            backbone: Backbone::new(channels, backbone_depth, rng),
            head: DetectionHead::new(channels, rng),
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.backbone.params());
        p.extend(self.head.params());
        p
    }

    /// Features and head output for a cloud already in the ego frame.
    pub fn forward(&self, cloud: &PointCloud, meta: &GridMeta) -> Result<(Tensor, Tensor)> {
        let feat = self.backbone.forward(&self.encoder.forward(cloud, meta)?)?;
        let head = self.head.forward(&feat)?;
        Ok((feat, head))
    }
}

/// Channel-softmax KL from the (detached) teacher feature map to the
/// student's. Gradients reach the student only; the teacher acts as a fixed
/// reference distribution.
pub fn distillation_loss(student: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    channel_kl(&teacher.detach(), student)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::Point;
    use crate::Real;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn union_cloud_expresses_points_in_ego_frame() {
        let ego = Pose::planar(1.0, 0.0, 0.0);
        let infra = Pose::planar(1.0, 2.0, std::f64::consts::FRAC_PI_2 as Real);
        let infra_cloud = PointCloud { points: vec![Point { x: 1.0, y: 0.0, z: 0.3, intensity: 0.8 }] };
        let ego_cloud = PointCloud { points: vec![Point { x: 0.5, y: 0.5, z: 0.0, intensity: 0.1 }] };
        let merged = union_cloud(&[(ego, &ego_cloud), (infra, &infra_cloud)], &ego).unwrap();
        assert_eq!(merged.len(), 2);
        // Ego's own points are unchanged.
        assert!((merged.points[0].x - 0.5).abs() < 1e-12);
        // Infra's forward point: world (1, 3) -> ego frame (0, 3).
        assert!((merged.points[1].x - 0.0).abs() < 1e-12);
        assert!((merged.points[1].y - 3.0).abs() < 1e-12);
        assert_eq!(merged.points[1].intensity, 0.8);
    }

    #[test]
    fn teacher_produces_features_and_head_maps() {
        let meta = GridMeta { h: 4, w: 4, resolution: 1.0, x_min: -2.0, y_min: -2.0, z_min: -1.0, z_max: 2.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let teacher = Teacher::new(6, 2, &mut rng);
        let cloud = PointCloud {
            points: vec![
                Point { x: 0.2, y: 0.3, z: 0.1, intensity: 0.5 },
                Point { x: -1.0, y: 1.0, z: 0.0, intensity: 0.9 },
            ],
        };
        let (feat, head) = teacher.forward(&cloud, &meta).unwrap();
        assert_eq!(feat.shape(), &[6, 4, 4]);
        assert_eq!(head.shape(), &[crate::detection::HEAD_CHANNELS, 4, 4]);
    }

    #[test]
    fn distillation_ignores_teacher_gradients() {
        let student = Tensor::param(&[2, 2, 2], vec![0.1, 0.4, -0.2, 0.3, 0.0, -0.1, 0.2, 0.5]).unwrap();
        let teacher = Tensor::param(&[2, 2, 2], vec![0.3, -0.4, 0.1, 0.0, 0.2, 0.1, -0.3, 0.2]).unwrap();
        let loss = distillation_loss(&student, &teacher).unwrap();
        assert!(loss.item() > 0.0);
        loss.backward().unwrap();
        assert!(student.grad().is_some());
        assert!(teacher.grad().is_none());
    }

    #[test]
    fn distillation_vanishes_when_student_matches_teacher() {
        let m = Tensor::from_vec(&[3, 2, 2], (0..12).map(|v| (v as Real * 0.7).sin()).collect()).unwrap();
        let loss = distillation_loss(&m, &m).unwrap();
        assert!(loss.item().abs() < 1e-12);
    }

    #[test]
    fn distillation_gradient_matches_finite_differences() {
        let student = Tensor::param(&[2, 2, 2], vec![0.1, 0.4, -0.2, 0.3, 0.0, -0.1, 0.2, 0.5]).unwrap();
        let teacher = Tensor::from_vec(&[2, 2, 2], vec![0.3, -0.4, 0.1, 0.0, 0.2, 0.1, -0.3, 0.2]).unwrap();
        let worst = crate::tensor::grad_check(
            || distillation_loss(&student, &teacher),
            std::slice::from_ref(&student),
            1e-5,
        )
        .unwrap();
        assert!(worst < 1e-7, "worst relative error {worst}");
    }
}
