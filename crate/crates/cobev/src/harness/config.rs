//! Run configuration: TOML sections with strict key checking.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fusion::AttentionScope;
use crate::geometry::{GridMeta, NoiseKind, NoiseSpec};
use crate::{Error, Real, Result};

/// Extent and resolution of the shared feature grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Half-extent along x, meters (grid spans [-x_half, x_half]).
    pub x_half: Real,
    /// Half-extent along y, meters.
    pub y_half: Real,
    /// Cell edge length, meters.
    pub resolution: Real,
    /// Points below this height are dropped.
    pub z_min: Real,
    /// Points above this height are dropped.
    pub z_max: Real,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { x_half: 12.8, y_half: 6.4, resolution: 0.4, z_min: -3.0, z_max: 2.0 }
    }
}

/// Network widths and attention geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature channels carried end to end.
    pub channels: usize,
    /// Convolution layers in each encoder backbone.
    pub backbone_depth: usize,
    pub attn_heads: usize,
    pub attn_head_dim: usize,
    pub attn_scope: AttentionScope,
    pub deform_heads: usize,
    pub deform_points: usize,
    /// Compensate the ego map as well as remote maps.
    pub compensate_both: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            backbone_depth: 2,
            attn_heads: 2,
            attn_head_dim: 8,
            attn_scope: AttentionScope::Cell,
            deform_heads: 2,
            deform_points: 4,
            compensate_both: false,
        }
    }
}

/// Synthetic-scene generation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub train_scenarios: usize,
    pub eval_scenarios: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Number of roadside units contributing to each scene.
    pub infra_count: usize,
    /// Transmission delay bounds, seconds.
    pub delay_min: Real,
    pub delay_max: Real,
    /// Gap between the ego's two frames, seconds.
    pub frame_dt: Real,
    pub ego_speed_max: Real,
    pub object_speed_max: Real,
    /// Sweep density emulation: box-surface points per meter of wall.
    pub vehicle_points_per_meter: Real,
    pub infra_points_per_meter: Real,
    /// Background clutter points per cloud.
    pub vehicle_clutter: usize,
    pub infra_clutter: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            train_scenarios: 200,
            eval_scenarios: 50,
            objects_min: 2,
            objects_max: 5,
            infra_count: 1,
            delay_min: 0.05,
            delay_max: 0.3,
            frame_dt: 0.1,
            ego_speed_max: 8.0,
            object_speed_max: 3.0,
            vehicle_points_per_meter: 2.5,
            infra_points_per_meter: 7.0,
            vehicle_clutter: 40,
            infra_clutter: 120,
        }
    }
}

/// Update rule used for both the student and the reference pretraining.
/// The adaptive rule reaches a usable detector within the short desk-scale
/// schedules; classical momentum is kept for longer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Momentum,
}

/// Optimization schedule and loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Separate pretraining budget for the frozen reference model.
    pub teacher_epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr: Real,
    /// Velocity retention; only the momentum rule reads it.
    pub momentum: Real,
    /// Scenes whose gradients are averaged into one update.
    pub batch: usize,
    /// Epochs over which the rate ramps linearly from `lr / warmup_epochs`.
    pub warmup_epochs: usize,
    /// Epochs (1-based) after which the rate is scaled down.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: Real,
    /// Per-step decay of the parameter average kept for evaluation; zero
    /// keeps the last raw weights instead.
    pub ema: Real,
    /// Weight of the teacher-imitation term.
    pub distill_weight: Real,
    /// Weight of the remote-vs-local distribution-gap term.
    pub gap_weight: Real,
    /// Global gradient-norm ceiling; zero disables clipping.
    pub grad_clip: Real,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 24,
            teacher_epochs: 24,
            optimizer: OptimizerKind::Adam,
            lr: 0.01,
            momentum: 0.9,
            batch: 4,
            warmup_epochs: 2,
            lr_decay_epochs: vec![16, 20],
            lr_decay_factor: 0.1,
            ema: 0.99,
            distill_weight: 0.25,
            gap_weight: 0.1,
            grad_clip: 5.0,
        }
    }
}

/// Localization-error model applied during training and (by default) eval.
/// `sigma_r` is in degrees here; it is converted to radians internally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    /// Position error std, meters.
    pub sigma_t: Real,
    /// Heading error std, degrees.
    pub sigma_r: Real,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { kind: NoiseKind::Gaussian, sigma_t: 0.2, sigma_r: 0.2 }
    }
}

/// Decoding and sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub score_threshold: Real,
    pub nms_iou: Real,
    /// Noise levels swept over (interpreted as both meters and degrees).
    pub sweep_levels: Vec<Real>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { score_threshold: 0.1, nms_iou: 0.2, sweep_levels: vec![0.0, 0.2, 0.4, 0.6] }
    }
}

/// Top-level run configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
    pub noise: NoiseConfig,
    pub eval: EvalConfig,
}

impl Config {
    /// Reduced profile sized for quick experiments: a smaller grid, thinner
    /// network, fewer scenes, and a shorter schedule. Finishes in seconds
    /// where the default takes minutes.
    pub fn compact() -> Config {
        let mut cfg = Config::default();
        cfg.grid.x_half = 9.6;
        cfg.grid.y_half = 4.8;
        cfg.model.channels = 12;
        cfg.model.attn_head_dim = 6;
        cfg.model.deform_points = 2;
        cfg.scenario.train_scenarios = 48;
        cfg.scenario.eval_scenarios = 96;
        cfg.scenario.vehicle_clutter = 24;
        cfg.scenario.infra_clutter = 72;
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Config> {
        Config::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.channels == 0 || m.deform_heads == 0 || m.channels % m.deform_heads != 0 {
            return Err(Error::Config(format!(
                "channels ({}) must be a positive multiple of deform_heads ({})",
                m.channels, m.deform_heads
            )));
        }
        if self.grid.resolution <= 0.0 || self.grid.x_half <= 0.0 || self.grid.y_half <= 0.0 {
            return Err(Error::Config("grid extents and resolution must be positive".into()));
        }
        if self.grid.z_max <= self.grid.z_min {
            return Err(Error::Config("z_max must exceed z_min".into()));
        }
        let s = &self.scenario;
        if s.objects_min == 0 || s.objects_max < s.objects_min {
            return Err(Error::Config("need objects_max >= objects_min >= 1".into()));
        }
        if s.delay_max < s.delay_min || s.delay_min < 0.0 {
            return Err(Error::Config("need 0 <= delay_min <= delay_max".into()));
        }
        if self.train.epochs == 0 || self.train.lr <= 0.0 {
            return Err(Error::Config("need positive epochs and learning rate".into()));
        }
        if self.noise.sigma_t < 0.0 || self.noise.sigma_r < 0.0 {
            return Err(Error::Config("noise levels cannot be negative".into()));
        }
        Ok(())
    }

    pub fn meta(&self) -> GridMeta {
        GridMeta::centered(
            self.grid.x_half,
            self.grid.y_half,
            self.grid.resolution,
            self.grid.z_min,
            self.grid.z_max,
        )
    }

    /// Training-time noise with the heading spread converted to radians.
    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            kind: self.noise.kind,
            sigma_t: self.noise.sigma_t,
            sigma_r: self.noise.sigma_r.to_radians(),
        }
    }

    /// Noise spec for one sweep level (level meters, level degrees).
    pub fn noise_spec_at(&self, kind: NoiseKind, level: Real) -> NoiseSpec {
        NoiseSpec { kind, sigma_t: level, sigma_r: level.to_radians() }
    }

    /// Stable fingerprint of every setting, for manifests and checkpoint
    /// compatibility checks.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_hashable() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.hash().len(), 16);
        assert_eq!(cfg.hash(), cfg.hash());
    }

    #[test]
    fn toml_roundtrip_preserves_settings() {
        let cfg = Config::default();
        let text = toml::to_string(&cfg).unwrap();
        let back = Config::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "[grid]\nx_half = 10.0\nbogus = 1\n";
        assert!(Config::from_toml_str(text).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = Config::from_toml_str("[model]\nchannels = 8\n").unwrap();
        assert_eq!(cfg.model.channels, 8);
        assert_eq!(cfg.model.backbone_depth, ModelConfig::default().backbone_depth);
        assert_ne!(cfg.hash(), Config::default().hash());
    }

    #[test]
    fn invalid_head_split_is_rejected() {
        let text = "[model]\nchannels = 10\ndeform_heads = 4\n";
        assert!(Config::from_toml_str(text).is_err());
    }

    #[test]
    fn heading_noise_converts_degrees_to_radians() {
        let cfg = Config::from_toml_str("[noise]\nsigma_r = 90.0\n").unwrap();
        let spec = cfg.noise_spec();
        assert!((spec.sigma_r - std::f64::consts::FRAC_PI_2 as Real).abs() < 1e-12);
    }

    #[test]
    fn grid_meta_has_expected_cell_counts() {
        let meta = Config::default().meta();
        assert_eq!(meta.w, 64);
        assert_eq!(meta.h, 32);
    }
}
