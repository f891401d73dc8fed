//! Optimization: reference-model pretraining, student training under the
//! composite loss, and detection-quality evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Config, OptimizerKind};
use super::model::{Ablation, Model};
use super::scenario::{generate_scenario, Scenario};
use super::subseed;
use crate::bev::PointCloud;
use crate::detection::{average_precision, build_targets, detection_loss, EvalSample};
use crate::distill::{distillation_loss, union_cloud, Teacher};
use crate::geometry::{GridMeta, NoiseSpec, Pose};
use crate::{Error, Real, Result, Tensor};

/// Collect gradients, verify they are finite, and rescale them in place when
/// their global norm exceeds `clip` (zero disables clipping).
fn clipped_grads(params: &[Tensor], clip: Real) -> Result<Vec<Option<Vec<Real>>>> {
    let mut grads: Vec<Option<Vec<Real>>> = params.iter().map(|p| p.grad()).collect();
    let mut norm_sq: Real = 0.0;
    for g in grads.iter().flatten() {
        for gi in g {
            if !gi.is_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
            norm_sq += gi * gi;
        }
    }
    let norm = norm_sq.sqrt();
    if clip > 0.0 && norm > clip {
        let scale = clip / norm;
        for g in grads.iter_mut().flatten() {
            for gi in g {
                *gi *= scale;
            }
        }
    }
    Ok(grads)
}

/// Stochastic gradient descent with classical momentum and optional
/// global-norm gradient clipping.
pub struct Sgd {
    pub lr: Real,
    pub momentum: Real,
    /// Maximum global gradient norm; zero disables clipping.
    pub clip: Real,
    velocity: Vec<Vec<Real>>,
}

impl Sgd {
    pub fn new(lr: Real, momentum: Real, params: &[Tensor]) -> Sgd {
        Sgd { lr, momentum, clip: 0.0, velocity: params.iter().map(|p| vec![0.0; p.len()]).collect() }
    }

    /// Apply one update from the gradients currently stored on `params`,
    /// then clear them. Parameters without a gradient are left alone.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::shape(
                "optimizer step",
                format!("{} tensors", self.velocity.len()),
                format!("{} tensors", params.len()),
            ));
        }
        let grads = clipped_grads(params, self.clip)?;
        for ((p, v), g) in params.iter().zip(&mut self.velocity).zip(&grads) {
            let Some(g) = g else { continue };
            let mut data = p.to_vec();
            for ((d, vel), gi) in data.iter_mut().zip(v.iter_mut()).zip(g) {
                *vel = self.momentum * *vel + gi;
                *d -= self.lr * *vel;
            }
            p.set_data(&data);
            p.clear_grad();
        }
        Ok(())
    }
}

/// Adam with bias-corrected first and second moments and the same clipping
/// and finiteness checks as [`Sgd`].
pub struct Adam {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub clip: Real,
    steps: i32,
    mean: Vec<Vec<Real>>,
    var: Vec<Vec<Real>>,
}

impl Adam {
    pub fn new(lr: Real, params: &[Tensor]) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 0.0,
            steps: 0,
            mean: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            var: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.mean.len() {
            return Err(Error::shape(
                "optimizer step",
                format!("{} tensors", self.mean.len()),
                format!("{} tensors", params.len()),
            ));
        }
        let grads = clipped_grads(params, self.clip)?;
        self.steps += 1;
        let bias1 = 1.0 - self.beta1.powi(self.steps);
        let bias2 = 1.0 - self.beta2.powi(self.steps);
        for (((p, m), v), g) in params.iter().zip(&mut self.mean).zip(&mut self.var).zip(&grads) {
            let Some(g) = g else { continue };
            let mut data = p.to_vec();
            for (((d, mi), vi), gi) in data.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *d -= self.lr * (*mi / bias1) / ((*vi / bias2).sqrt() + self.eps);
            }
            p.set_data(&data);
            p.clear_grad();
        }
        Ok(())
    }
}

/// The configured update rule behind one interface.
pub enum Optimizer {
    Momentum(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn from_config(cfg: &Config, params: &[Tensor]) -> Optimizer {
        let t = &cfg.train;
        match t.optimizer {
            OptimizerKind::Momentum => {
                let mut o = Sgd::new(t.lr, t.momentum, params);
                o.clip = t.grad_clip;
                Optimizer::Momentum(o)
            }
            OptimizerKind::Adam => {
                let mut o = Adam::new(t.lr, params);
                o.clip = t.grad_clip;
                Optimizer::Adam(o)
            }
        }
    }

    pub fn set_lr(&mut self, lr: Real) {
        match self {
            Optimizer::Momentum(o) => o.lr = lr,
            Optimizer::Adam(o) => o.lr = lr,
        }
    }

    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        match self {
            Optimizer::Momentum(o) => o.step(params),
            Optimizer::Adam(o) => o.step(params),
        }
    }
}

/// Learning rate after `done` completed epochs of a `total`-epoch schedule.
/// The warmup length and decay marks are positioned on the student schedule;
/// other lengths (the reference pretraining) reuse them scaled
/// proportionally.
fn lr_at(cfg: &Config, total: usize, done: usize) -> Real {
    let base = cfg.train.epochs.max(1);
    let hits = cfg
        .train
        .lr_decay_epochs
        .iter()
        .filter(|&&m| m * total / base <= done)
        .count();
    let mut lr = cfg.train.lr * cfg.train.lr_decay_factor.powi(hits as i32);
    let warm = cfg.train.warmup_epochs * total / base;
    if done < warm {
        lr *= (done + 1) as Real / warm as Real;
    }
    lr
}

/// Bias-corrected exponential moving average of parameter values. Reading the
/// average instead of the last step removes the lottery of where gradient
/// noise happened to leave the weights.
struct ParamEma {
    decay: Real,
    steps: i32,
    acc: Vec<Vec<Real>>,
}

impl ParamEma {
    fn new(decay: Real, params: &[Tensor]) -> ParamEma {
        ParamEma { decay, steps: 0, acc: params.iter().map(|p| vec![0.0; p.len()]).collect() }
    }

    fn update(&mut self, params: &[Tensor]) {
        if self.decay <= 0.0 {
            return;
        }
        self.steps += 1;
        for (a, p) in self.acc.iter_mut().zip(params) {
            for (ai, pi) in a.iter_mut().zip(p.to_vec()) {
                *ai = self.decay * *ai + (1.0 - self.decay) * pi;
            }
        }
    }

    /// Overwrite `params` with the corrected average; a no-op before the
    /// first update or when disabled.
    fn write_to(&self, params: &[Tensor]) {
        if self.decay <= 0.0 || self.steps == 0 {
            return;
        }
        let corr = 1.0 - self.decay.powi(self.steps);
        for (a, p) in self.acc.iter().zip(params) {
            let data: Vec<Real> = a.iter().map(|v| v / corr).collect();
            p.set_data(&data);
        }
    }
}

/// The `k`-th scene of a seed's stream. Cramped layouts occasionally fail to
/// place; those indices fall through to salted retries so the stream stays
/// total.
pub fn nth_scenario(cfg: &Config, meta: &GridMeta, seed: u64, tag: &str, k: u64) -> Result<Scenario> {
    let mut last = None;
    for salt in 0..8 {
        let s = subseed(seed, tag, k + (salt << 48));
        match generate_scenario(&cfg.scenario, meta, s) {
            Ok(sc) => return Ok(sc),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt ran"))
}

/// Pool every agent's raw points at time zero using exact poses.
fn pooled_cloud(sc: &Scenario) -> Result<PointCloud> {
    let mut agents: Vec<(Pose, &PointCloud)> = vec![(sc.ego_now.pose, &sc.ego_now.cloud)];
    for r in &sc.remotes {
        agents.push((r.pose, &r.cloud));
    }
    union_cloud(&agents, &sc.ego_now.pose)
}

/// Pretrain the early-fusion reference model on pooled clouds with exact
/// poses. It is frozen afterwards; the student only ever sees its outputs
/// detached.
pub fn train_teacher(cfg: &Config, scenarios: &[Scenario], seed: u64) -> Result<Teacher> {
    let meta = cfg.meta();
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "teacher-init", 0));
    let teacher = Teacher::new(cfg.model.channels, cfg.model.backbone_depth, &mut rng);
    let params = teacher.params();
    let mut opt = Optimizer::from_config(cfg, &params);

    let mut ema = ParamEma::new(cfg.train.ema, &params);
    for epoch in 0..cfg.train.teacher_epochs {
        opt.set_lr(lr_at(cfg, cfg.train.teacher_epochs, epoch));
        let mut order: Vec<usize> = (0..scenarios.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(subseed(seed, "teacher-order", epoch as u64)));
        for chunk in order.chunks(cfg.train.batch.max(1)) {
            for &k in chunk {
                let sc = &scenarios[k];
                let (_, head) = teacher.forward(&pooled_cloud(sc)?, &meta)?;
                let loss = detection_loss(&head, &build_targets(&sc.ground_truth(), &meta))?;
                if !loss.total.item().is_finite() {
                    return Err(Error::NonFinite(format!("teacher loss in epoch {epoch}")));
                }
                loss.total.mul_scalar(1.0 / chunk.len() as Real).backward()?;
            }
            opt.step(&params)?;
            ema.update(&params);
        }
    }
    ema.write_to(&params);
    Ok(teacher)
}

/// Per-epoch averages logged during training.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: Real,
    pub loss: Real,
    pub detection: Real,
    pub imitation: Real,
    pub gap: Real,
}

/// A trained model together with its frozen reference and training log.
pub struct TrainedBundle {
    pub model: Model,
    pub teacher: Option<Teacher>,
    pub history: Vec<EpochStats>,
}

/// Train a student under the given stage switches.
///
/// The scene stream, weight initialization, shuffling, and noise draws all
/// derive from `seed` through independent streams, so a rerun reproduces the
/// result exactly. If the loss leaves the finite range the model is rolled
/// back to the end of the last completed epoch and an error is returned.
pub fn train_model(cfg: &Config, ablation: Ablation, seed: u64) -> Result<TrainedBundle> {
    train_model_with_teacher(cfg, ablation, seed, None, None)
}

/// [`train_model`], but reusing an already-trained reference model when the
/// switches ask for imitation, and optionally starting from another model's
/// weights instead of a fresh draw. The reference depends only on the
/// configuration and seed, so callers comparing several switch settings can
/// train it once; the warm start must come from a model built under the same
/// configuration.
pub fn train_model_with_teacher(
    cfg: &Config,
    ablation: Ablation,
    seed: u64,
    shared_teacher: Option<&Teacher>,
    warm_start: Option<&[Vec<Real>]>,
) -> Result<TrainedBundle> {
    let meta = cfg.meta();
    let scenarios: Vec<Scenario> = (0..cfg.scenario.train_scenarios)
        .map(|k| nth_scenario(cfg, &meta, seed, "scenario", k as u64))
        .collect::<Result<_>>()?;

    let owned_teacher = match (ablation.distill, shared_teacher) {
        (true, None) => Some(train_teacher(cfg, &scenarios, seed)?),
        _ => None,
    };
    let teacher = if ablation.distill { owned_teacher.as_ref().or(shared_teacher) } else { None };
    // Frozen teacher targets are constant; compute each scene's once.
    let mut teacher_features: Vec<Option<Tensor>> = vec![None; scenarios.len()];

    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "model-init", 0));
    let model = Model::new(cfg, ablation, &mut rng)?;
    if let Some(state) = warm_start {
        model.load_state(state)?;
    }
    let params = model.trainable_params();
    let mut opt = Optimizer::from_config(cfg, &params);
    let noise = cfg.noise_spec();

    let mut ema = ParamEma::new(cfg.train.ema, &params);
    let mut last_good: Option<Vec<Vec<Real>>> = None;
    let mut history = Vec::new();
    for epoch in 1..=cfg.train.epochs {
        let lr = lr_at(cfg, cfg.train.epochs, epoch - 1);
        opt.set_lr(lr);
        let mut order: Vec<usize> = (0..scenarios.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(subseed(seed, "order", epoch as u64)));
        let mut noise_rng = ChaCha8Rng::seed_from_u64(subseed(seed, "noise", epoch as u64));

        let (mut s_loss, mut s_det, mut s_imit, mut s_gap) = (0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.train.batch.max(1)) {
            for &k in chunk {
                let sc = &scenarios[k];
                let fwd = model.forward_scenario(sc, &noise, &mut noise_rng)?;
                let det = detection_loss(&fwd.head_out, &build_targets(&sc.ground_truth(), &meta))?;
                let mut total = det.total.clone();

                if let Some(t) = teacher {
                    if teacher_features[k].is_none() {
                        let (feat, _) = t.forward(&pooled_cloud(sc)?, &meta)?;
                        teacher_features[k] = Some(feat.detach());
                    }
                    let target = teacher_features[k].as_ref().expect("filled above");
                    let imit = distillation_loss(&fwd.fused, target)?;
                    s_imit += imit.item();
                    total = total.add(&imit.mul_scalar(cfg.train.distill_weight))?;
                }
                if let Some(gap) = &fwd.gap {
                    s_gap += gap.item();
                    total = total.add(&gap.mul_scalar(cfg.train.gap_weight))?;
                }

                let value = total.item();
                if !value.is_finite() {
                    if let Some(state) = &last_good {
                        model.load_state(state)?;
                    }
                    return Err(Error::NonFinite(format!("training loss in epoch {epoch}")));
                }
                s_loss += value;
                s_det += det.cls_value + det.reg_value;
                total.mul_scalar(1.0 / chunk.len() as Real).backward()?;
            }
            opt.step(&params)?;
            ema.update(&params);
        }

        let n = scenarios.len().max(1) as Real;
        history.push(EpochStats {
            epoch,
            lr,
            loss: s_loss / n,
            detection: s_det / n,
            imitation: s_imit / n,
            gap: s_gap / n,
        });
        last_good = Some(model.state());
    }
    ema.write_to(&params);
    Ok(TrainedBundle { model, teacher: owned_teacher, history })
}

/// Detection quality over the held-out scene stream.
#[derive(Debug, Clone, Copy)]
pub struct EvalMetrics {
    pub ap50: Real,
    pub ap70: Real,
    /// Mean remote-vs-ego divergence, when compensation is active.
    pub mean_gap: Real,
    pub detections: usize,
}

/// Evaluate on scenes and noise draws independent of the training streams.
pub fn evaluate(model: &Model, cfg: &Config, noise: &NoiseSpec, seed: u64) -> Result<EvalMetrics> {
    let meta = model.meta;
    let mut samples = Vec::with_capacity(cfg.scenario.eval_scenarios);
    let mut gap_sum = 0.0;
    let mut gap_n = 0usize;
    let mut detections = 0usize;
    for k in 0..cfg.scenario.eval_scenarios {
        let sc = nth_scenario(cfg, &meta, seed, "eval-scenario", k as u64)?;
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "eval-noise", k as u64));
        let fwd = model.forward_scenario(&sc, noise, &mut rng)?;
        let dets = crate::detection::decode_and_nms(
            &fwd.head_out,
            &meta,
            cfg.eval.score_threshold,
            cfg.eval.nms_iou,
        )?;
        if let Some(g) = &fwd.gap {
            gap_sum += g.item();
            gap_n += 1;
        }
        detections += dets.len();
        samples.push(EvalSample { dets, gts: sc.ground_truth() });
    }
    Ok(EvalMetrics {
        ap50: average_precision(&samples, 0.5)?,
        ap70: average_precision(&samples, 0.7)?,
        mean_gap: if gap_n > 0 { gap_sum / gap_n as Real } else { 0.0 },
        detections,
    })
}

/// Serialized weights plus enough metadata to rebuild the exact model.
#[derive(serde::Serialize, serde::Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub seed: u64,
    pub ablation: Ablation,
    pub state: Vec<Vec<Real>>,
}

impl Checkpoint {
    pub fn capture(model: &Model, cfg: &Config, seed: u64) -> Checkpoint {
        Checkpoint {
            config_hash: cfg.hash(),
            seed,
            ablation: model.ablation,
            state: model.state(),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)
            .map_err(|e| Error::Config(format!("could not write checkpoint: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
        let file = std::fs::File::open(path)?;
        serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Parse(format!("could not read checkpoint: {e}")))
    }

    /// Rebuild the model this checkpoint was taken from. The configuration
    /// must hash identically to the one used at capture time.
    pub fn restore(&self, cfg: &Config) -> Result<Model> {
        if cfg.hash() != self.config_hash {
            return Err(Error::Config(format!(
                "checkpoint was built under config {} but the current config hashes to {}",
                self.config_hash,
                cfg.hash()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(self.seed, "model-init", 0));
        let model = Model::new(cfg, self.ablation, &mut rng)?;
        model.load_state(&self.state)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn sgd_descends_a_quadratic() {
        let p = Tensor::param(&[2], vec![3.0, -2.0]).unwrap();
        let params = [p.clone()];
        let mut opt = Sgd::new(0.1, 0.8, &params);
        for _ in 0..120 {
            let loss = p.square().sum();
            loss.backward().unwrap();
            opt.step(&params).unwrap();
        }
        for v in p.to_vec() {
            assert!(v.abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn sgd_rejects_non_finite_gradients() {
        let p = Tensor::param(&[1], vec![0.0]).unwrap();
        let params = [p.clone()];
        let mut opt = Sgd::new(0.1, 0.0, &params);
        // ln(0) backward produces an infinite gradient.
        let loss = p.ln().sum();
        loss.backward().unwrap();
        assert!(matches!(opt.step(&params), Err(Error::NonFinite(_))));
    }

    #[test]
    fn decay_schedule_steps_down_at_the_marks() {
        let mut cfg = Config::default();
        cfg.train.epochs = 6;
        cfg.train.lr = 1.0;
        cfg.train.warmup_epochs = 0;
        cfg.train.lr_decay_factor = 0.1;
        cfg.train.lr_decay_epochs = vec![2, 4];
        let n = cfg.train.epochs;
        assert_eq!(lr_at(&cfg, n, 0), 1.0);
        assert_eq!(lr_at(&cfg, n, 1), 1.0);
        assert_eq!(lr_at(&cfg, n, 2), 0.1);
        assert_eq!(lr_at(&cfg, n, 3), 0.1);
        assert!((lr_at(&cfg, n, 4) - 0.01).abs() < 1e-15);
        // A half-length schedule hits the same marks at half the epoch index.
        assert_eq!(lr_at(&cfg, 3, 0), 1.0);
        assert_eq!(lr_at(&cfg, 3, 1), 0.1);
        assert!((lr_at(&cfg, 3, 2) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn warmup_ramps_linearly_before_the_plateau() {
        let mut cfg = Config::default();
        cfg.train.epochs = 8;
        cfg.train.lr = 1.0;
        cfg.train.warmup_epochs = 4;
        cfg.train.lr_decay_epochs = vec![];
        let n = cfg.train.epochs;
        assert_eq!(lr_at(&cfg, n, 0), 0.25);
        assert_eq!(lr_at(&cfg, n, 1), 0.5);
        assert_eq!(lr_at(&cfg, n, 3), 1.0);
        assert_eq!(lr_at(&cfg, n, 4), 1.0);
        // A half-length schedule compresses the ramp the same way it moves
        // the decay marks.
        assert_eq!(lr_at(&cfg, 4, 0), 0.5);
        assert_eq!(lr_at(&cfg, 4, 1), 1.0);
        assert_eq!(lr_at(&cfg, 4, 2), 1.0);
    }

    #[test]
    fn parameter_average_tracks_a_constant_and_ignores_its_start() {
        let p = Tensor::param(&[1], vec![7.0]).unwrap();
        let params = [p.clone()];
        let mut ema = ParamEma::new(0.9, &params);
        for _ in 0..3 {
            ema.update(&params);
        }
        // Constant parameters: the corrected average equals the constant
        // exactly, no matter how few updates ran.
        p.set_data(&[0.0]);
        ema.write_to(&params);
        assert!((p.to_vec()[0] - 7.0).abs() < 1e-12, "{}", p.to_vec()[0]);
    }

    #[test]
    fn disabled_parameter_average_keeps_the_raw_weights() {
        let p = Tensor::param(&[1], vec![2.0]).unwrap();
        let params = [p.clone()];
        let mut ema = ParamEma::new(0.0, &params);
        ema.update(&params);
        p.set_data(&[5.0]);
        ema.write_to(&params);
        assert_eq!(p.to_vec(), vec![5.0]);
    }

    #[test]
    fn adam_descends_a_badly_scaled_quadratic() {
        // Loss 0.5 * (1e4 * a^2 + 1e-2 * b^2): per-coordinate scaling lets a
        // single step size handle an eight-decade conditioning spread.
        let a = Tensor::param(&[1], vec![0.5]).unwrap();
        let b = Tensor::param(&[1], vec![0.5]).unwrap();
        let params = [a.clone(), b.clone()];
        let mut opt = Adam::new(0.02, &params);
        for _ in 0..200 {
            let loss = a.square().mul_scalar(5e3).add(&b.square().mul_scalar(5e-3)).unwrap().sum();
            loss.backward().unwrap();
            opt.step(&params).unwrap();
        }
        assert!(a.to_vec()[0].abs() < 1e-2, "{}", a.to_vec()[0]);
        assert!(b.to_vec()[0].abs() < 0.4, "{}", b.to_vec()[0]);
        // The poorly-scaled coordinate still made clear progress.
        assert!(b.to_vec()[0].abs() < 0.5);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let p = Tensor::param(&[1], vec![0.0]).unwrap();
        let params = [p.clone()];
        let mut opt = Adam::new(0.1, &params);
        let loss = p.ln().sum();
        loss.backward().unwrap();
        assert!(matches!(opt.step(&params), Err(Error::NonFinite(_))));
    }

    #[test]
    fn momentum_accelerates_along_a_constant_slope() {
        let p = Tensor::param(&[1], vec![0.0]).unwrap();
        let params = [p.clone()];
        let mut opt = Sgd::new(0.1, 0.9, &params);
        let mut last = 0.0;
        let mut widening = 0;
        for _ in 0..5 {
            let loss = p.sum();
            loss.backward().unwrap();
            let before = p.to_vec()[0];
            opt.step(&params).unwrap();
            let step = before - p.to_vec()[0];
            if step > last {
                widening += 1;
            }
            last = step;
        }
        assert!(widening >= 4, "steps should grow while the slope persists");
    }
}
