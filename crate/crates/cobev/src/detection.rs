//! Rotated-box detection on bird's-eye-view features: head, target
//! assignment, losses, decoding, and average-precision evaluation.

use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::geometry::GridMeta;
use crate::init;
use crate::tensor::Tensor;
use crate::{Error, Real, Result};

/// Oriented rectangle on the ground plane: center (meters), full width across
/// the heading, full length along it, heading angle (radians).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxBev {
    pub cx: Real,
    pub cy: Real,
    pub w: Real,
    pub l: Real,
    pub yaw: Real,
}

impl BoxBev {
    pub fn new(cx: Real, cy: Real, w: Real, l: Real, yaw: Real) -> BoxBev {
        BoxBev { cx, cy, w, l, yaw }
    }

    pub fn area(&self) -> Real {
        self.w * self.l
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [(Real, Real); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let rot = |x: Real, y: Real| (self.cx + c * x - s * y, self.cy + s * x + c * y);
        [rot(hl, hw), rot(-hl, hw), rot(-hl, -hw), rot(hl, -hw)]
    }
}

/// A scored box proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub boxbev: BoxBev,
    pub score: Real,
}

fn polygon_area(poly: &[(Real, Real)]) -> Real {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % poly.len()];
        acc += x1 * y2 - x2 * y1;
    }
    acc.abs() / 2.0
}

/// Clip a convex polygon by the half-plane left of the directed edge a -> b.
fn clip_edge(poly: &[(Real, Real)], a: (Real, Real), b: (Real, Real)) -> Vec<(Real, Real)> {
    let side = |p: (Real, Real)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let cur = poly[i];
        let next = poly[(i + 1) % poly.len()];
        let (sc, sn) = (side(cur), side(next));
        if sc >= 0.0 {
            out.push(cur);
        }
        if (sc >= 0.0) != (sn >= 0.0) {
            let t = sc / (sc - sn);
            out.push((cur.0 + t * (next.0 - cur.0), cur.1 + t * (next.1 - cur.1)));
        }
    }
    out
}

/// Intersection-over-union of two oriented boxes, by clipping one against the
/// other. The pair is put in a canonical order first, so the result is
/// bit-identical under argument swap.
pub fn rotated_iou(a: &BoxBev, b: &BoxBev) -> Real {
    let key = |bx: &BoxBev| [bx.cx, bx.cy, bx.w, bx.l, bx.yaw];
    let (first, second) = if key(a)
        .iter()
        .zip(key(b).iter())
        .find_map(|(x, y)| match x.total_cmp(y) {
            std::cmp::Ordering::Equal => None,
            ord => Some(ord),
        })
        .unwrap_or(std::cmp::Ordering::Equal)
        == std::cmp::Ordering::Greater
    {
        (b, a)
    } else {
        (a, b)
    };
    let area_a = first.area();
    let area_b = second.area();
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let mut poly: Vec<(Real, Real)> = first.corners().to_vec();
    let clip = second.corners();
    for i in 0..4 {
        if poly.is_empty() {
            break;
        }
        poly = clip_edge(&poly, clip[i], clip[(i + 1) % 4]);
    }
    let inter = polygon_area(&poly);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy non-maximum suppression. Candidates are ranked by descending score
/// with a full lexicographic tie-break on the box fields, so the kept set
/// does not depend on input order.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: Real) -> Vec<Detection> {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.boxbev.cx.total_cmp(&b.boxbev.cx))
            .then(a.boxbev.cy.total_cmp(&b.boxbev.cy))
            .then(a.boxbev.w.total_cmp(&b.boxbev.w))
            .then(a.boxbev.l.total_cmp(&b.boxbev.l))
            .then(a.boxbev.yaw.total_cmp(&b.boxbev.yaw))
    });
    let mut kept: Vec<Detection> = Vec::new();
    'outer: for d in dets {
        for k in &kept {
            if rotated_iou(&d.boxbev, &k.boxbev) > iou_threshold {
                continue 'outer;
            }
        }
        kept.push(d);
    }
    kept
}

/// Predictions and ground truth for one frame.
#[derive(Debug, Clone, Default)]
pub struct EvalSample {
    pub dets: Vec<Detection>,
    pub gts: Vec<BoxBev>,
}

/// All-point interpolated average precision at one IoU threshold.
///
/// Detections are ranked globally by score (deterministic tie-break), each is
/// greedily matched to the best still-unmatched ground-truth box in its own
/// frame, and the precision envelope is integrated over recall.
pub fn average_precision(samples: &[EvalSample], iou_threshold: Real) -> Result<Real> {
    let total_gt: usize = samples.iter().map(|s| s.gts.len()).sum();
    if total_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    // (score, sample index, det index) ranked once across all frames.
    let mut ranked: Vec<(Real, usize, usize)> = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        for (di, d) in s.dets.iter().enumerate() {
            ranked.push((d.score, si, di));
        }
    }
    ranked.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut matched: Vec<Vec<bool>> = samples.iter().map(|s| vec![false; s.gts.len()]).collect();
    let mut tp_flags = Vec::with_capacity(ranked.len());
    for &(_, si, di) in &ranked {
        let det = &samples[si].dets[di];
        let mut best: Option<(usize, Real)> = None;
        for (gi, gt) in samples[si].gts.iter().enumerate() {
            if matched[si][gi] {
                continue;
            }
            let iou = rotated_iou(&det.boxbev, gt);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[si][gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }

    // Precision at each rank, then the running-max envelope from the right,
    // integrated over recall steps (one step per true positive).
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (rank, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as Real / (rank + 1) as Real);
    }
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            ap += envelope[i] / total_gt as Real;
        }
    }
    Ok(ap)
}

/// Head output layout: objectness logit, then x/y center offset (in cells),
/// log width, log length, and the doubled heading's sine and cosine. The
/// doubled angle makes the half-turn symmetry of a box footprint explicit, so
/// orientation is learnable from geometry alone.
pub const HEAD_CHANNELS: usize = 7;

/// Per-cell projection from the fused features to the box parameterization.
/// A residual adapter (1x1 -> rectifier -> 1x1, second conv zero-started)
/// precedes the linear readout: a fresh head is exactly the plain linear
/// projection, and the adapter only bends the features once training moves
/// its blend weights off zero.
pub struct DetectionHead {
    pub hidden_w: Tensor,
    pub hidden_b: Tensor,
    pub blend_w: Tensor,
    pub blend_b: Tensor,
    pub w: Tensor,
    pub b: Tensor,
    channels: usize,
}

/// Assumed prior probability of a cell holding an object center; the
/// objectness bias starts at its logit so the rare-positive loss does not
/// collapse the head to all-background early in training.
pub const CLS_PRIOR: Real = 0.01;
/// Typical road-vehicle footprint; the size biases start at its logarithm so
/// decoded boxes are plausibly sized from the first step.
pub const SIZE_PRIOR_W: Real = 1.9;
pub const SIZE_PRIOR_L: Real = 4.2;

impl DetectionHead {
    pub fn new(channels: usize, rng: &mut impl Rng) -> DetectionHead {
        let b = init::zeros_param(&[HEAD_CHANNELS]);
        b.set_elem(0, (CLS_PRIOR / (1.0 - CLS_PRIOR)).ln());
        b.set_elem(3, SIZE_PRIOR_W.ln());
        b.set_elem(4, SIZE_PRIOR_L.ln());
        // Doubled-angle cosine starts at 1: an axis-aligned heading prior.
        b.set_elem(6, 1.0);
        DetectionHead {
            hidden_w: init::kaiming_uniform(rng, &[channels, channels], channels),
            hidden_b: init::zeros_param(&[channels]),
            blend_w: init::zeros_param(&[channels, channels]),
            blend_b: init::zeros_param(&[channels]),
            w: init::kaiming_uniform(rng, &[HEAD_CHANNELS, channels], channels),
            b,
            channels,
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![
            self.hidden_w.clone(),
            self.hidden_b.clone(),
            self.blend_w.clone(),
            self.blend_b.clone(),
            self.w.clone(),
            self.b.clone(),
        ]
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        if features.rank() != 3 || features.shape()[0] != self.channels {
            return Err(Error::shape(
                "detection head",
                format!("[{}, H, W]", self.channels),
                format!("{:?}", features.shape()),
            ));
        }
        let bent = features
            .conv1x1(&self.hidden_w, &self.hidden_b)?
            .relu()
            .conv1x1(&self.blend_w, &self.blend_b)?;
        features.add(&bent)?.conv1x1(&self.w, &self.b)
    }
}

/// Dense supervision maps built from ground-truth boxes.
pub struct DetectionTargets {
    /// `[1, H, W]` Gaussian heat map, exactly 1.0 at each box's center cell.
    pub cls: Tensor,
    /// `[1, H, W]` indicator of the center cells.
    pub peak: Tensor,
    /// `[6, H, W]` center offset (cells), log size, and heading sine/cosine.
    pub reg: Tensor,
    /// `[1, H, W]` indicator of cells with regression supervision.
    pub mask: Tensor,
    /// Number of distinct center cells.
    pub positives: usize,
    /// Number of regression-supervised cells.
    pub reg_cells: usize,
}

/// Spread of the heat map relative to the box's smaller side, in cells.
const HEAT_SIGMA_FRACTION: Real = 1.0 / 6.0;
const HEAT_SIGMA_MIN: Real = 0.8;
/// Cells whose center falls inside the box shrunk by this factor also get
/// regression targets, so off-peak decodes still place a sensible box.
const REG_CORE_FRACTION: Real = 0.6;

fn point_in_box(x: Real, y: Real, b: &BoxBev) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (x - b.cx, y - b.cy);
    let along = c * dx + s * dy;
    let across = -s * dx + c * dy;
    along.abs() <= b.l / 2.0 && across.abs() <= b.w / 2.0
}

/// Assign each box a Gaussian heat bump peaking at the cell containing its
/// center, and regression targets over the box core. Boxes centered off the
/// grid are skipped; overlapping bumps keep the elementwise maximum and later
/// boxes overwrite earlier regression targets.
pub fn build_targets(gts: &[BoxBev], meta: &GridMeta) -> DetectionTargets {
    let (h, w) = (meta.h, meta.w);
    let mut cls: Vec<Real> = vec![0.0; h * w];
    let mut peak = vec![0.0; h * w];
    let mut reg = vec![0.0; 6 * h * w];
    let mut mask = vec![0.0; h * w];
    let mut positives = 0usize;
    for gt in gts {
        let (fx, fy) = meta.to_cell(gt.cx, gt.cy);
        let col = fx.round();
        let row = fy.round();
        if col < 0.0 || row < 0.0 || col >= w as Real || row >= h as Real {
            continue;
        }
        let (col, row) = (col as usize, row as usize);
        let center = row * w + col;
        if peak[center] == 0.0 {
            positives += 1;
        }
        peak[center] = 1.0;

        let sigma = (gt.w.min(gt.l) / meta.resolution * HEAT_SIGMA_FRACTION).max(HEAT_SIGMA_MIN);
        let radius = (3.0 * sigma).ceil() as i64;
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                let (r, c) = (row as i64 + dr, col as i64 + dc);
                if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                    continue;
                }
                let d2 = (r as Real - fy).powi(2) + (c as Real - fx).powi(2);
                let heat = (-d2 / (2.0 * sigma * sigma)).exp();
                let cell = r as usize * w + c as usize;
                cls[cell] = cls[cell].max(heat);
            }
        }
        cls[center] = 1.0;

        let core = BoxBev { w: gt.w * REG_CORE_FRACTION, l: gt.l * REG_CORE_FRACTION, ..*gt };
        let reach = (gt.w.max(gt.l) / (2.0 * meta.resolution)).ceil() as i64;
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (r, c) = (row as i64 + dr, col as i64 + dc);
                if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                    continue;
                }
                let (ccx, ccy) = meta.cell_center(r as usize, c as usize);
                let cell = r as usize * w + c as usize;
                if !(point_in_box(ccx, ccy, &core) || cell == center) {
                    continue;
                }
                mask[cell] = 1.0;
                reg[cell] = (gt.cx - ccx) / meta.resolution;
                reg[h * w + cell] = (gt.cy - ccy) / meta.resolution;
                reg[2 * h * w + cell] = gt.w.ln();
                reg[3 * h * w + cell] = gt.l.ln();
                reg[4 * h * w + cell] = (2.0 * gt.yaw).sin();
                reg[5 * h * w + cell] = (2.0 * gt.yaw).cos();
            }
        }
    }
    let reg_cells = mask.iter().filter(|v| **v == 1.0).count();
    DetectionTargets {
        cls: Tensor::from_vec(&[1, h, w], cls).expect("consistent by construction"),
        peak: Tensor::from_vec(&[1, h, w], peak).expect("consistent by construction"),
        reg: Tensor::from_vec(&[6, h, w], reg).expect("consistent by construction"),
        mask: Tensor::from_vec(&[1, h, w], mask).expect("consistent by construction"),
        positives,
        reg_cells,
    }
}

/// Focal-loss focusing exponent and positive-class weight.
pub const FOCAL_GAMMA: i32 = 2;
pub const FOCAL_ALPHA: Real = 0.25;
/// Weight of the box-regression term against the classification term.
pub const REG_WEIGHT: Real = 2.0;

/// Classification + regression loss. Classification is normalized by the
/// number of center cells, regression by the number of supervised cells.
pub struct DetectionLoss {
    pub total: Tensor,
    pub cls_value: Real,
    pub reg_value: Real,
}

pub fn detection_loss(pred: &Tensor, targets: &DetectionTargets) -> Result<DetectionLoss> {
    if pred.rank() != 3 || pred.shape()[0] != HEAD_CHANNELS {
        return Err(Error::shape(
            "detection loss",
            format!("[{HEAD_CHANNELS}, H, W]"),
            format!("{:?}", pred.shape()),
        ));
    }
    let norm = 1.0 / (targets.positives.max(1) as Real);
    let logits = pred.slice_axis(0, 0, 1)?;
    // Stable focal pieces: -ln sigmoid(x) = softplus(-x), and the focusing
    // factor is the opposite class's probability squared. Negatives near a
    // center are damped by (1 - heat)^4, so the head is not punished for
    // responding to an object's immediate surroundings.
    let p = logits.sigmoid();
    let q = logits.neg().sigmoid();
    let pos_term = q.square().mul(&logits.neg().softplus())?.mul_scalar(FOCAL_ALPHA);
    let neg_term = p.square().mul(&logits.softplus())?.mul_scalar(1.0 - FOCAL_ALPHA);
    let damp = targets.cls.neg().add_scalar(1.0).square().square();
    let cls_map = targets
        .peak
        .mul(&pos_term)?
        .add(&damp.mul(&neg_term)?)?;
    let cls = cls_map.sum().mul_scalar(norm);

    let reg_pred = pred.slice_axis(0, 1, 6)?;
    let reg_map = reg_pred.smooth_l1(&targets.reg, 1.0)?.mul(&targets.mask)?;
    let reg = reg_map.sum().mul_scalar(1.0 / (targets.reg_cells.max(1) as Real));

    let total = cls.add(&reg.mul_scalar(REG_WEIGHT))?;
    Ok(DetectionLoss {
        cls_value: cls.item(),
        reg_value: reg.item(),
        total,
    })
}

/// Turn a head map back into scored boxes; no suppression. Only cells whose
/// logit is a weak local maximum over their 3x3 neighborhood emit a box, so
/// one object does not shed a halo of duplicates.
pub fn decode(pred: &Tensor, meta: &GridMeta, score_threshold: Real) -> Result<Vec<Detection>> {
    if pred.rank() != 3 || pred.shape()[0] != HEAD_CHANNELS || pred.shape()[1] != meta.h || pred.shape()[2] != meta.w {
        return Err(Error::shape(
            "detection decode",
            format!("[{HEAD_CHANNELS}, {}, {}]", meta.h, meta.w),
            format!("{:?}", pred.shape()),
        ));
    }
    let d = pred.data();
    let hw = meta.h * meta.w;
    let local_max = |row: usize, col: usize| -> bool {
        let v = d[row * meta.w + col];
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (r, c) = (row as i64 + dr, col as i64 + dc);
                if r < 0 || c < 0 || r >= meta.h as i64 || c >= meta.w as i64 {
                    continue;
                }
                if d[r as usize * meta.w + c as usize] > v {
                    return false;
                }
            }
        }
        true
    };
    let mut out = Vec::new();
    for row in 0..meta.h {
        for col in 0..meta.w {
            let cell = row * meta.w + col;
            let x = d[cell];
            let score = if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { x.exp() / (1.0 + x.exp()) };
            if score < score_threshold || !local_max(row, col) {
                continue;
            }
            let (ccx, ccy) = meta.cell_center(row, col);
            out.push(Detection {
                boxbev: BoxBev {
                    cx: ccx + d[hw + cell] * meta.resolution,
                    cy: ccy + d[2 * hw + cell] * meta.resolution,
                    w: d[3 * hw + cell].exp(),
                    l: d[4 * hw + cell].exp(),
                    yaw: 0.5 * d[5 * hw + cell].atan2(d[6 * hw + cell]),
                },
                score,
            });
        }
    }
    Ok(out)
}

/// Decode, threshold and suppress in one step.
pub fn decode_and_nms(pred: &Tensor, meta: &GridMeta, score_threshold: Real, iou_threshold: Real) -> Result<Vec<Detection>> {
    Ok(nms(decode(pred, meta, score_threshold)?, iou_threshold))
}
