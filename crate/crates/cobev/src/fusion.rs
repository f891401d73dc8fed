//! Cross-agent feature fusion on a shared bird's-eye-view grid.
//!
//! Two stages. First, heterogeneous attention merges the aligned per-agent
//! maps: every projection is keyed by the sending agent's platform type, and
//! an extra pair of mixing matrices is keyed by the ordered (receiver,
//! sender) type pair, so vehicle→vehicle and infrastructure→vehicle messages
//! travel through different weights. Second, deformable attention lets each
//! cell of the fused map pull from a small set of learned off-center sample
//! locations, recovering context that fixed kernels miss.
//!
//! The agent list is ordered only by convention — element 0 owns the query —
//! and the fused output is bit-identical under any reordering of the
//! remaining agents that swap equal platform types (per-cell scope).
//!
//! A freshly built [`CollaborativeFusion`] is neutral: uniform attention over
//! pass-through values reproduces the plain per-cell average, and the
//! deformable stage forwards that map unchanged, so an untrained fusion
//! behaves like [`average_fuse`] plus its residual norms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bev::AgentType;
use crate::geometry::{build_sampling_grid, Affine2};
use crate::init;
use crate::tensor::Tensor;
use crate::{Error, Real, Result};

/// Which keys each query cell sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionScope {
    /// The same cell across all agents (default; cheap and order-invariant).
    Cell,
    /// Every cell of every agent. Quadratic in grid size; only sensible on
    /// tiny grids.
    Full,
}

const LN_EPS: Real = 1e-5;

/// Stack `[C, H, W]` maps into `[N, C, H, W]`.
fn stack0(parts: &[Tensor]) -> Result<Tensor> {
    let lifted: Vec<Tensor> = parts
        .iter()
        .map(|t| {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.reshape(&s)
        })
        .collect::<Result<_>>()?;
    Tensor::concat(&lifted, 0)
}

/// Plain per-cell average of the agent maps; the fusion-off fallback.
pub fn average_fuse(agents: &[(AgentType, Tensor)]) -> Result<Tensor> {
    let maps: Vec<Tensor> = agents.iter().map(|(_, t)| t.clone()).collect();
    if maps.is_empty() {
        return Err(Error::shape("average fuse", "at least one agent", "empty list"));
    }
    let n = maps.len() as Real;
    Ok(stack0(&maps)?.sum_axis(0)?.mul_scalar(1.0 / n))
}

/// Type-aware multi-head attention across agents.
pub struct HeteroAttention {
    pub channels: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub scope: AttentionScope,
    /// Per platform type: query/key/value projections, `[heads * head_dim, C]`.
    pub wq: [Tensor; 2],
    pub wk: [Tensor; 2],
    pub wv: [Tensor; 2],
    /// Per ordered (receiver, sender) type pair: key mixing, `[head_dim, head_dim]`.
    pub w_att: [[Tensor; 2]; 2],
    /// Per ordered (receiver, sender) type pair: value mixing, `[head_dim, head_dim]`.
    pub w_collab: [[Tensor; 2]; 2],
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

impl HeteroAttention {
    pub fn new(channels: usize, heads: usize, head_dim: usize, scope: AttentionScope, rng: &mut impl Rng) -> HeteroAttention {
        let proj = heads * head_dim;
        let proj_shape = [proj, channels];
        let pair_shape = [head_dim, head_dim];
        let wq = [
            init::kaiming_uniform(rng, &proj_shape, channels),
            init::kaiming_uniform(rng, &proj_shape, channels),
        ];
        let wk = [
            init::kaiming_uniform(rng, &proj_shape, channels),
            init::kaiming_uniform(rng, &proj_shape, channels),
        ];
        let wv = [
            init::kaiming_uniform(rng, &proj_shape, channels),
            init::kaiming_uniform(rng, &proj_shape, channels),
        ];
        let w_att = [
            [
                init::kaiming_uniform(rng, &pair_shape, head_dim),
                init::kaiming_uniform(rng, &pair_shape, head_dim),
            ],
            [
                init::kaiming_uniform(rng, &pair_shape, head_dim),
                init::kaiming_uniform(rng, &pair_shape, head_dim),
            ],
        ];
        let w_collab = [
            [
                init::kaiming_uniform(rng, &pair_shape, head_dim),
                init::kaiming_uniform(rng, &pair_shape, head_dim),
            ],
            [
                init::kaiming_uniform(rng, &pair_shape, head_dim),
                init::kaiming_uniform(rng, &pair_shape, head_dim),
            ],
        ];
        HeteroAttention {
            channels,
            heads,
            head_dim,
            scope,
            wq,
            wk,
            wv,
            w_att,
            w_collab,
            w_out: init::kaiming_uniform(rng, &[channels, proj], proj),
            b_out: init::zeros_param(&[channels]),
            ln_gamma: init::const_param(&[channels], 1.0),
            ln_beta: init::zeros_param(&[channels]),
        }
    }

    /// Overwrite a freshly built stage so it computes the normed residual of
    /// the plain per-cell average: zero queries make every softmax uniform,
    /// and identity value, pair and output projections pass the averaged maps
    /// through unchanged. Keys and key mixers keep their random draw. Exact
    /// when `heads * head_dim == channels`.
    pub fn reset_to_averaging(&mut self) {
        let proj = self.heads * self.head_dim;
        for t in 0..2 {
            self.wq[t] = init::zeros_param(&[proj, self.channels]);
            self.wv[t] = init::eye_param(proj, self.channels);
        }
        for row in self.w_collab.iter_mut() {
            for m in row.iter_mut() {
                *m = init::eye_param(self.head_dim, self.head_dim);
            }
        }
        self.w_out = init::eye_param(self.channels, proj);
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = Vec::new();
        for t in 0..2 {
            p.push(self.wq[t].clone());
            p.push(self.wk[t].clone());
            p.push(self.wv[t].clone());
        }
        for row in &self.w_att {
            for t in row {
                p.push(t.clone());
            }
        }
        for row in &self.w_collab {
            for t in row {
                p.push(t.clone());
            }
        }
        p.extend([
            self.w_out.clone(),
            self.b_out.clone(),
            self.ln_gamma.clone(),
            self.ln_beta.clone(),
        ]);
        p
    }

    /// Apply a `[head_dim, head_dim]` mix to one head slice of a projection.
    fn mix_head(&self, proj: &Tensor, head: usize, mixer: &Tensor) -> Result<Tensor> {
        let slice = proj.slice_axis(0, head * self.head_dim, self.head_dim)?;
        let zero_bias = Tensor::zeros(&[self.head_dim]);
        slice.conv1x1(mixer, &zero_bias)
    }

    /// Fuse aligned `[C, H, W]` maps; `agents[0]` owns the query.
    pub fn forward(&self, agents: &[(AgentType, Tensor)]) -> Result<Tensor> {
        let (_, ego_map) = agents
            .first()
            .ok_or_else(|| Error::shape("attention fusion", "at least one agent", "empty list"))?;
        let merged = self.attend(agents)?;
        ego_map.add(&merged)?.layer_norm(&self.ln_gamma, &self.ln_beta, 0, LN_EPS)
    }

    /// The attention branch alone — type-keyed projections, the joint softmax
    /// over agents, pair-mixed values, and the output projection — without
    /// the residual and norm that [`Self::forward`] wraps around it.
    pub fn attend(&self, agents: &[(AgentType, Tensor)]) -> Result<Tensor> {
        let (ego_type, ego_map) = agents
            .first()
            .ok_or_else(|| Error::shape("attention fusion", "at least one agent", "empty list"))?;
        let (h, w) = (ego_map.shape()[1], ego_map.shape()[2]);
        for (_, m) in agents {
            if m.shape() != [self.channels, h, w] {
                return Err(Error::shape(
                    "attention fusion",
                    format!("[{}, {h}, {w}] for every agent", self.channels),
                    format!("{:?}", m.shape()),
                ));
            }
        }
        let qi = ego_type.index();
        let zero_bias = Tensor::zeros(&[self.heads * self.head_dim]);
        let q = ego_map.conv1x1(&self.wq[qi], &zero_bias)?;
        let keys: Vec<Tensor> = agents
            .iter()
            .map(|(t, m)| m.conv1x1(&self.wk[t.index()], &zero_bias))
            .collect::<Result<_>>()?;
        let values: Vec<Tensor> = agents
            .iter()
            .map(|(t, m)| m.conv1x1(&self.wv[t.index()], &zero_bias))
            .collect::<Result<_>>()?;

        let scale = 1.0 / (self.head_dim as Real).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        for m in 0..self.heads {
            let q_m = q.slice_axis(0, m * self.head_dim, self.head_dim)?;
            let mut mixed_keys = Vec::with_capacity(agents.len());
            let mut mixed_values = Vec::with_capacity(agents.len());
            for (j, (t, _)) in agents.iter().enumerate() {
                let pair = (qi, t.index());
                mixed_keys.push(self.mix_head(&keys[j], m, &self.w_att[pair.0][pair.1])?);
                mixed_values.push(self.mix_head(&values[j], m, &self.w_collab[pair.0][pair.1])?);
            }
            let fused = match self.scope {
                AttentionScope::Cell => {
                    let scores: Vec<Tensor> = mixed_keys
                        .iter()
                        .map(|k| Ok(q_m.mul(k)?.sum_axis(0)?.mul_scalar(scale)))
                        .collect::<Result<_>>()?;
                    let attn = stack0(&scores)?.softmax(0)?; // [N, H, W]
                    let weighted: Vec<Tensor> = mixed_values
                        .iter()
                        .enumerate()
                        .map(|(j, v)| attn.slice_axis(0, j, 1)?.mul(v))
                        .collect::<Result<_>>()?;
                    stack0(&weighted)?.sum_axis(0)? // [head_dim, H, W]
                }
                AttentionScope::Full => {
                    let hw = h * w;
                    let q_flat = q_m.reshape(&[self.head_dim, hw])?.permute(&[1, 0])?;
                    let k_all = Tensor::concat(
                        &mixed_keys
                            .iter()
                            .map(|k| k.reshape(&[self.head_dim, hw]))
                            .collect::<Result<Vec<_>>>()?,
                        1,
                    )?;
                    let v_all = Tensor::concat(
                        &mixed_values
                            .iter()
                            .map(|v| v.reshape(&[self.head_dim, hw]))
                            .collect::<Result<Vec<_>>>()?,
                        1,
                    )?;
                    let attn = q_flat.matmul(&k_all)?.mul_scalar(scale).softmax(1)?;
                    attn.matmul(&v_all.permute(&[1, 0])?)?
                        .permute(&[1, 0])?
                        .reshape(&[self.head_dim, h, w])?
                }
            };
            head_outputs.push(fused);
        }
        Tensor::concat(&head_outputs, 0)?.conv1x1(&self.w_out, &self.b_out)
    }
}

/// Learned off-center sampling on a single `[C, H, W]` map: each cell predicts
/// `points` offsets and weights per head, gathers values there bilinearly, and
/// folds the result back through a residual.
pub struct DeformableAttention {
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
    /// Largest reachable offset, in cells.
    pub max_offset_cells: Real,
    pub offset_w: Tensor,
    pub offset_b: Tensor,
    pub weight_w: Tensor,
    pub weight_b: Tensor,
    pub value_w: Tensor,
    pub value_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

impl DeformableAttention {
    pub fn new(channels: usize, heads: usize, points: usize, rng: &mut impl Rng) -> Result<DeformableAttention> {
        if channels % heads != 0 {
            return Err(Error::shape(
                "deformable attention",
                format!("channels divisible by {heads} heads"),
                format!("{channels}"),
            ));
        }
        Ok(DeformableAttention {
            channels,
            heads,
            points,
            max_offset_cells: 3.0,
            offset_w: init::zeros_param(&[heads * points * 2, channels]),
            offset_b: init::zeros_param(&[heads * points * 2]),
            weight_w: init::kaiming_uniform(rng, &[heads * points, channels], channels),
            weight_b: init::zeros_param(&[heads * points]),
            value_w: init::kaiming_uniform(rng, &[channels, channels], channels),
            value_b: init::zeros_param(&[channels]),
            out_w: init::kaiming_uniform(rng, &[channels, channels], channels),
            out_b: init::zeros_param(&[channels]),
            ln_gamma: init::const_param(&[channels], 1.0),
            ln_beta: init::zeros_param(&[channels]),
        })
    }

    /// Overwrite a freshly built stage so it passes its input straight
    /// through the residual: zero offsets sample every point at its own cell,
    /// point weights are uniform, and identity value and output projections
    /// make the residual branch equal the input.
    pub fn reset_to_passthrough(&mut self) {
        self.weight_w = init::zeros_param(&[self.heads * self.points, self.channels]);
        self.value_w = init::eye_param(self.channels, self.channels);
        self.out_w = init::eye_param(self.channels, self.channels);
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![
            self.offset_w.clone(),
            self.offset_b.clone(),
            self.weight_w.clone(),
            self.weight_b.clone(),
            self.value_w.clone(),
            self.value_b.clone(),
            self.out_w.clone(),
            self.out_b.clone(),
            self.ln_gamma.clone(),
            self.ln_beta.clone(),
        ]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let merged = self.attend(x)?;
        x.add(&merged)?.layer_norm(&self.ln_gamma, &self.ln_beta, 0, LN_EPS)
    }

    /// The sampling branch alone — predicted offsets, softmax point weights,
    /// bilinear gathers of the projected values, and the output projection —
    /// without the residual and norm that [`Self::forward`] wraps around it.
    pub fn attend(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 3 || x.shape()[0] != self.channels {
            return Err(Error::shape(
                "deformable attention",
                format!("[{}, H, W]", self.channels),
                format!("{:?}", x.shape()),
            ));
        }
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let head_dim = self.channels / self.heads;
        // Offsets in normalized units: tanh bounds each component to
        // max_offset_cells grid cells.
        let scale_u = 2.0 * self.max_offset_cells / (w.max(2) as Real - 1.0);
        let scale_v = 2.0 * self.max_offset_cells / (h.max(2) as Real - 1.0);
        let raw_off = x.conv1x1(&self.offset_w, &self.offset_b)?.tanh();
        let weights = x
            .conv1x1(&self.weight_w, &self.weight_b)?
            .reshape(&[self.heads, self.points, h, w])?
            .softmax(1)?;
        let value = x.conv1x1(&self.value_w, &self.value_b)?;
        let base_grid = build_sampling_grid(&Affine2::identity(), h, w);

        let mut head_outputs = Vec::with_capacity(self.heads);
        for m in 0..self.heads {
            let v_m = value.slice_axis(0, m * head_dim, head_dim)?;
            let mut gathered: Option<Tensor> = None;
            for k in 0..self.points {
                let pair = (m * self.points + k) * 2;
                let du = raw_off.slice_axis(0, pair, 1)?.mul_scalar(scale_u);
                let dv = raw_off.slice_axis(0, pair + 1, 1)?.mul_scalar(scale_v);
                // [2, H, W] -> [H, W, 2] displacement added to the identity grid.
                let disp = Tensor::concat(&[du, dv], 0)?.permute(&[1, 2, 0])?;
                let grid = base_grid.add(&disp)?;
                let sampled = v_m.bilinear_sample(&grid)?;
                let a_k = weights.slice_axis(0, m, 1)?.slice_axis(1, k, 1)?.reshape(&[1, h, w])?;
                let contrib = a_k.mul(&sampled)?;
                gathered = Some(match gathered {
                    None => contrib,
                    Some(acc) => acc.add(&contrib)?,
                });
            }
            head_outputs.push(gathered.expect("at least one sampling point"));
        }
        Tensor::concat(&head_outputs, 0)?.conv1x1(&self.out_w, &self.out_b)
    }
}

/// The full fusion stage: heterogeneous attention across agents, then
/// deformable refinement of the merged map.
pub struct CollaborativeFusion {
    pub hetero: HeteroAttention,
    pub deform: DeformableAttention,
}

impl CollaborativeFusion {
    /// Both stages start neutral: a fresh pair computes the normed per-cell
    /// average of the agents and passes it through the refinement unchanged.
    pub fn new(
        channels: usize,
        attn_heads: usize,
        attn_head_dim: usize,
        scope: AttentionScope,
        deform_heads: usize,
        deform_points: usize,
        rng: &mut impl Rng,
    ) -> Result<CollaborativeFusion> {
        let mut hetero = HeteroAttention::new(channels, attn_heads, attn_head_dim, scope, rng);
        hetero.reset_to_averaging();
        let mut deform = DeformableAttention::new(channels, deform_heads, deform_points, rng)?;
        deform.reset_to_passthrough();
        Ok(CollaborativeFusion { hetero, deform })
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.hetero.params();
        p.extend(self.deform.params());
        p
    }

    pub fn forward(&self, agents: &[(AgentType, Tensor)]) -> Result<Tensor> {
        self.deform.forward(&self.hetero.forward(agents)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_agents(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Vec<(AgentType, Tensor)> {
        let mut mk = |t: AgentType| {
            let data: Vec<Real> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (t, Tensor::from_vec(&[c, h, w], data).unwrap())
        };
        vec![
            mk(AgentType::Vehicle),
            mk(AgentType::Infrastructure),
            mk(AgentType::Infrastructure),
        ]
    }

    #[test]
    fn average_fuse_is_elementwise_mean() {
        let a = Tensor::full(&[2, 2, 2], 1.0);
        let b = Tensor::full(&[2, 2, 2], 3.0);
        let out = average_fuse(&[(AgentType::Vehicle, a), (AgentType::Infrastructure, b)]).unwrap();
        assert!(out.to_vec().iter().all(|v| (*v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn hetero_output_shape_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let attn = HeteroAttention::new(6, 2, 4, AttentionScope::Cell, &mut rng);
        let agents = toy_agents(&mut rng, 6, 3, 4);
        let out = attn.forward(&agents).unwrap();
        assert_eq!(out.shape(), &[6, 3, 4]);
        assert!(out.to_vec().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn swapping_equal_type_agents_is_bitwise_invisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let attn = HeteroAttention::new(4, 2, 3, AttentionScope::Cell, &mut rng);
        let agents = toy_agents(&mut rng, 4, 3, 3);
        let mut swapped = agents.clone();
        swapped.swap(1, 2); // both infrastructure
        let a = attn.forward(&agents).unwrap().to_vec();
        let b = attn.forward(&swapped).unwrap().to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn full_scope_on_single_cell_matches_cell_scope() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut attn = HeteroAttention::new(4, 1, 3, AttentionScope::Cell, &mut rng);
        let agents: Vec<(AgentType, Tensor)> = vec![
            (AgentType::Vehicle, Tensor::from_vec(&[4, 1, 1], vec![0.3, -0.2, 0.9, 0.1]).unwrap()),
            (AgentType::Infrastructure, Tensor::from_vec(&[4, 1, 1], vec![-0.5, 0.4, 0.0, 0.7]).unwrap()),
        ];
        let cell = attn.forward(&agents).unwrap().to_vec();
        attn.scope = AttentionScope::Full;
        let full = attn.forward(&agents).unwrap().to_vec();
        for (a, b) in cell.iter().zip(&full) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn hetero_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let attn = HeteroAttention::new(3, 1, 2, AttentionScope::Cell, &mut rng);
        let ego = Tensor::param(&[3, 2, 2], (0..12).map(|v| (v as Real * 0.21).sin()).collect()).unwrap();
        let other = Tensor::param(&[3, 2, 2], (0..12).map(|v| (v as Real * 0.17).cos()).collect()).unwrap();
        let agents = vec![
            (AgentType::Vehicle, ego.clone()),
            (AgentType::Infrastructure, other.clone()),
        ];
        let mut params = attn.params();
        params.push(ego);
        params.push(other);
        let worst = crate::tensor::grad_check(
            || Ok(attn.forward(&agents)?.square().sum()),
            &params,
            1e-5,
        )
        .unwrap();
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn deformable_rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        assert!(DeformableAttention::new(5, 2, 4, &mut rng).is_err());
    }

    #[test]
    fn deformable_identity_configuration_reduces_to_layer_norm() {
        // Zero offsets and a zero value path: the residual branch vanishes
        // and the output is exactly the layer norm of the input.
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let mut d = DeformableAttention::new(4, 2, 3, &mut rng).unwrap();
        d.value_w = init::zeros_param(&[4, 4]);
        d.value_b = init::zeros_param(&[4]);
        let x = Tensor::from_vec(&[4, 2, 2], (0..16).map(|v| (v as Real * 0.4).sin()).collect()).unwrap();
        let out = d.forward(&x).unwrap();
        let expect = x.layer_norm(&d.ln_gamma, &d.ln_beta, 0, LN_EPS).unwrap();
        for (a, b) in out.to_vec().iter().zip(expect.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn passthrough_sampling_branch_returns_the_input() {
        // Zero offsets sample every point at its own cell, uniform weights
        // sum them back to one copy, and identity projections leave the
        // values untouched: the branch is the input, before any residual.
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut d = DeformableAttention::new(4, 2, 3, &mut rng).unwrap();
        d.reset_to_passthrough();
        let x = Tensor::from_vec(&[4, 3, 2], (0..24).map(|v| (v as Real * 0.31).cos()).collect()).unwrap();
        let out = d.attend(&x).unwrap();
        for (a, b) in out.to_vec().iter().zip(x.to_vec()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn deformable_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let mut d = DeformableAttention::new(2, 1, 2, &mut rng).unwrap();
        // Non-zero offset weights so the grid path carries gradient too.
        d.offset_w = init::kaiming_uniform(&mut rng, &[1 * 2 * 2, 2], 2);
        let x = Tensor::param(&[2, 3, 3], (0..18).map(|v| (v as Real * 0.29).sin()).collect()).unwrap();
        let mut params = d.params();
        params.push(x.clone());
        let worst =
            crate::tensor::grad_check(|| Ok(d.forward(&x)?.square().sum()), &params, 1e-5).unwrap();
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn fresh_fusion_starts_at_plain_averaging() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let fusion = CollaborativeFusion::new(6, 2, 3, AttentionScope::Cell, 2, 2, &mut rng).unwrap();
        let agents = toy_agents(&mut rng, 6, 3, 4);

        let avg = average_fuse(&agents).unwrap();
        let expect_hetero = agents[0]
            .1
            .add(&avg)
            .unwrap()
            .layer_norm(&fusion.hetero.ln_gamma, &fusion.hetero.ln_beta, 0, LN_EPS)
            .unwrap();
        let hetero_out = fusion.hetero.forward(&agents).unwrap();
        for (a, b) in hetero_out.to_vec().iter().zip(expect_hetero.to_vec()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }

        let expect_full = hetero_out
            .mul_scalar(2.0)
            .layer_norm(&fusion.deform.ln_gamma, &fusion.deform.ln_beta, 0, LN_EPS)
            .unwrap();
        let full = fusion.forward(&agents).unwrap();
        for (a, b) in full.to_vec().iter().zip(expect_full.to_vec()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn collaborative_fusion_runs_end_to_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let fusion = CollaborativeFusion::new(4, 2, 3, AttentionScope::Cell, 2, 2, &mut rng).unwrap();
        let agents = toy_agents(&mut rng, 4, 3, 3);
        let out = fusion.forward(&agents).unwrap();
        assert_eq!(out.shape(), &[4, 3, 3]);
        assert!(out.to_vec().iter().all(|v| v.is_finite()));
        assert_eq!(fusion.params().len(), attn_param_count() + 10);
    }

    fn attn_param_count() -> usize {
        // 3 projections x 2 types + 4 att + 4 collab + out w/b + ln gamma/beta.
        6 + 8 + 4
    }
}
