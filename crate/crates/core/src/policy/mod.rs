//! Shared actor-critic: state MLP, GRU, phase MLP, cross-attention, fusion
//! with per-phase latents, and policy/value/prediction heads.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Dense, Graph, Gru, InitScheme, Mat, Mlp2, NumError, ParamId, ParamStore, Var};
use crate::obs::{ObsDims, ObservationBundle, MOVEMENT_FEATURES};

pub const HEADS: usize = 4;
pub const LATENT_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub obs: ObsDims,
    /// embedding width
    pub d: usize,
    pub latent: usize,
}

impl Default for PolicyDims {
    fn default() -> Self {
        Self {
            obs: ObsDims::default(),
            d: 64,
            latent: LATENT_DIM,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub dims: PolicyDims,
    mlp_s: Mlp2,
    gru: Gru,
    mlp_p: Mlp2,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    pub mlp_sp: Mlp2,
    head_pi: Dense,
    head_v: Dense,
    head_pred: Dense,
}

/// Dense tensors for a batch of observations.
#[derive(Debug, Clone)]
pub struct ObsBatch {
    pub len: usize,
    /// `B × m_max·5`, padded movement rows zeroed
    pub states: Mat,
    /// `B·p_max × m_max`
    pub phases: Mat,
    /// `B × p_max`
    pub phase_mask: Mat,
}

impl ObsBatch {
    pub fn new(obs: &[&ObservationBundle], dims: ObsDims) -> Self {
        let b = obs.len();
        let mut states = Mat::zeros(b, dims.state_len());
        let mut phases = Mat::zeros(b * dims.p_max, dims.m_max);
        let mut phase_mask = Mat::zeros(b, dims.p_max);
        for (i, o) in obs.iter().enumerate() {
            assert_eq!(o.dims, dims, "observation padding differs from the policy's");
            let row = states.row_mut(i);
            for (k, (dst, src)) in row.iter_mut().zip(&o.s_t).enumerate() {
                *dst = src * o.movement_mask[k / MOVEMENT_FEATURES];
            }
            phases.data[i * dims.p_max * dims.m_max..(i + 1) * dims.p_max * dims.m_max].copy_from_slice(&o.g);
            phase_mask.row_mut(i).copy_from_slice(&o.phase_mask);
        }
        Self {
            len: b,
            states,
            phases,
            phase_mask,
        }
    }

    /// Phase mask flattened to one entry per `(sample, phase)` row.
    pub fn phase_rows(&self) -> &[f64] {
        &self.phase_mask.data
    }
}

/// Graph handles produced by [`PolicyNet::forward_graph`].
#[derive(Debug, Clone, Copy)]
pub struct PolicyVars {
    /// `B × p_max`, zero on masked entries
    pub log_pi: Var,
    /// `B × 1`
    pub value: Var,
    /// `B × m_max·5`
    pub s_hat: Var,
    /// `B × d`
    pub h_next: Var,
    /// `B·p_max × 2d`, masked rows zero
    pub h_tilde: Var,
    /// `B·p_max × d`
    pub h_sp: Var,
}

/// Single-intersection forward result.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub pi: Vec<f64>,
    pub value: f64,
    pub s_hat: Vec<f64>,
    pub h_gru: Vec<f64>,
    /// `p_max × d`
    pub h_sp: Mat,
    /// `p_max × 2d`
    pub h_tilde: Mat,
}

impl PolicyNet {
    pub fn new(store: &mut ParamStore, dims: PolicyDims) -> Self {
        let d = dims.d;
        let o = dims.obs;
        Self {
            dims,
            mlp_s: Mlp2::new(store, "policy.mlp_s", o.state_len(), d, d),
            gru: Gru::new(store, "policy.gru", d, d),
            mlp_p: Mlp2::new(store, "policy.mlp_p", o.m_max, d, d),
            wq: store.add("policy.attn.wq", d, HEADS * d, InitScheme::UniformFanIn),
            wk: store.add("policy.attn.wk", d, HEADS * d, InitScheme::UniformFanIn),
            wv: store.add("policy.attn.wv", d, HEADS * d, InitScheme::UniformFanIn),
            wo: store.add("policy.attn.wo", HEADS * d, d, InitScheme::UniformFanIn),
            mlp_sp: Mlp2::new(store, "policy.mlp_sp", dims.latent, d, d),
            head_pi: Dense::new(store, "policy.head_pi", 2 * d, 1),
            head_v: Dense::new(store, "policy.head_v", 2 * d, 1),
            head_pred: Dense::new(store, "policy.head_pred", 2 * d, o.state_len()),
        }
    }

    /// Batched forward. `h_prev` is `B × d`; `z_mu` is `B·p_max × latent`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &ObsBatch,
        h_prev: Var,
        z_mu: Var,
    ) -> Result<PolicyVars, NumError> {
        let (b, p) = (batch.len, self.dims.obs.p_max);
        let d = self.dims.d;
        let rows = batch.phase_rows();

        let s = g.input(batch.states.clone());
        let h_s = self.mlp_s.forward(g, store, s)?;
        let h_next = self.gru.forward(g, store, h_s, h_prev)?;

        let gm = g.input(batch.phases.clone());
        let h_p = self.mlp_p.forward(g, store, gm)?;
        let (wq, wk, wv, wo) = (
            g.param(store, self.wq),
            g.param(store, self.wk),
            g.param(store, self.wv),
            g.param(store, self.wo),
        );
        let q = g.matmul(h_p, wq)?;
        let k = g.matmul(h_next, wk)?;
        let v = g.matmul(h_next, wv)?;
        let att = g.attention(q, k, v, HEADS, p, 1, rows)?;
        let h_sp = g.matmul(att, wo)?;

        let e_sp = self.mlp_sp.forward(g, store, z_mu)?;
        let fused = g.concat_cols(&[h_sp, e_sp])?;
        let h_tilde = g.row_scale(fused, rows)?;

        let logits = self.head_pi.forward(g, store, h_tilde)?;
        let logits = g.reshape(logits, b, p)?;
        let log_pi = g.masked_log_softmax(logits, &batch.phase_mask)?;

        let v_rows = self.head_v.forward(g, store, h_tilde)?;
        let v_rows = g.row_scale(v_rows, rows)?;
        let value = g.group_sum_rows(v_rows, p)?;

        // mean over real phase rows, then the prediction head
        let inv: Vec<f64> = (0..b * p)
            .map(|r| {
                let n: f64 = batch.phase_mask.row(r / p).iter().sum();
                rows[r] / n.max(1.0)
            })
            .collect();
        let pooled = g.row_scale(h_tilde, &inv)?;
        let pooled = g.group_sum_rows(pooled, p)?;
        let s_hat = self.head_pred.forward(g, store, pooled)?;

        debug_assert_eq!(g.shape(h_sp), (b * p, d));
        Ok(PolicyVars {
            log_pi,
            value,
            s_hat,
            h_next,
            h_tilde,
            h_sp,
        })
    }

    /// Gradient-free forward over a batch; returns one output per observation.
    pub fn forward_batch(
        &self,
        store: &ParamStore,
        obs: &[&ObservationBundle],
        h_prev: &Mat,
        z_mu: &Mat,
    ) -> Result<Vec<PolicyOutput>, NumError> {
        let batch = ObsBatch::new(obs, self.dims.obs);
        let mut g = Graph::new();
        let h = g.input(h_prev.clone());
        let z = g.input(z_mu.clone());
        let vars = self.forward_graph(&mut g, store, &batch, h, z)?;
        let (p, d) = (self.dims.obs.p_max, self.dims.d);
        let mut out = Vec::with_capacity(obs.len());
        for i in 0..obs.len() {
            let pi = g
                .value(vars.log_pi)
                .row(i)
                .iter()
                .zip(batch.phase_mask.row(i))
                .map(|(&lp, &m)| if m > 0.0 { lp.exp() } else { 0.0 })
                .collect();
            let slice = |v: Var, width: usize| {
                Mat::from_vec(p, width, g.value(v).data[i * p * width..(i + 1) * p * width].to_vec())
            };
            out.push(PolicyOutput {
                pi,
                value: g.value(vars.value).data[i],
                s_hat: g.value(vars.s_hat).row(i).to_vec(),
                h_gru: g.value(vars.h_next).row(i).to_vec(),
                h_sp: slice(vars.h_sp, d),
                h_tilde: slice(vars.h_tilde, 2 * d),
            });
        }
        Ok(out)
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        obs: &ObservationBundle,
        h_prev: &[f64],
        z_mu: &Mat,
    ) -> Result<PolicyOutput, NumError> {
        let h = Mat::row_vec(h_prev.to_vec());
        Ok(self.forward_batch(store, &[obs], &h, z_mu)?.remove(0))
    }

    pub fn fusion_params(&self) -> [ParamId; 4] {
        [self.mlp_sp.l1.w, self.mlp_sp.l1.b, self.mlp_sp.l2.w, self.mlp_sp.l2.b]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Sample,
    Argmax,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionChoice {
    pub action: usize,
    pub log_prob: f64,
    pub entropy: f64,
}

/// Picks a phase from `pi`. Argmax breaks ties toward the lowest index;
/// sampling draws one uniform number from `rng`.
pub fn select_action<R: Rng>(pi: &[f64], mode: ActionMode, rng: &mut R) -> ActionChoice {
    let entropy = -pi.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
    let action = match mode {
        ActionMode::Argmax => {
            let mut best = 0;
            for (i, &p) in pi.iter().enumerate() {
                if p > pi[best] {
                    best = i;
                }
            }
            best
        }
        ActionMode::Sample => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &p) in pi.iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                acc += p;
                pick = Some(i);
                if u < acc {
                    break;
                }
            }
            pick.expect("distribution with positive mass")
        }
    };
    ActionChoice {
        action,
        log_prob: pi[action].ln(),
        entropy,
    }
}

/// CSV dump of fused phase features for offline cluster analysis:
/// `episode,step,intersection,phase,f0..f{2d-1}`.
pub struct PhaseFeatureWriter<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> PhaseFeatureWriter<W> {
    pub fn new(inner: W, width: usize) -> csv::Result<Self> {
        let mut writer = csv::Writer::from_writer(inner);
        let mut header: Vec<String> = ["episode", "step", "intersection", "phase"].map(String::from).to_vec();
        header.extend((0..width).map(|k| format!("f{k}")));
        writer.write_record(&header)?;
        Ok(Self { writer })
    }

    /// Writes the real phase rows of one output.
    pub fn record(&mut self, episode: usize, step: usize, intersection: &str, n_phases: usize, out: &PolicyOutput) -> csv::Result<()> {
        for p in 0..n_phases {
            let mut rec = vec![episode.to_string(), step.to_string(), intersection.to_string(), p.to_string()];
            rec.extend(out.h_tilde.row(p).iter().map(|x| format!("{x:.6}")));
            self.writer.write_record(&rec)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        self.writer.flush()?;
        self.writer.into_inner().map_err(|e| e.into_error())
    }
}
