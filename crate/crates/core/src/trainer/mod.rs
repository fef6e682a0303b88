//! Synchronized multi-agent rollouts and joint PPO + teacher-student updates.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Env, EPISODE_STEPS};
use crate::net::{DemandSpec, NetworkSpec};
use crate::numerics::{clip_grad_norm, Adam, AdamConfig, Checkpoint, Graph, Mat, NumError, ParamStore, Var};
use crate::obs::{ObsDims, ObservationBundle, MOVEMENT_FEATURES};
use crate::policy::{select_action, ActionMode, ObsBatch, PolicyDims, PolicyNet, PolicyOutput};
use crate::sim::SimError;
use crate::ts::{
    render_prompt, EmbeddingCache, EmbeddingProvider, EmbeddingVec, TeacherStudent, TsDims, TsError, TsLossVars,
    TsWeights, Variant,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite {term} loss{}", dump.as_ref().map(|p| format!(", batch dumped to {}", p.display())).unwrap_or_default())]
    NonFiniteLoss { term: String, dump: Option<PathBuf> },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Ts(#[from] TsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub lr: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub grad_clip: f64,
    pub episodes: usize,
    /// decision steps per episode
    pub steps: usize,
    pub seed: u64,
    pub d: usize,
    pub latent: usize,
    /// VAE hidden width
    pub vae_hidden: usize,
    pub p_max: usize,
    pub m_max: usize,
    pub variant: Variant,
    /// multiplies raw rewards before advantage estimation
    pub reward_scale: f64,
    pub ts_weights: TsWeights,
    /// in-memory embedding cache entries
    pub cache_capacity: usize,
    /// where a batch is written when a loss turns non-finite
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.2,
            c1: 0.5,
            c2: 0.01,
            c3: 0.1,
            lr: 3e-4,
            epochs: 4,
            minibatch: 512,
            grad_clip: 0.5,
            episodes: 300,
            steps: EPISODE_STEPS,
            seed: 0,
            d: 64,
            latent: 32,
            vae_hidden: 128,
            p_max: 8,
            m_max: 36,
            variant: Variant::Full,
            reward_scale: 0.01,
            ts_weights: TsWeights::default(),
            cache_capacity: 50_000,
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad("lambda must be in (0, 1]");
        }
        if self.clip_eps <= 0.0 {
            return bad("clip_eps must be positive");
        }
        if self.epochs == 0 || self.minibatch == 0 || self.steps == 0 {
            return bad("epochs, minibatch and steps must be positive");
        }
        if self.d == 0 || self.latent == 0 || self.vae_hidden == 0 || self.p_max == 0 || self.m_max == 0 {
            return bad("widths must be positive");
        }
        if !(self.lr > 0.0 && self.grad_clip > 0.0 && self.reward_scale.is_finite()) {
            return bad("lr and grad_clip must be positive");
        }
        Ok(())
    }

    pub fn obs_dims(&self) -> ObsDims {
        ObsDims { m_max: self.m_max, p_max: self.p_max }
    }

    pub fn policy_dims(&self) -> PolicyDims {
        PolicyDims { obs: self.obs_dims(), d: self.d, latent: self.latent }
    }
}

/// Policy and teacher-student layout; parameters live in a separate store.
#[derive(Debug, Clone)]
pub struct LatsNet {
    pub policy: PolicyNet,
    pub ts: TeacherStudent,
}

/// Every phase row of every observation as `x_p`, `B·p_max × |x_p|`.
pub fn phase_inputs(obs: &[&ObservationBundle], dims: ObsDims) -> Mat {
    let w = dims.phase_input_len();
    let mut m = Mat::zeros(obs.len() * dims.p_max, w);
    for (i, o) in obs.iter().enumerate() {
        for p in 0..dims.p_max {
            m.row_mut(i * dims.p_max + p).copy_from_slice(&o.phase_input(p));
        }
    }
    m
}

/// Teacher embeddings as rows aligned with [`phase_inputs`]; padded phases
/// stay zero.
pub fn embedding_rows(rows: &[Vec<Option<EmbeddingVec>>], dim: usize) -> Mat {
    let p = rows.first().map_or(0, Vec::len);
    let mut m = Mat::zeros(rows.len() * p, dim);
    for (i, agent) in rows.iter().enumerate() {
        for (k, e) in agent.iter().enumerate() {
            if let Some(e) = e {
                m.row_mut(i * p + k).copy_from_slice(e);
            }
        }
    }
    m
}

/// Per agent: embeddings for every phase row (`None` on padding) and the
/// prompt hashes of the real phases.
pub type TeacherRows = Vec<(Vec<Option<EmbeddingVec>>, Vec<[u8; 32]>)>;

/// Renders prompts for every real phase and fetches their embeddings.
pub fn teacher_embeddings(
    net: &NetworkSpec,
    obs: &[&ObservationBundle],
    cache: &mut EmbeddingCache,
    provider: &dyn EmbeddingProvider,
) -> Result<TeacherRows, TsError> {
    let mut docs = Vec::new();
    for o in obs {
        for p in 0..o.n_phases {
            docs.push(render_prompt(&o.prompt_source(p), net));
        }
    }
    let mut vecs = cache.get_many(&docs, provider)?.into_iter();
    let mut hashes = docs.iter().map(|d| d.text_hash);
    Ok(obs
        .iter()
        .map(|o| {
            let e = (0..o.dims.p_max)
                .map(|p| if p < o.n_phases { vecs.next() } else { None })
                .collect();
            (e, hashes.by_ref().take(o.n_phases).collect())
        })
        .collect())
}

fn embedding_only(rows: &TeacherRows) -> Vec<Vec<Option<EmbeddingVec>>> {
    rows.iter().map(|(e, _)| e.clone()).collect()
}

impl LatsNet {
    pub fn new(store: &mut ParamStore, cfg: &TrainConfig, e_dim: usize) -> Self {
        let dims = cfg.policy_dims();
        let policy = PolicyNet::new(store, dims);
        let ts_dims = TsDims {
            x: dims.obs.phase_input_len(),
            e: e_dim,
            hidden: cfg.vae_hidden,
            latent: cfg.latent,
        };
        let ts = TeacherStudent::new(store, cfg.variant, ts_dims, cfg.ts_weights);
        Self { policy, ts }
    }

    pub fn obs_dims(&self) -> ObsDims {
        self.policy.dims.obs
    }

    /// Latents handed to the policy for a batch of observations.
    pub fn latents(&self, store: &ParamStore, obs: &[&ObservationBundle], e: Option<Mat>) -> Result<Mat, TsError> {
        let dims = self.obs_dims();
        if self.ts.variant == Variant::NoTs {
            return Ok(Mat::zeros(obs.len() * dims.p_max, self.ts.dims.latent));
        }
        self.ts.policy_latents(store, phase_inputs(obs, dims), e)
    }

    /// One synchronized decision: latents, then the policy forward.
    pub fn decide(
        &self,
        store: &ParamStore,
        obs: &[&ObservationBundle],
        h: &Mat,
        e: Option<Mat>,
    ) -> Result<Vec<PolicyOutput>, TrainError> {
        let z = self.latents(store, obs, e)?;
        Ok(self.policy.forward_batch(store, obs, h, &z)?)
    }
}

/// Network, parameters and the training config that shaped them.
pub struct LatsModel {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub net: LatsNet,
    pub e_dim: usize,
    pub provider_tag: Option<String>,
}

impl LatsModel {
    pub fn new(config: TrainConfig, e_dim: usize) -> Self {
        let mut store = ParamStore::new(config.seed);
        let net = LatsNet::new(&mut store, &config, e_dim);
        Self { config, store, net, e_dim, provider_tag: None }
    }

    pub fn to_checkpoint(&self, episodes_done: usize) -> Checkpoint {
        self.store.to_checkpoint(serde_json::json!({
            "config": self.config,
            "variant": self.config.variant.as_str(),
            "e_dim": self.e_dim,
            "obs_dims": { "m_max": self.config.m_max, "p_max": self.config.p_max },
            "provider": self.provider_tag,
            "episodes_done": episodes_done,
        }))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TrainError> {
        let meta = &ck.metadata;
        let config: TrainConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| TrainError::Config(format!("checkpoint config: {e}")))?;
        let e_dim = meta["e_dim"]
            .as_u64()
            .ok_or_else(|| TrainError::Config("checkpoint lacks e_dim".into()))? as usize;
        let mut model = Self::new(config, e_dim);
        model.store.load_from(ck)?;
        model.provider_tag = meta["provider"].as_str().map(str::to_string);
        Ok(model)
    }
}

/// One agent at one decision step.
#[derive(Debug, Clone)]
pub struct AgentStep {
    /// the observation acted on; its prompt history is dropped once embedded
    pub obs: ObservationBundle,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub h_in: Vec<f64>,
    /// scaled reward read after the interval
    pub reward: f64,
    /// movement-masked `S_t` of the next observation
    pub next_state: Vec<f64>,
    pub done: bool,
    pub prompt_hashes: Vec<[u8; 32]>,
    /// per phase, `None` for padding or when no teacher is used
    pub embeddings: Vec<Option<EmbeddingVec>>,
}

/// Steps stored time-major: `steps[t * n_agents + i]`.
#[derive(Debug, Clone)]
pub struct TrajectoryBatch {
    pub n_agents: usize,
    pub horizon: usize,
    pub steps: Vec<AgentStep>,
    /// bootstrap values of the observation after the last step
    pub last_values: Vec<f64>,
    /// per agent, unscaled
    pub episode_rewards: Vec<f64>,
}

impl TrajectoryBatch {
    pub fn at(&self, t: usize, agent: usize) -> &AgentStep {
        &self.steps[t * self.n_agents + agent]
    }
}

fn masked_state(o: &ObservationBundle) -> Vec<f64> {
    o.s_t
        .iter()
        .enumerate()
        .map(|(k, x)| x * o.movement_mask[k / MOVEMENT_FEATURES])
        .collect()
}

/// Runs one episode of `horizon` synchronized decisions with sampled actions.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollout(
    env: &mut Env,
    seed: u64,
    net: &LatsNet,
    store: &ParamStore,
    cache: &mut EmbeddingCache,
    provider: Option<&dyn EmbeddingProvider>,
    reward_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectoryBatch, TrainError> {
    let n = env.n_agents();
    let d = net.policy.dims.d;
    let teacher = net.ts.needs_teacher_inputs();
    let provider = match (teacher, provider) {
        (true, None) => return Err(TsError::MissingProvider(net.ts.variant.as_str()).into()),
        (true, Some(p)) => Some(p),
        (false, _) => None,
    };
    let e_dim = net.ts.dims.e;
    let mut obs = env.reset(seed)?;
    let mut h = Mat::zeros(n, d);
    let mut steps = Vec::with_capacity(env.horizon * n);
    let mut episode_rewards = vec![0.0; n];
    let network = env.net().clone();

    let fetch = |obs: &[ObservationBundle], cache: &mut EmbeddingCache| -> Result<TeacherRows, TsError> {
        let refs: Vec<&ObservationBundle> = obs.iter().collect();
        match provider {
            Some(p) => teacher_embeddings(&network, &refs, cache, p),
            None => Ok(vec![(Vec::new(), Vec::new()); obs.len()]),
        }
    };

    let mut emb = fetch(&obs, cache)?;
    for _ in 0..env.horizon {
        let refs: Vec<&ObservationBundle> = obs.iter().collect();
        let e = (net.ts.variant == Variant::NoS).then(|| embedding_rows(&embedding_only(&emb), e_dim));
        let outs = net.decide(store, &refs, &h, e)?;
        let choices: Vec<_> = outs.iter().map(|o| select_action(&o.pi, ActionMode::Sample, rng)).collect();
        let actions: Vec<usize> = choices.iter().map(|c| c.action).collect();
        let step = env.step(&obs, &actions)?;
        let next_emb = if step.done && net.ts.variant != Variant::NoS {
            vec![(Vec::new(), Vec::new()); n]
        } else {
            fetch(&step.obs, cache)?
        };
        let prev = std::mem::replace(&mut obs, step.obs);
        let prev_emb = std::mem::replace(&mut emb, next_emb);
        for (i, (mut o, (e, prompt_hashes))) in prev.into_iter().zip(prev_emb).enumerate() {
            o.history = Vec::new();
            episode_rewards[i] += step.rewards[i];
            steps.push(AgentStep {
                obs: o,
                action: actions[i],
                log_prob: choices[i].log_prob,
                value: outs[i].value,
                h_in: h.row(i).to_vec(),
                reward: step.rewards[i] * reward_scale,
                next_state: masked_state(&obs[i]),
                done: step.done,
                prompt_hashes,
                embeddings: e,
            });
        }
        h = Mat::from_vec(n, d, outs.iter().flat_map(|o| o.h_gru.iter().copied()).collect());
        if step.done {
            break;
        }
    }
    let refs: Vec<&ObservationBundle> = obs.iter().collect();
    let e = (net.ts.variant == Variant::NoS).then(|| embedding_rows(&embedding_only(&emb), e_dim));
    let last = net.decide(store, &refs, &h, e)?;
    Ok(TrajectoryBatch {
        n_agents: n,
        horizon: steps.len() / n.max(1),
        steps,
        last_values: last.iter().map(|o| o.value).collect(),
        episode_rewards,
    })
}

/// GAE over one agent's stream: `δ_t = r_t + γV_{t+1} − V_t`,
/// `A_t = δ_t + γλA_{t+1}`, returns `A + V`.
pub fn compute_gae(rewards: &[f64], values: &[f64], value_next: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len());
    let t_len = rewards.len();
    let mut adv = vec![0.0; t_len];
    let mut next_adv = 0.0;
    let mut next_v = value_next;
    for t in (0..t_len).rev() {
        let delta = rewards[t] + gamma * next_v - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        adv[t] = next_adv;
        next_v = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Zero mean, unit standard deviation (guarded at 1e-8).
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    for x in xs {
        *x = (*x - mean) / sd;
    }
}

/// Advantages (normalized over the whole batch) and returns, indexed like
/// `batch.steps`.
pub fn batch_advantages(batch: &TrajectoryBatch, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let (n, t_len) = (batch.n_agents, batch.horizon);
    let mut adv = vec![0.0; n * t_len];
    let mut ret = vec![0.0; n * t_len];
    for i in 0..n {
        let r: Vec<f64> = (0..t_len).map(|t| batch.at(t, i).reward).collect();
        let v: Vec<f64> = (0..t_len).map(|t| batch.at(t, i).value).collect();
        let (a, rt) = compute_gae(&r, &v, batch.last_values[i], gamma, lambda);
        for t in 0..t_len {
            adv[t * n + i] = a[t];
            ret[t * n + i] = rt[t];
        }
    }
    normalize(&mut adv);
    (adv, ret)
}

/// Per-sample targets for the PPO terms.
#[derive(Debug, Clone)]
pub struct PpoTargets {
    pub actions: Vec<usize>,
    pub log_prob_old: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// `B × m_max·5`
    pub next_states: Mat,
    /// same shape; weight of each prediction entry (real rows only, summing to one)
    pub pred_weights: Mat,
}

#[derive(Debug, Clone, Copy)]
pub struct PpoVars {
    pub l_pi: Var,
    pub l_v: Var,
    /// mean policy entropy, maximized
    pub l_ent: Var,
    pub l_pred: Var,
}

/// Clipped surrogate, value, entropy and prediction terms over a batch.
pub fn ppo_terms(
    g: &mut Graph,
    log_pi: Var,
    value: Var,
    s_hat: Var,
    tg: &PpoTargets,
    clip_eps: f64,
) -> Result<PpoVars, NumError> {
    let col = |v: &[f64]| Mat::from_vec(v.len(), 1, v.to_vec());
    let lp = g.gather(log_pi, &tg.actions)?;
    let old = g.input(col(&tg.log_prob_old));
    let diff = g.sub(lp, old)?;
    let ratio = g.exp(diff);
    let a = col(&tg.advantages);
    let s1 = g.mul_const(ratio, &a)?;
    let clipped = g.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
    let s2 = g.mul_const(clipped, &a)?;
    let m = g.minimum(s1, s2)?;
    let m = g.mean(m);
    let l_pi = g.scale(m, -1.0);

    let ret = g.input(col(&tg.returns));
    let dv = g.sub(value, ret)?;
    let dv = g.square(dv);
    let l_v = g.mean(dv);

    // masked entries hold log π = 0, so they add nothing
    let p = g.exp(log_pi);
    let plp = g.mul(p, log_pi)?;
    let per_row = g.sum_cols(plp);
    let mean = g.mean(per_row);
    let l_ent = g.scale(mean, -1.0);

    let next = g.input(tg.next_states.clone());
    let ds = g.sub(s_hat, next)?;
    let ds = g.square(ds);
    let ds = g.mul_const(ds, &tg.pred_weights)?;
    let l_pred = g.sum(ds);
    Ok(PpoVars { l_pi, l_v, l_ent, l_pred })
}

/// Everything a loss evaluation needs for one minibatch.
#[derive(Debug, Clone)]
pub struct Minibatch<'a> {
    pub obs: Vec<&'a ObservationBundle>,
    pub h_in: Mat,
    pub targets: PpoTargets,
    pub x_rows: Mat,
    pub e_rows: Option<Mat>,
    pub row_weights: Vec<f64>,
    pub noise_s: Mat,
    pub noise_c: Mat,
}

impl<'a> Minibatch<'a> {
    pub fn build(
        batch: &'a TrajectoryBatch,
        idx: &[usize],
        adv: &[f64],
        ret: &[f64],
        net: &LatsNet,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dims = net.obs_dims();
        let b = idx.len();
        let steps: Vec<&AgentStep> = idx.iter().map(|&k| &batch.steps[k]).collect();
        let obs: Vec<&ObservationBundle> = steps.iter().map(|s| &s.obs).collect();
        let d = net.policy.dims.d;
        let h_in = Mat::from_vec(b, d, steps.iter().flat_map(|s| s.h_in.iter().copied()).collect());
        let state_len = dims.state_len();
        let mut next_states = Mat::zeros(b, state_len);
        let mut pred_weights = Mat::zeros(b, state_len);
        let real: f64 = obs.iter().map(|o| (o.n_movements * MOVEMENT_FEATURES) as f64).sum();
        for (r, s) in steps.iter().enumerate() {
            next_states.row_mut(r).copy_from_slice(&s.next_state);
            for (k, w) in pred_weights.row_mut(r).iter_mut().enumerate() {
                *w = s.obs.movement_mask[k / MOVEMENT_FEATURES] / real.max(1.0);
            }
        }
        let targets = PpoTargets {
            actions: steps.iter().map(|s| s.action).collect(),
            log_prob_old: steps.iter().map(|s| s.log_prob).collect(),
            advantages: idx.iter().map(|&k| adv[k]).collect(),
            returns: idx.iter().map(|&k| ret[k]).collect(),
            next_states,
            pred_weights,
        };
        let p = dims.p_max;
        let mut row_weights = vec![0.0; b * p];
        for (r, o) in obs.iter().enumerate() {
            for q in 0..o.n_phases {
                row_weights[r * p + q] = 1.0 / (b * o.n_phases) as f64;
            }
        }
        let (x_rows, e_rows) = if net.ts.variant == Variant::NoTs {
            (Mat::zeros(b * p, dims.phase_input_len()), None)
        } else {
            let e = net.ts.needs_teacher_inputs().then(|| {
                let rows: Vec<Vec<Option<EmbeddingVec>>> = steps.iter().map(|s| s.embeddings.clone()).collect();
                embedding_rows(&rows, net.ts.dims.e)
            });
            (phase_inputs(&obs, dims), e)
        };
        let latent = net.ts.dims.latent;
        let mut normal = |r: usize, c: usize| Mat::from_vec(r, c, (0..r * c).map(|_| rng.sample(StandardNormal)).collect());
        let noise_s = normal(b * p, latent);
        let noise_c = normal(b * p, latent);
        Self { obs, h_in, targets, x_rows, e_rows, row_weights, noise_s, noise_c }
    }
}

/// Graph handles of the full objective.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    /// `B × p_max` current log-probabilities
    pub log_pi: Var,
    pub ppo: PpoVars,
    pub ts: Option<TsLossVars>,
    pub total: Var,
}

/// `L = L_pi + c1·L_v − c2·H + c3·L_pred + L_ts`, averaged over the
/// agent-steps of the minibatch.
pub fn build_loss(
    g: &mut Graph,
    net: &LatsNet,
    store: &ParamStore,
    mb: &Minibatch,
    cfg: &TrainConfig,
) -> Result<LossVars, NumError> {
    let batch = ObsBatch::new(&mb.obs, net.obs_dims());
    let h = g.input(mb.h_in.clone());
    let (z, ts) = if net.ts.variant == Variant::NoTs {
        (g.input(Mat::zeros(mb.x_rows.rows, net.ts.dims.latent)), None)
    } else {
        let x = g.input(mb.x_rows.clone());
        let e = mb.e_rows.as_ref().map(|e| g.input(e.clone()));
        let t = net.ts.loss_graph(g, store, x, e, &mb.row_weights, &mb.noise_s, &mb.noise_c)?;
        (t.z_policy, Some(t))
    };
    let pv = net.policy.forward_graph(g, store, &batch, h, z)?;
    let ppo = ppo_terms(g, pv.log_pi, pv.value, pv.s_hat, &mb.targets, cfg.clip_eps)?;
    let v = g.scale(ppo.l_v, cfg.c1);
    let e = g.scale(ppo.l_ent, -cfg.c2);
    let p = g.scale(ppo.l_pred, cfg.c3);
    let mut total = g.add(ppo.l_pi, v)?;
    total = g.add(total, e)?;
    total = g.add(total, p)?;
    if let Some(t) = ts.and_then(|t| t.total) {
        total = g.add(total, t)?;
    }
    Ok(LossVars { log_pi: pv.log_pi, ppo, ts, total })
}

/// Mean loss terms over the minibatches of one update.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct UpdateReport {
    pub episode: usize,
    pub l_pi: f64,
    pub l_v: f64,
    pub entropy: f64,
    pub l_pred: f64,
    pub l_ts: f64,
    pub recon_s: f64,
    pub recon_c: f64,
    pub kl_s: f64,
    pub kl_c: f64,
    pub align: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub mean_episode_reward: f64,
    pub minibatches: usize,
}

fn dump_batch(dir: &std::path::Path, mb: &Minibatch, term: &str) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("nonfinite_{term}.json"));
    let doc = serde_json::json!({
        "term": term,
        "actions": mb.targets.actions,
        "log_prob_old": mb.targets.log_prob_old,
        "advantages": mb.targets.advantages,
        "returns": mb.targets.returns,
        "h_in": mb.h_in.data,
        "states": mb.obs.iter().map(|o| &o.s_t).collect::<Vec<_>>(),
        "intersections": mb.obs.iter().map(|o| o.intersection).collect::<Vec<_>>(),
    });
    std::fs::write(&path, serde_json::to_vec_pretty(&doc)?)?;
    Ok(path)
}

/// `epochs` passes of shuffled minibatches over `batch`, one Adam step each.
pub fn total_update(
    model: &mut LatsModel,
    adam: &mut Adam,
    batch: &TrajectoryBatch,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateReport, TrainError> {
    let cfg = model.config.clone();
    let (adv, ret) = batch_advantages(batch, cfg.gamma, cfg.lambda);
    let mut order: Vec<usize> = (0..batch.steps.len()).collect();
    let mut rep = UpdateReport::default();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.minibatch) {
            let mb = Minibatch::build(batch, idx, &adv, &ret, &model.net, rng);
            let mut g = Graph::new();
            let lv = build_loss(&mut g, &model.net, &model.store, &mb, &cfg)?;
            let val = |v: Var| g.value(v).item();
            let opt = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
            let terms = [
                ("policy", val(lv.ppo.l_pi)),
                ("value", val(lv.ppo.l_v)),
                ("entropy", val(lv.ppo.l_ent)),
                ("prediction", val(lv.ppo.l_pred)),
                ("teacher_student", opt(lv.ts.and_then(|t| t.total))),
                ("total", val(lv.total)),
            ];
            if let Some((term, _)) = terms.iter().find(|(_, x)| !x.is_finite()) {
                let dump = match &cfg.dump_dir {
                    Some(dir) => Some(dump_batch(dir, &mb, term)?),
                    None => None,
                };
                return Err(TrainError::NonFiniteLoss { term: term.to_string(), dump });
            }
            rep.l_pi += terms[0].1;
            rep.l_v += terms[1].1;
            rep.entropy += terms[2].1;
            rep.l_pred += terms[3].1;
            rep.l_ts += terms[4].1;
            rep.total += terms[5].1;
            if let Some(t) = lv.ts {
                rep.recon_s += opt(t.recon_s);
                rep.recon_c += opt(t.recon_c);
                rep.kl_s += opt(t.kl_s);
                rep.kl_c += opt(t.kl_c);
                rep.align += opt(t.align);
            }
            g.backward(lv.total)?;
            let mut grads = g.param_grads();
            rep.grad_norm += clip_grad_norm(&mut grads, cfg.grad_clip);
            adam.step(&mut model.store, &grads);
            rep.minibatches += 1;
        }
    }
    let k = rep.minibatches.max(1) as f64;
    for x in [
        &mut rep.l_pi,
        &mut rep.l_v,
        &mut rep.entropy,
        &mut rep.l_pred,
        &mut rep.l_ts,
        &mut rep.recon_s,
        &mut rep.recon_c,
        &mut rep.kl_s,
        &mut rep.kl_c,
        &mut rep.align,
        &mut rep.total,
        &mut rep.grad_norm,
    ] {
        *x /= k;
    }
    rep.mean_episode_reward = batch.episode_rewards.iter().sum::<f64>() / batch.n_agents.max(1) as f64;
    Ok(rep)
}

/// Appends one CSV row per update.
pub struct TrainLog<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> TrainLog<W> {
    pub fn new(inner: W) -> Self {
        Self { writer: csv::Writer::from_writer(inner) }
    }

    pub fn record(&mut self, r: &UpdateReport) -> Result<(), TrainError> {
        self.writer.serialize(r)?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> std::io::Result<W> {
        self.writer.into_inner().map_err(|e| e.into_error())
    }
}

/// Seeds derived from the run seed so that every episode is reproducible.
pub fn episode_seed(run_seed: u64, episode: usize) -> u64 {
    run_seed.wrapping_mul(1_000_003).wrapping_add(episode as u64)
}

/// A training run: model, optimizer, environment and embedding cache.
pub struct Trainer {
    pub model: LatsModel,
    pub adam: Adam,
    pub env: Env,
    pub cache: EmbeddingCache,
    provider: Option<Arc<dyn EmbeddingProvider>>,
    rng: ChaCha8Rng,
    pub episodes_done: usize,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        net: Arc<NetworkSpec>,
        demand: DemandSpec,
        provider: Option<Arc<dyn EmbeddingProvider>>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let needs = config.variant.has_teacher();
        if needs && provider.is_none() {
            return Err(TsError::MissingProvider(config.variant.as_str()).into());
        }
        let dims = config.obs_dims();
        if !dims.fits(&net) {
            return Err(TrainError::Config(format!(
                "network needs m_max ≥ {} and p_max ≥ {}",
                net.max_movements(),
                net.max_phases()
            )));
        }
        let e_dim = provider.as_ref().map_or(1, |p| p.dim());
        let mut model = LatsModel::new(config.clone(), e_dim);
        model.provider_tag = provider.as_ref().filter(|_| needs).map(|p| p.tag());
        let adam = Adam::new(&model.store, AdamConfig { lr: config.lr, ..AdamConfig::default() });
        let env = Env::new(net, demand, dims, config.steps)?;
        Ok(Self {
            adam,
            env,
            cache: EmbeddingCache::in_memory(config.cache_capacity),
            provider: provider.filter(|_| needs),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed),
            model,
            episodes_done: 0,
        })
    }

    pub fn with_cache(mut self, cache: EmbeddingCache) -> Self {
        self.cache = cache;
        self
    }

    /// Collects one episode and updates on it.
    pub fn run_episode(&mut self) -> Result<UpdateReport, TrainError> {
        let ep = self.episodes_done;
        let seed = episode_seed(self.model.config.seed, ep);
        let batch = collect_rollout(
            &mut self.env,
            seed,
            &self.model.net,
            &self.model.store,
            &mut self.cache,
            self.provider.as_deref(),
            self.model.config.reward_scale,
            &mut self.rng,
        )?;
        let mut rep = total_update(&mut self.model, &mut self.adam, &batch, &mut self.rng)?;
        rep.episode = ep;
        self.episodes_done += 1;
        Ok(rep)
    }

    /// Runs the configured number of episodes, logging each update.
    pub fn train<W: Write>(
        &mut self,
        log: &mut TrainLog<W>,
        mut on_update: impl FnMut(&UpdateReport, &Self),
    ) -> Result<(), TrainError> {
        while self.episodes_done < self.model.config.episodes {
            let rep = self.run_episode()?;
            log.record(&rep)?;
            on_update(&rep, self);
        }
        Ok(())
    }
}
