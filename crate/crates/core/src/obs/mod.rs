//! Observation tensors, masks and rewards built from detector snapshots.
//!
//! Row layout of `S_t`: one row per movement in canonical order, columns
//! `[P_m, Q_in, Q_out, N_in, N_out]`, padded with zero rows to `m_max`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::net::{NetworkSpec, TypeTag};
use crate::sim::{DetectorReading, DetectorZone, SimError, SimState};

pub const MOVEMENT_FEATURES: usize = 5;
pub const TOPOLOGY_DIM: usize = TypeTag::COUNT + 7;
pub const HISTORY_LEN: usize = 4;

pub const LENGTH_SCALE_M: f64 = 100.0;
pub const SPEED_SCALE_MPS: f64 = 20.0;
pub const MOVEMENT_COUNT_SCALE: f64 = 0.1;

/// Padding sizes shared by every intersection of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsDims {
    pub m_max: usize,
    pub p_max: usize,
}

impl ObsDims {
    pub fn state_len(&self) -> usize {
        self.m_max * MOVEMENT_FEATURES
    }

    /// Width of the per-phase teacher-student input `[S_t, G_p, I]`.
    pub fn phase_input_len(&self) -> usize {
        self.state_len() + self.m_max + TOPOLOGY_DIM
    }

    pub fn fits(&self, net: &NetworkSpec) -> bool {
        net.max_movements() <= self.m_max && net.max_phases() <= self.p_max
    }
}

impl Default for ObsDims {
    fn default() -> Self {
        Self { m_max: 36, p_max: 8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBundle {
    pub intersection: usize,
    pub dims: ObsDims,
    /// `m_max × 5`, row-major.
    pub s_t: Vec<f64>,
    /// `p_max × m_max`, row-major.
    pub g: Vec<f64>,
    pub topology: [f64; TOPOLOGY_DIM],
    pub phase_mask: Vec<f64>,
    pub movement_mask: Vec<f64>,
    pub reward: f64,
    /// `HISTORY_LEN` snapshots of `S_t`, oldest first; the last one is the
    /// current state. Missing early steps are zero.
    pub history: Vec<Vec<f64>>,
    pub n_movements: usize,
    pub n_phases: usize,
}

impl ObservationBundle {
    pub fn movement_row(&self, m: usize) -> &[f64] {
        &self.s_t[m * MOVEMENT_FEATURES..(m + 1) * MOVEMENT_FEATURES]
    }

    pub fn g_row(&self, p: usize) -> &[f64] {
        &self.g[p * self.dims.m_max..(p + 1) * self.dims.m_max]
    }

    /// `x_p = [S_t (flat), G_p, I]`.
    pub fn phase_input(&self, p: usize) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dims.phase_input_len());
        x.extend_from_slice(&self.s_t);
        x.extend_from_slice(self.g_row(p));
        x.extend_from_slice(&self.topology);
        x
    }

    pub fn prompt_source(&self, p: usize) -> PhasePromptSource {
        PhasePromptSource {
            intersection: self.intersection,
            phase: p,
            x_p: self.phase_input(p),
            history: self.history.clone(),
        }
    }
}

/// Rolling window of the most recent `S_t` snapshots for one intersection.
#[derive(Debug, Clone, Default)]
pub struct HistoryBuffer {
    snapshots: VecDeque<Vec<f64>>,
}

impl HistoryBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn push(&mut self, s_t: Vec<f64>) {
        if self.snapshots.len() == HISTORY_LEN - 1 {
            self.snapshots.pop_front();
        }
        self.snapshots.push_back(s_t);
    }

    pub fn clear(&mut self) {
        self.snapshots.clear();
    }

    /// Prior snapshots plus `current`, zero-padded at the front to `HISTORY_LEN`.
    fn window(&self, current: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(HISTORY_LEN);
        for _ in 0..HISTORY_LEN - 1 - self.snapshots.len() {
            out.push(vec![0.0; current.len()]);
        }
        out.extend(self.snapshots.iter().cloned());
        out.push(current.to_vec());
        out
    }
}

/// Per-phase record handed to the prompt renderer and the student encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePromptSource {
    pub intersection: usize,
    pub phase: usize,
    pub x_p: Vec<f64>,
    pub history: Vec<Vec<f64>>,
}

/// Static topology features: type one-hot, then incoming length, speed,
/// lanes and movement count, then outgoing length, speed and lanes.
pub fn topology_vector(net: &NetworkSpec, intersection: usize) -> Result<[f64; TOPOLOGY_DIM], SimError> {
    let inter = net
        .intersections
        .get(intersection)
        .ok_or(SimError::UnknownIntersection(intersection))?;
    let mean = |roads: &[usize], f: &dyn Fn(usize) -> f64| {
        if roads.is_empty() {
            0.0
        } else {
            roads.iter().map(|&r| f(r)).sum::<f64>() / roads.len() as f64
        }
    };
    let len = |r: usize| net.roads[r].length_m / LENGTH_SCALE_M;
    let speed = |r: usize| net.roads[r].max_speed_mps / SPEED_SCALE_MPS;
    let lanes = |r: usize| net.roads[r].lanes.len() as f64;
    let mut v = [0.0; TOPOLOGY_DIM];
    v[inter.type_tag.index()] = 1.0;
    let k = TypeTag::COUNT;
    v[k] = mean(&inter.incoming_roads, &len);
    v[k + 1] = mean(&inter.incoming_roads, &speed);
    v[k + 2] = mean(&inter.incoming_roads, &lanes);
    v[k + 3] = inter.movements.len() as f64 * MOVEMENT_COUNT_SCALE;
    v[k + 4] = mean(&inter.outgoing_roads, &len);
    v[k + 5] = mean(&inter.outgoing_roads, &speed);
    v[k + 6] = mean(&inter.outgoing_roads, &lanes);
    Ok(v)
}

/// Negative sum of raw stopped counts.
pub fn compute_reward<'a>(incoming: impl IntoIterator<Item = &'a DetectorReading>) -> f64 {
    -(incoming.into_iter().map(|r| r.stopped_count as f64).sum::<f64>())
}

/// Encodes one intersection. `history` holds the previous snapshots and is
/// not modified; callers push `s_t` once the decision step is committed.
pub fn encode_intersection(
    state: &SimState,
    intersection: usize,
    history: &HistoryBuffer,
    dims: ObsDims,
) -> Result<ObservationBundle, SimError> {
    let net = state.net();
    let inter = net
        .intersections
        .get(intersection)
        .ok_or(SimError::UnknownIntersection(intersection))?;
    let sig = state.signal(intersection)?;
    let n_m = inter.movements.len();
    let n_p = inter.phase_set.len();
    assert!(
        n_m <= dims.m_max && n_p <= dims.p_max,
        "intersection {} exceeds padding ({n_m} movements, {n_p} phases)",
        inter.id
    );
    let active = &inter.phase_set[sig.active_phase_id];

    let mut s_t = vec![0.0; dims.state_len()];
    for (row, &m) in inter.movements.iter().enumerate() {
        let mv = &net.movements[m];
        let din = state.detector_reading(mv.from_lane, DetectorZone::StopLine);
        let dout = state.detector_reading(mv.to_lane, DetectorZone::Entry);
        let r = &mut s_t[row * MOVEMENT_FEATURES..(row + 1) * MOVEMENT_FEATURES];
        r[0] = if active.activated_movement_ids.binary_search(&m).is_ok() { 1.0 } else { 0.0 };
        r[1] = din.normalized_stopped();
        r[2] = dout.normalized_stopped();
        r[3] = din.normalized_moving();
        r[4] = dout.normalized_moving();
    }

    let mut g = vec![0.0; dims.p_max * dims.m_max];
    for (p, phase) in inter.phase_set.iter().enumerate() {
        for &m in &phase.activated_movement_ids {
            g[p * dims.m_max + net.movements[m].local_index] = 1.0;
        }
    }
    let mut phase_mask = vec![0.0; dims.p_max];
    phase_mask[..n_p].fill(1.0);
    let mut movement_mask = vec![0.0; dims.m_max];
    movement_mask[..n_m].fill(1.0);

    let readings: Vec<DetectorReading> = inter
        .incoming_lane_ids
        .iter()
        .map(|&l| state.detector_reading(l, DetectorZone::StopLine))
        .collect();
    let reward = compute_reward(&readings);
    let history = history.window(&s_t);

    Ok(ObservationBundle {
        intersection,
        dims,
        s_t,
        g,
        topology: topology_vector(net, intersection)?,
        phase_mask,
        movement_mask,
        reward,
        history,
        n_movements: n_m,
        n_phases: n_p,
    })
}
