//! Decision-interval wrapper around the simulator shared by training and
//! evaluation.

use std::sync::Arc;

use crate::net::{DemandSpec, NetworkSpec};
use crate::obs::{encode_intersection, HistoryBuffer, ObsDims, ObservationBundle};
use crate::sim::{init_sim, SimError, SimState, TickReport, DECISION_INTERVAL_S};

/// Decision steps in a 3600 s episode.
pub const EPISODE_STEPS: usize = 360;

pub struct Env {
    net: Arc<NetworkSpec>,
    demand: DemandSpec,
    pub dims: ObsDims,
    pub horizon: usize,
    state: SimState,
    histories: Vec<HistoryBuffer>,
    step: usize,
    all_green: bool,
}

#[derive(Debug, Clone)]
pub struct EnvStep {
    pub obs: Vec<ObservationBundle>,
    /// per intersection, read after the interval
    pub rewards: Vec<f64>,
    pub done: bool,
}

impl Env {
    pub fn new(net: Arc<NetworkSpec>, demand: DemandSpec, dims: ObsDims, horizon: usize) -> Result<Self, SimError> {
        assert!(dims.fits(&net), "network exceeds observation padding");
        let state = init_sim(net.clone(), &demand, 0)?;
        let n = net.intersections.len();
        Ok(Self {
            net,
            demand,
            dims,
            horizon,
            state,
            histories: vec![HistoryBuffer::new(); n],
            step: 0,
            all_green: false,
        })
    }

    pub fn net(&self) -> &Arc<NetworkSpec> {
        &self.net
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn n_agents(&self) -> usize {
        self.net.intersections.len()
    }

    /// Oracle mode kept across resets: every movement green.
    pub fn set_all_green(&mut self, on: bool) {
        self.all_green = on;
        self.state.set_all_green(on);
    }

    /// Seconds covered by a full episode.
    pub fn horizon_s(&self) -> f64 {
        (self.horizon as u32 * DECISION_INTERVAL_S) as f64
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Restarts the world with `seed` and returns the first observations.
    pub fn reset(&mut self, seed: u64) -> Result<Vec<ObservationBundle>, SimError> {
        self.state = init_sim(self.net.clone(), &self.demand, seed)?;
        self.state.set_all_green(self.all_green);
        for h in &mut self.histories {
            h.clear();
        }
        self.step = 0;
        self.observe()
    }

    fn observe(&mut self) -> Result<Vec<ObservationBundle>, SimError> {
        let mut out = Vec::with_capacity(self.histories.len());
        for i in 0..self.histories.len() {
            out.push(encode_intersection(&self.state, i, &self.histories[i], self.dims)?);
        }
        Ok(out)
    }

    /// Applies one phase per intersection, runs one decision interval and
    /// observes. `on_tick` sees the world after every simulated second.
    pub fn step_with<F>(&mut self, current: &[ObservationBundle], actions: &[usize], mut on_tick: F) -> Result<EnvStep, SimError>
    where
        F: FnMut(&SimState, &TickReport),
    {
        assert_eq!(actions.len(), self.histories.len(), "one action per intersection");
        for (i, &a) in actions.iter().enumerate() {
            self.state.apply_phase(i, a)?;
        }
        for _ in 0..DECISION_INTERVAL_S {
            let r = self.state.step_tick();
            on_tick(&self.state, &r);
        }
        // the snapshot that drove this decision becomes history
        for (h, o) in self.histories.iter_mut().zip(current) {
            h.push(o.s_t.clone());
        }
        self.step += 1;
        let obs = self.observe()?;
        let rewards = obs.iter().map(|o| o.reward).collect();
        Ok(EnvStep {
            obs,
            rewards,
            done: self.step >= self.horizon,
        })
    }

    pub fn step(&mut self, current: &[ObservationBundle], actions: &[usize]) -> Result<EnvStep, SimError> {
        self.step_with(current, actions, |_, _| {})
    }
}
