//! Fixtures shared by the benches: a warmed-up grid with traffic on it.

use std::sync::Arc;

use lats_core::{build_grid, uniform_demand, Baseline, Env, ObservationBundle, TrainConfig, EPISODE_STEPS};

pub const RATE_VEH_PER_H: f64 = 600.0;

/// A `rows × cols` grid (200 m, 3 lanes) run under fixed-time control for
/// `warmup` decisions so queues exist.
pub fn warmed_grid(rows: usize, cols: usize, warmup: usize) -> (Env, Vec<ObservationBundle>) {
    let net = Arc::new(build_grid(rows, cols, 200.0, 3).expect("grid"));
    let demand = uniform_demand(&net, RATE_VEH_PER_H, 3600.0);
    let mut env = Env::new(net, demand, TrainConfig::default().obs_dims(), EPISODE_STEPS).expect("env");
    let mut obs = env.reset(7).expect("reset");
    for k in 0..warmup {
        let a = vec![Baseline::FixedTime.select(env.net(), 0, &Default::default(), k); obs.len()];
        obs = env.step(&obs, &a).expect("step").obs;
    }
    (env, obs)
}
