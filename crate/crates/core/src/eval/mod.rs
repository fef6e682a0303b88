//! Seeded evaluation episodes, the six traffic metrics plus average trip
//! duration, and mean (std) reports.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::Baseline;
use crate::env::Env;
use crate::numerics::Mat;
use crate::obs::ObservationBundle;
use crate::policy::{select_action, ActionMode, PhaseFeatureWriter};
use crate::sim::{SimError, SimState, Vehicle, DETECTOR_RANGE_M};
use crate::trainer::{embedding_rows, teacher_embeddings, LatsModel, TrainError};
use crate::ts::{EmbeddingCache, EmbeddingProvider, TsError, Variant};

pub const ATD_FOOTER: &str = "# atd: reconstructed definition (finished: trip time + departure delay; unfinished: horizon - depart + departure delay; never departed: horizon - request; averaged over all requested trips)";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Ts(#[from] TsError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Config(String),
}

/// Anything that picks one phase per intersection each decision step.
pub trait Controller {
    fn name(&self) -> String;
    /// Called before every episode.
    fn reset(&mut self, n_agents: usize, seed: u64);
    fn decide(&mut self, state: &SimState, obs: &[ObservationBundle], step: usize) -> Result<Vec<usize>, EvalError>;
}

impl Controller for Baseline {
    fn name(&self) -> String {
        self.as_str().to_string()
    }

    fn reset(&mut self, _n_agents: usize, _seed: u64) {}

    fn decide(&mut self, state: &SimState, _obs: &[ObservationBundle], step: usize) -> Result<Vec<usize>, EvalError> {
        let net = state.net();
        (0..net.intersections.len())
            .map(|i| Ok(self.select(net, i, &state.read_detectors(i)?, step)))
            .collect()
    }
}

/// A trained model driving every intersection with shared parameters.
pub struct PolicyController<'a> {
    model: &'a LatsModel,
    provider: Option<Arc<dyn EmbeddingProvider>>,
    cache: EmbeddingCache,
    mode: ActionMode,
    rng: ChaCha8Rng,
    h: Mat,
    features: Option<PhaseFeatureWriter<Box<dyn Write>>>,
    episode: usize,
}

impl<'a> PolicyController<'a> {
    /// Only the teacher-fed variant needs a provider at execution time.
    pub fn new(model: &'a LatsModel, provider: Option<Arc<dyn EmbeddingProvider>>, mode: ActionMode) -> Result<Self, EvalError> {
        let variant = model.config.variant;
        if variant == Variant::NoS {
            let p = provider.as_ref().ok_or(TsError::MissingProvider(variant.as_str()))?;
            if p.dim() != model.e_dim {
                return Err(EvalError::Config(format!(
                    "provider dim {} differs from the checkpoint's {}",
                    p.dim(),
                    model.e_dim
                )));
            }
        }
        Ok(Self {
            model,
            provider,
            cache: EmbeddingCache::in_memory(model.config.cache_capacity),
            mode,
            rng: ChaCha8Rng::seed_from_u64(0),
            h: Mat::zeros(0, 0),
            features: None,
            episode: 0,
        })
    }

    /// Streams fused phase features of every decision to `sink`.
    pub fn with_features(mut self, sink: Box<dyn Write>) -> Result<Self, EvalError> {
        self.features = Some(PhaseFeatureWriter::new(sink, 2 * self.model.net.policy.dims.d)?);
        Ok(self)
    }

    pub fn finish_features(&mut self) -> Result<(), EvalError> {
        if let Some(w) = self.features.take() {
            w.finish()?.flush()?;
        }
        Ok(())
    }
}

impl Controller for PolicyController<'_> {
    fn name(&self) -> String {
        format!("lats_{}", self.model.config.variant.as_str())
    }

    fn reset(&mut self, n_agents: usize, seed: u64) {
        if !self.h.is_empty() {
            self.episode += 1;
        }
        self.h = Mat::zeros(n_agents, self.model.net.policy.dims.d);
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn decide(&mut self, state: &SimState, obs: &[ObservationBundle], step: usize) -> Result<Vec<usize>, EvalError> {
        let refs: Vec<&ObservationBundle> = obs.iter().collect();
        let e = match (self.model.config.variant, &self.provider) {
            (Variant::NoS, Some(p)) => {
                let rows = teacher_embeddings(state.net(), &refs, &mut self.cache, p.as_ref())?;
                let rows: Vec<_> = rows.into_iter().map(|(e, _)| e).collect();
                Some(embedding_rows(&rows, self.model.e_dim))
            }
            _ => None,
        };
        let outs = self.model.net.decide(&self.model.store, &refs, &self.h, e)?;
        let d = self.model.net.policy.dims.d;
        self.h = Mat::from_vec(outs.len(), d, outs.iter().flat_map(|o| o.h_gru.iter().copied()).collect());
        if let Some(w) = self.features.as_mut() {
            for (i, (o, ob)) in outs.iter().zip(obs).enumerate() {
                w.record(self.episode, step, &state.net().intersections[i].id, ob.n_phases, o)?;
            }
        }
        Ok(outs.iter().map(|o| select_action(&o.pi, self.mode, &mut self.rng).action).collect())
    }
}

/// Network snapshot taken after each decision interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// stopped vehicles on incoming lanes, mean per intersection
    pub queue: f64,
    /// `None` when the network is empty
    pub speed: Option<f64>,
    pub intersection_delay: f64,
    pub completions: usize,
    pub inserted: usize,
    /// running means over trips finished so far
    pub trip_time: Option<f64>,
    pub trip_delay: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub depart_request_s: f64,
    pub depart_actual_s: Option<f64>,
    pub arrive_s: Option<f64>,
    pub free_flow_s: f64,
}

impl TripRecord {
    pub fn trip_time(&self) -> Option<f64> {
        Some(self.arrive_s? - self.depart_actual_s?)
    }

    pub fn departure_delay(&self) -> Option<f64> {
        Some(self.depart_actual_s? - self.depart_request_s)
    }

    pub fn trip_delay(&self) -> Option<f64> {
        Some(self.trip_time()? - self.free_flow_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTrace {
    pub seed: u64,
    pub horizon_s: f64,
    pub steps: Vec<StepMetrics>,
    /// every trip requested before the horizon
    pub trips: Vec<TripRecord>,
}

/// Actual trip time minus the free-flow time along the route.
pub fn trip_delay(v: &Vehicle) -> Option<f64> {
    v.trip_delay_s()
}

fn in_stop_zone(state: &SimState, v: &Vehicle) -> bool {
    let net = state.net();
    let lane = v.lane();
    net.roads[net.lanes[lane].road].to_intersection.is_some() && v.position >= net.lane_length(lane) - DETECTOR_RANGE_M
}

/// Mean continuous wait of vehicles inside the stop-line detector range of
/// any signalized approach; 0 when there are none.
pub fn intersection_delay_sample(state: &SimState) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in state.active_vehicles().filter(|v| in_stop_zone(state, v)) {
        sum += v.continuous_wait_s;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Stopped vehicles over whole incoming lanes, averaged over intersections.
pub fn queue_sample(state: &SimState) -> f64 {
    let net = state.net();
    if net.intersections.is_empty() {
        return 0.0;
    }
    let total: usize = net
        .intersections
        .iter()
        .flat_map(|i| &i.incoming_lane_ids)
        .map(|&l| state.lane_stopped(l))
        .sum();
    total as f64 / net.intersections.len() as f64
}

pub fn speed_sample(state: &SimState) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in state.active_vehicles() {
        sum += v.speed;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn sample(state: &SimState, step: usize) -> StepMetrics {
    let c = state.conservation_report();
    let finished = || state.vehicles().iter().filter(|v| v.arrive_s.is_some());
    StepMetrics {
        step,
        queue: queue_sample(state),
        speed: speed_sample(state),
        intersection_delay: intersection_delay_sample(state),
        completions: c.completed,
        inserted: c.inserted,
        trip_time: mean(finished().filter_map(Vehicle::trip_time_s)),
        trip_delay: mean(finished().filter_map(Vehicle::trip_delay_s)),
    }
}

fn trips(state: &SimState, horizon_s: f64) -> Vec<TripRecord> {
    let mut out: Vec<TripRecord> = state
        .vehicles()
        .iter()
        .filter(|v| v.depart_request_s < horizon_s)
        .map(|v| TripRecord {
            depart_request_s: v.depart_request_s,
            depart_actual_s: v.depart_actual_s,
            arrive_s: v.arrive_s,
            free_flow_s: v.free_flow_s,
        })
        .collect();
    out.extend(state.undeparted_requests().into_iter().filter(|&r| r < horizon_s).map(|r| TripRecord {
        depart_request_s: r,
        depart_actual_s: None,
        arrive_s: None,
        free_flow_s: 0.0,
    }));
    out
}

/// One full episode: `env.horizon` decisions, ten ticks each.
pub fn run_episode(ctrl: &mut dyn Controller, env: &mut Env, seed: u64) -> Result<MetricsTrace, EvalError> {
    let mut obs = env.reset(seed)?;
    ctrl.reset(env.n_agents(), seed);
    let mut steps = Vec::with_capacity(env.horizon);
    for k in 0..env.horizon {
        let actions = ctrl.decide(env.state(), &obs, k)?;
        let next = env.step(&obs, &actions)?;
        steps.push(sample(env.state(), k + 1));
        obs = next.obs;
    }
    let horizon_s = env.horizon_s();
    Ok(MetricsTrace {
        seed,
        horizon_s,
        steps,
        trips: trips(env.state(), horizon_s),
    })
}

pub fn run_seeds(ctrl: &mut dyn Controller, env: &mut Env, seeds: &[u64]) -> Result<Vec<MetricsTrace>, EvalError> {
    seeds.iter().map(|&s| run_episode(ctrl, env, s)).collect()
}

/// Average trip duration over every trip requested before the horizon,
/// charging unfinished and never-departed trips up to the horizon.
pub fn atd(trips: &[TripRecord], horizon_s: f64) -> f64 {
    if trips.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for t in trips {
        total += match (t.depart_actual_s, t.arrive_s) {
            (Some(dep), Some(arr)) => (arr - dep) + (dep - t.depart_request_s),
            (Some(dep), None) => (horizon_s - dep) + (dep - t.depart_request_s),
            (None, _) => horizon_s - t.depart_request_s,
        };
    }
    total / trips.len() as f64
}

/// Episode-level values of the six metrics plus ATD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub queue: f64,
    pub speed: f64,
    pub intersection_delay: f64,
    /// completed vehicles per second
    pub completion_rate: f64,
    pub trip_time: f64,
    pub trip_delay: f64,
    pub atd: f64,
}

impl EpisodeMetrics {
    pub fn of(trace: &MetricsTrace) -> Self {
        let steps = &trace.steps;
        let finished: Vec<&TripRecord> = trace.trips.iter().filter(|t| t.arrive_s.is_some()).collect();
        let completed = steps.last().map_or(0, |s| s.completions);
        Self {
            queue: mean(steps.iter().map(|s| s.queue)).unwrap_or(0.0),
            speed: mean(steps.iter().filter_map(|s| s.speed)).unwrap_or(0.0),
            intersection_delay: mean(steps.iter().map(|s| s.intersection_delay)).unwrap_or(0.0),
            completion_rate: if trace.horizon_s > 0.0 { completed as f64 / trace.horizon_s } else { 0.0 },
            trip_time: mean(finished.iter().filter_map(|t| t.trip_time())).unwrap_or(0.0),
            trip_delay: mean(finished.iter().filter_map(|t| t.trip_delay())).unwrap_or(0.0),
            atd: atd(&trace.trips, trace.horizon_s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// population standard deviation
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = xs.len() as f64;
        // shifted by the first sample so identical inputs give std exactly 0
        let x0 = xs[0];
        let mean = x0 + xs.iter().map(|x| x - x0).sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ({:.2})", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub variant: Option<String>,
    pub seeds: Vec<u64>,
    pub queue: MeanStd,
    pub speed: MeanStd,
    pub intersection_delay: MeanStd,
    pub completion_rate: MeanStd,
    pub trip_time: MeanStd,
    pub trip_delay: MeanStd,
    pub atd: MeanStd,
}

pub const METRIC_NAMES: [&str; 7] = [
    "queue",
    "speed",
    "intersection_delay",
    "completion_rate",
    "trip_time",
    "trip_delay",
    "atd",
];

impl MetricsReport {
    pub fn metrics(&self) -> [MeanStd; 7] {
        [
            self.queue,
            self.speed,
            self.intersection_delay,
            self.completion_rate,
            self.trip_time,
            self.trip_delay,
            self.atd,
        ]
    }
}

pub fn summarize(method: &str, variant: Option<&str>, traces: &[MetricsTrace]) -> MetricsReport {
    let eps: Vec<EpisodeMetrics> = traces.iter().map(EpisodeMetrics::of).collect();
    let col = |f: fn(&EpisodeMetrics) -> f64| MeanStd::of(&eps.iter().map(f).collect::<Vec<_>>());
    MetricsReport {
        method: method.to_string(),
        variant: variant.map(str::to_string),
        seeds: traces.iter().map(|t| t.seed).collect(),
        queue: col(|e| e.queue),
        speed: col(|e| e.speed),
        intersection_delay: col(|e| e.intersection_delay),
        completion_rate: col(|e| e.completion_rate),
        trip_time: col(|e| e.trip_time),
        trip_delay: col(|e| e.trip_delay),
        atd: col(|e| e.atd),
    }
}

/// One row per method, mean and std column pairs, then the ATD footer.
pub fn write_report_csv<W: Write>(reports: &[MetricsReport], mut out: W) -> Result<W, EvalError> {
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut header = vec!["method".to_string(), "variant".to_string(), "seeds".to_string()];
        for m in METRIC_NAMES {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_std"));
        }
        w.write_record(&header)?;
        for r in reports {
            let seeds = r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
            let mut row = vec![r.method.clone(), r.variant.clone().unwrap_or_default(), seeds];
            for m in r.metrics() {
                row.push(m.mean.to_string());
                row.push(m.std.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    writeln!(out, "{ATD_FOOTER}")?;
    Ok(out)
}

pub const STEP_COLUMNS: [&str; 7] = [
    "step",
    "queue",
    "speed",
    "intersection_delay",
    "completion_rate",
    "trip_time",
    "trip_delay",
];

/// Plot-ready per-step trace; absent values are empty cells.
pub fn write_trace_csv<W: Write>(trace: &MetricsTrace, out: W) -> Result<W, EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(STEP_COLUMNS)?;
    let per_step = if trace.steps.is_empty() {
        0.0
    } else {
        trace.horizon_s / trace.steps.len() as f64
    };
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for s in &trace.steps {
        let elapsed = per_step * s.step as f64;
        let rate = if elapsed > 0.0 { s.completions as f64 / elapsed } else { 0.0 };
        w.write_record([
            s.step.to_string(),
            s.queue.to_string(),
            opt(s.speed),
            s.intersection_delay.to_string(),
            rate.to_string(),
            opt(s.trip_time),
            opt(s.trip_delay),
        ])?;
    }
    w.into_inner().map_err(|e| EvalError::Io(e.into_error()))
}

/// Human-readable table in "mean (std)" cells.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut s = format!("{:<18}", "method");
    for m in METRIC_NAMES {
        s.push_str(&format!(" {m:>20}"));
    }
    s.push('\n');
    for r in reports {
        s.push_str(&format!("{:<18}", r.method));
        for m in r.metrics() {
            s.push_str(&format!(" {:>20}", m.to_string()));
        }
        s.push('\n');
    }
    s.push_str(ATD_FOOTER);
    s.push('\n');
    s
}

#[cfg(test)]
mod tests;
