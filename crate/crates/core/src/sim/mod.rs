//! Deterministic 1 Hz point-queue simulator.
//!
//! Vehicles travel at the lane speed limit until they close up to the
//! vehicle ahead (7.5 m effective length) or reach the stop line. Stop-line
//! heads cross the junction when their movement is green, the lane's
//! saturation headway (2 s) has elapsed and the receiving lane has room;
//! leftover time within the tick carries into the next lane so free-flow
//! trips take exactly their free-flow time.

mod routing;
pub mod trace;

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::net::{DemandSpec, NetError, NetworkSpec};

pub use routing::RouteTable;

pub const VEHICLE_LENGTH_M: f64 = 7.5;
pub const SATURATION_HEADWAY_S: f64 = 2.0;
pub const STOP_SPEED_MPS: f64 = 0.1;
pub const DETECTOR_RANGE_M: f64 = 50.0;
/// floor(50 / 7.5): vehicles that fit in one detector zone.
pub const DETECTOR_CAP: u32 = 6;
pub const YELLOW_S: u32 = 3;
pub const DECISION_INTERVAL_S: u32 = 10;

const POS_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("phase {phase} unavailable at intersection {intersection}")]
    PhaseUnavailable { intersection: usize, phase: usize },
    #[error("unknown intersection {0}")]
    UnknownIntersection(usize),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type VehicleId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Vehicle {
    pub id: VehicleId,
    /// Lane sequence from origin lane to destination lane.
    pub route: Vec<usize>,
    /// Movement crossed after each route lane except the last.
    pub movements: Vec<usize>,
    pub route_pos: usize,
    /// Metres along the current lane, 0 at its upstream end.
    pub position: f64,
    /// Distance covered during the last tick, per second.
    pub speed: f64,
    pub depart_request_s: f64,
    pub depart_actual_s: Option<f64>,
    pub arrive_s: Option<f64>,
    pub cumulative_stop_s: f64,
    pub continuous_wait_s: f64,
    pub free_flow_s: f64,
    stop_line_time: f64,
    moved_this_tick: f64,
}

impl Vehicle {
    pub fn lane(&self) -> usize {
        self.route[self.route_pos]
    }

    pub fn trip_time_s(&self) -> Option<f64> {
        Some(self.arrive_s? - self.depart_actual_s?)
    }

    pub fn departure_delay_s(&self) -> Option<f64> {
        Some(self.depart_actual_s? - self.depart_request_s)
    }

    /// Actual trip time minus the free-flow time along the route.
    pub fn trip_delay_s(&self) -> Option<f64> {
        Some(self.trip_time_s()? - self.free_flow_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalMode {
    Green,
    Yellow,
}

impl SignalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SignalMode::Green => "green",
            SignalMode::Yellow => "yellow",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalState {
    pub active_phase_id: usize,
    pub pending_phase_id: Option<usize>,
    pub mode: SignalMode,
    pub mode_remaining_s: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DetectorReading {
    pub stopped_count: u32,
    pub moving_count: u32,
}

impl DetectorReading {
    pub fn normalized_stopped(&self) -> f64 {
        self.stopped_count.min(DETECTOR_CAP) as f64 / DETECTOR_CAP as f64
    }

    pub fn normalized_moving(&self) -> f64 {
        self.moving_count.min(DETECTOR_CAP) as f64 / DETECTOR_CAP as f64
    }
}

/// Which end of a lane a detector covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorZone {
    /// last 50 m before the stop line (incoming lanes)
    StopLine,
    /// first 50 m after the junction (outgoing lanes)
    Entry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConservationReport {
    pub inserted: usize,
    pub active: usize,
    pub completed: usize,
    pub pending: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TickReport {
    pub clock_s: u64,
    pub inserted: usize,
    pub completed: usize,
    pub discharged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledTrip {
    pub request_s: f64,
    pub route: Vec<usize>,
    pub movements: Vec<usize>,
    pub free_flow_s: f64,
}

#[derive(Debug, Clone)]
struct LaneState {
    queue: VecDeque<VehicleId>,
    next_discharge_s: f64,
    length: f64,
    speed: f64,
    is_exit: bool,
}

#[derive(Debug, Clone)]
pub struct SimState {
    net: Arc<NetworkSpec>,
    pub clock_s: u64,
    vehicles: Vec<Vehicle>,
    active: usize,
    completed: usize,
    lanes: Vec<LaneState>,
    signals: Vec<SignalState>,
    /// per intersection, per phase: green flag by local movement index
    phase_green: Vec<Vec<Vec<bool>>>,
    schedule: Vec<ScheduledTrip>,
    next_release: usize,
    pending: Vec<VecDeque<usize>>,
    pending_count: usize,
    all_green: bool,
}

/// Builds the initial world: clock 0, every signal green on phase 0, the
/// insertion schedule materialized from `demand` with routes drawn by `seed`.
pub fn init_sim(net: Arc<NetworkSpec>, demand: &DemandSpec, seed: u64) -> Result<SimState, SimError> {
    demand.validate(&net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = RouteTable::new(&net);
    let mut schedule = Vec::new();
    for (fi, flow) in demand.flows.iter().enumerate() {
        let o = net.road_index(&flow.origin).expect("validated");
        let d = net.road_index(&flow.destination).expect("validated");
        let dists = table.distances_to(&net, d);
        if !net.roads[o].lanes.iter().any(|&l| dists[l].is_finite()) {
            return Err(NetError::Topology(format!(
                "no route from `{}` to `{}`",
                flow.origin, flow.destination
            ))
            .into());
        }
        let first = flow.start_s.ceil().max(0.0) as u64;
        let last = flow.end_s.ceil() as u64;
        for t in first..last {
            let n = flow.cumulative_requests(t as f64 + 1.0) - flow.cumulative_requests(t as f64);
            for _ in 0..n {
                let (route, movements) = table.sample_route(&net, &dists, o, &mut rng);
                let free_flow_s = route.iter().map(|&l| net.lane_length(l) / net.lane_speed(l)).sum();
                schedule.push((t, fi, ScheduledTrip {
                    request_s: t as f64,
                    route,
                    movements,
                    free_flow_s,
                }));
            }
        }
    }
    schedule.sort_by_key(|(t, fi, _)| (*t, *fi));
    let schedule: Vec<ScheduledTrip> = schedule.into_iter().map(|(_, _, s)| s).collect();

    let lanes = net
        .lanes
        .iter()
        .map(|l| LaneState {
            queue: VecDeque::new(),
            next_discharge_s: f64::NEG_INFINITY,
            length: net.roads[l.road].length_m,
            speed: net.roads[l.road].max_speed_mps,
            is_exit: net.roads[l.road].is_destination(),
        })
        .collect();
    let phase_green = net
        .intersections
        .iter()
        .map(|i| {
            i.phase_set
                .iter()
                .map(|p| {
                    let mut g = vec![false; i.movements.len()];
                    for &m in &p.activated_movement_ids {
                        g[net.movements[m].local_index] = true;
                    }
                    g
                })
                .collect()
        })
        .collect();
    let signals = net
        .intersections
        .iter()
        .map(|_| SignalState {
            active_phase_id: 0,
            pending_phase_id: None,
            mode: SignalMode::Green,
            mode_remaining_s: DECISION_INTERVAL_S,
        })
        .collect();
    let pending = vec![VecDeque::new(); net.lanes.len()];
    Ok(SimState {
        net,
        clock_s: 0,
        vehicles: Vec::new(),
        active: 0,
        completed: 0,
        lanes,
        signals,
        phase_green,
        schedule,
        next_release: 0,
        pending,
        pending_count: 0,
        all_green: false,
    })
}

impl SimState {
    pub fn net(&self) -> &Arc<NetworkSpec> {
        &self.net
    }

    pub fn schedule(&self) -> &[ScheduledTrip] {
        &self.schedule
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    pub fn signal(&self, intersection: usize) -> Result<&SignalState, SimError> {
        self.signals
            .get(intersection)
            .ok_or(SimError::UnknownIntersection(intersection))
    }

    /// Vehicle ids on `lane`, downstream first.
    pub fn lane_queue(&self, lane: usize) -> impl Iterator<Item = &Vehicle> + '_ {
        self.lanes[lane].queue.iter().map(move |&v| &self.vehicles[v])
    }

    pub fn active_vehicles(&self) -> impl Iterator<Item = &Vehicle> + '_ {
        self.lanes.iter().flat_map(move |l| l.queue.iter().map(move |&v| &self.vehicles[v]))
    }

    /// Oracle control: every movement green, no yellow.
    pub fn set_all_green(&mut self, on: bool) {
        self.all_green = on;
    }

    /// Selects the phase for the next decision interval. Re-selecting the
    /// active phase keeps 10 s of green; a change runs 3 s of yellow (no
    /// discharge) followed by 7 s of the new phase.
    pub fn apply_phase(&mut self, intersection: usize, phase_id: usize) -> Result<(), SimError> {
        let n_phases = self
            .net
            .intersections
            .get(intersection)
            .ok_or(SimError::UnknownIntersection(intersection))?
            .phase_set
            .len();
        if phase_id >= n_phases {
            return Err(SimError::PhaseUnavailable {
                intersection,
                phase: phase_id,
            });
        }
        let sig = &mut self.signals[intersection];
        if sig.active_phase_id == phase_id {
            sig.mode = SignalMode::Green;
            sig.pending_phase_id = None;
            sig.mode_remaining_s = DECISION_INTERVAL_S;
        } else {
            sig.mode = SignalMode::Yellow;
            sig.pending_phase_id = Some(phase_id);
            sig.mode_remaining_s = YELLOW_S;
        }
        Ok(())
    }

    /// Places a vehicle directly on the first lane of `route` (scripted
    /// scenarios and tests). It is appended at the lane tail.
    pub fn spawn_vehicle(&mut self, route: Vec<usize>, position: f64, speed: f64) -> VehicleId {
        let net = &self.net;
        let movements = route
            .windows(2)
            .map(|w| {
                net.movements
                    .iter()
                    .position(|m| m.from_lane == w[0] && m.to_lane == w[1])
                    .expect("route lanes must be joined by movements")
            })
            .collect();
        let free_flow_s = route.iter().map(|&l| net.lane_length(l) / net.lane_speed(l)).sum();
        let lane = route[0];
        let id = self.vehicles.len();
        let position = position.clamp(0.0, self.lanes[lane].length);
        self.vehicles.push(Vehicle {
            id,
            route,
            movements,
            route_pos: 0,
            position,
            speed,
            depart_request_s: self.clock_s as f64,
            depart_actual_s: Some(self.clock_s as f64),
            arrive_s: None,
            cumulative_stop_s: 0.0,
            continuous_wait_s: 0.0,
            free_flow_s,
            stop_line_time: self.clock_s as f64,
            moved_this_tick: 0.0,
        });
        self.lanes[lane].queue.push_back(id);
        self.active += 1;
        id
    }

    fn is_green(&self, movement: usize) -> bool {
        if self.all_green {
            return true;
        }
        let mv = &self.net.movements[movement];
        let sig = &self.signals[mv.intersection];
        sig.mode == SignalMode::Green && self.phase_green[mv.intersection][sig.active_phase_id][mv.local_index]
    }

    fn tail_room(&self, lane: usize) -> Option<f64> {
        match self.lanes[lane].queue.back() {
            None => Some(self.lanes[lane].length),
            Some(&v) => {
                let p = self.vehicles[v].position;
                (p >= VEHICLE_LENGTH_M - POS_EPS).then_some(p - VEHICLE_LENGTH_M)
            }
        }
    }

    /// Advances the world by one second.
    pub fn step_tick(&mut self) -> TickReport {
        let t = self.clock_s as f64;
        let mut report = TickReport::default();

        // release due requests
        while self.next_release < self.schedule.len() && self.schedule[self.next_release].request_s <= t {
            let lane = self.schedule[self.next_release].route[0];
            self.pending[lane].push_back(self.next_release);
            self.pending_count += 1;
            self.next_release += 1;
        }
        // insert at origin lane tails
        for lane in 0..self.pending.len() {
            let Some(&trip) = self.pending[lane].front() else { continue };
            if self.tail_room(lane).is_none() {
                continue;
            }
            self.pending[lane].pop_front();
            self.pending_count -= 1;
            let s = &self.schedule[trip];
            let id = self.vehicles.len();
            self.vehicles.push(Vehicle {
                id,
                route: s.route.clone(),
                movements: s.movements.clone(),
                route_pos: 0,
                position: 0.0,
                speed: 0.0,
                depart_request_s: s.request_s,
                depart_actual_s: Some(t),
                arrive_s: None,
                cumulative_stop_s: 0.0,
                continuous_wait_s: 0.0,
                free_flow_s: s.free_flow_s,
                stop_line_time: f64::INFINITY,
                moved_this_tick: 0.0,
            });
            self.lanes[lane].queue.push_back(id);
            self.active += 1;
            report.inserted += 1;
        }

        // motion within lanes
        for lane in self.lanes.iter() {
            let mut leader: Option<f64> = None;
            for &v in &lane.queue {
                let veh = &mut self.vehicles[v];
                let target = match leader {
                    None => lane.length,
                    Some(p) => (p - VEHICLE_LENGTH_M).min(lane.length),
                };
                let old = veh.position;
                let new = (old + lane.speed).min(target.max(old));
                veh.moved_this_tick = new - old;
                veh.position = new;
                if leader.is_none() && new >= lane.length - POS_EPS {
                    veh.position = lane.length;
                    if old < lane.length - POS_EPS {
                        veh.stop_line_time = t + (lane.length - old) / lane.speed;
                    } else {
                        veh.stop_line_time = veh.stop_line_time.min(t);
                    }
                }
                leader = Some(veh.position);
            }
        }

        // junction crossings and exits
        for lane in 0..self.lanes.len() {
            let Some(&v) = self.lanes[lane].queue.front() else { continue };
            if self.vehicles[v].position < self.lanes[lane].length - POS_EPS {
                continue;
            }
            let reach = self.vehicles[v].stop_line_time.max(t);
            if self.lanes[lane].is_exit {
                self.lanes[lane].queue.pop_front();
                let veh = &mut self.vehicles[v];
                veh.arrive_s = Some(reach);
                self.active -= 1;
                self.completed += 1;
                report.completed += 1;
                continue;
            }
            let veh = &self.vehicles[v];
            if veh.route_pos + 1 >= veh.route.len() {
                continue;
            }
            let movement = veh.movements[veh.route_pos];
            let next = veh.route[veh.route_pos + 1];
            if !self.is_green(movement) {
                continue;
            }
            let cross = reach.max(self.lanes[lane].next_discharge_s);
            if cross > t + 1.0 - POS_EPS {
                continue;
            }
            let Some(room) = self.tail_room(next) else { continue };
            let leftover = t + 1.0 - cross;
            let advance = (self.lanes[next].speed * leftover).min(room).min(self.lanes[next].length);
            self.lanes[lane].queue.pop_front();
            self.lanes[lane].next_discharge_s = cross + SATURATION_HEADWAY_S;
            let veh = &mut self.vehicles[v];
            veh.route_pos += 1;
            veh.moved_this_tick += advance.max(0.0);
            veh.position = advance.max(0.0);
            veh.stop_line_time = if veh.position >= self.lanes[next].length - POS_EPS {
                cross + self.lanes[next].length / self.lanes[next].speed
            } else {
                f64::INFINITY
            };
            self.lanes[next].queue.push_back(v);
            report.discharged += 1;
        }

        // per-vehicle wait accounting
        for lane in &self.lanes {
            for &v in &lane.queue {
                let veh = &mut self.vehicles[v];
                veh.speed = veh.moved_this_tick;
                veh.moved_this_tick = 0.0;
                if veh.speed < STOP_SPEED_MPS {
                    veh.continuous_wait_s += 1.0;
                    veh.cumulative_stop_s += 1.0;
                } else {
                    veh.continuous_wait_s = 0.0;
                }
            }
        }

        // signal timers
        for sig in &mut self.signals {
            sig.mode_remaining_s = sig.mode_remaining_s.saturating_sub(1);
            if sig.mode == SignalMode::Yellow && sig.mode_remaining_s == 0 {
                sig.mode = SignalMode::Green;
                if let Some(p) = sig.pending_phase_id.take() {
                    sig.active_phase_id = p;
                }
                sig.mode_remaining_s = DECISION_INTERVAL_S - YELLOW_S;
            }
        }

        self.clock_s += 1;
        report.clock_s = self.clock_s;
        report
    }

    pub fn detector_reading(&self, lane: usize, zone: DetectorZone) -> DetectorReading {
        let ls = &self.lanes[lane];
        let mut r = DetectorReading::default();
        for &v in &ls.queue {
            let veh = &self.vehicles[v];
            let inside = match zone {
                DetectorZone::StopLine => veh.position >= ls.length - DETECTOR_RANGE_M,
                DetectorZone::Entry => veh.position <= DETECTOR_RANGE_M,
            };
            if inside {
                if veh.speed < STOP_SPEED_MPS {
                    r.stopped_count += 1;
                } else {
                    r.moving_count += 1;
                }
            }
        }
        r
    }

    /// Snapshot of every detector at an intersection: stop-line zones on
    /// incoming lanes, entry zones on outgoing lanes.
    pub fn read_detectors(&self, intersection: usize) -> Result<BTreeMap<usize, DetectorReading>, SimError> {
        let inter = self
            .net
            .intersections
            .get(intersection)
            .ok_or(SimError::UnknownIntersection(intersection))?;
        let mut out = BTreeMap::new();
        for &l in &inter.incoming_lane_ids {
            out.insert(l, self.detector_reading(l, DetectorZone::StopLine));
        }
        for &l in &inter.outgoing_lane_ids {
            out.insert(l, self.detector_reading(l, DetectorZone::Entry));
        }
        Ok(out)
    }

    /// Stopped vehicles anywhere on `lane`.
    pub fn lane_stopped(&self, lane: usize) -> usize {
        self.lane_queue(lane).filter(|v| v.speed < STOP_SPEED_MPS).count()
    }

    pub fn conservation_report(&self) -> ConservationReport {
        ConservationReport {
            inserted: self.vehicles.len(),
            active: self.active,
            completed: self.completed,
            pending: self.pending_count,
        }
    }

    /// Trips requested so far but never inserted, with their request times.
    pub fn undeparted_requests(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .pending
            .iter()
            .flat_map(|q| q.iter().map(|&i| self.schedule[i].request_s))
            .collect();
        out.extend(self.schedule[self.next_release..].iter().map(|s| s.request_s).filter(|&r| r < self.clock_s as f64));
        out
    }

    /// Total requests with request time before `horizon`.
    pub fn requests_before(&self, horizon: f64) -> usize {
        self.schedule.iter().filter(|s| s.request_s < horizon).count()
    }
}
