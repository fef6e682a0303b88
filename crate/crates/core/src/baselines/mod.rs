//! Classical signal controllers: fixed-time cycling, greedy queue serving
//! and max-pressure. All of them are pure functions of the detector
//! snapshot and the decision index.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::net::IntersectionSpec;
use crate::net::NetworkSpec;
use crate::sim::DetectorReading;

pub type Readings = BTreeMap<usize, DetectorReading>;

/// Cyclic order, one decision interval per phase, offset 0.
pub fn fixed_time(n_phases: usize, step_index: usize) -> usize {
    assert!(n_phases > 0, "intersection without phases");
    step_index % n_phases
}

fn stopped(readings: &Readings, lane: usize) -> f64 {
    readings.get(&lane).map_or(0.0, |r| r.stopped_count as f64)
}

/// First index of the maximum; ties go to the lowest phase id.
fn argmax(scores: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in scores.into_iter().enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// Stopped vehicles a phase would serve: each incoming lane that feeds one
/// of its movements counts once.
pub fn greedy_score(net: &NetworkSpec, inter: &IntersectionSpec, phase: usize, readings: &Readings) -> f64 {
    let lanes: BTreeSet<usize> = inter.phase_set[phase]
        .activated_movement_ids
        .iter()
        .map(|&m| net.movements[m].from_lane)
        .collect();
    lanes.iter().map(|&l| stopped(readings, l)).sum()
}

pub fn greedy(net: &NetworkSpec, inter: &IntersectionSpec, readings: &Readings) -> usize {
    argmax((0..inter.phase_set.len()).map(|p| greedy_score(net, inter, p, readings)))
}

/// `Σ_m q_in − q_out` over the phase's movements, raw stopped counts.
pub fn pressure(net: &NetworkSpec, inter: &IntersectionSpec, phase: usize, readings: &Readings) -> f64 {
    inter.phase_set[phase]
        .activated_movement_ids
        .iter()
        .map(|&m| {
            let mv = &net.movements[m];
            stopped(readings, mv.from_lane) - stopped(readings, mv.to_lane)
        })
        .sum()
}

pub fn max_pressure(net: &NetworkSpec, inter: &IntersectionSpec, readings: &Readings) -> usize {
    argmax((0..inter.phase_set.len()).map(|p| pressure(net, inter, p, readings)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    FixedTime,
    Greedy,
    MaxPressure,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::FixedTime, Baseline::Greedy, Baseline::MaxPressure];

    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::FixedTime => "fixed_time",
            Baseline::Greedy => "greedy",
            Baseline::MaxPressure => "max_pressure",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.as_str() == s)
    }

    pub fn select(self, net: &NetworkSpec, intersection: usize, readings: &Readings, step_index: usize) -> usize {
        let inter = &net.intersections[intersection];
        match self {
            Baseline::FixedTime => fixed_time(inter.phase_set.len(), step_index),
            Baseline::Greedy => greedy(net, inter, readings),
            Baseline::MaxPressure => max_pressure(net, inter, readings),
        }
    }
}
