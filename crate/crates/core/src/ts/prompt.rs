use std::fmt::Write;

use sha2::{Digest, Sha256};

use crate::net::{NetworkSpec, TypeTag};
use crate::obs::{PhasePromptSource, MOVEMENT_FEATURES};
use crate::sim::DETECTOR_CAP;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptDoc {
    pub text: String,
    pub intersection: String,
    pub phase: usize,
    /// sha256 over the `x_p` and history bytes, hex
    pub input_hash: String,
    /// sha256 of `text`; the embedding cache key
    pub text_hash: [u8; 32],
}

fn type_phrase(t: TypeTag) -> &'static str {
    match t {
        TypeTag::ThreePhase => "three-phase",
        TypeTag::FourPhase => "four-phase",
        TypeTag::FivePhase => "five-phase",
    }
}

fn count(x: f64) -> i64 {
    (x * DETECTOR_CAP as f64).round() as i64
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Topology section shared by every phase of an intersection.
pub fn topology_block(net: &NetworkSpec, intersection: usize) -> String {
    let inter = &net.intersections[intersection];
    let mut s = String::new();
    let _ = writeln!(
        s,
        "Intersection {} is a {}-road intersection with a {} signal plan and {} available phases.",
        inter.id,
        inter.arm_count(),
        type_phrase(inter.type_tag),
        inter.phase_set.len()
    );
    for &r in &inter.incoming_roads {
        let road = &net.roads[r];
        let _ = writeln!(
            s,
            "Incoming road {} from {} has {} lanes, length {:.0} m, speed limit {:.1} m/s.",
            road.id,
            road.from,
            road.lanes.len(),
            road.length_m,
            road.max_speed_mps
        );
    }
    for &r in &inter.outgoing_roads {
        let road = &net.roads[r];
        let _ = writeln!(
            s,
            "Outgoing road {} to {} has {} lanes, length {:.0} m, speed limit {:.1} m/s.",
            road.id,
            road.to,
            road.lanes.len(),
            road.length_m,
            road.max_speed_mps
        );
    }
    s
}

/// Renders the per-phase prompt: the topology section followed by the
/// state of every movement served by the phase over the four-step window.
pub fn render_prompt(src: &PhasePromptSource, net: &NetworkSpec) -> PromptDoc {
    let inter = &net.intersections[src.intersection];
    let n_m = inter.movements.len();
    let state_len = src.history.last().map_or(0, Vec::len);
    let m_max = state_len / MOVEMENT_FEATURES;
    let g_p = &src.x_p[state_len..state_len + m_max];
    let current = &src.x_p[..state_len];

    let mut text = topology_block(net, src.intersection);
    let _ = writeln!(text, "Traffic dynamics under phase p{}:", src.phase);
    for row in 0..n_m {
        if g_p[row] == 0.0 {
            continue;
        }
        let mv = &net.movements[inter.movements[row]];
        let active = current[row * MOVEMENT_FEATURES] > 0.5;
        let series = |col: usize| {
            src.history
                .iter()
                .map(|h| count(h[row * MOVEMENT_FEATURES + col]).to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        let _ = writeln!(
            text,
            "Movement {} turns {} from lane {} to lane {} and is {}. Over the last four steps: stopped on incoming lane {}; moving on incoming lane {}; stopped on outgoing lane {}; moving on outgoing lane {}.",
            row,
            mv.turn.as_str(),
            net.lanes[mv.from_lane].id,
            net.lanes[mv.to_lane].id,
            if active { "active" } else { "inactive" },
            series(1),
            series(3),
            series(2),
            series(4),
        );
    }

    let mut h = Sha256::new();
    h.update((src.intersection as u64).to_le_bytes());
    h.update((src.phase as u64).to_le_bytes());
    for x in src.x_p.iter().chain(src.history.iter().flatten()) {
        h.update(x.to_le_bytes());
    }
    let input_hash = hex(&h.finalize());
    let text_hash: [u8; 32] = Sha256::digest(text.as_bytes()).into();
    PromptDoc {
        text,
        intersection: inter.id.clone(),
        phase: src.phase,
        input_hash,
        text_hash,
    }
}
