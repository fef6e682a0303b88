use std::collections::HashMap;

use super::geometry::{classify_turn, turn_angle, Turn};
use super::{
    from_doc, IntersectionDoc, LaneDoc, MovementDoc, NetError, NetworkDoc, NetworkSpec, PhaseDoc,
    RoadDoc, TypeTag, SCHEMA_VERSION,
};

#[derive(Debug, Clone)]
struct BuiltMovement {
    id: String,
    intersection: String,
    from_road: usize,
    turn: Turn,
}

/// Programmatic construction of network documents.
///
/// Roads get lanes named `{road}_{k}`; generated movements are named
/// `{intersection}:{from_lane}>{to_lane}`.
#[derive(Debug, Default)]
pub struct NetworkBuilder {
    intersections: Vec<IntersectionDoc>,
    roads: Vec<RoadDoc>,
    road_lanes: Vec<usize>,
    lanes: Vec<LaneDoc>,
    movements: Vec<MovementDoc>,
    built: Vec<BuiltMovement>,
    phases: Vec<PhaseDoc>,
}

impl NetworkBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intersection(&mut self, id: &str, type_tag: TypeTag) -> &mut Self {
        self.intersections.push(IntersectionDoc {
            id: id.to_string(),
            type_tag,
        });
        self
    }

    #[allow(clippy::too_many_arguments)]
    pub fn road(
        &mut self,
        id: &str,
        from: &str,
        to: &str,
        length_m: f64,
        max_speed_mps: f64,
        heading_deg: f64,
        lanes: usize,
    ) -> &mut Self {
        self.roads.push(RoadDoc {
            id: id.to_string(),
            from: from.to_string(),
            to: to.to_string(),
            length_m,
            max_speed_mps,
            heading_deg,
        });
        self.road_lanes.push(lanes);
        for k in 0..lanes {
            self.lanes.push(LaneDoc {
                id: format!("{id}_{k}"),
                road: id.to_string(),
                index: k,
            });
        }
        self
    }

    /// Connects every incoming road of `inter` to every outgoing road except
    /// its reverse. Targets sorted right-to-left are spread over the lanes
    /// (rightmost lane takes the rightmost targets); a lane serving a target
    /// road connects to all of that road's lanes.
    pub fn auto_movements(&mut self, inter: &str) -> &mut Self {
        let incoming: Vec<usize> = (0..self.roads.len()).filter(|&r| self.roads[r].to == inter).collect();
        let outgoing: Vec<usize> = (0..self.roads.len()).filter(|&r| self.roads[r].from == inter).collect();
        for &ri in &incoming {
            let hin = self.roads[ri].heading_deg;
            let mut targets: Vec<(f64, usize)> = outgoing
                .iter()
                .copied()
                .filter(|&ro| self.roads[ro].to != self.roads[ri].from)
                .map(|ro| (turn_angle(hin, self.roads[ro].heading_deg), ro))
                .filter(|(a, _)| a.abs() < 170.0)
                .collect();
            targets.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let k = targets.len();
            if k == 0 {
                continue;
            }
            let n = self.road_lanes[ri];
            for lane in 0..n {
                let lo = lane * k / n;
                let hi = ((lane + 1) * k).div_ceil(n);
                for &(_, ro) in &targets[lo..hi.max(lo + 1).min(k)] {
                    for out_lane in 0..self.road_lanes[ro] {
                        let from = format!("{}_{lane}", self.roads[ri].id);
                        let to = format!("{}_{out_lane}", self.roads[ro].id);
                        let id = format!("{inter}:{from}>{to}");
                        self.built.push(BuiltMovement {
                            id: id.clone(),
                            intersection: inter.to_string(),
                            from_road: ri,
                            turn: classify_turn(hin, self.roads[ro].heading_deg),
                        });
                        self.movements.push(MovementDoc {
                            id,
                            from_lane: from,
                            to_lane: to,
                        });
                    }
                }
            }
        }
        self
    }

    pub fn phase(&mut self, id: &str, inter: &str, movements: Vec<String>) -> &mut Self {
        self.phases.push(PhaseDoc {
            id: id.to_string(),
            intersection: inter.to_string(),
            movements,
        });
        self
    }

    /// Adds every phase of a catalog, named `{inter}_p{k}`.
    pub fn phases(&mut self, inter: &str, catalog: Vec<Vec<String>>) -> &mut Self {
        for (k, movements) in catalog.into_iter().enumerate() {
            self.phase(&format!("{inter}_p{k}"), inter, movements);
        }
        self
    }

    fn movements_of(&self, inter: &str) -> impl Iterator<Item = &BuiltMovement> {
        let inter = inter.to_string();
        self.built.iter().filter(move |m| m.intersection == inter)
    }

    pub fn build(self) -> Result<NetworkSpec, NetError> {
        from_doc(NetworkDoc {
            schema_version: SCHEMA_VERSION as u64,
            intersections: self.intersections,
            roads: self.roads,
            lanes: self.lanes,
            movements: self.movements,
            phases: self.phases,
        })
    }
}

/// Cardinal approach of an incoming road: 0 = from south (northbound),
/// 1 = from north, 2 = from west (eastbound), 3 = from east.
fn approach_of(heading_deg: f64) -> usize {
    let h = heading_deg.rem_euclid(360.0);
    if (45.0..135.0).contains(&h) {
        0
    } else if (225.0..315.0).contains(&h) {
        1
    } else if !(135.0..225.0).contains(&h) {
        2
    } else {
        3
    }
}

/// The eight-phase catalog of a 4-arm junction, in order:
/// NS through (+rights), NS left, EW through (+rights), EW left,
/// then one phase per approach (N, S, E, W) with all its movements.
pub fn four_arm_catalog(b: &NetworkBuilder, inter: &str) -> Vec<Vec<String>> {
    let mut by: HashMap<(usize, Turn), Vec<String>> = HashMap::new();
    for m in b.movements_of(inter) {
        let app = approach_of(b.roads[m.from_road].heading_deg);
        by.entry((app, m.turn)).or_default().push(m.id.clone());
    }
    let get = |apps: &[usize], turns: &[Turn]| -> Vec<String> {
        let mut out = Vec::new();
        for &a in apps {
            for &t in turns {
                if let Some(v) = by.get(&(a, t)) {
                    out.extend(v.iter().cloned());
                }
            }
        }
        out
    };
    use Turn::*;
    vec![
        get(&[0, 1], &[Through, Right]),
        get(&[0, 1], &[Left]),
        get(&[2, 3], &[Through, Right]),
        get(&[2, 3], &[Left]),
        get(&[1], &[Right, Through, Left]),
        get(&[0], &[Right, Through, Left]),
        get(&[3], &[Right, Through, Left]),
        get(&[2], &[Right, Through, Left]),
    ]
}

/// One phase per incoming road serving all of its movements; ordered by
/// incoming road insertion order.
pub fn per_approach_catalog(b: &NetworkBuilder, inter: &str) -> Vec<Vec<String>> {
    let mut order: Vec<usize> = Vec::new();
    let mut groups: HashMap<usize, Vec<String>> = HashMap::new();
    for m in b.movements_of(inter) {
        if !groups.contains_key(&m.from_road) {
            order.push(m.from_road);
        }
        groups.entry(m.from_road).or_default().push(m.id.clone());
    }
    order.sort_unstable();
    order.into_iter().map(|r| groups.remove(&r).unwrap()).collect()
}
