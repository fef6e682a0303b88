//! Immutable traffic network and demand descriptions.
//!
//! Documents use string ids; once loaded everything is addressed by dense
//! indices into the owning [`NetworkSpec`] vectors.

mod builder;
mod demand;
pub mod geometry;
mod grid;
mod hetero;

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use builder::{four_arm_catalog, per_approach_catalog, NetworkBuilder};
pub use demand::{load_demand, uniform_demand, DemandSpec, FlowSpec};
pub use geometry::Turn;
pub use grid::build_grid;
pub use hetero::heterogeneous_fixture;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("topology error: {0}")]
    Topology(String),
    #[error("unsupported schema_version {found} (expected {expected})")]
    Version { found: u64, expected: u32 },
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypeTag {
    ThreePhase,
    FourPhase,
    FivePhase,
}

impl TypeTag {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            TypeTag::ThreePhase => 0,
            TypeTag::FourPhase => 1,
            TypeTag::FivePhase => 2,
        }
    }

    /// Phase-set sizes accepted for each tag.
    pub fn allowed_phase_counts(self) -> std::ops::RangeInclusive<usize> {
        match self {
            TypeTag::ThreePhase => 2..=3,
            TypeTag::FourPhase => 4..=8,
            TypeTag::FivePhase => 5..=8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TypeTag::ThreePhase => "three_phase",
            TypeTag::FourPhase => "four_phase",
            TypeTag::FivePhase => "five_phase",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadSpec {
    pub id: String,
    pub from: String,
    pub to: String,
    pub length_m: f64,
    pub max_speed_mps: f64,
    /// Direction of travel, degrees counter-clockwise from east.
    pub heading_deg: f64,
    /// Lane indices ordered rightmost first.
    pub lanes: Vec<usize>,
    pub from_intersection: Option<usize>,
    pub to_intersection: Option<usize>,
}

impl RoadSpec {
    pub fn is_origin(&self) -> bool {
        self.from_intersection.is_none()
    }

    pub fn is_destination(&self) -> bool {
        self.to_intersection.is_none()
    }

    pub fn free_flow_time_s(&self) -> f64 {
        self.length_m / self.max_speed_mps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneSpec {
    pub id: String,
    pub road: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MovementSpec {
    pub id: String,
    pub intersection: usize,
    pub from_lane: usize,
    pub to_lane: usize,
    pub turn: Turn,
    /// Position in the owning intersection's canonical movement order.
    pub local_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpec {
    pub id: String,
    /// Global movement indices, sorted by canonical order.
    pub activated_movement_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntersectionSpec {
    pub id: String,
    pub type_tag: TypeTag,
    pub phase_set: Vec<PhaseSpec>,
    /// Canonical movement order (document order).
    pub movements: Vec<usize>,
    pub incoming_lane_ids: Vec<usize>,
    pub outgoing_lane_ids: Vec<usize>,
    pub incoming_roads: Vec<usize>,
    pub outgoing_roads: Vec<usize>,
}

impl IntersectionSpec {
    pub fn arm_count(&self) -> usize {
        // an arm is a neighbouring endpoint reached by an incoming or outgoing road
        self.incoming_roads.len().max(self.outgoing_roads.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub schema_version: u32,
    pub intersections: Vec<IntersectionSpec>,
    pub roads: Vec<RoadSpec>,
    pub lanes: Vec<LaneSpec>,
    pub movements: Vec<MovementSpec>,
}

// ---- document schema ----

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkDoc {
    schema_version: u64,
    intersections: Vec<IntersectionDoc>,
    roads: Vec<RoadDoc>,
    lanes: Vec<LaneDoc>,
    movements: Vec<MovementDoc>,
    phases: Vec<PhaseDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntersectionDoc {
    id: String,
    type_tag: TypeTag,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoadDoc {
    id: String,
    from: String,
    to: String,
    length_m: f64,
    max_speed_mps: f64,
    heading_deg: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LaneDoc {
    id: String,
    road: String,
    index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MovementDoc {
    id: String,
    from_lane: String,
    to_lane: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhaseDoc {
    id: String,
    intersection: String,
    movements: Vec<String>,
}

fn topo(msg: impl Into<String>) -> NetError {
    NetError::Topology(msg.into())
}

/// Parses and validates a network document.
pub fn load_network(spec_text: &str) -> Result<NetworkSpec, NetError> {
    let raw: serde_json::Value =
        serde_json::from_str(spec_text).map_err(|e| NetError::Schema(e.to_string()))?;
    let version = raw
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| NetError::Schema("missing integer `schema_version`".into()))?;
    if version != SCHEMA_VERSION as u64 {
        return Err(NetError::Version {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    let doc: NetworkDoc =
        serde_json::from_value(raw).map_err(|e| NetError::Schema(e.to_string()))?;
    from_doc(doc)
}

fn unique_index<'a>(
    kind: &str,
    ids: impl Iterator<Item = &'a str>,
) -> Result<HashMap<String, usize>, NetError> {
    let mut map = HashMap::new();
    for (i, id) in ids.enumerate() {
        if map.insert(id.to_string(), i).is_some() {
            return Err(topo(format!("duplicate {kind} id `{id}`")));
        }
    }
    Ok(map)
}

fn from_doc(doc: NetworkDoc) -> Result<NetworkSpec, NetError> {
    let inter_ix = unique_index("intersection", doc.intersections.iter().map(|i| i.id.as_str()))?;
    let road_ix = unique_index("road", doc.roads.iter().map(|r| r.id.as_str()))?;
    let lane_ix = unique_index("lane", doc.lanes.iter().map(|l| l.id.as_str()))?;
    let move_ix = unique_index("movement", doc.movements.iter().map(|m| m.id.as_str()))?;
    unique_index("phase", doc.phases.iter().map(|p| p.id.as_str()))?;

    let mut roads: Vec<RoadSpec> = Vec::with_capacity(doc.roads.len());
    for r in &doc.roads {
        if !(r.length_m.is_finite() && r.length_m > 0.0) {
            return Err(NetError::Schema(format!("road `{}` has non-positive length", r.id)));
        }
        if !(r.max_speed_mps.is_finite() && r.max_speed_mps > 0.0) {
            return Err(NetError::Schema(format!("road `{}` has non-positive max speed", r.id)));
        }
        if !r.heading_deg.is_finite() {
            return Err(NetError::Schema(format!("road `{}` has non-finite heading", r.id)));
        }
        let from_intersection = inter_ix.get(&r.from).copied();
        let to_intersection = inter_ix.get(&r.to).copied();
        if from_intersection.is_none() && to_intersection.is_none() {
            return Err(topo(format!("road `{}` touches no intersection", r.id)));
        }
        if r.from == r.to {
            return Err(topo(format!("road `{}` is a self loop", r.id)));
        }
        roads.push(RoadSpec {
            id: r.id.clone(),
            from: r.from.clone(),
            to: r.to.clone(),
            length_m: r.length_m,
            max_speed_mps: r.max_speed_mps,
            heading_deg: r.heading_deg,
            lanes: Vec::new(),
            from_intersection,
            to_intersection,
        });
    }

    let mut lanes = Vec::with_capacity(doc.lanes.len());
    for (i, l) in doc.lanes.iter().enumerate() {
        let road = *road_ix
            .get(&l.road)
            .ok_or_else(|| topo(format!("lane `{}` references unknown road `{}`", l.id, l.road)))?;
        roads[road].lanes.push(i);
        lanes.push(LaneSpec {
            id: l.id.clone(),
            road,
            index: l.index,
        });
    }
    for road in roads.iter_mut() {
        if road.lanes.is_empty() {
            return Err(topo(format!("road `{}` has no lanes", road.id)));
        }
        road.lanes.sort_by_key(|&l| lanes[l].index);
        for (k, &l) in road.lanes.iter().enumerate() {
            if lanes[l].index != k {
                return Err(topo(format!(
                    "lane indices on road `{}` must be 0..{}",
                    road.id,
                    road.lanes.len()
                )));
            }
        }
    }

    let mut intersections: Vec<IntersectionSpec> = doc
        .intersections
        .iter()
        .map(|i| IntersectionSpec {
            id: i.id.clone(),
            type_tag: i.type_tag,
            phase_set: Vec::new(),
            movements: Vec::new(),
            incoming_lane_ids: Vec::new(),
            outgoing_lane_ids: Vec::new(),
            incoming_roads: Vec::new(),
            outgoing_roads: Vec::new(),
        })
        .collect();
    for (r, road) in roads.iter().enumerate() {
        if let Some(i) = road.to_intersection {
            intersections[i].incoming_roads.push(r);
            intersections[i].incoming_lane_ids.extend(road.lanes.iter().copied());
        }
        if let Some(i) = road.from_intersection {
            intersections[i].outgoing_roads.push(r);
            intersections[i].outgoing_lane_ids.extend(road.lanes.iter().copied());
        }
    }

    let mut movements = Vec::with_capacity(doc.movements.len());
    let mut seen_pairs = HashSet::new();
    for m in &doc.movements {
        let from_lane = *lane_ix.get(&m.from_lane).ok_or_else(|| {
            topo(format!("movement `{}` references unknown lane `{}`", m.id, m.from_lane))
        })?;
        let to_lane = *lane_ix.get(&m.to_lane).ok_or_else(|| {
            topo(format!("movement `{}` references unknown lane `{}`", m.id, m.to_lane))
        })?;
        let (ra, rb) = (lanes[from_lane].road, lanes[to_lane].road);
        if ra == rb {
            return Err(topo(format!("movement `{}` joins lanes of one road", m.id)));
        }
        let inter = match (roads[ra].to_intersection, roads[rb].from_intersection) {
            (Some(a), Some(b)) if a == b => a,
            _ => {
                return Err(topo(format!(
                    "movement `{}` lanes do not meet at an intersection",
                    m.id
                )))
            }
        };
        if !seen_pairs.insert((from_lane, to_lane)) {
            return Err(topo(format!("duplicate movement `{}`", m.id)));
        }
        let turn = geometry::classify_turn(roads[ra].heading_deg, roads[rb].heading_deg);
        let local_index = intersections[inter].movements.len();
        intersections[inter].movements.push(movements.len());
        movements.push(MovementSpec {
            id: m.id.clone(),
            intersection: inter,
            from_lane,
            to_lane,
            turn,
            local_index,
        });
    }

    for p in &doc.phases {
        let inter = *inter_ix.get(&p.intersection).ok_or_else(|| {
            topo(format!("phase `{}` references unknown intersection `{}`", p.id, p.intersection))
        })?;
        if p.movements.is_empty() {
            return Err(topo(format!("phase `{}` activates no movement", p.id)));
        }
        let mut set = BTreeSet::new();
        for mid in &p.movements {
            let m = *move_ix.get(mid).ok_or_else(|| {
                topo(format!("phase `{}` references unknown movement `{mid}`", p.id))
            })?;
            if movements[m].intersection != inter {
                return Err(topo(format!(
                    "phase `{}` activates movement `{mid}` of another intersection",
                    p.id
                )));
            }
            set.insert(movements[m].local_index);
        }
        let ids = set
            .into_iter()
            .map(|local| intersections[inter].movements[local])
            .collect();
        intersections[inter].phase_set.push(PhaseSpec {
            id: p.id.clone(),
            activated_movement_ids: ids,
        });
    }

    let net = NetworkSpec {
        schema_version: SCHEMA_VERSION,
        intersections,
        roads,
        lanes,
        movements,
    };
    net.validate()?;
    Ok(net)
}

impl NetworkSpec {
    /// Checks the structural invariants and the phase conflict table.
    pub fn validate(&self) -> Result<(), NetError> {
        for inter in &self.intersections {
            if inter.movements.is_empty() {
                return Err(topo(format!("intersection `{}` has no movements", inter.id)));
            }
            if inter.phase_set.len() < 2 {
                return Err(topo(format!("intersection `{}` needs at least 2 phases", inter.id)));
            }
            if !inter.type_tag.allowed_phase_counts().contains(&inter.phase_set.len()) {
                return Err(topo(format!(
                    "intersection `{}` tagged {} but has {} phases",
                    inter.id,
                    inter.type_tag.as_str(),
                    inter.phase_set.len()
                )));
            }
            let paths = self.movement_paths(inter);
            for phase in &inter.phase_set {
                let locals: Vec<usize> = phase
                    .activated_movement_ids
                    .iter()
                    .map(|&m| self.movements[m].local_index)
                    .collect();
                for (a, &la) in locals.iter().enumerate() {
                    for &lb in &locals[a + 1..] {
                        if geometry::conflicts(&paths[la], &paths[lb]) {
                            return Err(topo(format!(
                                "phase `{}` activates conflicting movements `{}` and `{}`",
                                phase.id,
                                self.movements[inter.movements[la]].id,
                                self.movements[inter.movements[lb]].id
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Junction chords for an intersection's movements in canonical order.
    pub fn movement_paths(&self, inter: &IntersectionSpec) -> Vec<geometry::MovementPath> {
        let max_lanes = inter
            .incoming_roads
            .iter()
            .chain(&inter.outgoing_roads)
            .map(|&r| self.roads[r].lanes.len())
            .max()
            .unwrap_or(1);
        let radius = geometry::junction_radius(max_lanes);
        inter
            .movements
            .iter()
            .map(|&m| {
                let mv = &self.movements[m];
                let (la, lb) = (&self.lanes[mv.from_lane], &self.lanes[mv.to_lane]);
                let (ra, rb) = (&self.roads[la.road], &self.roads[lb.road]);
                geometry::MovementPath {
                    from_road: la.road,
                    to_lane: mv.to_lane,
                    turn: mv.turn,
                    entry: geometry::entry_point(radius, ra.heading_deg, la.index, ra.lanes.len()),
                    exit: geometry::exit_point(radius, rb.heading_deg, lb.index, rb.lanes.len()),
                }
            })
            .collect()
    }

    pub fn intersection_index(&self, id: &str) -> Option<usize> {
        self.intersections.iter().position(|i| i.id == id)
    }

    pub fn road_index(&self, id: &str) -> Option<usize> {
        self.roads.iter().position(|r| r.id == id)
    }

    pub fn lane_length(&self, lane: usize) -> f64 {
        self.roads[self.lanes[lane].road].length_m
    }

    pub fn lane_speed(&self, lane: usize) -> f64 {
        self.roads[self.lanes[lane].road].max_speed_mps
    }

    pub fn origin_roads(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.roads.len()).filter(|&r| self.roads[r].is_origin())
    }

    pub fn destination_roads(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.roads.len()).filter(|&r| self.roads[r].is_destination())
    }

    pub fn max_movements(&self) -> usize {
        self.intersections.iter().map(|i| i.movements.len()).max().unwrap_or(0)
    }

    pub fn max_phases(&self) -> usize {
        self.intersections.iter().map(|i| i.phase_set.len()).max().unwrap_or(0)
    }

    /// Renders the network back into its document form.
    pub fn render(&self) -> String {
        let doc = NetworkDoc {
            schema_version: self.schema_version as u64,
            intersections: self
                .intersections
                .iter()
                .map(|i| IntersectionDoc {
                    id: i.id.clone(),
                    type_tag: i.type_tag,
                })
                .collect(),
            roads: self
                .roads
                .iter()
                .map(|r| RoadDoc {
                    id: r.id.clone(),
                    from: r.from.clone(),
                    to: r.to.clone(),
                    length_m: r.length_m,
                    max_speed_mps: r.max_speed_mps,
                    heading_deg: r.heading_deg,
                })
                .collect(),
            lanes: self
                .lanes
                .iter()
                .map(|l| LaneDoc {
                    id: l.id.clone(),
                    road: self.roads[l.road].id.clone(),
                    index: l.index,
                })
                .collect(),
            movements: self
                .movements
                .iter()
                .map(|m| MovementDoc {
                    id: m.id.clone(),
                    from_lane: self.lanes[m.from_lane].id.clone(),
                    to_lane: self.lanes[m.to_lane].id.clone(),
                })
                .collect(),
            phases: self
                .intersections
                .iter()
                .flat_map(|i| {
                    i.phase_set.iter().map(move |p| PhaseDoc {
                        id: p.id.clone(),
                        intersection: i.id.clone(),
                        movements: p
                            .activated_movement_ids
                            .iter()
                            .map(|&m| self.movements[m].id.clone())
                            .collect(),
                    })
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("network document serializes")
    }
}
