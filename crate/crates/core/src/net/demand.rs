use serde::{Deserialize, Serialize};

use super::{NetError, NetworkSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    /// Id of an origin boundary road.
    pub origin: String,
    /// Id of a destination boundary road.
    pub destination: String,
    pub start_s: f64,
    pub end_s: f64,
    pub rate_veh_per_h: f64,
}

impl FlowSpec {
    /// Number of vehicles requested by time `t` (exclusive) under exact-rate
    /// accumulation: one insertion each time the accumulated count crosses
    /// an integer.
    pub fn cumulative_requests(&self, t: f64) -> u64 {
        let elapsed = (t.min(self.end_s) - self.start_s).max(0.0);
        (self.rate_veh_per_h * elapsed / 3600.0 + 1e-9).floor() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandSpec {
    pub flows: Vec<FlowSpec>,
    #[serde(default)]
    pub seed_hint: Option<u64>,
}

impl DemandSpec {
    /// Checks flow endpoints against `net`.
    pub fn validate(&self, net: &NetworkSpec) -> Result<(), NetError> {
        for f in &self.flows {
            let o = net
                .road_index(&f.origin)
                .ok_or_else(|| NetError::Topology(format!("unknown origin road `{}`", f.origin)))?;
            let d = net.road_index(&f.destination).ok_or_else(|| {
                NetError::Topology(format!("unknown destination road `{}`", f.destination))
            })?;
            if !net.roads[o].is_origin() {
                return Err(NetError::Topology(format!("`{}` is not a boundary origin", f.origin)));
            }
            if !net.roads[d].is_destination() {
                return Err(NetError::Topology(format!(
                    "`{}` is not a boundary destination",
                    f.destination
                )));
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        serde_json::to_string_pretty(self).expect("demand document serializes")
    }
}

/// Every origin sends `rate_per_origin` veh/h over `[0, end_s)`, split
/// evenly across the destinations that do not lead back to its own
/// boundary terminal.
pub fn uniform_demand(net: &NetworkSpec, rate_per_origin: f64, end_s: f64) -> DemandSpec {
    let mut flows = Vec::new();
    for o in net.origin_roads() {
        let origin = &net.roads[o];
        let dests: Vec<usize> = net
            .destination_roads()
            .filter(|&d| net.roads[d].to != origin.from)
            .collect();
        for &d in &dests {
            flows.push(FlowSpec {
                origin: origin.id.clone(),
                destination: net.roads[d].id.clone(),
                start_s: 0.0,
                end_s,
                rate_veh_per_h: rate_per_origin / dests.len() as f64,
            });
        }
    }
    DemandSpec { flows, seed_hint: None }
}

pub fn load_demand(text: &str) -> Result<DemandSpec, NetError> {
    let d: DemandSpec = serde_json::from_str(text).map_err(|e| NetError::Schema(e.to_string()))?;
    for (i, f) in d.flows.iter().enumerate() {
        if !(f.start_s.is_finite() && f.end_s.is_finite() && f.start_s >= 0.0) {
            return Err(NetError::Schema(format!("flow {i}: times must be finite and non-negative")));
        }
        if f.end_s <= f.start_s {
            return Err(NetError::Schema(format!("flow {i}: end_s must exceed start_s")));
        }
        if !(f.rate_veh_per_h.is_finite() && f.rate_veh_per_h >= 0.0) {
            return Err(NetError::Schema(format!("flow {i}: rate must be non-negative")));
        }
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_flows_ok() {
        let d = load_demand(r#"{"flows": []}"#).unwrap();
        assert!(d.flows.is_empty());
    }

    #[test]
    fn exact_rate_count() {
        let d = load_demand(
            r#"{"flows":[{"origin":"a","destination":"b","start_s":0,"end_s":3600,"rate_veh_per_h":360}]}"#,
        )
        .unwrap();
        assert_eq!(d.flows[0].cumulative_requests(3600.0), 360);
        assert_eq!(d.flows[0].cumulative_requests(10.0), 1);
        assert_eq!(d.flows[0].cumulative_requests(9.99), 0);
    }

    #[test]
    fn end_before_start_is_schema_error() {
        let r = load_demand(
            r#"{"flows":[{"origin":"a","destination":"b","start_s":50,"end_s":50,"rate_veh_per_h":1}]}"#,
        );
        assert!(matches!(r, Err(NetError::Schema(_))));
        let r = load_demand(
            r#"{"flows":[{"origin":"a","destination":"b","start_s":0,"end_s":50,"rate_veh_per_h":-1}]}"#,
        );
        assert!(matches!(r, Err(NetError::Schema(_))));
    }
}
