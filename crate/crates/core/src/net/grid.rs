use super::{four_arm_catalog, NetError, NetworkBuilder, NetworkSpec, TypeTag};

pub const GRID_SPEED_MPS: f64 = 13.89;

/// Homogeneous `rows × cols` grid of identical 4-arm signalized junctions.
///
/// Intersection `I{r}_{c}` sits at row `r` (northwards) and column `c`
/// (eastwards). Perimeter junctions get boundary stubs `B...` whose
/// inbound roads are the demand origins and outbound roads the destinations.
pub fn build_grid(
    rows: usize,
    cols: usize,
    lane_length: f64,
    lanes_per_road: usize,
) -> Result<NetworkSpec, NetError> {
    if rows == 0 || cols == 0 {
        return Err(NetError::Argument(format!("grid dims must be positive, got {rows}x{cols}")));
    }
    if lanes_per_road == 0 {
        return Err(NetError::Argument("lanes_per_road must be positive".into()));
    }
    if !(lane_length.is_finite() && lane_length > 0.0) {
        return Err(NetError::Argument("lane_length must be positive".into()));
    }
    let name = |r: usize, c: usize| format!("I{r}_{c}");
    let mut b = NetworkBuilder::new();
    for r in 0..rows {
        for c in 0..cols {
            b.intersection(&name(r, c), TypeTag::FourPhase);
        }
    }
    let road = |b: &mut NetworkBuilder, from: &str, to: &str, heading: f64| {
        b.road(&format!("{from}-{to}"), from, to, lane_length, GRID_SPEED_MPS, heading, lanes_per_road);
    };
    for r in 0..rows {
        for c in 0..cols {
            let here = name(r, c);
            // (neighbour or boundary terminal, heading from here towards it)
            let arms = [
                (if r + 1 < rows { name(r + 1, c) } else { format!("BN{c}") }, 90.0),
                (if r > 0 { name(r - 1, c) } else { format!("BS{c}") }, 270.0),
                (if c + 1 < cols { name(r, c + 1) } else { format!("BE{r}") }, 0.0),
                (if c > 0 { name(r, c - 1) } else { format!("BW{r}") }, 180.0),
            ];
            for (other, heading) in arms {
                road(&mut b, &here, &other, heading);
                if other.starts_with('B') {
                    road(&mut b, &other, &here, (heading + 180.0) % 360.0);
                }
            }
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            b.auto_movements(&name(r, c));
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            let catalog = four_arm_catalog(&b, &name(r, c));
            b.phases(&name(r, c), catalog);
        }
    }
    b.build()
}
