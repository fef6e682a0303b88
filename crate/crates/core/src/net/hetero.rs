use super::{four_arm_catalog, per_approach_catalog, NetError, NetworkBuilder, NetworkSpec, TypeTag};

const ROWS: usize = 4;
const COLS: usize = 7;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    /// corner junction with one stub removed and the other outbound only
    TwoPhase,
    /// perimeter junction whose boundary stub is removed
    ThreeArm,
    Four,
    /// interior junction with an extra diagonal stub
    FiveArm,
}

fn kind(r: usize, c: usize) -> Kind {
    match (r, c) {
        (0, 0) | (3, 6) => Kind::TwoPhase,
        (0, 2) | (0, 4) | (3, 3) | (2, 6) => Kind::ThreeArm,
        (1, 2) | (2, 4) | (1, 5) | (2, 1) => Kind::FiveArm,
        _ => Kind::Four,
    }
}

fn name(r: usize, c: usize) -> String {
    format!("J{r}_{c}")
}

/// Hand-built heterogeneous network of 28 signalized junctions mixing 3-, 4-
/// and 5-arm topologies with 2 to 8 phases, 1- and 2-lane roads and varied
/// lengths and speed limits.
pub fn heterogeneous_fixture() -> Result<NetworkSpec, NetError> {
    let mut b = NetworkBuilder::new();
    for r in 0..ROWS {
        for c in 0..COLS {
            let tag = match kind(r, c) {
                Kind::TwoPhase | Kind::ThreeArm => TypeTag::ThreePhase,
                Kind::Four => TypeTag::FourPhase,
                Kind::FiveArm => TypeTag::FivePhase,
            };
            b.intersection(&name(r, c), tag);
        }
    }
    let touches_five = |a: (usize, usize), bb: Option<(usize, usize)>| {
        kind(a.0, a.1) == Kind::FiveArm || bb.is_some_and(|(r, c)| kind(r, c) == Kind::FiveArm)
    };
    let length = |r: usize, c: usize, k: usize| 110.0 + 30.0 * ((r * 7 + c * 3 + k * 5) % 5) as f64;

    for r in 0..ROWS {
        for c in 0..COLS {
            let here = name(r, c);
            let k = kind(r, c);
            let arms: [(Option<(usize, usize)>, f64, &str); 4] = [
                (if r + 1 < ROWS { Some((r + 1, c)) } else { None }, 90.0, "N"),
                (if r > 0 { Some((r - 1, c)) } else { None }, 270.0, "S"),
                (if c + 1 < COLS { Some((r, c + 1)) } else { None }, 0.0, "E"),
                (if c > 0 { Some((r, c - 1)) } else { None }, 180.0, "W"),
            ];
            for (idx, (nbr, heading, dir)) in arms.into_iter().enumerate() {
                let speed = if heading == 0.0 || heading == 180.0 { 16.67 } else { 11.11 };
                let lanes = if touches_five((r, c), nbr) { 1 } else { 2 };
                match nbr {
                    Some((nr, nc)) => {
                        let other = name(nr, nc);
                        // each undirected link is emitted once per direction by its tail
                        b.road(&format!("{here}-{other}"), &here, &other, length(r.min(nr), c.min(nc), idx / 2), speed, heading, lanes);
                    }
                    None => {
                        let stub = format!("X{r}_{c}{dir}");
                        let keep_in = match k {
                            Kind::ThreeArm => continue,
                            Kind::TwoPhase => {
                                // keep only the vertical stub, outbound only
                                if dir == "E" || dir == "W" {
                                    continue;
                                }
                                false
                            }
                            _ => true,
                        };
                        b.road(&format!("{here}-{stub}"), &here, &stub, 140.0, 13.89, heading, lanes);
                        if keep_in {
                            b.road(&format!("{stub}-{here}"), &stub, &here, 140.0, 13.89, (heading + 180.0) % 360.0, lanes);
                        }
                    }
                }
            }
            if k == Kind::FiveArm {
                let stub = format!("X{r}_{c}D");
                b.road(&format!("{here}-{stub}"), &here, &stub, 160.0, 11.11, 45.0, 1);
                b.road(&format!("{stub}-{here}"), &stub, &here, 160.0, 11.11, 225.0, 1);
            }
        }
    }
    for r in 0..ROWS {
        for c in 0..COLS {
            b.auto_movements(&name(r, c));
        }
    }
    for r in 0..ROWS {
        for c in 0..COLS {
            let n = name(r, c);
            let catalog = match kind(r, c) {
                Kind::Four if (r + c) % 2 == 0 => four_arm_catalog(&b, &n),
                _ => per_approach_catalog(&b, &n),
            };
            b.phases(&n, catalog);
        }
    }
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixed_topologies() {
        let net = heterogeneous_fixture().unwrap();
        assert_eq!(net.intersections.len(), 28);
        let mut arms = std::collections::BTreeMap::new();
        for i in &net.intersections {
            *arms.entry(i.arm_count()).or_insert(0) += 1;
            assert!(i.movements.len() <= 36, "{} has {}", i.id, i.movements.len());
            assert!(i.phase_set.len() <= 8);
        }
        assert!(arms.contains_key(&3) && arms.contains_key(&4) && arms.contains_key(&5), "{arms:?}");
        let phase_counts: std::collections::BTreeSet<_> =
            net.intersections.iter().map(|i| i.phase_set.len()).collect();
        assert!(phase_counts.contains(&2) && phase_counts.contains(&5) && phase_counts.contains(&8));
    }
}
