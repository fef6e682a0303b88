use rand::Rng;

use crate::net::NetworkSpec;

/// Lane-level successor lists used for shortest free-flow-time routing.
#[derive(Debug, Clone)]
pub struct RouteTable {
    /// (movement, next lane) pairs leaving each lane
    successors: Vec<Vec<(usize, usize)>>,
    cost: Vec<f64>,
}

impl RouteTable {
    pub fn new(net: &NetworkSpec) -> Self {
        let mut successors = vec![Vec::new(); net.lanes.len()];
        for (m, mv) in net.movements.iter().enumerate() {
            successors[mv.from_lane].push((m, mv.to_lane));
        }
        let cost = (0..net.lanes.len())
            .map(|l| net.lane_length(l) / net.lane_speed(l))
            .collect();
        Self { successors, cost }
    }

    /// Free-flow time from entering each lane to leaving `dest_road`
    /// (infinite when unreachable).
    pub fn distances_to(&self, net: &NetworkSpec, dest_road: usize) -> Vec<f64> {
        let n = net.lanes.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut done = vec![false; n];
        let mut pred: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (l, succ) in self.successors.iter().enumerate() {
            for &(_, next) in succ {
                pred[next].push(l);
            }
        }
        for &l in &net.roads[dest_road].lanes {
            dist[l] = self.cost[l];
        }
        // dense Dijkstra; networks here have at most a few thousand lanes
        loop {
            let mut best = None;
            for l in 0..n {
                if !done[l] && dist[l].is_finite() && best.is_none_or(|b: usize| dist[l] < dist[b]) {
                    best = Some(l);
                }
            }
            let Some(u) = best else { break };
            done[u] = true;
            for &p in &pred[u] {
                let d = dist[u] + self.cost[p];
                if d < dist[p] {
                    dist[p] = d;
                }
            }
        }
        dist
    }

    /// Draws a shortest route from `origin_road`, breaking ties between
    /// equally fast lanes uniformly at random.
    pub fn sample_route<R: Rng>(
        &self,
        net: &NetworkSpec,
        dist: &[f64],
        origin_road: usize,
        rng: &mut R,
    ) -> (Vec<usize>, Vec<usize>) {
        const TOL: f64 = 1e-9;
        let starts = &net.roads[origin_road].lanes;
        let best = starts.iter().map(|&l| dist[l]).fold(f64::INFINITY, f64::min);
        let ties: Vec<usize> = starts.iter().copied().filter(|&l| dist[l] <= best + TOL).collect();
        let mut lane = ties[rng.random_range(0..ties.len())];
        let mut route = vec![lane];
        let mut movements = Vec::new();
        loop {
            let remaining = dist[lane] - self.cost[lane];
            if remaining <= TOL {
                break;
            }
            let options: Vec<(usize, usize)> = self.successors[lane]
                .iter()
                .copied()
                .filter(|&(_, next)| (dist[next] - remaining).abs() <= TOL * (1.0 + remaining))
                .collect();
            let (m, next) = options[rng.random_range(0..options.len())];
            movements.push(m);
            route.push(next);
            lane = next;
        }
        (route, movements)
    }
}
