use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lats_core::baselines::Readings;
use lats_core::eval::{run_episode, EpisodeMetrics};
use lats_core::net::{DemandSpec, FlowSpec};
use lats_core::numerics::{Mat, ParamStore};
use lats_core::obs::{encode_intersection, HistoryBuffer, MOVEMENT_FEATURES};
use lats_core::policy::select_action;
use lats_core::sim::{DetectorReading, SignalMode, STOP_SPEED_MPS};
use lats_core::trainer::compute_gae;
use lats_core::ts::{gaussian_kl, LatentGaussian};
use lats_core::*;

fn flows(net: &NetworkSpec, picks: &[(usize, usize, f64, f64, f64)]) -> DemandSpec {
    let origins: Vec<usize> = net.origin_roads().collect();
    let dests: Vec<usize> = net.destination_roads().collect();
    let flows = picks
        .iter()
        .map(|&(o, d, start, span, rate)| FlowSpec {
            origin: net.roads[origins[o % origins.len()]].id.clone(),
            destination: net.roads[dests[d % dests.len()]].id.clone(),
            start_s: start,
            end_s: start + span,
            rate_veh_per_h: rate,
        })
        .collect();
    DemandSpec { flows, seed_hint: None }
}

fn flow_strategy() -> impl Strategy<Value = Vec<(usize, usize, f64, f64, f64)>> {
    prop::collection::vec((0..16usize, 0..16usize, 0.0..100.0f64, 10.0..400.0f64, 0.0..1800.0f64), 1..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn network_render_round_trips(rows in 1..4usize, cols in 1..4usize, lanes in 1..4usize, len in 60.0..400.0f64) {
        let net = build_grid(rows, cols, len, lanes).unwrap();
        prop_assert_eq!(net.intersections.len(), rows * cols);
        prop_assert!(net.validate().is_ok());
        let back = load_network(&net.render()).unwrap();
        prop_assert_eq!(back, net);
    }

    #[test]
    fn simulator_state_stays_physical(picks in flow_strategy(), seed in 0..1000u64, actions in prop::collection::vec(0..8usize, 40)) {
        let net = Arc::new(build_grid(2, 2, 150.0, 2).unwrap());
        let mut s = init_sim(net.clone(), &flows(&net, &picks), seed).unwrap();
        let mut pending_plus_inserted = None;
        for (t, a) in actions.iter().enumerate().flat_map(|(k, a)| (0..10).map(move |j| (k * 10 + j, a))) {
            if t % 10 == 0 {
                for i in 0..net.intersections.len() {
                    s.apply_phase(i, (a + i) % net.intersections[i].phase_set.len()).unwrap();
                }
            }
            s.step_tick();
            let c = s.conservation_report();
            prop_assert_eq!(c.inserted, c.active + c.completed);
            // pending only moves into the network
            let total = c.inserted + c.pending;
            if let Some(prev) = pending_plus_inserted {
                prop_assert!(total >= prev);
            }
            pending_plus_inserted = Some(total);
            for v in s.active_vehicles() {
                let lane = v.lane();
                prop_assert!(v.position >= 0.0 && v.position <= net.lane_length(lane) + 1e-9);
                prop_assert!(v.speed >= 0.0 && v.speed <= net.lane_speed(lane) + 1e-9);
                if v.speed > STOP_SPEED_MPS {
                    prop_assert_eq!(v.continuous_wait_s, 0.0);
                }
            }
            for l in 0..net.lanes.len() {
                let pos: Vec<f64> = s.lane_queue(l).map(|v| v.position).collect();
                prop_assert!(pos.windows(2).all(|w| w[0] >= w[1]), "FIFO on lane {}", l);
            }
        }
    }

    #[test]
    fn yellow_never_discharges(rate in 600.0..1800.0f64, seed in 0..1000u64, actions in prop::collection::vec(0..8usize, 30)) {
        let net = Arc::new(build_grid(1, 1, 120.0, 2).unwrap());
        let demand = uniform_demand(&net, rate, 3600.0);
        let mut s = init_sim(net, &demand, seed).unwrap();
        let mut yellow_ticks = 0;
        for a in actions {
            s.apply_phase(0, a).unwrap();
            for _ in 0..10 {
                let before = s.signal(0).unwrap().mode;
                let r = s.step_tick();
                if before == SignalMode::Yellow {
                    yellow_ticks += 1;
                    prop_assert_eq!(r.discharged, 0);
                }
            }
        }
        prop_assert!(yellow_ticks % 3 == 0, "yellow lasts whole 3 s blocks, saw {}", yellow_ticks);
    }

    #[test]
    fn observations_are_well_formed(seed in 0..1000u64, rate in 0.0..1500.0f64, steps in 0..20usize) {
        let net = Arc::new(heterogeneous_fixture().unwrap());
        let dims = ObsDims { m_max: 36, p_max: 8 };
        let mut env = Env::new(net.clone(), uniform_demand(&net, rate, 3600.0), dims, 40).unwrap();
        let mut obs = env.reset(seed).unwrap();
        for k in 0..steps {
            let a: Vec<usize> = obs.iter().map(|o| (k + o.intersection) % o.n_phases).collect();
            obs = env.step(&obs, &a).unwrap().obs;
        }
        for o in &obs {
            let inter = &net.intersections[o.intersection];
            prop_assert!(o.s_t.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!(o.reward <= 0.0);
            for p in 0..dims.p_max {
                let row = o.g_row(p);
                let expect = if p < o.n_phases { inter.phase_set[p].activated_movement_ids.len() } else { 0 };
                prop_assert_eq!(row.iter().sum::<f64>() as usize, expect);
                prop_assert!(row.iter().zip(&o.movement_mask).all(|(g, m)| g * m == *g));
            }
            for m in o.n_movements..dims.m_max {
                prop_assert!(o.s_t[m * MOVEMENT_FEATURES..(m + 1) * MOVEMENT_FEATURES].iter().all(|&x| x == 0.0));
            }
            // encoding is a pure function of the snapshot
            let again = encode_intersection(env.state(), o.intersection, &HistoryBuffer::new(), dims).unwrap();
            prop_assert_eq!(&again.s_t, &o.s_t);
            prop_assert_eq!(again.reward, o.reward);
        }
    }

    #[test]
    fn policy_respects_masks_and_padding(seed in 0..10_000u64, n_m in 1..6usize, n_p in 1..4usize) {
        let dims = PolicyDims { obs: ObsDims { m_max: 6, p_max: 4 }, d: 8, latent: 3 };
        let mut store = ParamStore::new(seed);
        let policy = PolicyNet::new(&mut store, dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Arc::new(build_grid(1, 1, 100.0, 1).unwrap());
        let s = init_sim(net, &DemandSpec::default(), 0).unwrap();
        let real = encode_intersection(&s, 0, &HistoryBuffer::new(), ObsDims { m_max: 12, p_max: 8 }).unwrap();
        // a hand-cut observation with n_m movements and n_p phases
        let mut o = real.clone();
        o.dims = dims.obs;
        o.n_movements = n_m;
        o.n_phases = n_p;
        o.s_t = (0..6 * MOVEMENT_FEATURES).map(|k| if k < n_m * MOVEMENT_FEATURES { rng.random() } else { 0.0 }).collect();
        o.movement_mask = (0..6).map(|m| f64::from(m < n_m)).collect();
        o.phase_mask = (0..4).map(|p| f64::from(p < n_p)).collect();
        o.g = (0..24).map(|k| f64::from(k / 6 < n_p && k % 6 < n_m && rng.random::<bool>())).collect();
        let z = Mat::from_vec(4, 3, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect());
        let h: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = policy.forward(&store, &o, &h, &z).unwrap();
        prop_assert!((out.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(out.pi[n_p..].iter().all(|&p| p == 0.0));

        // garbage in padded rows and latents changes nothing real
        let mut noisy = o.clone();
        for k in n_m * MOVEMENT_FEATURES..noisy.s_t.len() {
            noisy.s_t[k] = rng.random();
        }
        for k in n_p * 6..24 {
            noisy.g[k] = 1.0;
        }
        let mut z2 = z.clone();
        for p in n_p..4 {
            for c in 0..3 {
                z2.data[p * 3 + c] = 9.0;
            }
        }
        let out2 = policy.forward(&store, &noisy, &h, &z2).unwrap();
        prop_assert_eq!(&out.pi, &out2.pi);
        prop_assert_eq!(out.value, out2.value);
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_self(mu in prop::collection::vec(-3.0..3.0f64, 1..16), seed in 0..1000u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = LatentGaussian { logvar: mu.iter().map(|_| rng.random_range(-4.0..4.0)).collect(), mu: mu.clone() };
        let b = LatentGaussian {
            mu: mu.iter().map(|_| rng.random_range(-3.0..3.0)).collect(),
            logvar: mu.iter().map(|_| rng.random_range(-4.0..4.0)).collect(),
        };
        prop_assert_eq!(gaussian_kl(&a, &a), 0.0);
        prop_assert!(gaussian_kl(&a, &b) >= 0.0);
    }

    #[test]
    fn gae_matches_discounted_residual_sum(
        rewards in prop::collection::vec(-5.0..0.0f64, 1..30),
        seed in 0..1000u64,
        gamma in 0.5..1.0f64,
        lambda in 0.5..1.0f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = rewards.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
        let last = rng.random_range(-3.0..3.0);
        let (adv, ret) = compute_gae(&rewards, &values, last, gamma, lambda);
        let n = rewards.len();
        let v = |t: usize| if t < n { values[t] } else { last };
        for t in 0..n {
            let direct: f64 = (t..n)
                .map(|k| (gamma * lambda).powi((k - t) as i32) * (rewards[k] + gamma * v(k + 1) - v(k)))
                .sum();
            prop_assert!((adv[t] - direct).abs() < 1e-9);
            prop_assert!((ret[t] - adv[t] - values[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_picks_a_maximum(pi in prop::collection::vec(0.0..1.0f64, 1..9)) {
        let c = select_action(&pi, ActionMode::Argmax, &mut ChaCha8Rng::seed_from_u64(0));
        prop_assert!(pi.iter().all(|&p| p <= pi[c.action]));
        prop_assert!(pi[..c.action].iter().all(|&p| p < pi[c.action]));
    }

    #[test]
    fn controllers_are_pure(seed in 0..1000u64, step in 0..100usize) {
        let net = heterogeneous_fixture().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let i = rng.random_range(0..net.intersections.len());
        let inter = &net.intersections[i];
        let mut r = Readings::new();
        for &l in inter.incoming_lane_ids.iter().chain(&inter.outgoing_lane_ids) {
            r.insert(l, DetectorReading { stopped_count: rng.random_range(0..8), moving_count: rng.random_range(0..8) });
        }
        for b in Baseline::ALL {
            let a = b.select(&net, i, &r, step);
            prop_assert_eq!(a, b.select(&net, i, &r.clone(), step));
            prop_assert!(a < inter.phase_set.len());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn episode_metrics_are_consistent(rate in 100.0..1200.0f64, seed in 0..1000u64, which in 0..3usize) {
        let net = Arc::new(build_grid(2, 2, 150.0, 2).unwrap());
        let demand = uniform_demand(&net, rate, 3600.0);
        let dims = ObsDims { m_max: net.max_movements(), p_max: net.max_phases() };
        let mut env = Env::new(net, demand, dims, 60).unwrap();
        let mut ctrl = Baseline::ALL[which];
        let trace = run_episode(&mut ctrl, &mut env, seed).unwrap();
        let m = EpisodeMetrics::of(&trace);
        let last = trace.steps.last().unwrap();
        prop_assert!(m.completion_rate * trace.horizon_s <= last.inserted as f64 + 1e-9);
        prop_assert!(trace.steps.windows(2).all(|w| w[0].completions <= w[1].completions));
        for s in &trace.steps {
            prop_assert!(s.queue >= 0.0 && s.intersection_delay >= 0.0);
            prop_assert!(s.speed.is_none_or(|v| v >= 0.0));
        }
        for t in trace.trips.iter().filter(|t| t.arrive_s.is_some()) {
            prop_assert!(t.trip_time().unwrap() >= t.free_flow_s - 1.0);
        }
        for x in [m.queue, m.speed, m.intersection_delay, m.completion_rate, m.trip_time, m.atd] {
            prop_assert!(x >= 0.0);
        }
        // replay gives the same trace
        let again = run_episode(&mut ctrl, &mut env, seed).unwrap();
        prop_assert_eq!(summarize("x", None, &[again]), summarize("x", None, &[trace]));
    }
}
