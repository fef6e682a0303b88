use std::sync::Arc;

use super::*;
use crate::net::{build_grid, four_arm_catalog, uniform_demand, DemandSpec, FlowSpec, NetworkBuilder, NetworkSpec, TypeTag};
use crate::obs::ObsDims;
use crate::sim::init_sim;
use crate::trainer::TrainConfig;
use crate::ts::HashProvider;

fn grid() -> Arc<NetworkSpec> {
    Arc::new(build_grid(2, 2, 150.0, 2).unwrap())
}

fn env(net: Arc<NetworkSpec>, demand: DemandSpec, steps: usize) -> Env {
    Env::new(net, demand, ObsDims::default(), steps).unwrap()
}

fn cross() -> Arc<NetworkSpec> {
    let mut b = NetworkBuilder::new();
    b.intersection("X", TypeTag::FourPhase);
    for (dir, h) in [("N", 90.0), ("S", 270.0), ("E", 0.0), ("W", 180.0)] {
        let t = format!("T{dir}");
        b.road(&format!("X-{t}"), "X", &t, 200.0, 15.0, h, 1);
        b.road(&format!("{t}-X"), &t, "X", 200.0, 15.0, (h + 180.0) % 360.0, 1);
    }
    b.auto_movements("X");
    let cat = four_arm_catalog(&b, "X");
    b.phases("X", cat);
    Arc::new(b.build().unwrap())
}

fn lane(net: &NetworkSpec, id: &str) -> usize {
    net.lanes.iter().position(|l| l.id == id).unwrap()
}

fn phase_serving(net: &NetworkSpec, from: usize, to: usize) -> usize {
    net.intersections[0]
        .phase_set
        .iter()
        .position(|p| {
            p.activated_movement_ids
                .iter()
                .any(|&m| net.movements[m].from_lane == from && net.movements[m].to_lane == to)
        })
        .unwrap()
}

fn trip(req: f64, dep: Option<f64>, arr: Option<f64>) -> TripRecord {
    TripRecord {
        depart_request_s: req,
        depart_actual_s: dep,
        arrive_s: arr,
        free_flow_s: 20.0,
    }
}

#[test]
fn zero_demand_gives_zero_metrics() {
    let mut e = env(grid(), DemandSpec::default(), 360);
    let t = run_episode(&mut Baseline::FixedTime, &mut e, 1).unwrap();
    assert_eq!(t.steps.len(), 360);
    assert_eq!(e.state().clock_s, 3600);
    assert_eq!(t.horizon_s, 3600.0);
    assert!(t.trips.is_empty());
    let m = EpisodeMetrics::of(&t);
    assert_eq!(
        [m.queue, m.speed, m.intersection_delay, m.completion_rate, m.trip_time, m.trip_delay, m.atd],
        [0.0; 7]
    );
    assert!(t.steps.iter().all(|s| s.speed.is_none()));
}

#[test]
fn all_green_single_vehicle_has_no_delay() {
    let d = DemandSpec {
        flows: vec![FlowSpec {
            origin: "BW0-I0_0".into(),
            destination: "I1_1-BN1".into(),
            start_s: 0.0,
            end_s: 1.0,
            rate_veh_per_h: 3600.0,
        }],
        seed_hint: None,
    };
    let mut e = env(grid(), d, 30);
    e.set_all_green(true);
    let t = run_episode(&mut Baseline::MaxPressure, &mut e, 4).unwrap();
    assert_eq!(t.trips.len(), 1);
    let delay = t.trips[0].trip_delay().expect("finished");
    assert!(delay.abs() <= 1.0, "{delay}");
    assert!(t.steps.iter().all(|s| s.intersection_delay == 0.0));
    // the oracle survives a reset
    let again = run_episode(&mut Baseline::MaxPressure, &mut e, 4).unwrap();
    assert_eq!(again, t);
}

#[test]
fn scripted_thirty_second_stop() {
    let net = cross();
    let (l, out) = (lane(&net, "TW-X_0"), lane(&net, "X-TE_0"));
    let ew = phase_serving(&net, l, out);
    assert_ne!(ew, 0);
    let mut s = init_sim(net, &DemandSpec::default(), 0).unwrap();
    let v = s.spawn_vehicle(vec![l, out], 0.0, 15.0);
    let mut waited = 0;
    for t in 0..200 {
        // red for the first 40 s, then switch: 3 s of yellow
        if t == 40 {
            s.apply_phase(0, ew).unwrap();
        }
        if t > 40 && t % 10 == 0 {
            s.apply_phase(0, ew).unwrap();
        }
        s.step_tick();
        if s.vehicles()[v].speed < 0.1 && s.vehicles()[v].arrive_s.is_none() {
            waited += 1;
        }
    }
    let d = trip_delay(&s.vehicles()[v]).expect("finished");
    assert!((d - waited as f64).abs() <= 2.0, "delay {d}, stopped {waited}");
    assert!((d - 30.0).abs() <= 2.0, "{d}");
}

#[test]
fn intersection_delay_samples() {
    let net = cross();
    let (l, out) = (lane(&net, "TW-X_0"), lane(&net, "X-TE_0"));
    let ew = phase_serving(&net, l, out);
    let mut s = init_sim(net.clone(), &DemandSpec::default(), 0).unwrap();
    assert_eq!(intersection_delay_sample(&s), 0.0);
    // moving vehicle inside the zone: zero wait
    let n = lane(&net, "TS-X_0");
    s.spawn_vehicle(vec![n, lane(&net, "X-TN_0")], 160.0, 15.0);
    assert_eq!(intersection_delay_sample(&s), 0.0);

    let mut s = init_sim(net.clone(), &DemandSpec::default(), 0).unwrap();
    s.spawn_vehicle(vec![l, out], 200.0, 0.0);
    for _ in 0..40 {
        s.step_tick();
    }
    assert_eq!(intersection_delay_sample(&s), 40.0);
    // outside the detector zone nothing counts
    let mut far = init_sim(net, &DemandSpec::default(), 0).unwrap();
    far.spawn_vehicle(vec![l, out], 100.0, 0.0);
    far.step_tick();
    assert_eq!(intersection_delay_sample(&far), 0.0);

    // discharge, then a fresh stop only counts the new wait
    s.apply_phase(0, ew).unwrap();
    let mut moved = false;
    for _ in 0..10 {
        s.step_tick();
        moved |= s.vehicles()[0].speed > 0.0;
    }
    assert!(moved);
    assert!(s.vehicles()[0].continuous_wait_s < 40.0);
}

#[test]
fn rewait_counts_only_new_stop() {
    // two junctions in a row; the second holds the vehicle after it left the first
    let net = Arc::new(build_grid(1, 2, 150.0, 1).unwrap());
    let from = lane(&net, "BW0-I0_0_0");
    let mid = lane(&net, "I0_0-I0_1_0");
    let exit = lane(&net, "I0_1-BE0_0");
    let ew = |i: usize, a: usize, b: usize| {
        net.intersections[i]
            .phase_set
            .iter()
            .position(|p| p.activated_movement_ids.iter().any(|&m| net.movements[m].from_lane == a && net.movements[m].to_lane == b))
            .unwrap()
    };
    let (p0, p1) = (ew(0, from, mid), ew(1, mid, exit));
    let red1 = (p1 + 1) % net.intersections[1].phase_set.len();
    let mut s = init_sim(net.clone(), &DemandSpec::default(), 0).unwrap();
    s.spawn_vehicle(vec![from, mid, exit], 150.0, 0.0);
    s.apply_phase(1, red1).unwrap();
    for _ in 0..20 {
        s.step_tick();
    }
    let first = s.vehicles()[0].continuous_wait_s;
    assert_eq!(first, 20.0);
    s.apply_phase(0, p0).unwrap();
    let mut second = 0.0;
    for t in 0..60 {
        if t % 10 == 0 {
            s.apply_phase(0, p0).unwrap();
            s.apply_phase(1, red1).unwrap();
        }
        s.step_tick();
        let v = &s.vehicles()[0];
        if v.lane() == mid && v.speed < 0.1 {
            second += 1.0;
        }
    }
    let v = &s.vehicles()[0];
    assert_eq!(v.lane(), mid);
    assert!(second > 0.0);
    assert_eq!(v.continuous_wait_s, second);
    assert_eq!(intersection_delay_sample(&s), second);
}

#[test]
fn atd_cases() {
    // everyone departs on request and finishes
    let all = [trip(0.0, Some(0.0), Some(30.0)), trip(10.0, Some(10.0), Some(60.0))];
    assert!((atd(&all, 3600.0) - 40.0).abs() < 1e-12);
    // nobody departs
    let none = [trip(100.0, None, None), trip(600.0, None, None)];
    assert!((atd(&none, 3600.0) - (3500.0 + 3000.0) / 2.0).abs() < 1e-12);
    // finished after a 5 s departure delay, plus one still travelling
    let mixed = [trip(0.0, Some(5.0), Some(45.0)), trip(3500.0, Some(3520.0), None)];
    let hand = ((40.0 + 5.0) + ((3600.0 - 3520.0) + 20.0)) / 2.0;
    assert!((atd(&mixed, 3600.0) - hand).abs() < 1e-12);
    assert_eq!(atd(&[], 3600.0), 0.0);
}

#[test]
fn report_format_and_csv_shape() {
    assert_eq!(MeanStd { mean: 1.26, std: 1.04 }.to_string(), "1.26 (1.04)");
    let m = MeanStd::of(&[1.0, 3.0]);
    assert_eq!((m.mean, m.std), (2.0, 1.0));

    let mut e = env(grid(), uniform_demand(&grid(), 300.0, 3600.0), 30);
    let t = run_episode(&mut Baseline::Greedy, &mut e, 7).unwrap();
    let r = summarize("greedy", None, &vec![t.clone(); 10]);
    assert_eq!(r.seeds, vec![7; 10]);
    assert!(r.metrics().iter().all(|m| m.std == 0.0));
    assert!(r.metrics().iter().all(|m| m.std.is_finite() && m.mean.is_finite()));

    let csv = String::from_utf8(write_trace_csv(&t, Vec::new()).unwrap()).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 31);
    assert!(lines.iter().all(|l| l.split(',').count() == 7));
    assert_eq!(lines[0], STEP_COLUMNS.join(","));

    let rep = String::from_utf8(write_report_csv(&[r.clone(), r], Vec::new()).unwrap()).unwrap();
    let lines: Vec<&str> = rep.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("method,variant,seeds,queue_mean,queue_std,speed_mean"));
    assert!(lines[3].contains("reconstructed definition"));
    assert!(render_table(&[]).contains("reconstructed definition"));
}

#[test]
fn traces_respect_invariants_and_replay() {
    let net = grid();
    let mut e = env(net.clone(), uniform_demand(&net, 600.0, 3600.0), 120);
    for b in Baseline::ALL {
        let t = run_episode(&mut b.clone(), &mut e, 11).unwrap();
        assert_eq!(t, run_episode(&mut b.clone(), &mut e, 11).unwrap(), "{}", b.as_str());
        let mut prev = 0;
        for s in &t.steps {
            assert!(s.completions >= prev);
            prev = s.completions;
            assert!(s.queue >= 0.0 && s.intersection_delay >= 0.0);
            assert!(s.speed.unwrap_or(0.0) >= 0.0);
            assert!(s.completions <= s.inserted);
        }
        let m = EpisodeMetrics::of(&t);
        let inserted = t.steps.last().unwrap().inserted;
        assert!(m.completion_rate * t.horizon_s <= inserted as f64 + 1e-9);
        assert!(m.completion_rate > 0.0);
        for tr in t.trips.iter().filter(|tr| tr.arrive_s.is_some()) {
            assert!(tr.trip_time().unwrap() >= tr.free_flow_s - 1.0);
            assert!(tr.trip_delay().unwrap() >= -1.0);
        }
    }
}

#[test]
fn policy_controller_variants() {
    let net = grid();
    let mut cfg = TrainConfig {
        d: 8,
        latent: 4,
        vae_hidden: 8,
        ..TrainConfig::default()
    };
    cfg.variant = Variant::NoTs;
    let model = LatsModel::new(cfg.clone(), 16);
    let mut e = env(net.clone(), uniform_demand(&net, 300.0, 3600.0), 12);
    let mut c = PolicyController::new(&model, None, ActionMode::Argmax).unwrap();
    assert_eq!(c.name(), "lats_no_ts");
    let a = run_episode(&mut c, &mut e, 3).unwrap();
    assert_eq!(a, run_episode(&mut c, &mut e, 3).unwrap());

    cfg.variant = Variant::NoS;
    let model = LatsModel::new(cfg.clone(), 16);
    assert!(matches!(
        PolicyController::new(&model, None, ActionMode::Argmax),
        Err(EvalError::Ts(TsError::MissingProvider(_)))
    ));
    let p: Arc<dyn EmbeddingProvider> = Arc::new(HashProvider { seed: 1, dim: 16 });
    let mut c = PolicyController::new(&model, Some(p), ActionMode::Argmax).unwrap();
    run_episode(&mut c, &mut e, 3).unwrap();
    let wrong: Arc<dyn EmbeddingProvider> = Arc::new(HashProvider::new(1));
    assert!(matches!(PolicyController::new(&model, Some(wrong), ActionMode::Argmax), Err(EvalError::Config(_))));

    // the student path never needs a provider
    cfg.variant = Variant::Full;
    let model = LatsModel::new(cfg, 16);
    let mut c = PolicyController::new(&model, None, ActionMode::Sample).unwrap();
    let s1 = run_episode(&mut c, &mut e, 5).unwrap();
    assert_eq!(s1, run_episode(&mut c, &mut e, 5).unwrap());
}

#[test]
fn phase_features_cover_real_phases() {
    let net = grid();
    let cfg = TrainConfig {
        d: 4,
        latent: 2,
        vae_hidden: 4,
        ..TrainConfig::default()
    };
    let model = LatsModel::new(cfg, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("features.csv");
    let sink = Box::new(std::fs::File::create(&path).unwrap());
    let mut c = PolicyController::new(&model, None, ActionMode::Argmax).unwrap().with_features(sink).unwrap();
    let mut e = env(net.clone(), DemandSpec::default(), 3);
    run_seeds(&mut c, &mut e, &[0, 1]).unwrap();
    c.finish_features().unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // 2 episodes × 3 steps × 4 junctions × 8 phases
    assert_eq!(lines.len(), 1 + 2 * 3 * 4 * 8);
    assert_eq!(lines[0].split(',').count(), 4 + 8);
    assert!(lines.last().unwrap().starts_with("1,2,I1_1,7,"));
}
