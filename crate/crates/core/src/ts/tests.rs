use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::net::{build_grid, heterogeneous_fixture, DemandSpec};
use crate::numerics::{param_grad_check, Adam, AdamConfig, Graph, Mat, ParamStore};
use crate::obs::{encode_intersection, HistoryBuffer, ObsDims};
use crate::sim::init_sim;

fn bridge_fixture(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "fixtures", "bridge", name].iter().collect();
    std::fs::read_to_string(p).unwrap()
}

fn rand_gaussian(rng: &mut ChaCha8Rng, dim: usize, spread: f64) -> LatentGaussian {
    LatentGaussian {
        mu: (0..dim).map(|_| rng.random_range(-spread..spread)).collect(),
        logvar: (0..dim).map(|_| rng.random_range(-spread..spread)).collect(),
    }
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn normal_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_vec(r, c, (0..r * c).map(|_| rng.sample(StandardNormal)).collect())
}

// ---- embeddings and prompts ----

#[test]
fn hash_embedding_is_deterministic_and_unit_norm() {
    let a = hash_embed("Movement 3 turns left from lane N_0", 7);
    let b = hash_embed("Movement 3 turns left from lane N_0", 7);
    assert_eq!(a, b);
    assert_eq!(a.len(), HASH_EMBED_DIM);
    let n: f64 = a.iter().map(|x| x * x).sum();
    assert!((n - 1.0).abs() < 1e-12);
    assert_ne!(a, hash_embed("Movement 3 turns left from lane N_0", 8));
    assert!(hash_embed("", 0).iter().all(|&x| x == 0.0));
}

#[test]
fn prompt_lists_phase_movements_and_is_stable() {
    let net = Arc::new(build_grid(1, 1, 200.0, 3).unwrap());
    let s = init_sim(net.clone(), &DemandSpec::default(), 0).unwrap();
    let obs = encode_intersection(&s, 0, &HistoryBuffer::new(), ObsDims::default()).unwrap();
    for p in 0..obs.n_phases {
        let doc = render_prompt(&obs.prompt_source(p), &net);
        assert_eq!(doc, render_prompt(&obs.prompt_source(p), &net));
        assert!(doc.text.contains(&format!("Traffic dynamics under phase p{p}:")));
        let served = net.intersections[0].phase_set[p].activated_movement_ids.len();
        assert_eq!(doc.text.matches("Movement ").count(), served);
        assert_eq!(doc.phase, p);
    }
    let d0 = render_prompt(&obs.prompt_source(0), &net);
    let d1 = render_prompt(&obs.prompt_source(1), &net);
    assert_ne!(d0.text_hash, d1.text_hash);
    assert_ne!(d0.input_hash, d1.input_hash);
}

#[test]
fn small_traffic_change_stays_closer_than_another_junction() {
    let grid = Arc::new(build_grid(1, 1, 200.0, 3).unwrap());
    let mut s = init_sim(grid.clone(), &DemandSpec::default(), 0).unwrap();
    let dims = ObsDims::default();
    let before = encode_intersection(&s, 0, &HistoryBuffer::new(), dims).unwrap();
    let m = grid.intersections[0].phase_set[0].activated_movement_ids[0];
    let mv = &grid.movements[m];
    s.spawn_vehicle(vec![mv.from_lane, mv.to_lane], grid.lane_length(mv.from_lane), 0.0);
    let after = encode_intersection(&s, 0, &HistoryBuffer::new(), dims).unwrap();

    let hetero = Arc::new(heterogeneous_fixture().unwrap());
    let hs = init_sim(hetero.clone(), &DemandSpec::default(), 0).unwrap();
    let i = hetero.intersections.iter().position(|x| x.arm_count() == 3).unwrap();
    let other = encode_intersection(&hs, i, &HistoryBuffer::new(), dims).unwrap();

    let p = HashProvider::new(0);
    let docs = [
        render_prompt(&before.prompt_source(0), &grid),
        render_prompt(&after.prompt_source(0), &grid),
        render_prompt(&other.prompt_source(0), &hetero),
    ];
    assert_ne!(docs[0].text, docs[1].text);
    let e = p.embed(&docs.iter().map(|d| d.text.clone()).collect::<Vec<_>>()).unwrap();
    let near = cosine(&e[0], &e[1]);
    let far = cosine(&e[0], &e[2]);
    assert!(near > 0.9, "{near}");
    assert!(near > far, "{near} vs {far}");
}

// ---- KL ----

fn mc_kl(a: &LatentGaussian, b: &LatentGaussian, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let sd_a: Vec<f64> = a.logvar.iter().map(|l| (0.5 * l).exp()).collect();
    let mut acc = 0.0;
    for _ in 0..n {
        let mut lr = 0.0;
        for i in 0..a.mu.len() {
            let eps: f64 = rng.sample(StandardNormal);
            let z = a.mu[i] + sd_a[i] * eps;
            let db = z - b.mu[i];
            lr += -0.5 * a.logvar[i] - 0.5 * eps * eps + 0.5 * b.logvar[i] + db * db / (2.0 * b.logvar[i].exp());
        }
        acc += lr;
    }
    acc / n as f64
}

#[test]
fn kl_closed_form_cases() {
    let a = LatentGaussian::standard(32);
    assert_eq!(gaussian_kl(&a, &a), 0.0);
    let mut b = a.clone();
    b.mu[5] = 1.0;
    assert_eq!(gaussian_kl(&a, &b), 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!((mc_kl(&a, &b, 1_000_000, &mut rng) - 0.5).abs() < 1e-2);

    for _ in 0..1000 {
        let a = rand_gaussian(&mut rng, 32, 3.0);
        let b = rand_gaussian(&mut rng, 32, 3.0);
        assert_eq!(gaussian_kl(&a, &a), 0.0);
        assert!(gaussian_kl(&a, &b) >= 0.0);
    }
}

#[test]
fn kl_matches_monte_carlo_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..5 {
        let a = rand_gaussian(&mut rng, 8, 1.0);
        let b = rand_gaussian(&mut rng, 8, 1.0);
        let exact = gaussian_kl(&a, &b);
        let mc = mc_kl(&a, &b, 1_000_000, &mut rng);
        assert!((exact - mc).abs() < 1e-2, "{exact} vs {mc}");
    }
}

#[test]
fn graph_kl_agrees_and_differentiates() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs: Vec<Mat> = (0..4).map(|_| rand_mat(&mut rng, 3, 5)).collect();
    let mut g = Graph::new();
    let v: Vec<_> = xs.iter().map(|m| g.input(m.clone())).collect();
    let kl = kl_graph(&mut g, v[0], v[1], v[2], v[3]).unwrap();
    let prior = kl_std_normal_graph(&mut g, v[0], v[1]).unwrap();
    for r in 0..3 {
        let a = LatentGaussian { mu: xs[0].row(r).to_vec(), logvar: xs[1].row(r).to_vec() };
        let b = LatentGaussian { mu: xs[2].row(r).to_vec(), logvar: xs[3].row(r).to_vec() };
        assert!((g.value(kl).data[r] - gaussian_kl(&a, &b)).abs() < 1e-12);
        let std = LatentGaussian::standard(5);
        assert!((g.value(prior).data[r] - gaussian_kl(&a, &std)).abs() < 1e-12);
    }
    let err = crate::numerics::grad_check(
        |g, v| {
            let k = kl_graph(g, v[0], v[1], v[2], v[3])?;
            let p = kl_std_normal_graph(g, v[2], v[3])?;
            let s = g.add(k, p)?;
            Ok(g.sum(s))
        },
        &xs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

// ---- VAEs ----

fn small_ts(variant: Variant, seed: u64) -> (ParamStore, TeacherStudent) {
    let mut store = ParamStore::new(seed);
    let dims = TsDims { x: 6, e: 5, hidden: 4, latent: 3 };
    let ts = TeacherStudent::new(&mut store, variant, dims, TsWeights::default());
    (store, ts)
}

struct TsInputs {
    x: Mat,
    e: Mat,
    w: Vec<f64>,
    ns: Mat,
    nc: Mat,
}

fn ts_inputs(seed: u64, rows: usize) -> TsInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = vec![1.0 / (rows - 1) as f64; rows];
    w[rows - 1] = 0.0;
    TsInputs {
        x: rand_mat(&mut rng, rows, 6),
        e: rand_mat(&mut rng, rows, 5),
        w,
        ns: normal_mat(&mut rng, rows, 3),
        nc: normal_mat(&mut rng, rows, 3),
    }
}

#[test]
fn variants_own_the_right_parameters() {
    for v in Variant::ALL {
        let (store, ts) = small_ts(v, 0);
        assert_eq!(ts.student.is_some(), v.has_student());
        assert_eq!(ts.teacher.is_some(), v.has_teacher());
        let names: Vec<&str> = store.ids().map(|id| store.name(id)).collect();
        assert_eq!(names.iter().any(|n| n.starts_with("ts.student")), v.has_student());
        assert_eq!(names.iter().any(|n| n.starts_with("ts.teacher")), v.has_teacher());
        assert_eq!(Variant::parse(v.as_str()), Some(v));
    }
    let (store, ts) = small_ts(Variant::NoTs, 0);
    let z = ts.policy_latents(&store, Mat::zeros(4, 6), None).unwrap();
    assert_eq!(z, Mat::zeros(4, 3));
    let (store, ts) = small_ts(Variant::NoS, 0);
    assert!(matches!(
        ts.policy_latents(&store, Mat::zeros(4, 6), None),
        Err(TsError::MissingProvider(_))
    ));
}

#[test]
fn alignment_gradient_never_reaches_teacher() {
    let (store, ts) = small_ts(Variant::Full, 5);
    let inp = ts_inputs(9, 3);
    let mut g = Graph::new();
    let x = g.input(inp.x.clone());
    let e = g.input(inp.e.clone());
    let out = ts.loss_graph(&mut g, &store, x, Some(e), &inp.w, &inp.ns, &inp.nc).unwrap();
    let align = out.align.unwrap();
    assert!(g.value(align).item() > 0.0);
    g.backward(align).unwrap();
    let teacher = ts.teacher.unwrap().params();
    let student = ts.student.unwrap().params();
    let grads = g.param_grads();
    let mut student_nonzero = false;
    for (id, m) in grads {
        if teacher.contains(&id) {
            assert!(m.data.iter().all(|&x| x == 0.0), "{}", store.name(id));
        }
        if student.contains(&id) && m.data.iter().any(|&x| x != 0.0) {
            student_nonzero = true;
        }
    }
    assert!(student_nonzero);
}

#[test]
fn ts_loss_gradients_match_finite_differences() {
    for v in [Variant::Full, Variant::NoT, Variant::NoS] {
        let (mut store, ts) = small_ts(v, 11);
        let inp = ts_inputs(12, 3);
        let w_z = {
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            rand_mat(&mut rng, 3, 3)
        };
        let check = |store: &mut ParamStore, ts: TeacherStudent, ids: &[crate::numerics::ParamId]| {
            param_grad_check(
                store,
                Some(ids),
                |g, s| {
                    let x = g.input(inp.x.clone());
                    let e = g.input(inp.e.clone());
                    let out = ts.loss_graph(g, s, x, Some(e), &inp.w, &inp.ns, &inp.nc)?;
                    // a stand-in downstream consumer of the policy latents
                    let zw = g.mul_const(out.z_policy, &w_z)?;
                    let zs = g.sum(zw);
                    g.add(out.total.unwrap(), zs)
                },
                1e-5,
            )
            .unwrap()
        };
        if let Some(st) = ts.student {
            let err = check(&mut store, ts, &st.params());
            assert!(err < 1e-4, "{v:?} student: {err}");
        }
        if let Some(te) = ts.teacher {
            // the stop-gradient hides the alignment term from the teacher, so
            // compare against the objective the teacher actually follows
            let mut teacher_view = ts;
            teacher_view.weights.align = 0.0;
            let err = check(&mut store, teacher_view, &te.params());
            assert!(err < 1e-4, "{v:?} teacher: {err}");
        }
    }
}

fn dense_np(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = store.get(store.id(&format!("{name}.w")).unwrap());
    let b = store.get(store.id(&format!("{name}.b")).unwrap());
    (0..w.cols)
        .map(|j| b.data[j] + (0..w.rows).map(|i| x[i] * w.at(i, j)).sum::<f64>())
        .collect()
}

/// (recon, kl_prior, mu, logvar) for one row, recomputed by hand.
fn vae_row_np(store: &ParamStore, name: &str, x: &[f64], noise: &[f64]) -> (f64, f64, Vec<f64>, Vec<f64>) {
    let h: Vec<f64> = dense_np(store, &format!("{name}.enc.0"), x).iter().map(|v| v.tanh()).collect();
    let out = dense_np(store, &format!("{name}.enc.1"), &h);
    let k = out.len() / 2;
    let mu = out[..k].to_vec();
    let lv: Vec<f64> = out[k..].iter().map(|v| v.clamp(-10.0, 10.0)).collect();
    let z: Vec<f64> = (0..k).map(|i| mu[i] + (0.5 * lv[i]).exp() * noise[i]).collect();
    let hd: Vec<f64> = dense_np(store, &format!("{name}.dec.0"), &z).iter().map(|v| v.tanh()).collect();
    let xh = dense_np(store, &format!("{name}.dec.1"), &hd);
    let recon = 0.5 * x.iter().zip(&xh).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let g = LatentGaussian { mu: mu.clone(), logvar: lv.clone() };
    (recon, gaussian_kl(&g, &LatentGaussian::standard(k)), mu, lv)
}

#[test]
fn total_matches_hand_recomputation() {
    let (store, ts) = small_ts(Variant::Full, 21);
    let mut inp = ts_inputs(22, 2);
    inp.w = vec![0.5, 0.5];
    let mut g = Graph::new();
    let x = g.input(inp.x.clone());
    let e = g.input(inp.e.clone());
    let out = ts.loss_graph(&mut g, &store, x, Some(e), &inp.w, &inp.ns, &inp.nc).unwrap();
    let mut expect = 0.0;
    for r in 0..2 {
        let (rs, ks, mu_s, lv_s) = vae_row_np(&store, "ts.student", inp.x.row(r), inp.ns.row(r));
        let (rc, kc, mu_c, lv_c) = vae_row_np(&store, "ts.teacher", inp.e.row(r), inp.nc.row(r));
        let align = gaussian_kl(
            &LatentGaussian { mu: mu_c, logvar: lv_c },
            &LatentGaussian { mu: mu_s, logvar: lv_s },
        );
        expect += 0.5 * (rs + ks + rc + kc + align);
    }
    let got = g.value(out.total.unwrap()).item();
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
}

#[test]
fn identical_latents_give_zero_alignment() {
    // teacher gets a copy of the student's weights and the same input
    let dims = TsDims { x: 5, e: 5, hidden: 4, latent: 3 };
    let mut store = ParamStore::new(2);
    let ts = TeacherStudent::new(&mut store, Variant::Full, dims, TsWeights::default());
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        if let Some(rest) = name.strip_prefix("ts.teacher") {
            let src = store.get(store.id(&format!("ts.student{rest}")).unwrap()).clone();
            *store.get_mut(id) = src;
        }
    }
    let inp = ts_inputs(4, 3);
    let mut g = Graph::new();
    let x = g.input(inp.e.clone());
    let e = g.input(inp.e.clone());
    let out = ts.loss_graph(&mut g, &store, x, Some(e), &inp.w, &inp.ns, &inp.nc).unwrap();
    assert_eq!(g.value(out.align.unwrap()).item(), 0.0);
}

#[test]
fn reconstruction_improves_under_training() {
    let (mut store, mut ts) = small_ts(Variant::NoT, 31);
    // a light prior lets the decoder use the latent on this tiny batch
    ts.weights.kl_s = 0.01;
    let inp = ts_inputs(32, 8);
    let mut adam = Adam::new(&store, AdamConfig { lr: 1e-2, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..300 {
        let ns = normal_mat(&mut rng, 8, 3);
        let mut g = Graph::new();
        let x = g.input(inp.x.clone());
        let out = ts.loss_graph(&mut g, &store, x, None, &[0.125; 8], &ns, &ns).unwrap();
        last = g.value(out.recon_s.unwrap()).item();
        first.get_or_insert(last);
        g.backward(out.total.unwrap()).unwrap();
        adam.step(&mut store, &g.param_grads());
    }
    assert!(last < 0.8 * first.unwrap(), "{first:?} -> {last}");
}

// ---- provider client against recorded fixtures ----

/// Serves canned responses; records each request line and body.
fn fixture_server(routes: Vec<(&'static str, u16, String)>) -> (String, Arc<Mutex<Vec<(String, String)>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let log = Arc::new(Mutex::new(Vec::new()));
    let seen = log.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            if reader.read_line(&mut line).is_err() || line.is_empty() {
                continue;
            }
            let mut len = 0usize;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h == "\r\n" || h.is_empty() {
                    break;
                }
                if let Some((k, v)) = h.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let target = line.split_whitespace().nth(1).unwrap_or("").to_string();
            seen.lock().unwrap().push((line.trim().to_string(), String::from_utf8(body).unwrap()));
            let (status, resp) = routes
                .iter()
                .find(|(p, _, _)| *p == target)
                .map(|(_, s, b)| (*s, b.clone()))
                .unwrap_or((404, "not found".into()));
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{resp}",
                resp.len()
            );
        }
    });
    (format!("http://{addr}"), log)
}

#[test]
fn http_client_consumes_recorded_fixtures() {
    let info = bridge_fixture("info.json");
    let request = bridge_fixture("embed_request.json");
    let response = bridge_fixture("embed_response.json");
    let (url, log) = fixture_server(vec![("/info", 200, info), ("/embed", 200, response.clone())]);

    // the request names the model the service reported
    let client = HttpProvider::connect_reported(&url).unwrap();
    assert_eq!(client.dim(), 8);
    assert_eq!(client.model(), "jina-embeddings-v3");
    let recorded: serde_json::Value = serde_json::from_str(&request).unwrap();
    let texts: Vec<String> = serde_json::from_value(recorded["texts"].clone()).unwrap();
    let got = client.embed(&texts).unwrap();

    let expect: EmbedResponse = serde_json::from_str(&response).unwrap();
    assert_eq!(got, expect.embeddings);
    // duplicate texts map to identical vectors
    assert_eq!(got[0], got[1]);

    let log = log.lock().unwrap();
    assert!(log[0].0.starts_with("GET /info"));
    assert!(log[1].0.starts_with("POST /embed"));
    let sent: serde_json::Value = serde_json::from_str(&log[1].1).unwrap();
    assert_eq!(sent, recorded);
}

#[test]
fn http_client_batches_requests() {
    let info = bridge_fixture("info.json");
    let one = r#"{"dim":8,"embeddings":[[1,0,0,0,0,0,0,0]]}"#.to_string();
    let (url, log) = fixture_server(vec![("/info", 200, info), ("/embed", 200, one)]);
    let client = HttpProvider::connect(&url, "m").unwrap().with_batch(1);
    let got = client.embed(&["a".into(), "b".into(), "c".into()]).unwrap();
    assert_eq!(got.len(), 3);
    assert_eq!(log.lock().unwrap().len(), 4);
}

#[test]
fn http_client_rejects_bad_responses() {
    let info = bridge_fixture("info.json");
    let wrong_dim = r#"{"dim":4,"embeddings":[[0,0,0,0]]}"#.to_string();
    let (url, _) = fixture_server(vec![("/info", 200, info.clone()), ("/embed", 200, wrong_dim)]);
    let c = HttpProvider::connect(&url, "m").unwrap();
    assert!(matches!(c.embed(&["x".into()]), Err(TsError::Protocol(_))));

    let (url, _) = fixture_server(vec![("/info", 200, info), ("/embed", 500, "boom".into())]);
    let c = HttpProvider::connect(&url, "m").unwrap();
    assert!(matches!(c.embed(&["x".into()]), Err(TsError::Protocol(_))));

    let (url, _) = fixture_server(vec![("/info", 200, r#"{"dims":8}"#.into())]);
    assert!(matches!(HttpProvider::connect(&url, "m"), Err(TsError::Protocol(_))));

    let closed = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = closed.local_addr().unwrap();
    drop(closed);
    assert!(matches!(
        HttpProvider::connect(&format!("http://{addr}"), "m"),
        Err(TsError::Transport(_))
    ));
}

#[test]
fn wire_schema_validation() {
    assert_eq!(parse_info(r#"{"dim":1024}"#).unwrap().dim, 1024);
    assert!(parse_info(r#"{"dim":0}"#).is_err());
    assert!(parse_info(r#"{"dim":8,"extra":1}"#).is_err());
    assert!(parse_embed(r#"{"dim":2,"embeddings":[[1,2]]}"#, 2, 1).is_ok());
    assert!(parse_embed(r#"{"dim":2,"embeddings":[[1,2]]}"#, 2, 2).is_err());
    assert!(parse_embed(r#"{"dim":2,"embeddings":[[1]]}"#, 2, 1).is_err());
    assert!(parse_embed(r#"{"dim":2,"embeddings":[[1,2]],"x":0}"#, 2, 1).is_err());
    let req = EmbedRequest { model: "m", texts: &["a".to_string()] };
    assert_eq!(serde_json::to_string(&req).unwrap(), r#"{"model":"m","texts":["a"]}"#);
}

// ---- cache ----

struct Counting {
    inner: HashProvider,
    calls: AtomicUsize,
    texts: AtomicUsize,
}

impl EmbeddingProvider for Counting {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn tag(&self) -> String {
        self.inner.tag()
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, TsError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.texts.fetch_add(texts.len(), Ordering::SeqCst);
        self.inner.embed(texts)
    }
}

fn doc(text: &str) -> PromptDoc {
    use sha2::{Digest, Sha256};
    PromptDoc {
        text: text.to_string(),
        intersection: "I".into(),
        phase: 0,
        input_hash: String::new(),
        text_hash: Sha256::digest(text.as_bytes()).into(),
    }
}

#[test]
fn cache_embeds_each_text_at_most_once() {
    let p = Counting { inner: HashProvider { seed: 1, dim: 16 }, calls: AtomicUsize::new(0), texts: AtomicUsize::new(0) };
    let mut c = EmbeddingCache::in_memory(100);
    let docs: Vec<PromptDoc> = ["a", "b", "a", "c", "b"].iter().map(|t| doc(t)).collect();
    let v = c.get_many(&docs, &p).unwrap();
    assert_eq!(p.texts.load(Ordering::SeqCst), 3);
    assert_eq!(v[0], v[2]);
    assert_eq!(*v[3], hash_embed_dim("c", 1, 16));
    let again = c.get_many(&docs, &p).unwrap();
    assert_eq!(again, v);
    assert_eq!(p.calls.load(Ordering::SeqCst), 1);
}

#[test]
fn cache_memory_is_bounded() {
    let p = HashProvider { seed: 0, dim: 4 };
    let mut c = EmbeddingCache::in_memory(3);
    for i in 0..10 {
        c.get_many(&[doc(&i.to_string())], &p).unwrap();
        assert!(c.len() <= 3);
    }
    assert_eq!(c.provider_texts, 10);
    c.get_many(&[doc("9")], &p).unwrap();
    assert_eq!(c.provider_texts, 10);
    c.get_many(&[doc("0")], &p).unwrap();
    assert_eq!(c.provider_texts, 11);
}

#[test]
fn disk_cache_survives_reopen_and_torn_tail() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.bin");
    let p = Counting { inner: HashProvider { seed: 3, dim: 8 }, calls: AtomicUsize::new(0), texts: AtomicUsize::new(0) };
    let docs: Vec<PromptDoc> = ["x", "y", "z"].iter().map(|t| doc(t)).collect();
    let first = {
        let mut c = EmbeddingCache::with_disk(1, &path).unwrap();
        c.get_many(&docs, &p).unwrap()
    };
    // simulate an interrupted append
    std::fs::OpenOptions::new().append(true).open(&path).unwrap().write_all(&[7u8; 40]).unwrap();
    let mut c = EmbeddingCache::with_disk(1, &path).unwrap();
    assert_eq!(c.disk_entries(), 3);
    let second = c.get_many(&docs, &p).unwrap();
    assert_eq!(first, second);
    assert_eq!(p.texts.load(Ordering::SeqCst), 3);
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 3 * (36 + 8 * 8));
    c.get_many(&[doc("w")], &p).unwrap();
    assert_eq!(EmbeddingCache::with_disk(1, &path).unwrap().disk_entries(), 4);
}
