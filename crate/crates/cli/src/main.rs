use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use lats_core::eval::{render_table, run_seeds, write_report_csv, write_trace_csv, MetricsReport, MetricsTrace};
use lats_core::trainer::TrainLog;
use lats_core::ts::EmbeddingCache;
use lats_core::{
    build_grid, heterogeneous_fixture, load_checkpoint, load_demand, load_network, save_checkpoint, summarize,
    uniform_demand, ActionMode, Baseline, Controller, DemandSpec, Env, LatsModel, NetworkSpec, PolicyController, TrainConfig, Trainer, Variant,
};
use log::info;
use serde_json::json;

mod provider;

use provider::ProviderSpec;

#[derive(Parser)]
#[command(name = "lats", version, about = "Train, evaluate and ablate traffic signal controllers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a controller with PPO
    Train(TrainArgs),
    /// Evaluate a checkpoint or a classical baseline over seeded episodes
    Eval(EvalArgs),
    /// Train and evaluate one or more ablation variants
    Ablate(AblateArgs),
    /// Write a network document
    GenNet(GenNetArgs),
    /// Write a uniform demand document for a network
    GenDemand(GenDemandArgs),
}

#[derive(Args, Clone)]
struct Scenario {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    demand: PathBuf,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[command(flatten)]
    scenario: Scenario,
    /// JSON training config; unspecified fields take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    variant: Option<String>,
    /// `hash`, `hash:<seed>[:<dim>]` or `http:<url>`
    #[arg(long, env = "LATS_PROVIDER", default_value = "hash")]
    provider: String,
    /// also write a checkpoint every N episodes
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Argmax,
    Sample,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    scenario: Scenario,
    #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
    checkpoint: Option<PathBuf>,
    /// fixed_time, greedy or max_pressure
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed_start: u64,
    #[arg(long, value_enum, default_value = "argmax")]
    mode: Mode,
    #[arg(long, default_value_t = lats_core::EPISODE_STEPS)]
    steps: usize,
    /// only needed for checkpoints of the teacher-fed variant
    #[arg(long, env = "LATS_PROVIDER")]
    provider: Option<String>,
    /// export fused phase features for cluster analysis
    #[arg(long)]
    phase_features: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// comma-separated subset of full,no_t,no_s,no_ts
    #[arg(long = "variants", value_delimiter = ',', default_value = "full,no_t,no_s,no_ts")]
    variants: Vec<String>,
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    #[arg(long, default_value_t = 1_000_000)]
    seed_start: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum NetKind {
    Grid,
    Single,
    Hetero,
}

#[derive(Args)]
struct GenNetArgs {
    #[arg(value_enum)]
    kind: NetKind,
    #[arg(long, default_value_t = 2)]
    rows: usize,
    #[arg(long, default_value_t = 2)]
    cols: usize,
    #[arg(long, default_value_t = 200.0)]
    lane_length: f64,
    #[arg(long, default_value_t = 3)]
    lanes: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDemandArgs {
    #[arg(long)]
    net: PathBuf,
    /// vehicles per hour entering at every origin
    #[arg(long)]
    rate: f64,
    #[arg(long, default_value_t = 3600.0)]
    end: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Bad input (exit 2) versus a failure while running (exit 3).
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Usage<T> {
    fn usage(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Usage<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Train(a) => {
            let out = Outputs::create(&a.out)?;
            let (net, demand) = load_scenario(&a.scenario)?;
            let config = train_config(&a)?;
            let provider = ProviderSpec::parse(&a.provider).usage()?;
            train(&a, config, net, demand, provider, &out)?;
            out.finish("train", config_seed(&a)?)
        }
        Cmd::Eval(a) => eval(a),
        Cmd::Ablate(a) => ablate(a),
        Cmd::GenNet(a) => {
            let net = match a.kind {
                NetKind::Grid => build_grid(a.rows, a.cols, a.lane_length, a.lanes),
                NetKind::Single => build_grid(1, 1, a.lane_length, a.lanes),
                NetKind::Hetero => heterogeneous_fixture(),
            }
            .usage()?;
            write_file(&a.out, net.render().as_bytes())?;
            info!("wrote {} intersections to {}", net.intersections.len(), a.out.display());
            Ok(())
        }
        Cmd::GenDemand(a) => {
            let net = read_net(&a.net)?;
            if !(a.rate.is_finite() && a.rate >= 0.0 && a.end > 0.0) {
                return Err(Failure::Usage(anyhow::anyhow!("rate must be ≥ 0 and end > 0")));
            }
            let d = uniform_demand(&net, a.rate, a.end);
            write_file(&a.out, d.render().as_bytes())?;
            Ok(())
        }
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .usage()
}

fn read_net(path: &Path) -> Result<NetworkSpec, Failure> {
    load_network(&read_text(path)?)
        .with_context(|| format!("invalid network {}", path.display()))
        .usage()
}

fn load_scenario(s: &Scenario) -> Result<(Arc<NetworkSpec>, DemandSpec), Failure> {
    let net = read_net(&s.net)?;
    let demand = load_demand(&read_text(&s.demand)?)
        .with_context(|| format!("invalid demand {}", s.demand.display()))
        .usage()?;
    demand
        .validate(&net)
        .with_context(|| format!("demand {} does not fit the network", s.demand.display()))
        .usage()?;
    Ok((Arc::new(net), demand))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::from_json(&read_text(p)?).usage()?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(e) = a.episodes {
        c.episodes = e;
    }
    if let Some(v) = &a.variant {
        c.variant = parse_variant(v)?;
    }
    c.validate().usage()?;
    Ok(c)
}

fn config_seed(a: &TrainArgs) -> Result<u64, Failure> {
    Ok(train_config(a)?.seed)
}

fn parse_variant(v: &str) -> Result<Variant, Failure> {
    Variant::parse(v).ok_or_else(|| Failure::Usage(anyhow::anyhow!("unknown variant `{v}` (full, no_t, no_s, no_ts)")))
}

/// Everything a command writes goes under one directory, listed in
/// `manifest.json` together with the invocation.
struct Outputs {
    dir: PathBuf,
    files: std::cell::RefCell<Vec<String>>,
    extra: std::cell::RefCell<serde_json::Map<String, serde_json::Value>>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Default::default(),
            extra: Default::default(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.files.borrow_mut().push(name.to_string());
        self.dir.join(name)
    }

    fn note(&self, key: &str, v: serde_json::Value) {
        self.extra.borrow_mut().insert(key.into(), v);
    }

    fn finish(&self, command: &str, seed: u64) -> Result<(), Failure> {
        let mut files = self.files.borrow().clone();
        files.sort();
        files.dedup();
        let doc = json!({
            "command": command,
            "argv": std::env::args().collect::<Vec<_>>(),
            "seed": seed,
            "version": env!("CARGO_PKG_VERSION"),
            "files": files,
            "details": serde_json::Value::Object(self.extra.borrow().clone()),
        });
        write_file(&self.dir.join("manifest.json"), serde_json::to_string_pretty(&doc)?.as_bytes())
    }
}

fn train(
    a: &TrainArgs,
    config: TrainConfig,
    net: Arc<NetworkSpec>,
    demand: DemandSpec,
    provider: ProviderSpec,
    out: &Outputs,
) -> Result<LatsModel, Failure> {
    let needs = config.variant.has_teacher();
    let provider = if needs { Some(provider.connect()?) } else { None };
    write_file(&out.path("config.json"), serde_json::to_string_pretty(&config)?.as_bytes())?;
    let mut trainer = Trainer::new(config.clone(), net, demand, provider.clone()).usage()?;
    if needs {
        let cache = EmbeddingCache::with_disk(config.cache_capacity, &out.path("embeddings.cache"))?;
        trainer = trainer.with_cache(cache);
    }
    let log_file = BufWriter::new(File::create(out.path("train_log.csv"))?);
    let mut log = TrainLog::new(log_file);
    let every = a.checkpoint_every.filter(|&k| k > 0);
    let mut saved: Option<anyhow::Error> = None;
    info!(
        "training {} for {} episodes on {} intersections",
        config.variant.as_str(),
        config.episodes,
        trainer.env.n_agents()
    );
    trainer.train(&mut log, |r, t| {
        info!(
            "episode {} reward {:.1} entropy {:.3} loss {:.4}",
            r.episode, r.mean_episode_reward, r.entropy, r.total
        );
        if let Some(k) = every {
            if t.episodes_done % k == 0 && saved.is_none() {
                let name = format!("checkpoint_ep{:04}.bin", t.episodes_done);
                if let Err(e) = save(&t.model, t.episodes_done, &out.path(&name)) {
                    saved = Some(e);
                }
            }
        }
    })?;
    if let Some(e) = saved {
        return Err(Failure::Runtime(e));
    }
    log.into_inner()?.flush()?;
    save(&trainer.model, trainer.episodes_done, &out.path("checkpoint.bin"))?;
    out.note("variant", json!(config.variant.as_str()));
    out.note("episodes", json!(trainer.episodes_done));
    out.note("provider", json!(trainer.model.provider_tag));
    if needs {
        out.note("provider_texts", json!(trainer.cache.provider_texts));
        out.note("cache_hits", json!(trainer.cache.hits));
    }
    Ok(trainer.model)
}

fn save(model: &LatsModel, episodes: usize, path: &Path) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    save_checkpoint(&model.to_checkpoint(episodes), &mut w)?;
    w.flush()?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let out = Outputs::create(&a.out)?;
    let (net, demand) = load_scenario(&a.scenario)?;
    if a.seeds == 0 || a.steps == 0 {
        return Err(Failure::Usage(anyhow::anyhow!("--seeds and --steps must be positive")));
    }
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|k| a.seed_start + k).collect();
    let mode = match a.mode {
        Mode::Argmax => ActionMode::Argmax,
        Mode::Sample => ActionMode::Sample,
    };
    let (report, traces) = match (&a.checkpoint, &a.baseline) {
        (Some(path), _) => {
            let mut f = File::open(path)
                .with_context(|| format!("cannot open checkpoint {}", path.display()))
                .usage()?;
            let ck = load_checkpoint(&mut f).usage()?;
            let model = LatsModel::from_checkpoint(&ck).usage()?;
            let provider = match (&a.provider, model.config.variant) {
                (Some(p), Variant::NoS) => Some(ProviderSpec::parse(p).usage()?.connect()?),
                (None, Variant::NoS) => {
                    return Err(Failure::Usage(anyhow::anyhow!(
                        "the no_s variant feeds teacher embeddings at execution; pass --provider"
                    )))
                }
                _ => None,
            };
            let dims = model.config.obs_dims();
            if !dims.fits(&net) {
                return Err(Failure::Usage(anyhow::anyhow!(
                    "network needs more padding than the checkpoint has (m_max {}, p_max {})",
                    dims.m_max,
                    dims.p_max
                )));
            }
            let mut env = Env::new(net, demand, dims, a.steps)?;
            let mut c = PolicyController::new(&model, provider, mode).usage()?;
            if a.phase_features {
                let sink = Box::new(BufWriter::new(File::create(out.path("phase_features.csv"))?));
                c = c.with_features(sink)?;
            }
            let traces = run_seeds(&mut c, &mut env, &seeds)?;
            c.finish_features()?;
            let variant = model.config.variant.as_str();
            out.note("variant", json!(variant));
            (summarize(&c.name(), Some(variant), &traces), traces)
        }
        (None, Some(b)) => {
            let mut b = Baseline::parse(b).ok_or_else(|| {
                Failure::Usage(anyhow::anyhow!("unknown baseline `{b}` (fixed_time, greedy, max_pressure)"))
            })?;
            let dims = lats_core::ObsDims {
                m_max: net.max_movements(),
                p_max: net.max_phases(),
            };
            let mut env = Env::new(net, demand, dims, a.steps)?;
            let traces = run_seeds(&mut b, &mut env, &seeds)?;
            (summarize(&b.name(), None, &traces), traces)
        }
        (None, None) => unreachable!("clap requires one of --checkpoint and --baseline"),
    };
    write_reports(&out, &[report], &traces)?;
    out.finish("eval", a.seed_start)
}

fn write_reports(out: &Outputs, reports: &[MetricsReport], traces: &[MetricsTrace]) -> Result<(), Failure> {
    write_report_csv(reports, BufWriter::new(File::create(out.path("report.csv"))?))?.flush()?;
    write_file(&out.path("report.json"), serde_json::to_string_pretty(reports)?.as_bytes())?;
    for t in traces {
        let name = format!("traces/{}_seed{}.csv", reports.last().map_or("run", |r| r.method.as_str()), t.seed);
        let path = out.path(&name);
        fs::create_dir_all(path.parent().expect("trace dir"))?;
        write_trace_csv(t, BufWriter::new(File::create(path)?))?.flush()?;
    }
    print!("{}", render_table(reports));
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<(), Failure> {
    let out = Outputs::create(&a.train.out)?;
    let (net, demand) = load_scenario(&a.train.scenario)?;
    let variants = a.variants.iter().map(|v| parse_variant(v)).collect::<Result<Vec<_>, _>>()?;
    let base = train_config(&a.train)?;
    let spec = ProviderSpec::parse(&a.train.provider).usage()?;
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|k| a.seed_start + k).collect();
    let mut reports = Vec::new();
    let mut all = Vec::new();
    for v in variants {
        let sub = Outputs::create(&out.dir.join(v.as_str()))?;
        let config = TrainConfig { variant: v, ..base.clone() };
        let model = train(&a.train, config.clone(), net.clone(), demand.clone(), spec.clone(), &sub)?;
        sub.finish("train", config.seed)?;
        let provider = if v == Variant::NoS { Some(spec.connect()?) } else { None };
        let mut env = Env::new(net.clone(), demand.clone(), config.obs_dims(), config.steps)?;
        let mut c = PolicyController::new(&model, provider, ActionMode::Argmax)?;
        let traces = run_seeds(&mut c, &mut env, &seeds)?;
        reports.push(summarize(&c.name(), Some(v.as_str()), &traces));
        all.extend(traces);
        out.files.borrow_mut().push(format!("{}/", v.as_str()));
    }
    write_report_csv(&reports, BufWriter::new(File::create(out.path("report.csv"))?))?.flush()?;
    write_file(&out.path("report.json"), serde_json::to_string_pretty(&reports)?.as_bytes())?;
    print!("{}", render_table(&reports));
    out.note("evaluated_episodes", json!(all.len()));
    out.finish("ablate", base.seed)
}
