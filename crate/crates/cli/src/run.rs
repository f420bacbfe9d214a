use std::collections::{BTreeMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use dsqn_core::checkpoint::{Checkpoint, CheckpointError};
use dsqn_core::encoding::EncoderKind;
use dsqn_core::env::make_env;
use dsqn_core::network::SpikingNetwork;
use dsqn_core::neuron::{NeuronModel, SurrogateKind, SurrogateSpec};
use dsqn_core::rl::{build_network, evaluate, train as train_agent, EpisodeRecord, EvalConfig, RlError, TrainObserver};
use dsqn_core::Rng;

use crate::config::RunConfig;
use crate::{runtime, CliError, EvalArgs, PlotArgs, TrainArgs};

pub fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Usage(format!("bad seed list `{s}` (use `1..5` or `1,2,3`)"));
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        s.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn apply_overrides(mut cfg: RunConfig, a: &TrainArgs) -> Result<RunConfig, CliError> {
    if let Some(env) = &a.env {
        cfg.env = env.clone();
    }
    if let Some(model) = &a.model {
        cfg.neuron.model = model.clone();
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if a.trainable_threshold {
        cfg.neuron.trainable_pos = true;
        if cfg.model()? == NeuronModel::TernaryAsymmetric {
            cfg.neuron.trainable_neg = Some(true);
        }
    }
    if let Some(steps) = a.steps {
        cfg.agent.total_steps = steps;
    }
    if let Some(lr) = a.lr {
        cfg.agent.learning_rate = lr;
    }
    if let Some(window) = a.window {
        cfg.agent.window = window;
    }
    if let Some(s) = &a.surrogate {
        let kind: SurrogateKind = s.parse().map_err(|e: dsqn_core::neuron::NeuronError| CliError::Usage(e.to_string()))?;
        cfg.agent.surrogate = match kind {
            SurrogateKind::Atan => SurrogateSpec::atan(2.0),
            SurrogateKind::Sigmoid => SurrogateSpec::sigmoid(25.0),
            SurrogateKind::Ste => SurrogateSpec::ste(),
        };
    }
    if let Some(out) = &a.out {
        cfg.out_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn run_dir(cfg: &RunConfig) -> PathBuf {
    let mut name = format!("{}-{}", cfg.env, cfg.neuron.model);
    if cfg.neuron.trainable_pos {
        name.push_str("-trainable");
    }
    cfg.out_root().join(format!("{name}-seed{}", cfg.seed))
}

struct RunObserver {
    metrics: File,
    best_path: PathBuf,
    meta: BTreeMap<String, String>,
}

impl TrainObserver for RunObserver {
    fn episode(&mut self, record: &EpisodeRecord) -> Result<(), RlError> {
        let mut line = serde_json::to_string(record).map_err(|e| RlError::Observer(e.to_string()))?;
        line.push('\n');
        self.metrics
            .write_all(line.as_bytes())
            .and_then(|_| self.metrics.flush())
            .map_err(|e| RlError::Observer(format!("metrics.jsonl: {e}")))
    }

    fn new_best(&mut self, net: &SpikingNetwork<f32>, score: f64, episode: u64) -> Result<(), RlError> {
        let mut ckpt = Checkpoint::new(net.clone());
        ckpt.meta = self.meta.clone();
        ckpt.meta.insert("best_score".into(), score.to_string());
        ckpt.meta.insert("best_episode".into(), episode.to_string());
        ckpt.save(&self.best_path).map_err(|e| RlError::Observer(e.to_string()))
    }
}

fn run_meta(cfg: &RunConfig) -> BTreeMap<String, String> {
    let a = &cfg.agent;
    let encoder = serde_json::to_value(a.encoder).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    BTreeMap::from([
        ("env".into(), cfg.env.clone()),
        ("seed".into(), cfg.seed.to_string()),
        ("window".into(), a.window.to_string()),
        ("encoder".into(), encoder),
        ("eval_epsilon".into(), a.eval_epsilon.to_string()),
    ])
}

fn train_one(cfg: RunConfig) -> Result<String, CliError> {
    let dir = run_dir(&cfg);
    let metrics_path = dir.join("metrics.jsonl");
    if metrics_path.exists() {
        return Err(CliError::Usage(format!("{} already holds a run", dir.display())));
    }
    fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(runtime)?;

    let mut env = make_env(&cfg.env).map_err(|e| CliError::Usage(e.to_string()))?;
    let arch = cfg.architecture(env.obs_shape(), env.n_actions());
    let root = Rng::new(cfg.seed);
    let mut net = build_network(arch, cfg.kind()?, &root).map_err(|e| CliError::Usage(e.to_string()))?;
    let params = cfg.neuron_params()?;
    for layer in net.layers_mut() {
        layer.neuron = params;
    }

    let metrics = OpenOptions::new().create(true).append(true).open(&metrics_path).map_err(runtime)?;
    let meta = run_meta(&cfg);
    let mut observer = RunObserver {
        metrics,
        best_path: dir.join("best.ckpt"),
        meta: meta.clone(),
    };
    let outcome = train_agent(env.as_mut(), net, &cfg.agent, &root, &mut observer).map_err(runtime)?;

    let mut best = Checkpoint::new(outcome.best);
    best.meta = meta.clone();
    if let (Some(score), Some(ep)) = (outcome.best_score, outcome.best_episode) {
        best.meta.insert("best_score".into(), score.to_string());
        best.meta.insert("best_episode".into(), ep.to_string());
    }
    best.save(&dir.join("best.ckpt")).map_err(runtime)?;
    let mut last = Checkpoint::new(outcome.last);
    last.meta = meta;
    last.save(&dir.join("last.ckpt")).map_err(runtime)?;

    let best_text = outcome.best_score.map_or("n/a".to_string(), |s| format!("{s:.3}"));
    Ok(format!(
        "{}: {} episodes, {} updates, best running-mean return {best_text}",
        dir.display(),
        outcome.episodes.len(),
        outcome.updates
    ))
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let base = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = apply_overrides(base, a)?.resolve()?;
    let seeds = match &a.seeds {
        Some(s) => parse_seeds(s)?,
        None => vec![cfg.seed],
    };
    let results: Vec<Result<String, CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let mut c = cfg.clone();
                c.seed = seed;
                scope.spawn(move || train_one(c))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(runtime("training thread panicked"))))
            .collect()
    });
    let mut first_err = None;
    for r in results {
        match r {
            Ok(line) => println!("{line}"),
            Err(e) => {
                eprintln!("error: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| match e {
        CheckpointError::Io(io) => CliError::Usage(format!("cannot read checkpoint {}: {io}", path.display())),
        other => CliError::Usage(format!("{}: {other}", path.display())),
    })
}

fn meta_or<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str, default: T) -> T {
    ckpt.meta.get(key).and_then(|v| v.parse().ok()).unwrap_or(default)
}

/// Evaluation settings recorded with a checkpoint, with the agent defaults
/// as fallback.
pub fn eval_config(ckpt: &Checkpoint) -> EvalConfig {
    let encoder = ckpt
        .meta
        .get("encoder")
        .and_then(|v| v.parse::<EncoderKind>().ok())
        .unwrap_or_default();
    EvalConfig {
        window: meta_or(ckpt, "window", 20),
        encoder,
        epsilon: meta_or(ckpt, "eval_epsilon", 0.05),
    }
}

pub fn checkpoint_env(ckpt: &Checkpoint, flag: Option<&String>) -> String {
    flag.cloned()
        .or_else(|| ckpt.meta.get("env").cloned())
        .unwrap_or_else(|| "catch".into())
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    if a.episodes == 0 {
        return Err(CliError::Usage("--episodes must be at least 1".into()));
    }
    let ckpt = load_checkpoint(&a.ckpt)?;
    let env_name = checkpoint_env(&ckpt, a.env.as_ref());
    let mut env = make_env(&env_name).map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = eval_config(&ckpt);
    let result = evaluate(&ckpt.network, env.as_mut(), a.episodes, &cfg, &Rng::new(a.seed)).map_err(runtime)?;

    let dir = a
        .out
        .clone()
        .unwrap_or_else(|| a.ckpt.parent().map(Path::to_path_buf).unwrap_or_default());
    fs::create_dir_all(&dir).map_err(runtime)?;
    let mut w = csv::Writer::from_path(dir.join("eval.csv")).map_err(runtime)?;
    w.write_record(["episode", "return"]).map_err(runtime)?;
    for (i, r) in result.returns.iter().enumerate() {
        w.write_record([i.to_string(), r.to_string()]).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    println!(
        "{env_name}: mean return {:.3} ± {:.3} over {} episodes",
        result.mean, result.std, a.episodes
    );
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpisodeRecord>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(runtime)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| runtime(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Trailing moving average; early entries average what is available.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let mut buf = VecDeque::with_capacity(window);
    let mut sum = 0.0;
    values
        .iter()
        .map(|&v| {
            buf.push_back(v);
            sum += v;
            if buf.len() > window {
                sum -= buf.pop_front().unwrap_or(0.0);
            }
            sum / buf.len() as f64
        })
        .collect()
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<usize, CliError> {
    let mut w = csv::Writer::from_path(path).map_err(runtime)?;
    w.write_record(header).map_err(runtime)?;
    let mut n = 0;
    for row in rows {
        w.write_record(&row).map_err(runtime)?;
        n += 1;
    }
    w.flush().map_err(runtime)?;
    Ok(n)
}

pub fn plotdata(a: &PlotArgs) -> Result<(), CliError> {
    if a.smooth == 0 {
        return Err(CliError::Usage("--smooth must be at least 1".into()));
    }
    let records = read_metrics(&a.run_dir.join("metrics.jsonl"))?;
    let out = a.out.clone().unwrap_or_else(|| a.run_dir.join("plots"));
    fs::create_dir_all(&out).map_err(runtime)?;

    let returns: Vec<f64> = records.iter().map(|r| r.ret).collect();
    let smooth = moving_average(&returns, a.smooth);
    let n_ret = write_csv(
        &out.join("returns.csv"),
        &["episode", "step", "return", "return_smoothed"],
        records
            .iter()
            .zip(&smooth)
            .map(|(r, s)| vec![r.episode.to_string(), r.step.to_string(), r.ret.to_string(), s.to_string()]),
    )?;
    write_csv(
        &out.join("gradnorm.csv"),
        &["episode", "step", "grad_norm"],
        records
            .iter()
            .filter_map(|r| r.grad_norm_avg.map(|g| vec![r.episode.to_string(), r.step.to_string(), g.to_string()])),
    )?;
    let per_layer = |get: fn(&EpisodeRecord) -> &Vec<f64>| {
        records
            .iter()
            .flat_map(move |r| {
                get(r)
                    .iter()
                    .enumerate()
                    .map(move |(l, v)| vec![r.episode.to_string(), r.step.to_string(), l.to_string(), v.to_string()])
            })
            .collect::<Vec<_>>()
    };
    write_csv(&out.join("v_th_n.csv"), &["episode", "step", "layer", "v_th_n"], per_layer(|r| &r.v_th_n_by_layer))?;
    write_csv(&out.join("v_th_p.csv"), &["episode", "step", "layer", "v_th_p"], per_layer(|r| &r.v_th_p_by_layer))?;
    println!("{}: {n_ret} episodes -> {}", a.run_dir.display(), out.display());
    Ok(())
}
