use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use dsqn_core::analysis::{
    binary_entropy, entropy_gain, expected_spike, expected_spike_sensitivity, expected_surrogate_grad,
    gaussianity_test, isometry_measure, monte_carlo_surrogate_grad, ou_simulate, relu_reference, spike_balance,
    spike_probs, ternary_entropy, GaussianSpec, OuSpec, Region,
};
use dsqn_core::checkpoint::Checkpoint;
use dsqn_core::env::make_env;
use dsqn_core::network::{Architecture, SpikeMode, SpikingNetwork, Tape};
use dsqn_core::neuron::{NeuronKind, NeuronModel, NeuronParams, SurrogateSpec};
use dsqn_core::rl::EvalConfig;
use dsqn_core::{Rng, Tensor};

use crate::config::default_out_root;
use crate::run::{checkpoint_env, eval_config};
use crate::{runtime, AnalyzeCommand, CliError};

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Debug, Args)]
pub struct EntropyArgs {
    /// Firing-rate sweep `start:stop:step`.
    #[arg(long, default_value = "0.05:0.5:0.05")]
    pub r: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradArgs {
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub mean: f64,
    #[arg(long, default_value_t = 1.0)]
    pub std: f64,
    #[arg(long, default_value_t = 1.0)]
    pub v_th_p: f64,
    /// Negative threshold of the asymmetric model.
    #[arg(long, default_value_t = 2.0)]
    pub v_th_n: f64,
    /// Monte-Carlo samples per row.
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MembraneArgs {
    /// Membrane time constant, in ms (`20` or `20ms`).
    #[arg(long, default_value = "20ms")]
    pub tau: String,
    #[arg(long, default_value_t = 100_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 256)]
    pub inputs: usize,
    /// Step in ms; defaults to tau/50.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    pub v_reset: f64,
    /// Std of the input weights before their drift is removed.
    #[arg(long, default_value_t = 0.02)]
    pub weight_std: f64,
    /// Recorded times, evenly spaced up to 2 tau.
    #[arg(long, default_value_t = 20)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NetArgs {
    /// Checkpoint to analyse; a freshly initialised network otherwise.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub env: Option<String>,
    /// Model of the fresh network when no checkpoint is given.
    #[arg(long, default_value = "datsqn")]
    pub model: String,
    /// Observations in the batch.
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BalanceArgs {
    #[command(flatten)]
    pub net: NetArgs,
    /// Hidden layer whose spike map is counted; all layers when absent.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub y0: usize,
    #[arg(long, default_value_t = 0)]
    pub x0: usize,
    /// Window height; the full map when absent.
    #[arg(long)]
    pub kh: Option<usize>,
    #[arg(long)]
    pub kw: Option<usize>,
}

pub fn run(cmd: &AnalyzeCommand) -> Result<(), CliError> {
    match cmd {
        AnalyzeCommand::Entropy(a) => entropy(a),
        AnalyzeCommand::Gradmc(a) => gradmc(a),
        AnalyzeCommand::Membrane(a) => membrane(a),
        AnalyzeCommand::Isometry(a) => isometry(a),
        AnalyzeCommand::Balance(a) => balance(a),
    }
}

fn output(out: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    let path = out
        .clone()
        .unwrap_or_else(|| default_out_root().join("analysis").join(format!("{name}.csv")));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    Ok(path)
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(runtime)?;
    w.write_record(header).map_err(runtime)?;
    for row in rows {
        w.write_record(row).map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

pub fn parse_range(s: &str) -> Result<Vec<f64>, CliError> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("bad range `{s}` (use start:stop:step)")))?;
    let [start, stop, step] = parts[..] else {
        return Err(usage(format!("bad range `{s}` (use start:stop:step)")));
    };
    if !(step > 0.0) || stop < start {
        return Err(usage(format!("bad range `{s}`: need step > 0 and stop >= start")));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + step * i as f64).collect())
}

fn entropy(a: &EntropyArgs) -> Result<(), CliError> {
    let rates = parse_range(&a.r)?;
    if rates.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
        return Err(usage("firing rates must lie in (0, 1]"));
    }
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for r in rates {
        let hb = binary_entropy(r).map_err(usage)?;
        let ht = ternary_entropy(r / 2.0, r / 2.0).map_err(usage)?;
        let gain = entropy_gain(r / 2.0, r / 2.0);
        worst = worst.max((ht - hb - r).abs());
        rows.push(vec![r.to_string(), hb.to_string(), ht.to_string(), (ht - hb).to_string(), gain.to_string()]);
    }
    let path = output(&a.out, "entropy")?;
    write_rows(&path, &["r", "h_binary", "h_ternary", "h_diff", "gain_theory"], &rows)?;
    println!("entropy: {} rates, max |H_T - H_B - r| = {worst:.3e} -> {}", rows.len(), path.display());
    Ok(())
}

fn gradmc(a: &GradArgs) -> Result<(), CliError> {
    let g = GaussianSpec::new(a.mean, a.std).map_err(usage)?;
    if a.samples < 2 || !(a.v_th_p > 0.0 && a.v_th_n > 0.0) {
        return Err(usage("need samples >= 2 and positive thresholds"));
    }
    let mut rng = Rng::new(a.seed).derive("gradmc");
    let mut rows = Vec::new();
    for model in [NeuronModel::Binary, NeuronModel::TernarySymmetric, NeuronModel::TernaryAsymmetric] {
        let p = NeuronParams {
            v_th_p: a.v_th_p,
            v_th_n: a.v_th_n,
            ..NeuronParams::<f64>::for_model(model)
        };
        let (plus, zero, minus) = spike_probs(&g, model, &p);
        let es = expected_spike(&g, model, &p);
        let sens = expected_spike_sensitivity(&g, model, &p);
        for spec in [SurrogateSpec::atan(2.0), SurrogateSpec::sigmoid(25.0), SurrogateSpec::ste()] {
            let q = expected_surrogate_grad(&g, model, &p, &spec).map_err(runtime)?;
            let (mc, se) = monte_carlo_surrogate_grad(&g, model, &p, &spec, a.samples, &mut rng);
            println!(
                "{model} {:?}: E[s] {es:.6}, dE[s]/dm0 {sens:.6}, E[GE] {q:.6} (MC {mc:.6} +- {se:.1e})",
                spec.kind
            );
            rows.push(
                [
                    model.to_string(),
                    format!("{:?}", spec.kind).to_lowercase(),
                    plus.to_string(),
                    zero.to_string(),
                    minus.to_string(),
                    es.to_string(),
                    sens.to_string(),
                    q.to_string(),
                    mc.to_string(),
                    se.to_string(),
                ]
                .to_vec(),
            );
        }
    }
    let path = output(&a.out, "gradmc")?;
    write_rows(
        &path,
        &[
            "model",
            "surrogate",
            "p_plus",
            "p_zero",
            "p_minus",
            "expected_spike",
            "mean_shift_sensitivity",
            "expected_grad",
            "expected_grad_mc",
            "mc_stderr",
        ],
        &rows,
    )?;
    println!("gradmc: m0 {} sigma {} -> {}", a.mean, a.std, path.display());
    Ok(())
}

pub fn parse_ms(s: &str) -> Result<f64, CliError> {
    let v: f64 = s
        .trim()
        .trim_end_matches("ms")
        .trim()
        .parse()
        .map_err(|_| usage(format!("bad time `{s}` (e.g. 20ms)")))?;
    if !(v > 0.0) {
        return Err(usage(format!("time must be positive, got `{s}`")));
    }
    Ok(v)
}

/// Inputs with uniform rates and Gaussian weights, minus the weight
/// component along the rates so the net drift is zero.
pub fn balanced_inputs(n: usize, weight_std: f64, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let rates: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let mut weights: Vec<f64> = (0..n).map(|_| weight_std * rng.normal()).collect();
    let drift: f64 = weights.iter().zip(&rates).map(|(w, r)| w * r).sum();
    let norm: f64 = rates.iter().map(|r| r * r).sum();
    if norm > 0.0 {
        for (w, r) in weights.iter_mut().zip(&rates) {
            *w -= drift * r / norm;
        }
    }
    (weights, rates)
}

fn membrane(a: &MembraneArgs) -> Result<(), CliError> {
    let tau = parse_ms(&a.tau)?;
    if a.inputs == 0 || a.points == 0 {
        return Err(usage("need at least one input and one recorded point"));
    }
    let root = Rng::new(a.seed);
    let (weights, rates) = balanced_inputs(a.inputs, a.weight_std, &mut root.derive("inputs"));
    let spec = OuSpec {
        tau,
        v_reset: a.v_reset,
        v0: 0.0,
        weights,
        rates,
        dt: a.dt.unwrap_or(tau / 50.0),
    };
    let run = ou_simulate(&spec, a.trials, 2.0 * tau, a.points, &root).map_err(usage)?;
    let mut rows = Vec::new();
    for i in 0..run.times.len() {
        let t = run.times[i];
        let (mean, var) = run.moments(i);
        let ks = gaussianity_test(&run.values[i]).ok().map_or(String::new(), |k| k.statistic.to_string());
        rows.push(vec![
            t.to_string(),
            mean.to_string(),
            var.to_string(),
            spec.closed_form_mean(t).to_string(),
            spec.closed_form_variance(t).to_string(),
            spec.exact_mean(run.steps[i]).to_string(),
            spec.exact_variance(run.steps[i]).to_string(),
            ks,
        ]);
    }
    let path = output(&a.out, "membrane")?;
    write_rows(
        &path,
        &["t_ms", "mean", "variance", "mean_theory", "variance_theory", "mean_exact", "variance_exact", "ks"],
        &rows,
    )?;
    let last = run.times.len() - 1;
    let (mean, var) = run.moments(last);
    let t = run.times[last];
    println!(
        "membrane at t = {t} ms: mean {mean:.5} vs theory {:.5}; variance {var:.5} vs theory {:.5} (exact {:.5}) -> {}",
        spec.closed_form_mean(t),
        spec.closed_form_variance(t),
        spec.exact_variance(run.steps[last]),
        path.display()
    );
    Ok(())
}

struct Subject {
    net: SpikingNetwork<f32>,
    env: String,
    eval: EvalConfig,
}

fn subject(a: &NetArgs) -> Result<Subject, CliError> {
    match &a.ckpt {
        Some(path) => {
            let ckpt = Checkpoint::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            let env = checkpoint_env(&ckpt, a.env.as_ref());
            let eval = eval_config(&ckpt);
            Ok(Subject {
                net: ckpt.network,
                env,
                eval,
            })
        }
        None => {
            let model: NeuronModel = a.model.parse().map_err(usage)?;
            let env = a.env.clone().unwrap_or_else(|| "catch".into());
            let e = make_env(&env).map_err(usage)?;
            let arch = Architecture::desk(e.obs_shape(), e.n_actions());
            let net = SpikingNetwork::init(arch, NeuronKind::fixed(model), &mut Rng::new(a.seed).derive("init"))
                .map_err(usage)?;
            Ok(Subject {
                net,
                env,
                eval: EvalConfig::from(&dsqn_core::rl::AgentConfig::default()),
            })
        }
    }
}

/// Encoded observations gathered by a uniformly random policy.
fn rollout_batch(s: &Subject, batch: usize, seed: u64) -> Result<Tensor<f32>, CliError> {
    if batch == 0 {
        return Err(usage("--batch must be at least 1"));
    }
    let mut env = make_env(&s.env).map_err(usage)?;
    let root = Rng::new(seed);
    let (mut env_rng, mut act_rng, mut enc_rng) = (root.derive("env"), root.derive("actions"), root.derive("encoder"));
    let mut obs = env.reset(&mut env_rng);
    let mut data = Vec::new();
    for _ in 0..batch {
        data.extend_from_slice(s.eval.encoder.encode(&obs, s.eval.window, &mut enc_rng).map_err(runtime)?.data());
        let step = env.step(act_rng.below(env.n_actions())).map_err(runtime)?;
        obs = if step.terminal { env.reset(&mut env_rng) } else { step.next_obs };
    }
    let [c, h, w] = env.obs_shape();
    Tensor::new(vec![batch, s.eval.window, c, h, w], data).map_err(runtime)
}

fn forward(s: &Subject, a: &NetArgs) -> Result<Tape<f32>, CliError> {
    let x = rollout_batch(s, a.batch, a.seed)?;
    let (_, tape) = s.net.forward(&x, SpikeMode::Hard).map_err(usage)?;
    Ok(tape)
}

fn isometry(a: &NetArgs) -> Result<(), CliError> {
    let s = subject(a)?;
    let tape = forward(&s, a)?;
    let stats = isometry_measure(&s.net, &tape, &SurrogateSpec::ste()).map_err(runtime)?;
    let relu = relu_reference(256, 256, 1000, &mut Rng::new(a.seed).derive("relu"));
    let mut rows = Vec::new();
    for (l, st) in stats.iter().enumerate() {
        let r = st.rate;
        println!(
            "layer {l}: r {r:.4}, phi {:.4} (1 - r = {:.4}), varphi {:.4} (r - r^2 = {:.4})",
            st.phi,
            1.0 - r,
            st.varphi,
            r - r * r
        );
        rows.push(vec![
            l.to_string(),
            r.to_string(),
            st.phi.to_string(),
            st.varphi.to_string(),
            (1.0 - r).to_string(),
            (r - r * r).to_string(),
        ]);
    }
    println!("relu reference: phi {:.4}, varphi {:.4}", relu.phi, relu.varphi);
    rows.push(vec![
        "relu".into(),
        String::new(),
        relu.phi.to_string(),
        relu.varphi.to_string(),
        "0.5".into(),
        "0.25".into(),
    ]);
    let path = output(&a.out, "isometry")?;
    write_rows(&path, &["layer", "r", "phi", "varphi", "phi_theory", "varphi_theory"], &rows)?;
    println!("isometry -> {}", path.display());
    Ok(())
}

fn balance(a: &BalanceArgs) -> Result<(), CliError> {
    let s = subject(&a.net)?;
    if !s.net.kind().model.is_ternary() {
        return Err(usage(format!("spike balance needs a ternary network, got {}", s.net.kind().model)));
    }
    let tape = forward(&s, &a.net)?;
    let layers: Vec<usize> = match a.layer {
        Some(l) => vec![l],
        None => (0..s.net.layers().len()).collect(),
    };
    let mut rows = Vec::new();
    for l in layers {
        let geometry = s
            .net
            .layers()
            .get(l)
            .map(|layer| layer.geometry)
            .ok_or_else(|| usage(format!("layer {l} out of bounds")))?;
        let [_, h, w] = geometry.out_map().unwrap_or([geometry.n_out(), 1, 1]);
        let region = Region {
            layer: l,
            y0: a.y0,
            x0: a.x0,
            kh: a.kh.unwrap_or(h.saturating_sub(a.y0)),
            kw: a.kw.unwrap_or(w.saturating_sub(a.x0)),
        };
        let b = spike_balance(&s.net, &tape, region).map_err(usage)?;
        let ratio = b.ratio.map_or(String::new(), |r| r.to_string());
        println!(
            "layer {l} window {}x{} at ({}, {}): {} positive, {} negative, ratio {}",
            region.kh,
            region.kw,
            region.y0,
            region.x0,
            b.pos,
            b.neg,
            if ratio.is_empty() { "n/a" } else { &ratio }
        );
        rows.push(vec![
            l.to_string(),
            region.y0.to_string(),
            region.x0.to_string(),
            region.kh.to_string(),
            region.kw.to_string(),
            b.pos.to_string(),
            b.neg.to_string(),
            ratio,
        ]);
    }
    let path = output(&a.net.out, "balance")?;
    write_rows(&path, &["layer", "y0", "x0", "kh", "kw", "pos", "neg", "ratio"], &rows)?;
    println!("balance -> {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        let r = parse_range("0.1:0.5:0.1").unwrap();
        assert_eq!(r.len(), 5);
        assert!((r[4] - 0.5).abs() < 1e-12);
        assert!(parse_range("0.5:0.1:0.1").is_err());
        assert!(parse_range("0.1:0.5").is_err());
        assert!(parse_range("0.1:0.5:0").is_err());
    }

    #[test]
    fn milliseconds() {
        assert_eq!(parse_ms("20ms").unwrap(), 20.0);
        assert_eq!(parse_ms("12.5").unwrap(), 12.5);
        assert!(parse_ms("-3ms").is_err());
        assert!(parse_ms("fast").is_err());
    }

    #[test]
    fn balanced_inputs_have_no_drift() {
        let (w, r) = balanced_inputs(64, 0.1, &mut Rng::new(1));
        let drift: f64 = w.iter().zip(&r).map(|(a, b)| a * b).sum();
        assert!(drift.abs() < 1e-12);
    }
}
