//! Numerical checks on spiking-neuron statistics: spike-code entropy,
//! Gaussian membrane models, expected surrogate gradients, a subthreshold
//! membrane simulator, isometry of the spike Jacobian and excitatory /
//! inhibitory spike balance.

use std::f64::consts::{PI, SQRT_2};

use rand::RngCore;
use thiserror::Error;

use crate::neuron::{spike_grad, NeuronModel, NeuronParams, SurrogateKind, SurrogateSpec};
use crate::network::{SpikingNetwork, Tape};
use crate::rng::Rng;
use crate::tensor::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid parameters: {0}")]
    InvalidSpec(String),
    #[error("quadrature did not converge (estimate {estimate}, error bound {error})")]
    NonConvergent { estimate: f64, error: f64 },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("region out of bounds: {0}")]
    RegionOutOfBounds(String),
    #[error("spike balance needs a ternary network, got {0}")]
    NotTernary(NeuronModel),
    #[error("isometry is measured under the STE boxcar, got {0:?}")]
    NotBoxcar(SurrogateKind),
    #[error("tape does not belong to this network")]
    ForeignTape,
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

// ---------------------------------------------------------------- entropy

fn xlog2x(p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * p.log2()
    }
}

/// Shannon entropy in bits.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(AnalysisError::InvalidDistribution("empty".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(**p >= 0.0 && p.is_finite())) {
        return Err(AnalysisError::InvalidDistribution(format!("bad probability {p}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(AnalysisError::InvalidDistribution(format!("sums to {total}")));
    }
    Ok(-probs.iter().map(|&p| xlog2x(p)).sum::<f64>())
}

/// Entropy of a binary spike with firing rate `r`.
pub fn binary_entropy(r: f64) -> Result<f64> {
    entropy(&[r, 1.0 - r])
}

/// Entropy of a ternary spike firing `+1` with rate `r_pos` and `-1` with `r_neg`.
pub fn ternary_entropy(r_pos: f64, r_neg: f64) -> Result<f64> {
    entropy(&[r_pos, r_neg, 1.0 - r_pos - r_neg])
}

/// Entropy gained by splitting a binary rate `r = r1 + r2` over two signs:
/// `-r1 log2(r1/r) - r2 log2(r2/r)`.
pub fn entropy_gain(r1: f64, r2: f64) -> f64 {
    let r = r1 + r2;
    let term = |ri: f64| if ri == 0.0 { 0.0 } else { -ri * (ri / r).log2() };
    term(r1) + term(r2)
}

// ------------------------------------------------------ gaussian membrane

/// Gaussian model of the membrane potential at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSpec {
    pub mean: f64,
    pub std: f64,
}

impl GaussianSpec {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0 && std.is_finite()) || !mean.is_finite() {
            return Err(AnalysisError::InvalidSpec(format!(
                "gaussian needs finite mean and std > 0, got ({mean}, {std})"
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std;
        (-0.5 * z * z).exp() / (self.std * (2.0 * PI).sqrt())
    }

    /// `P(m >= x)`.
    pub fn upper_tail(&self, x: f64) -> f64 {
        0.5 * libm::erfc((x - self.mean) / (self.std * SQRT_2))
    }

    /// `P(m <= x)`.
    pub fn lower_tail(&self, x: f64) -> f64 {
        0.5 * libm::erfc((self.mean - x) / (self.std * SQRT_2))
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

fn thresholds(model: NeuronModel, p: &NeuronParams<f64>) -> (f64, f64) {
    (p.v_th_p, p.neg_threshold(model))
}

/// `(p_plus, p_zero, p_minus)` of one neuron whose membrane follows `g`.
pub fn spike_probs(g: &GaussianSpec, model: NeuronModel, p: &NeuronParams<f64>) -> (f64, f64, f64) {
    let (vp, vn) = thresholds(model, p);
    let plus = g.upper_tail(vp);
    let minus = if model.is_ternary() { g.lower_tail(-vn) } else { 0.0 };
    let zero = (g.lower_tail(vp) - minus).max(0.0);
    (plus, zero, minus)
}

/// `E[s]` under `g`.
pub fn expected_spike(g: &GaussianSpec, model: NeuronModel, p: &NeuronParams<f64>) -> f64 {
    let (plus, _, minus) = spike_probs(g, model, p);
    plus - minus
}

/// `dE[s]/dm0`: how the expected spike moves when the membrane mean shifts.
pub fn expected_spike_sensitivity(g: &GaussianSpec, model: NeuronModel, p: &NeuronParams<f64>) -> f64 {
    let (vp, vn) = thresholds(model, p);
    let pos = g.pdf(vp);
    if model.is_ternary() {
        pos + g.pdf(-vn)
    } else {
        pos
    }
}

// 15-point Kronrod nodes on [0, 1] with the embedded 7-point Gauss rule.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn kronrod15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let x = h * XGK[j];
        let pair = f(c - x) + f(c + x);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

const MAX_INTERVALS: usize = 20_000;

/// Adaptive Gauss-Kronrod integral of `f` over `[a, b]`, first split at
/// `breaks`, to absolute tolerance `tol`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, breaks: &[f64], tol: f64) -> Result<f64> {
    let mut edges: Vec<f64> = breaks.iter().copied().filter(|&x| x > a && x < b).collect();
    edges.push(a);
    edges.push(b);
    edges.sort_by(f64::total_cmp);
    edges.dedup();
    let span = b - a;
    let mut stack: Vec<(f64, f64)> = edges.windows(2).map(|w| (w[0], w[1])).collect();
    let (mut total, mut err_total, mut intervals) = (0.0, 0.0, 0usize);
    while let Some((lo, hi)) = stack.pop() {
        let (val, err) = kronrod15(&f, lo, hi);
        let budget = tol * (hi - lo) / span;
        let mid = 0.5 * (lo + hi);
        if err <= budget || !(mid > lo && mid < hi) {
            total += val;
            err_total += err;
            continue;
        }
        intervals += 1;
        if intervals > MAX_INTERVALS {
            return Err(AnalysisError::NonConvergent {
                estimate: total + val,
                error: err_total + err,
            });
        }
        stack.push((lo, mid));
        stack.push((mid, hi));
    }
    if err_total > tol {
        return Err(AnalysisError::NonConvergent {
            estimate: total,
            error: err_total,
        });
    }
    Ok(total)
}

/// Absolute tolerance of every Gaussian expectation.
pub const QUADRATURE_TOL: f64 = 1e-8;

/// `E[f(m)]` for `m ~ g`, integrating over `mean +- 12 std`.
pub fn gaussian_expectation(g: &GaussianSpec, f: impl Fn(f64) -> f64, breaks: &[f64]) -> Result<f64> {
    let a = g.mean - 12.0 * g.std;
    let b = g.mean + 12.0 * g.std;
    let mut all = breaks.to_vec();
    all.push(g.mean);
    integrate(|m| f(m) * g.pdf(m), a, b, &all, QUADRATURE_TOL)
}

fn kernel_breaks(model: NeuronModel, p: &NeuronParams<f64>, spec: &SurrogateSpec) -> Vec<f64> {
    let (vp, vn) = thresholds(model, p);
    match (spec.kind, model.is_ternary()) {
        (SurrogateKind::Ste, false) => vec![-vp, 2.0 * vp],
        (_, true) => vec![vp, -vn],
        (_, false) => vec![vp],
    }
}

/// `E[ds/dm]` of the surrogate under the Gaussian membrane density.
pub fn expected_surrogate_grad(
    g: &GaussianSpec,
    model: NeuronModel,
    p: &NeuronParams<f64>,
    spec: &SurrogateSpec,
) -> Result<f64> {
    let breaks = kernel_breaks(model, p, spec);
    gaussian_expectation(g, |m| spike_grad(m, p, model, spec), &breaks)
}

/// Monte-Carlo estimate of [`expected_surrogate_grad`]: `(mean, standard error)`.
pub fn monte_carlo_surrogate_grad(
    g: &GaussianSpec,
    model: NeuronModel,
    p: &NeuronParams<f64>,
    spec: &SurrogateSpec,
    samples: usize,
    rng: &mut Rng,
) -> (f64, f64) {
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let m = g.mean + g.std * rng.normal();
        let v = spike_grad(m, p, model, spec);
        sum += v;
        sum_sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

// -------------------------------------------------- subthreshold membrane

/// Leaky membrane driven by independent Bernoulli spike inputs, with no
/// firing threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct OuSpec {
    pub tau: f64,
    pub v_reset: f64,
    /// Membrane value at `t = 0`.
    pub v0: f64,
    pub weights: Vec<f64>,
    /// Input rates in spikes per unit time; an input fires in a step with
    /// probability `rate * dt`.
    pub rates: Vec<f64>,
    pub dt: f64,
}

impl OuSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(AnalysisError::InvalidSpec(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.dt > 0.0 && self.dt <= self.tau / 50.0) {
            return Err(AnalysisError::InvalidSpec(format!(
                "dt must lie in (0, tau/50], got dt={} tau={}",
                self.dt, self.tau
            )));
        }
        if self.weights.len() != self.rates.len() {
            return Err(AnalysisError::InvalidSpec(format!(
                "{} weights but {} rates",
                self.weights.len(),
                self.rates.len()
            )));
        }
        if let Some(r) = self.rates.iter().find(|&&r| !(0.0..=1.0).contains(&r)) {
            return Err(AnalysisError::InvalidSpec(format!("rate {r} outside [0, 1]")));
        }
        if !self.weights.iter().all(|w| w.is_finite()) || !self.v_reset.is_finite() || !self.v0.is_finite() {
            return Err(AnalysisError::InvalidSpec("non-finite weight or potential".into()));
        }
        Ok(())
    }

    /// Per-step decay factor `e^{-dt/tau}`.
    pub fn decay(&self) -> f64 {
        (-self.dt / self.tau).exp()
    }

    /// Per-step input firing probabilities as 32-bit thresholds.
    fn thresholds_u32(&self) -> Vec<u64> {
        self.rates
            .iter()
            .map(|&r| ((r * self.dt) * 4_294_967_296.0).round() as u64)
            .collect()
    }

    /// Per-step firing probabilities actually simulated.
    pub fn step_probs(&self) -> Vec<f64> {
        self.thresholds_u32()
            .into_iter()
            .map(|t| t as f64 / 4_294_967_296.0)
            .collect()
    }

    /// `tau * sum_k w_k nu_k^2`.
    pub fn xi_squared(&self) -> f64 {
        self.tau
            * self
                .weights
                .iter()
                .zip(&self.rates)
                .map(|(w, r)| w * r * r)
                .sum::<f64>()
    }

    /// Closed-form mean `V_reset (1 - e^{-t/tau})`.
    pub fn closed_form_mean(&self, t: f64) -> f64 {
        self.v_reset * (1.0 - (-t / self.tau).exp())
    }

    /// Closed-form variance `xi^2 / 2 (1 - e^{-t/tau})`.
    pub fn closed_form_variance(&self, t: f64) -> f64 {
        0.5 * self.xi_squared() * (1.0 - (-t / self.tau).exp())
    }

    /// Exact mean of the simulated process after `steps` steps.
    pub fn exact_mean(&self, steps: usize) -> f64 {
        let a = self.decay();
        let an = a.powi(steps as i32);
        let drift: f64 = self.weights.iter().zip(self.step_probs()).map(|(w, p)| w * p).sum();
        self.v_reset + (self.v0 - self.v_reset) * an + drift * (1.0 - an) / (1.0 - a)
    }

    /// Exact variance of the simulated process after `steps` steps.
    pub fn exact_variance(&self, steps: usize) -> f64 {
        let a = self.decay();
        let jump_var: f64 = self
            .weights
            .iter()
            .zip(self.step_probs())
            .map(|(w, p)| w * w * p * (1.0 - p))
            .sum();
        jump_var * (1.0 - a.powi(2 * steps as i32)) / (1.0 - a * a)
    }
}

/// Membrane samples of every trial at a set of recorded times.
#[derive(Debug, Clone, PartialEq)]
pub struct OuSamples {
    pub times: Vec<f64>,
    pub steps: Vec<usize>,
    /// `values[i][trial]` is `m(times[i])`.
    pub values: Vec<Vec<f64>>,
}

impl OuSamples {
    /// Sample mean and unbiased variance at recorded point `i`.
    pub fn moments(&self, i: usize) -> (f64, f64) {
        let v = &self.values[i];
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }
}

fn simulate_trial(spec: &OuSpec, thresholds: &[u64], steps: &[usize], rng: &mut Rng, out: &mut [f64]) {
    let a = spec.decay();
    let mut m = spec.v0;
    let mut next = 0;
    let last = *steps.last().unwrap_or(&0);
    let n = thresholds.len();
    let mut draws = vec![0u64; n];
    for step in 1..=last {
        for pair in draws.chunks_mut(2) {
            let x = rng.next_u64();
            pair[0] = x & 0xffff_ffff;
            if pair.len() > 1 {
                pair[1] = x >> 32;
            }
        }
        let jump: f64 = spec
            .weights
            .iter()
            .zip(thresholds)
            .zip(&draws)
            .map(|((w, t), d)| if d < t { *w } else { 0.0 })
            .sum();
        m = spec.v_reset + a * (m - spec.v_reset) + jump;
        while next < steps.len() && steps[next] == step {
            out[next] = m;
            next += 1;
        }
    }
    while next < steps.len() {
        out[next] = m;
        next += 1;
    }
}

/// Simulate `trials` independent membranes up to `horizon`, recording
/// `points` equally spaced times in `(0, horizon]`. Each step leaks the
/// membrane toward `v_reset` by `e^{-dt/tau}` and then adds `w_k` for every
/// input that spiked. Trial `i` draws from its own stream, so results do not
/// depend on the thread count.
pub fn ou_simulate(spec: &OuSpec, trials: usize, horizon: f64, points: usize, rng: &Rng) -> Result<OuSamples> {
    spec.validate()?;
    if trials < 2 || points == 0 || !(horizon > 0.0) {
        return Err(AnalysisError::InvalidSpec(format!(
            "need trials >= 2, points >= 1 and horizon > 0, got {trials}, {points}, {horizon}"
        )));
    }
    let steps: Vec<usize> = (1..=points)
        .map(|i| ((horizon * i as f64 / points as f64) / spec.dt).round() as usize)
        .collect();
    let times: Vec<f64> = steps.iter().map(|&s| s as f64 * spec.dt).collect();
    let thresholds = spec.thresholds_u32();
    let base = rng.derive("ou");

    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(trials);
    let chunk = trials.div_ceil(workers);
    let mut by_trial = vec![0.0; trials * points];
    std::thread::scope(|scope| {
        for (c, block) in by_trial.chunks_mut(chunk * points).enumerate() {
            let (spec, thresholds, steps, base) = (spec, &thresholds, &steps, &base);
            scope.spawn(move || {
                for (j, out) in block.chunks_mut(points).enumerate() {
                    let mut trial_rng = base.derive_indexed("trial", (c * chunk + j) as u64);
                    simulate_trial(spec, thresholds, steps, &mut trial_rng, out);
                }
            });
        }
    });
    let values = (0..points)
        .map(|i| by_trial.chunks(points).map(|row| row[i]).collect())
        .collect();
    Ok(OuSamples { times, steps, values })
}

/// Kolmogorov-Smirnov distance to the moment-matched Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub pass: bool,
}

pub const KS_PASS: f64 = 0.02;
pub const KS_MIN_SAMPLES: usize = 10_000;

pub fn gaussianity_test(samples: &[f64]) -> Result<KsResult> {
    if samples.len() < KS_MIN_SAMPLES {
        return Err(AnalysisError::TooFewSamples {
            needed: KS_MIN_SAMPLES,
            got: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std = (samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(std > 0.0) {
        return Ok(KsResult { statistic: 1.0, pass: false });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = normal_cdf((x - mean) / std);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    Ok(KsResult {
        statistic: d,
        pass: d < KS_PASS,
    })
}

// ---------------------------------------------------------------- isometry

/// Moments of the diagonal Jacobian mask of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsometryStats {
    /// Fraction of slots that fired (nonzero spike); NaN for a ReLU layer.
    pub rate: f64,
    /// Mean diagonal entry of `J J^T`.
    pub phi: f64,
    /// Variance of the diagonal entries of `J J^T`.
    pub varphi: f64,
}

fn mask_moments(g: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut s1, mut s2) = (0usize, 0.0, 0.0);
    for v in g {
        let d = v * v;
        n += 1;
        s1 += d;
        s2 += d * d;
    }
    let phi = s1 / n as f64;
    (phi, s2 / n as f64 - phi * phi)
}

/// Per-layer mask moments of a forward pass under the STE boxcar. The
/// Jacobian of every spiking layer is `diag(g(m))` over all batch, time and
/// neuron slots of `tape`.
pub fn isometry_measure<S: Scalar>(
    net: &SpikingNetwork<S>,
    tape: &Tape<S>,
    spec: &SurrogateSpec,
) -> Result<Vec<IsometryStats>> {
    if spec.kind != SurrogateKind::Ste {
        return Err(AnalysisError::NotBoxcar(spec.kind));
    }
    check_tape(net, tape)?;
    let model = net.kind().model;
    Ok(net
        .layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let p = cast_params(&layer.neuron);
            let (phi, varphi) = mask_moments(
                tape.membrane(l)
                    .iter()
                    .map(|m| spike_grad(m.to_f64(), &p, model, spec)),
            );
            IsometryStats {
                rate: tape.firing_rate(l),
                phi,
                varphi,
            }
        })
        .collect())
}

/// Mask moments of a ReLU layer with the given pre-activations.
pub fn relu_isometry(preactivations: &[f64]) -> IsometryStats {
    let (phi, varphi) = mask_moments(preactivations.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }));
    IsometryStats {
        rate: f64::NAN,
        phi,
        varphi,
    }
}

/// A random ReLU layer `W z` with `W ~ U(+-1/sqrt(fan_in))` fed standard
/// normal inputs.
pub fn relu_reference(width: usize, fan_in: usize, samples: usize, rng: &mut Rng) -> IsometryStats {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w: Vec<f64> = (0..width * fan_in).map(|_| rng.uniform_range(-bound, bound)).collect();
    let mut pre = Vec::with_capacity(width * samples);
    let mut z = vec![0.0; fan_in];
    for _ in 0..samples {
        z.iter_mut().for_each(|v| *v = rng.normal());
        pre.extend(w.chunks(fan_in).map(|row| row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>()));
    }
    relu_isometry(&pre)
}

fn cast_params<S: Scalar>(p: &NeuronParams<S>) -> NeuronParams<f64> {
    NeuronParams {
        beta: p.beta.to_f64(),
        v_reset: p.v_reset.to_f64(),
        v_th_p: p.v_th_p.to_f64(),
        v_th_n: p.v_th_n.to_f64(),
    }
}

fn check_tape<S: Scalar>(net: &SpikingNetwork<S>, tape: &Tape<S>) -> Result<()> {
    let layers = net.layers();
    let ok = tape.n_layers() == layers.len()
        && layers
            .iter()
            .enumerate()
            .all(|(l, layer)| tape.width(l) == layer.geometry.n_out());
    if ok {
        Ok(())
    } else {
        Err(AnalysisError::ForeignTape)
    }
}

// ----------------------------------------------------------- spike balance

/// A `kh x kw` window, across all channels, of the spike map emitted by
/// hidden layer `layer`. Dense layers are viewed as `1 x 1 x units` maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub layer: usize,
    pub y0: usize,
    pub x0: usize,
    pub kh: usize,
    pub kw: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeBalance {
    pub pos: usize,
    pub neg: usize,
    /// `pos / (pos + neg)`, absent when no spike was emitted.
    pub ratio: Option<f64>,
}

/// Count the positive and negative spikes a region sends downstream over
/// every batch row and time step of `tape`.
pub fn spike_balance<S: Scalar>(net: &SpikingNetwork<S>, tape: &Tape<S>, region: Region) -> Result<SpikeBalance> {
    let model = net.kind().model;
    if !model.is_ternary() {
        return Err(AnalysisError::NotTernary(model));
    }
    check_tape(net, tape)?;
    let Some(layer) = net.layers().get(region.layer) else {
        return Err(AnalysisError::RegionOutOfBounds(format!(
            "layer {} of {}",
            region.layer,
            net.layers().len()
        )));
    };
    let [c, h, w] = layer.geometry.out_map().unwrap_or([layer.geometry.n_out(), 1, 1]);
    if region.kh == 0 || region.kw == 0 || region.y0 + region.kh > h || region.x0 + region.kw > w {
        return Err(AnalysisError::RegionOutOfBounds(format!(
            "window {}x{} at ({}, {}) on a {h}x{w} map",
            region.kh, region.kw, region.y0, region.x0
        )));
    }
    let width = c * h * w;
    let (mut pos, mut neg) = (0, 0);
    for row in tape.hard_spikes(region.layer).chunks(width) {
        for y in region.y0..region.y0 + region.kh {
            for x in region.x0..region.x0 + region.kw {
                let base = (y * w + x) * c;
                for &s in &row[base..base + c] {
                    if s > S::ZERO {
                        pos += 1;
                    } else if s < S::ZERO {
                        neg += 1;
                    }
                }
            }
        }
    }
    let ratio = (pos + neg > 0).then(|| pos as f64 / (pos + neg) as f64);
    Ok(SpikeBalance { pos, neg, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Architecture, SpikeMode};
    use crate::neuron::NeuronKind;
    use crate::tensor::Tensor;
    use crate::rng::Rng;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn params(vp: f64, vn: f64) -> NeuronParams<f64> {
        NeuronParams {
            beta: 0.9,
            v_reset: 0.0,
            v_th_p: vp,
            v_th_n: vn,
        }
    }

    fn std_normal() -> GaussianSpec {
        GaussianSpec::new(0.0, 1.0).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        let gain = ternary_entropy(0.25, 0.25).unwrap() - binary_entropy(0.5).unwrap();
        assert!((gain - 0.5).abs() < 1e-12);
        let expected = 0.1 * 5f64.log2() + 0.4 * 1.25f64.log2();
        assert!((entropy_gain(0.1, 0.4) - expected).abs() < 1e-15);
        assert!((entropy_gain(0.1, 0.4) - 0.36096).abs() < 1e-5);
        assert_eq!(entropy(&[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn entropy_rejects_bad_distributions() {
        assert!(entropy(&[0.5, 0.6]).is_err());
        assert!(entropy(&[1.5, -0.5]).is_err());
        assert!(entropy(&[]).is_err());
        assert!(entropy(&[0.5, f64::NAN]).is_err());
    }

    #[test]
    fn spike_probs_match_reference_tails() {
        // P(Z <= -1) and P(Z <= -2) to 17 significant digits
        const TAIL_1: f64 = 0.158_655_253_931_457_05;
        const TAIL_2: f64 = 0.022_750_131_948_179_21;
        let (p, z, m) = spike_probs(&std_normal(), NeuronModel::TernarySymmetric, &params(1.0, 7.0));
        assert!((p - TAIL_1).abs() < 1e-15 && (m - TAIL_1).abs() < 1e-15);
        assert!((p - 0.158655).abs() < 1e-6 && p == m);
        assert!((p + z + m - 1.0).abs() < 1e-12);
        let (p, _, m) = spike_probs(&std_normal(), NeuronModel::TernaryAsymmetric, &params(1.0, 2.0));
        assert!((p - TAIL_1).abs() < 1e-15 && (m - TAIL_2).abs() < 1e-15);
        let (p, z, m) = spike_probs(&std_normal(), NeuronModel::TernaryAsymmetric, &params(f64::INFINITY, f64::INFINITY));
        assert_eq!((p, z, m), (0.0, 1.0, 0.0));
        let (_, _, m) = spike_probs(&std_normal(), NeuronModel::Binary, &params(1.0, 2.0));
        assert_eq!(m, 0.0);
    }

    #[test]
    fn expected_spike_examples() {
        let g = std_normal();
        assert_eq!(expected_spike(&g, NeuronModel::TernarySymmetric, &params(1.0, 1.0)), 0.0);
        let asym = expected_spike(&g, NeuronModel::TernaryAsymmetric, &params(1.0, 2.0));
        assert!((asym - 0.135905).abs() < 1e-6);
        let bin = expected_spike(&g, NeuronModel::Binary, &params(1.0, 1.0));
        assert!((bin - 0.158655).abs() < 1e-6);
    }

    #[test]
    fn mean_shift_sensitivity_matches_finite_difference() {
        let p = params(1.0, 1.0);
        let sens = expected_spike_sensitivity(&std_normal(), NeuronModel::TernarySymmetric, &p);
        let h = 1e-5;
        let up = expected_spike(&GaussianSpec::new(h, 1.0).unwrap(), NeuronModel::TernarySymmetric, &p);
        let down = expected_spike(&GaussianSpec::new(-h, 1.0).unwrap(), NeuronModel::TernarySymmetric, &p);
        assert!(sens > 0.0);
        assert!((sens - (up - down) / (2.0 * h)).abs() < 1e-8);
    }

    #[test]
    fn quadrature_integrates_density_to_one() {
        let g = GaussianSpec::new(0.3, 2.0).unwrap();
        let one = gaussian_expectation(&g, |_| 1.0, &[]).unwrap();
        assert!((one - 1.0).abs() < 1e-8);
        let second = gaussian_expectation(&g, |m| (m - 0.3) * (m - 0.3), &[]).unwrap();
        assert!((second - 4.0).abs() < 1e-7);
    }

    #[test]
    fn boxcar_expectation_is_interval_mass() {
        let g = std_normal();
        let p = params(1.0, 2.0);
        let e = expected_surrogate_grad(&g, NeuronModel::TernaryAsymmetric, &p, &SurrogateSpec::ste()).unwrap();
        let n = Normal::new(0.0, 1.0).unwrap();
        assert!((e - (n.cdf(1.0) - n.cdf(-2.0))).abs() < 1e-8);
        let e = expected_surrogate_grad(&g, NeuronModel::Binary, &p, &SurrogateSpec::ste()).unwrap();
        assert!((e - (n.cdf(2.0) - n.cdf(-1.0))).abs() < 1e-8);
    }

    #[test]
    fn atan_expectation_matches_monte_carlo() {
        let g = std_normal();
        let p = params(1.0, 1.0);
        let spec = SurrogateSpec::atan(2.0);
        let q = expected_surrogate_grad(&g, NeuronModel::Binary, &p, &spec).unwrap();
        let (mc, se) = monte_carlo_surrogate_grad(&g, NeuronModel::Binary, &p, &spec, 200_000, &mut Rng::new(3));
        assert!(q > 0.0);
        assert!((q - mc).abs() < 4.0 * se, "{q} vs {mc} +- {se}");
    }

    #[test]
    fn integrate_reports_non_convergence() {
        let r = integrate(|x| 1.0 / x.abs().sqrt().max(1e-300), -1.0, 1.0, &[], 1e-14);
        assert!(matches!(r, Err(AnalysisError::NonConvergent { .. })));
    }

    fn small_ou(weights: Vec<f64>) -> OuSpec {
        let n = weights.len();
        OuSpec {
            tau: 20.0,
            v_reset: 0.3,
            v0: 1.5,
            weights,
            rates: vec![0.5; n],
            dt: 0.4,
        }
    }

    #[test]
    fn ou_zero_input_decays_to_reset() {
        let spec = small_ou(vec![0.0; 4]);
        let run = ou_simulate(&spec, 2, 20.0, 1, &Rng::new(0)).unwrap();
        let expected = 0.3 + (1.5 - 0.3) * (-1.0f64).exp();
        assert!((run.values[0][0] - expected).abs() < 0.01 * expected.abs());
        assert!((run.times[0] - 20.0).abs() < 1e-12);
    }

    #[test]
    fn ou_validation() {
        let mut spec = small_ou(vec![0.1; 4]);
        spec.dt = 0.5;
        assert!(ou_simulate(&spec, 10, 20.0, 1, &Rng::new(0)).is_err());
        let mut spec = small_ou(vec![0.1; 4]);
        spec.rates[0] = 1.5;
        assert!(spec.validate().is_err());
        spec.rates = vec![0.5; 3];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn ou_matches_exact_discrete_moments() {
        let spec = small_ou(vec![0.05, -0.02, 0.03, -0.04, 0.01, 0.02]);
        let run = ou_simulate(&spec, 20_000, 40.0, 2, &Rng::new(5)).unwrap();
        for i in 0..2 {
            let (mean, var) = run.moments(i);
            let (em, ev) = (spec.exact_mean(run.steps[i]), spec.exact_variance(run.steps[i]));
            let se = (ev / 20_000.0).sqrt();
            assert!((mean - em).abs() < 4.0 * se, "mean {mean} vs {em}");
            assert!((var / ev - 1.0).abs() < 0.05, "var {var} vs {ev}");
        }
    }

    #[test]
    fn ou_is_deterministic_per_seed() {
        let spec = small_ou(vec![0.05; 8]);
        let a = ou_simulate(&spec, 50, 10.0, 2, &Rng::new(9)).unwrap();
        let b = ou_simulate(&spec, 50, 10.0, 2, &Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ks_accepts_gaussian_and_rejects_uniform() {
        let mut rng = Rng::new(11);
        let g: Vec<f64> = (0..100_000).map(|_| 2.0 + 3.0 * rng.normal()).collect();
        assert!(gaussianity_test(&g).unwrap().pass);
        let u: Vec<f64> = (0..100_000).map(|_| rng.uniform()).collect();
        let ks = gaussianity_test(&u).unwrap();
        // sup over x of |x - Phi((x - 1/2) sqrt 12)|, evaluated on a fine grid
        let n = Normal::new(0.5, (1.0f64 / 12.0).sqrt()).unwrap();
        let oracle = (0..=100_000)
            .map(|i| i as f64 / 100_000.0)
            .map(|x| (x - n.cdf(x)).abs())
            .fold(0.0, f64::max);
        assert!(!ks.pass);
        assert!((ks.statistic - oracle).abs() < 0.006, "{} vs {oracle}", ks.statistic);
        assert!(matches!(gaussianity_test(&u[..100]), Err(AnalysisError::TooFewSamples { .. })));
    }

    fn mlp_net(model: NeuronModel, vp: f32, vn: f32, seed: u64) -> SpikingNetwork<f32> {
        let arch = Architecture::mlp([1, 4, 4], &[32, 32], 3);
        let mut net = SpikingNetwork::init(arch, NeuronKind::fixed(model), &mut Rng::new(seed)).unwrap();
        net.set_thresholds(vp, vn);
        net
    }

    fn random_input(batch: usize, window: usize, seed: u64, symmetric: bool) -> Tensor<f32> {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(&[batch, window, 1, 4, 4], |_| {
            let u = rng.uniform();
            if symmetric {
                if u < 1.0 / 3.0 {
                    -1.0
                } else if u < 2.0 / 3.0 {
                    0.0
                } else {
                    1.0
                }
            } else {
                (u < 0.5) as u8 as f32
            }
        })
    }

    #[test]
    fn isometry_phi_is_one_minus_rate() {
        let net = mlp_net(NeuronModel::TernaryAsymmetric, 0.5, 0.8, 1);
        let (_, tape) = net.forward(&random_input(16, 8, 2, false), SpikeMode::Hard).unwrap();
        let stats = isometry_measure(&net, &tape, &SurrogateSpec::ste()).unwrap();
        for (l, s) in stats.iter().enumerate() {
            let (pos, neg, total) = tape.spike_counts(l);
            let r = (pos + neg) as f64 / total as f64;
            assert!(r > 0.0 && r < 1.0);
            assert!((s.phi - (1.0 - r)).abs() < 1e-12);
            assert!((s.varphi - (r - r * r)).abs() < 1e-12);
        }
        assert!(matches!(
            isometry_measure(&net, &tape, &SurrogateSpec::atan(2.0)),
            Err(AnalysisError::NotBoxcar(_))
        ));
    }

    #[test]
    fn isometry_rate_point_two() {
        let s = relu_isometry(&[1.0, -1.0, -1.0, -1.0, -1.0]);
        assert!((s.phi - 0.2).abs() < 1e-12 && (s.varphi - 0.16).abs() < 1e-12);
    }

    #[test]
    fn relu_reference_is_half_open() {
        let s = relu_reference(64, 64, 500, &mut Rng::new(4));
        assert!((s.phi - 0.5).abs() < 0.03);
        assert!((s.varphi - 0.25).abs() < 0.01);
    }

    #[test]
    fn balance_without_negative_spikes_is_one() {
        let net = mlp_net(NeuronModel::TernaryAsymmetric, 0.5, 1e6, 3);
        let (_, tape) = net.forward(&random_input(8, 8, 4, false), SpikeMode::Hard).unwrap();
        let b = spike_balance(&net, &tape, Region { layer: 0, y0: 0, x0: 0, kh: 1, kw: 1 }).unwrap();
        assert_eq!(b.neg, 0);
        assert!(b.pos > 0);
        assert_eq!(b.ratio, Some(1.0));
    }

    #[test]
    fn balance_of_symmetric_net_is_half() {
        // one neuron and one step per sample: the counts are an exact binomial
        let arch = Architecture::mlp([1, 4, 4], &[1], 3);
        let mut net = SpikingNetwork::init(arch, NeuronKind::fixed(NeuronModel::TernarySymmetric), &mut Rng::new(5)).unwrap();
        net.set_thresholds(0.3, 0.3);
        let (_, tape) = net.forward(&random_input(4000, 1, 6, true), SpikeMode::Hard).unwrap();
        let b = spike_balance(&net, &tape, Region { layer: 0, y0: 0, x0: 0, kh: 1, kw: 1 }).unwrap();
        let n = (b.pos + b.neg) as f64;
        let ratio = b.ratio.unwrap();
        assert!(n > 500.0);
        assert!((ratio - 0.5).abs() < 3.0 * (0.25 / n).sqrt(), "{ratio} over {n}");
    }

    #[test]
    fn balance_errors() {
        let net = mlp_net(NeuronModel::TernarySymmetric, 0.3, 0.3, 5);
        let (_, tape) = net.forward(&random_input(2, 2, 6, true), SpikeMode::Hard).unwrap();
        let oob = Region { layer: 0, y0: 0, x0: 0, kh: 2, kw: 1 };
        assert!(matches!(spike_balance(&net, &tape, oob), Err(AnalysisError::RegionOutOfBounds(_))));
        let bad_layer = Region { layer: 5, ..oob };
        assert!(matches!(spike_balance(&net, &tape, bad_layer), Err(AnalysisError::RegionOutOfBounds(_))));
        let bin = mlp_net(NeuronModel::Binary, 0.3, 0.3, 5);
        let (_, tape) = bin.forward(&random_input(2, 2, 6, true), SpikeMode::Hard).unwrap();
        let ok = Region { layer: 0, y0: 0, x0: 0, kh: 1, kw: 1 };
        assert!(matches!(spike_balance(&bin, &tape, ok), Err(AnalysisError::NotTernary(_))));
    }

    proptest! {
        #[test]
        fn spike_probs_sum_to_one(m0 in -3.0f64..3.0, s in 0.05f64..4.0, vp in 0.01f64..5.0, vn in 0.01f64..5.0) {
            let g = GaussianSpec::new(m0, s).unwrap();
            for model in [NeuronModel::Binary, NeuronModel::TernarySymmetric, NeuronModel::TernaryAsymmetric] {
                let (p, z, m) = spike_probs(&g, model, &params(vp, vn));
                prop_assert!((p + z + m - 1.0).abs() < 1e-12);
                prop_assert!(p >= 0.0 && z >= 0.0 && m >= 0.0);
            }
        }

        #[test]
        fn expected_spike_antisymmetric_under_swap(a in 0.01f64..5.0, b in 0.01f64..5.0, s in 0.05f64..4.0) {
            let g = GaussianSpec::new(0.0, s).unwrap();
            let e = expected_spike(&g, NeuronModel::TernaryAsymmetric, &params(a, b));
            let swapped = expected_spike(&g, NeuronModel::TernaryAsymmetric, &params(b, a));
            prop_assert!((e + swapped).abs() < 1e-15);
        }

        #[test]
        fn entropy_gain_nonnegative(r1 in 1e-6f64..0.5, r2 in 1e-6f64..0.5) {
            prop_assert!(entropy_gain(r1, r2) >= 0.0);
            prop_assert!((entropy_gain(r1, r1) - 2.0 * r1).abs() < 1e-12);
            let direct = ternary_entropy(r1, r2).unwrap() - binary_entropy(r1 + r2).unwrap();
            prop_assert!((direct - entropy_gain(r1, r2)).abs() < 1e-12);
        }
    }
}
