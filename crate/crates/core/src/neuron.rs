//! Leaky integrate-and-fire dynamics for binary, symmetric ternary and
//! asymmetric ternary neurons, plus the surrogate derivatives used by BPTT.
//!
//! One step of a layer is `charge -> fire -> reset`:
//!
//! ```text
//! m(t) = v(t-1) + x(t)
//! s(t) = fire(m(t))                       in {0,1} or {-1,0,1}
//! v(t) = beta * m(t) * (1 - |s(t)|) + v_reset * |s(t)|
//! ```
//!
//! Using `|s|` in the reset means a negative spike resets the membrane the
//! same way a positive one does.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Scalar, Tensor, TensorError};

/// Lower bound applied to both thresholds after every optimizer step.
pub const THRESHOLD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronModel {
    Binary,
    TernarySymmetric,
    TernaryAsymmetric,
}

impl NeuronModel {
    pub fn is_ternary(self) -> bool {
        !matches!(self, NeuronModel::Binary)
    }

    /// Short network name used on the command line and in checkpoints.
    pub fn network_name(self) -> &'static str {
        match self {
            NeuronModel::Binary => "dsqn",
            NeuronModel::TernarySymmetric => "dtsqn",
            NeuronModel::TernaryAsymmetric => "datsqn",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("unknown neuron model `{0}` (expected one of: dsqn, dtsqn, datsqn)")]
pub struct UnknownModel(pub String);

impl FromStr for NeuronModel {
    type Err = UnknownModel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dsqn" | "binary" => Ok(NeuronModel::Binary),
            "dtsqn" | "ternary_symmetric" => Ok(NeuronModel::TernarySymmetric),
            "datsqn" | "ternary_asymmetric" => Ok(NeuronModel::TernaryAsymmetric),
            other => Err(UnknownModel(other.to_string())),
        }
    }
}

impl fmt::Display for NeuronModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.network_name())
    }
}

/// Neuron model plus which thresholds receive gradient updates.
///
/// `TernarySymmetric` has a single threshold shared by both signs; its
/// trainability is controlled by `trainable_pos`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronKind {
    pub model: NeuronModel,
    pub trainable_pos: bool,
    pub trainable_neg: bool,
}

impl NeuronKind {
    pub fn fixed(model: NeuronModel) -> Self {
        Self {
            model,
            trainable_pos: false,
            trainable_neg: false,
        }
    }

    /// Default training setup per network: DATSQN learns its negative
    /// threshold, the others keep fixed thresholds.
    pub fn default_for(model: NeuronModel) -> Self {
        Self {
            model,
            trainable_pos: false,
            trainable_neg: model == NeuronModel::TernaryAsymmetric,
        }
    }

    pub fn pos_trainable(&self) -> bool {
        self.trainable_pos
    }

    pub fn neg_trainable(&self) -> bool {
        self.model == NeuronModel::TernaryAsymmetric && self.trainable_neg
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum NeuronError {
    #[error("invalid neuron parameters: {0}")]
    InvalidParams(String),
    #[error("invalid surrogate: {0}")]
    InvalidSurrogate(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronParams<S = f32> {
    pub beta: S,
    pub v_reset: S,
    pub v_th_p: S,
    /// Magnitude of the negative threshold: a negative spike fires at
    /// `m <= -v_th_n`.
    pub v_th_n: S,
}

impl<S: Scalar> NeuronParams<S> {
    /// beta 0.9, v_reset 0, v_th_p 1; the asymmetric model starts with
    /// v_th_n 2, the others mirror the positive threshold.
    pub fn for_model(model: NeuronModel) -> Self {
        let v_th_n = if model == NeuronModel::TernaryAsymmetric {
            2.0
        } else {
            1.0
        };
        Self {
            beta: S::from_f64(0.9),
            v_reset: S::ZERO,
            v_th_p: S::ONE,
            v_th_n: S::from_f64(v_th_n),
        }
    }

    pub fn validate(&self) -> Result<(), NeuronError> {
        let beta = self.beta.to_f64();
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(NeuronError::InvalidParams(format!(
                "beta must lie in (0, 1], got {beta}"
            )));
        }
        if !(self.v_th_p.to_f64() > 0.0) || !(self.v_th_n.to_f64() > 0.0) {
            return Err(NeuronError::InvalidParams(format!(
                "thresholds must be positive, got v_th_p={} v_th_n={}",
                self.v_th_p, self.v_th_n
            )));
        }
        if !self.v_reset.is_finite() {
            return Err(NeuronError::InvalidParams("v_reset must be finite".into()));
        }
        Ok(())
    }

    /// Negative firing threshold magnitude actually used by `model`.
    #[inline]
    pub fn neg_threshold(&self, model: NeuronModel) -> S {
        match model {
            NeuronModel::TernaryAsymmetric => self.v_th_n,
            _ => self.v_th_p,
        }
    }

    pub fn clamp_thresholds(&mut self) {
        let floor = S::from_f64(THRESHOLD_FLOOR);
        self.v_th_p = self.v_th_p.max(floor);
        self.v_th_n = self.v_th_n.max(floor);
    }
}

impl Default for NeuronParams<f32> {
    fn default() -> Self {
        Self::for_model(NeuronModel::Binary)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    Atan,
    Ste,
    Sigmoid,
}

impl FromStr for SurrogateKind {
    type Err = NeuronError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "atan" => Ok(SurrogateKind::Atan),
            "ste" => Ok(SurrogateKind::Ste),
            "sigmoid" => Ok(SurrogateKind::Sigmoid),
            other => Err(NeuronError::InvalidSurrogate(format!(
                "unknown kind `{other}` (expected atan, ste or sigmoid)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    pub alpha: f64,
    pub k: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self::atan(2.0)
    }
}

impl SurrogateSpec {
    pub fn atan(alpha: f64) -> Self {
        Self {
            kind: SurrogateKind::Atan,
            alpha,
            k: 25.0,
        }
    }

    pub fn sigmoid(k: f64) -> Self {
        Self {
            kind: SurrogateKind::Sigmoid,
            alpha: 2.0,
            k,
        }
    }

    pub fn ste() -> Self {
        Self {
            kind: SurrogateKind::Ste,
            alpha: 2.0,
            k: 25.0,
        }
    }

    pub fn validate(&self) -> Result<(), NeuronError> {
        if !(self.alpha > 0.0) || !(self.k > 0.0) {
            return Err(NeuronError::InvalidSurrogate(format!(
                "alpha and k must be positive, got alpha={} k={}",
                self.alpha, self.k
            )));
        }
        Ok(())
    }

    /// Surrogate gradient `GE(u)` evaluated at an already-centered argument.
    ///
    /// Atan: `(1/pi) / (1 + (pi*alpha*u/2)^2)`, Sigmoid: `k e^{-ku} / (1 + e^{-ku})^2`,
    /// STE: 1.
    pub fn kernel(&self, u: f64) -> f64 {
        match self.kind {
            SurrogateKind::Atan => {
                let z = PI * self.alpha * u / 2.0;
                1.0 / (PI * (1.0 + z * z))
            }
            SurrogateKind::Sigmoid => {
                // even in u; written with |u| to avoid cancellation in 1 - sigma
                let e = (-(self.k * u).abs()).exp();
                self.k * e / ((1.0 + e) * (1.0 + e))
            }
            SurrogateKind::Ste => 1.0,
        }
    }

    /// Smooth step whose derivative is exactly [`SurrogateSpec::kernel`].
    /// Only defined for Atan and Sigmoid.
    pub fn step(&self, u: f64) -> Option<f64> {
        match self.kind {
            SurrogateKind::Atan => {
                let z = PI * self.alpha * u / 2.0;
                Some(0.5 + 2.0 / (PI * PI * self.alpha) * z.atan())
            }
            SurrogateKind::Sigmoid => Some(sigmoid(self.k * u)),
            SurrogateKind::Ste => None,
        }
    }

    #[inline]
    pub(crate) fn kernel_s<S: Scalar>(&self, u: S) -> S {
        match self.kind {
            SurrogateKind::Atan => {
                let z = S::from_f64(PI * self.alpha / 2.0) * u;
                S::from_f64(1.0 / PI) / (S::ONE + z * z)
            }
            SurrogateKind::Sigmoid => {
                let e = (-(S::from_f64(self.k) * u).abs()).exp();
                S::from_f64(self.k) * e / ((S::ONE + e) * (S::ONE + e))
            }
            SurrogateKind::Ste => S::ONE,
        }
    }

    #[inline]
    fn step_s<S: Scalar>(&self, u: S) -> S {
        match self.kind {
            SurrogateKind::Atan => {
                let z = S::from_f64(PI * self.alpha / 2.0) * u;
                S::from_f64(0.5) + S::from_f64(2.0 / (PI * PI * self.alpha)) * z.atan()
            }
            SurrogateKind::Sigmoid => sigmoid_s(S::from_f64(self.k) * u),
            SurrogateKind::Ste => u,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sigmoid_s<S: Scalar>(x: S) -> S {
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    }
}

// Scalar kernels. The network calls these directly in its inner loops; the
// tensor-level functions below are thin maps over them.

#[inline]
pub fn fire_value<S: Scalar>(m: S, p: &NeuronParams<S>, model: NeuronModel) -> S {
    if m >= p.v_th_p {
        S::ONE
    } else if model.is_ternary() && m <= -p.neg_threshold(model) {
        -S::ONE
    } else {
        S::ZERO
    }
}

#[inline]
pub fn reset_value<S: Scalar>(m: S, s: S, p: &NeuronParams<S>) -> S {
    let gate = s.abs();
    p.beta * m * (S::ONE - gate) + p.v_reset * gate
}

/// `ds/dm` estimate for the hard spike function.
#[inline]
pub fn spike_grad<S: Scalar>(m: S, p: &NeuronParams<S>, model: NeuronModel, spec: &SurrogateSpec) -> S {
    let vn = p.neg_threshold(model);
    match spec.kind {
        SurrogateKind::Ste => {
            let inside = if model.is_ternary() {
                m > -vn && m < p.v_th_p
            } else {
                m >= -p.v_th_p && m <= S::from_f64(2.0) * p.v_th_p
            };
            if inside {
                S::ONE
            } else {
                S::ZERO
            }
        }
        _ => {
            let pos = spec.kernel_s(m - p.v_th_p);
            if model.is_ternary() {
                pos + spec.kernel_s(m + vn)
            } else {
                pos
            }
        }
    }
}

/// Raw (flag-independent) threshold sensitivities `(ds/dv_th_p, ds/dv_th_n)`.
///
/// Positive branch: `s+ ~ F(m - v_th_p)`, so `ds/dv_th_p = -K(m - v_th_p)`.
/// Negative branch: `s- ~ -(1 - F(m + v_th_n))`, so `ds/dv_th_n = +K(m + v_th_n)`.
/// For the symmetric model both branches share one threshold and the sum
/// lands in the first slot.
#[inline]
pub fn threshold_sensitivity<S: Scalar>(
    m: S,
    p: &NeuronParams<S>,
    model: NeuronModel,
    spec: &SurrogateSpec,
) -> (S, S) {
    let vn = p.neg_threshold(model);
    let (k_pos, k_neg) = match spec.kind {
        SurrogateKind::Ste => {
            let g = spike_grad(m, p, model, spec);
            (g, g)
        }
        _ => (spec.kernel_s(m - p.v_th_p), spec.kernel_s(m + vn)),
    };
    match model {
        NeuronModel::Binary => (-k_pos, S::ZERO),
        NeuronModel::TernarySymmetric => (k_neg - k_pos, S::ZERO),
        NeuronModel::TernaryAsymmetric => (-k_pos, k_neg),
    }
}

/// Differentiable stand-in for [`fire_value`] whose exact derivatives are the
/// surrogate kernels. Used for gradient checking.
#[inline]
pub fn smooth_spike<S: Scalar>(m: S, p: &NeuronParams<S>, model: NeuronModel, spec: &SurrogateSpec) -> S {
    let pos = spec.step_s(m - p.v_th_p);
    if model.is_ternary() {
        pos + spec.step_s(m + p.neg_threshold(model)) - S::ONE
    } else {
        pos
    }
}

pub fn charge<S: Scalar>(v_prev: &Tensor<S>, input_current: &Tensor<S>) -> Result<Tensor<S>, NeuronError> {
    Ok(v_prev.zip_map(input_current, "charge", |v, x| v + x)?)
}

pub fn fire<S: Scalar>(m: &Tensor<S>, params: &NeuronParams<S>, kind: NeuronKind) -> Tensor<S> {
    m.map(|v| fire_value(v, params, kind.model))
}

pub fn reset<S: Scalar>(m: &Tensor<S>, s: &Tensor<S>, params: &NeuronParams<S>) -> Result<Tensor<S>, NeuronError> {
    Ok(m.zip_map(s, "reset", |m, s| reset_value(m, s, params))?)
}

pub fn surrogate_grad_m<S: Scalar>(
    m: &Tensor<S>,
    params: &NeuronParams<S>,
    kind: NeuronKind,
    spec: &SurrogateSpec,
) -> Tensor<S> {
    m.map(|v| spike_grad(v, params, kind.model, spec))
}

/// Threshold gradients of the emitted spike; an untrainable threshold gets
/// an all-zero tensor.
pub fn surrogate_grad_threshold<S: Scalar>(
    m: &Tensor<S>,
    params: &NeuronParams<S>,
    kind: NeuronKind,
    spec: &SurrogateSpec,
) -> (Tensor<S>, Tensor<S>) {
    let dpos = if kind.pos_trainable() {
        m.map(|v| threshold_sensitivity(v, params, kind.model, spec).0)
    } else {
        Tensor::zeros(m.shape())
    };
    let dneg = if kind.neg_trainable() {
        m.map(|v| threshold_sensitivity(v, params, kind.model, spec).1)
    } else {
        Tensor::zeros(m.shape())
    };
    (dpos, dneg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    fn params(vp: f64, vn: f64) -> NeuronParams<f64> {
        NeuronParams {
            beta: 0.9,
            v_reset: 0.0,
            v_th_p: vp,
            v_th_n: vn,
        }
    }

    #[test]
    fn charge_is_a_plain_sum() {
        let m = charge(&t(&[0.0, 0.3, 0.0]), &t(&[0.5, -0.8, 0.0])).unwrap();
        assert!((m.data()[0] - 0.5).abs() < 1e-15);
        assert!((m.data()[1] + 0.5).abs() < 1e-15);
        assert_eq!(m.data()[2], 0.0);
        assert!(charge(&t(&[0.0]), &t(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn fire_boundaries_are_inclusive() {
        let p = params(1.0, 2.0);
        assert_eq!(fire_value(1.0, &p, NeuronModel::Binary), 1.0);
        assert_eq!(fire_value(-5.0, &p, NeuronModel::Binary), 0.0);
        assert_eq!(fire_value(-1.5, &p, NeuronModel::TernaryAsymmetric), 0.0);
        assert_eq!(fire_value(-2.0, &p, NeuronModel::TernaryAsymmetric), -1.0);
        let sym = params(1.0, 1.0);
        assert_eq!(fire_value(-1.0, &sym, NeuronModel::TernarySymmetric), -1.0);
        // the symmetric model ignores v_th_n entirely
        assert_eq!(fire_value(-1.0, &p, NeuronModel::TernarySymmetric), -1.0);
    }

    #[test]
    fn reset_examples() {
        let p = params(1.0, 2.0);
        assert_eq!(reset_value(1.4, 1.0, &p), 0.0);
        assert!((reset_value(0.5, 0.0, &p) - 0.45).abs() < 1e-15);
        assert_eq!(reset_value(-2.2, -1.0, &p), 0.0);
    }

    #[test]
    fn ste_boxcar_for_ternary() {
        let p = params(1.0, 2.0);
        let ste = SurrogateSpec::ste();
        let model = NeuronModel::TernaryAsymmetric;
        assert_eq!(spike_grad(0.5, &p, model, &ste), 1.0);
        assert_eq!(spike_grad(1.5, &p, model, &ste), 0.0);
        assert_eq!(spike_grad(-2.0, &p, model, &ste), 0.0);
        assert_eq!(spike_grad(-1.99, &p, model, &ste), 1.0);
        // binary clip window [-v_th_p, 2 v_th_p]
        assert_eq!(spike_grad(1.5, &p, NeuronModel::Binary, &ste), 1.0);
        assert_eq!(spike_grad(2.5, &p, NeuronModel::Binary, &ste), 0.0);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn atan_peak_is_one_over_pi() {
        let p = params(1.0, 2.0);
        let g = spike_grad(1.0, &p, NeuronModel::Binary, &SurrogateSpec::atan(2.0));
        assert!((g - 1.0 / PI).abs() < 1e-12);
        assert!((g - 0.318_31).abs() < 1e-5);
    }

    #[test]
    fn threshold_gradients_follow_sign_rules() {
        let p = params(1.0, 2.0);
        let atan = SurrogateSpec::atan(2.0);
        let kind = NeuronKind {
            model: NeuronModel::TernaryAsymmetric,
            trainable_pos: true,
            trainable_neg: true,
        };
        let (dp, dn) = surrogate_grad_threshold(&t(&[1.0, 50.0]), &p, kind, &atan);
        assert!((dp.data()[0] + 1.0 / PI).abs() < 1e-12);
        assert!(dp.data()[1].abs() < 1e-3 && dn.data()[1].abs() < 1e-3);
        assert!(dn.data()[0] > 0.0);

        let ste = SurrogateSpec::ste();
        let (dp, dn) = surrogate_grad_threshold(&t(&[0.5]), &p, kind, &ste);
        assert_eq!((dp.data()[0], dn.data()[0]), (-1.0, 1.0));

        let frozen = NeuronKind::fixed(NeuronModel::TernaryAsymmetric);
        let (dp, dn) = surrogate_grad_threshold(&t(&[1.0]), &p, frozen, &atan);
        assert_eq!((dp.data()[0], dn.data()[0]), (0.0, 0.0));
    }

    #[test]
    fn smooth_spike_derivatives_match_kernels() {
        let p = params(1.0, 2.0);
        let h = 1e-6;
        for spec in [SurrogateSpec::atan(2.0), SurrogateSpec::sigmoid(25.0)] {
            for model in [NeuronModel::Binary, NeuronModel::TernaryAsymmetric] {
                for &m in &[-2.5, -1.9, -0.3, 0.4, 0.95, 1.2] {
                    let fd = (smooth_spike(m + h, &p, model, &spec)
                        - smooth_spike(m - h, &p, model, &spec))
                        / (2.0 * h);
                    let g = spike_grad(m, &p, model, &spec);
                    assert!((fd - g).abs() < 1e-6 * g.abs().max(1.0), "{spec:?} {model:?} m={m}");

                    let mut pp = p;
                    pp.v_th_p += h;
                    let mut pm = p;
                    pm.v_th_p -= h;
                    let fd_p = (smooth_spike(m, &pp, model, &spec)
                        - smooth_spike(m, &pm, model, &spec))
                        / (2.0 * h);
                    let (dpos, dneg) = threshold_sensitivity(m, &p, model, &spec);
                    assert!((fd_p - dpos).abs() < 1e-6 * dpos.abs().max(1.0));
                    if model == NeuronModel::TernaryAsymmetric {
                        let mut np = p;
                        np.v_th_n += h;
                        let mut nm = p;
                        nm.v_th_n -= h;
                        let fd_n = (smooth_spike(m, &np, model, &spec)
                            - smooth_spike(m, &nm, model, &spec))
                            / (2.0 * h);
                        assert!((fd_n - dneg).abs() < 1e-6 * dneg.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn asymmetric_breaks_surrogate_symmetry() {
        let p = params(1.0, 2.0);
        let atan = SurrogateSpec::atan(2.0);
        let model = NeuronModel::TernaryAsymmetric;
        assert!((spike_grad(1.0, &p, model, &atan) - spike_grad(-1.0, &p, model, &atan)).abs() > 1e-3);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(params(0.0, 1.0).validate().is_err());
        assert!(params(1.0, -1.0).validate().is_err());
        let mut p = params(1.0, 1.0);
        p.beta = 1.5;
        assert!(p.validate().is_err());
        let bad = SurrogateSpec {
            alpha: 0.0,
            ..SurrogateSpec::default()
        };
        assert!(bad.validate().is_err());
        assert!("relu".parse::<NeuronModel>().is_err());
    }

    #[test]
    fn clamp_floor() {
        let mut p = params(-0.5, 0.0);
        p.clamp_thresholds();
        assert_eq!(p.v_th_p, THRESHOLD_FLOOR);
        assert_eq!(p.v_th_n, THRESHOLD_FLOOR);
    }

    proptest! {
        #[test]
        fn fire_alphabet(m in -10.0f64..10.0, vp in 0.01f64..5.0, vn in 0.01f64..5.0) {
            let p = params(vp, vn);
            prop_assert!([0.0, 1.0].contains(&fire_value(m, &p, NeuronModel::Binary)));
            for model in [NeuronModel::TernarySymmetric, NeuronModel::TernaryAsymmetric] {
                prop_assert!([-1.0, 0.0, 1.0].contains(&fire_value(m, &p, model)));
            }
        }

        #[test]
        fn reset_after_spike_is_bounded(m in -10.0f64..10.0, vp in 0.01f64..5.0, vn in 0.01f64..5.0,
                                        beta in 0.05f64..1.0, v_reset in -0.5f64..0.5) {
            let p = NeuronParams { beta, v_reset, v_th_p: vp, v_th_n: vn };
            for model in [NeuronModel::Binary, NeuronModel::TernarySymmetric, NeuronModel::TernaryAsymmetric] {
                let s = fire_value(m, &p, model);
                let v = reset_value(m, s, &p);
                if s != 0.0 {
                    prop_assert_eq!(v, v_reset);
                } else {
                    // no spike: pure decay, never grows
                    prop_assert!(v.abs() <= m.abs());
                    prop_assert!(v.abs() <= beta * vp.max(p.neg_threshold(model)).max(m.abs()));
                }
                prop_assert!(v.abs() <= (beta * vp.max(vn)).max(v_reset.abs()) || s == 0.0);
            }
        }

        #[test]
        fn symmetric_surrogate_is_even(m in -5.0f64..5.0, vp in 0.1f64..3.0) {
            let p = params(vp, 7.0);
            for spec in [SurrogateSpec::atan(2.0), SurrogateSpec::sigmoid(25.0)] {
                let a = spike_grad(m, &p, NeuronModel::TernarySymmetric, &spec);
                let b = spike_grad(-m, &p, NeuronModel::TernarySymmetric, &spec);
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
            }
        }

        #[test]
        fn asymmetric_with_equal_thresholds_is_symmetric(m in -5.0f32..5.0, v in 0.1f32..3.0) {
            let p = NeuronParams { beta: 0.9f32, v_reset: 0.0, v_th_p: v, v_th_n: v };
            prop_assert_eq!(
                fire_value(m, &p, NeuronModel::TernaryAsymmetric).to_bits(),
                fire_value(m, &p, NeuronModel::TernarySymmetric).to_bits()
            );
        }
    }
}
