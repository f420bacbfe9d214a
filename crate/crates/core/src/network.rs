//! Spiking Q-network: LIF layers unrolled over the simulation window, a
//! non-spiking linear readout summed over time, and hand-derived
//! backpropagation through time.
//!
//! Convolutional activations are stored channels-last: a `[H, W, C]` map is
//! flattened with the channel index fastest. Convolution weights use the
//! matching `[C_out, k, k, C_in]` layout and a dense layer that follows a
//! convolution reads its input in that same order. Callers always pass
//! observations channels-first (`[C, H, W]` per frame, as the encoder emits
//! them); the conversion happens on entry.
//!
//! Batches are handled as rows: row `b * T + t` holds sample `b` at step `t`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neuron::{
    fire_value, reset_value, smooth_spike, spike_grad, threshold_sensitivity, NeuronError, NeuronKind, NeuronParams,
    SurrogateKind, SurrogateSpec,
};
use crate::rng::Rng;
use crate::tensor::{conv_output_size, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("input shape {actual:?} does not match the network input {expected:?} (optionally with leading batch and time axes)")]
    InputShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("output gradient has shape {actual:?}, expected {expected:?}")]
    GradShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("tape was not produced by a network of this shape: {0}")]
    StaleTape(String),
    #[error("smooth forward mode needs a differentiable surrogate, not {0:?}")]
    NoSmoothForm(SurrogateKind),
    #[error(transparent)]
    Neuron(#[from] NeuronError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { channels: usize, kernel: usize, stride: usize },
    Dense { units: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// `[C, H, W]` of one frame stack.
    pub input: [usize; 3],
    pub hidden: Vec<LayerSpec>,
    pub n_actions: usize,
}

impl Architecture {
    /// 84x84x4 input, conv 32@8x8/4, 64@4x4/2, 64@3x3/1, dense 512.
    pub fn atari(n_actions: usize) -> Self {
        Self {
            input: [4, 84, 84],
            hidden: vec![
                LayerSpec::Conv { channels: 32, kernel: 8, stride: 4 },
                LayerSpec::Conv { channels: 64, kernel: 4, stride: 2 },
                LayerSpec::Conv { channels: 64, kernel: 3, stride: 1 },
                LayerSpec::Dense { units: 512 },
            ],
            n_actions,
        }
    }

    /// Scaled-down stack for small grids: conv 16@4x4/2, 32@3x3/1, dense 128.
    pub fn desk(input: [usize; 3], n_actions: usize) -> Self {
        Self {
            input,
            hidden: vec![
                LayerSpec::Conv { channels: 16, kernel: 4, stride: 2 },
                LayerSpec::Conv { channels: 32, kernel: 3, stride: 1 },
                LayerSpec::Dense { units: 128 },
            ],
            n_actions,
        }
    }

    /// Dense-only stack on a flattened input.
    pub fn mlp(input: [usize; 3], units: &[usize], n_actions: usize) -> Self {
        Self {
            input,
            hidden: units.iter().map(|&units| LayerSpec::Dense { units }).collect(),
            n_actions,
        }
    }

    pub fn resolve(&self) -> Result<Vec<Geometry>> {
        let bad = |msg: String| Err(NetworkError::Architecture(msg));
        if self.input.contains(&0) {
            return bad(format!("input dimensions must be positive, got {:?}", self.input));
        }
        if self.hidden.is_empty() {
            return bad("at least one hidden layer is required".into());
        }
        if self.n_actions == 0 {
            return bad("n_actions must be at least 1".into());
        }
        let [c, h, w] = self.input;
        // Some((c, h, w)) while the activation is still a feature map.
        let mut map = Some((c, h, w));
        let mut flat = c * h * w;
        let mut out = Vec::with_capacity(self.hidden.len());
        for (i, spec) in self.hidden.iter().enumerate() {
            let g = match *spec {
                LayerSpec::Conv { channels, kernel, stride } => {
                    let Some((in_c, in_h, in_w)) = map else {
                        return bad(format!("layer {i}: convolution after a dense layer"));
                    };
                    if channels == 0 {
                        return bad(format!("layer {i}: zero output channels"));
                    }
                    let (Some(out_h), Some(out_w)) = (
                        conv_output_size(in_h, kernel, stride),
                        conv_output_size(in_w, kernel, stride),
                    ) else {
                        return bad(format!(
                            "layer {i}: kernel {kernel} stride {stride} does not fit a {in_h}x{in_w} map"
                        ));
                    };
                    map = Some((channels, out_h, out_w));
                    Geometry::Conv {
                        in_c,
                        in_h,
                        in_w,
                        out_c: channels,
                        k: kernel,
                        stride,
                        out_h,
                        out_w,
                    }
                }
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return bad(format!("layer {i}: zero units"));
                    }
                    map = None;
                    Geometry::Dense { n_in: flat, n_out: units }
                }
            };
            flat = g.n_out();
            out.push(g);
        }
        Ok(out)
    }
}

/// Resolved shape of one weighted layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Geometry {
    Conv {
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        out_h: usize,
        out_w: usize,
    },
    Dense { n_in: usize, n_out: usize },
}

impl Geometry {
    pub fn n_in(&self) -> usize {
        match *self {
            Geometry::Conv { in_c, in_h, in_w, .. } => in_c * in_h * in_w,
            Geometry::Dense { n_in, .. } => n_in,
        }
    }

    pub fn n_out(&self) -> usize {
        match *self {
            Geometry::Conv { out_c, out_h, out_w, .. } => out_c * out_h * out_w,
            Geometry::Dense { n_out, .. } => n_out,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            Geometry::Conv { in_c, k, .. } => in_c * k * k,
            Geometry::Dense { n_in, .. } => n_in,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            Geometry::Conv { in_c, out_c, k, .. } => vec![out_c, k, k, in_c],
            Geometry::Dense { n_in, n_out } => vec![n_out, n_in],
        }
    }

    /// Rows of the weight matrix: output channels or units.
    fn rows(&self) -> usize {
        match *self {
            Geometry::Conv { out_c, .. } => out_c,
            Geometry::Dense { n_out, .. } => n_out,
        }
    }

    /// `[C, H, W]` of the output map, if this is a convolution.
    pub fn out_map(&self) -> Option<[usize; 3]> {
        match *self {
            Geometry::Conv { out_c, out_h, out_w, .. } => Some([out_c, out_h, out_w]),
            Geometry::Dense { .. } => None,
        }
    }

    pub fn in_map(&self) -> Option<[usize; 3]> {
        match *self {
            Geometry::Conv { in_c, in_h, in_w, .. } => Some([in_c, in_h, in_w]),
            Geometry::Dense { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer<S: Scalar = f32> {
    pub geometry: Geometry,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub neuron: NeuronParams<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikingNetwork<S: Scalar = f32> {
    arch: Architecture,
    kind: NeuronKind,
    hidden: Vec<HiddenLayer<S>>,
    readout_weight: Tensor<S>,
    readout_bias: Tensor<S>,
}

/// How the forward pass turns membrane potential into the value passed on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpikeMode {
    /// Hard threshold: spikes in {0, 1} or {-1, 0, 1}.
    Hard,
    /// Differentiable surrogate step in place of the threshold. The reset
    /// still uses the hard spike, detached, exactly as the backward pass
    /// assumes.
    Smooth(SurrogateSpec),
}

/// Weight matrices transposed for the scatter-style forward pass. Valid
/// until the network's weights change.
#[derive(Debug, Clone)]
pub struct Prepared<S = f32> {
    hidden: Vec<Vec<S>>,
    readout: Vec<S>,
}

#[derive(Debug, Clone)]
pub struct LayerTape<S> {
    width: usize,
    membrane: Vec<S>,
    spikes: Vec<S>,
    /// Hard spikes, kept only in smooth mode where `spikes` holds the
    /// surrogate values.
    hard: Vec<S>,
}

/// Everything backward needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape<S = f32> {
    batch: usize,
    window: usize,
    widths: Vec<usize>,
    input: Vec<S>,
    layers: Vec<LayerTape<S>>,
    readout_steps: Vec<S>,
}

impl<S: Scalar> Tape<S> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self, layer: usize) -> usize {
        self.layers[layer].width
    }

    /// Network input rows, channels-last.
    pub fn input(&self) -> &[S] {
        &self.input
    }

    /// `m(t)` of every neuron, rows `b * T + t`.
    pub fn membrane(&self, layer: usize) -> &[S] {
        &self.layers[layer].membrane
    }

    /// Values passed to the next layer.
    pub fn spikes(&self, layer: usize) -> &[S] {
        &self.layers[layer].spikes
    }

    /// Thresholded spikes, which drive the reset.
    pub fn hard_spikes(&self, layer: usize) -> &[S] {
        let l = &self.layers[layer];
        if l.hard.is_empty() {
            &l.spikes
        } else {
            &l.hard
        }
    }

    /// Readout contribution `W s(t) + b` of every row; Q is their sum over t.
    pub fn readout_steps(&self) -> &[S] {
        &self.readout_steps
    }

    /// (positive, negative, total) spike-slot counts of a layer.
    pub fn spike_counts(&self, layer: usize) -> (usize, usize, usize) {
        let s = self.hard_spikes(layer);
        let pos = s.iter().filter(|&&v| v > S::ZERO).count();
        let neg = s.iter().filter(|&&v| v < S::ZERO).count();
        (pos, neg, s.len())
    }

    /// Fraction of neuron-step slots carrying a nonzero spike.
    pub fn firing_rate(&self, layer: usize) -> f64 {
        let (pos, neg, total) = self.spike_counts(layer);
        (pos + neg) as f64 / total as f64
    }

    /// Share of nonzero spikes that are positive; `None` if there are none.
    pub fn pos_spike_fraction(&self, layer: usize) -> Option<f64> {
        let (pos, neg, _) = self.spike_counts(layer);
        (pos + neg > 0).then(|| pos as f64 / (pos + neg) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<S: Scalar = f32> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub v_th_p: S,
    pub v_th_n: S,
}

/// Gradients for every parameter; threshold entries are zero when the
/// threshold is not trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<S: Scalar = f32> {
    pub hidden: Vec<LayerGrads<S>>,
    pub readout_weight: Tensor<S>,
    pub readout_bias: Tensor<S>,
    kind: NeuronKind,
}

impl<S: Scalar> ParamGrads<S> {
    /// Trainable gradient blocks, in the order of
    /// [`SpikingNetwork::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[S]> {
        let mut out = Vec::new();
        for l in &self.hidden {
            out.push(l.weight.data());
            out.push(l.bias.data());
            if self.kind.pos_trainable() {
                out.push(std::slice::from_ref(&l.v_th_p));
            }
            if self.kind.neg_trainable() {
                out.push(std::slice::from_ref(&l.v_th_n));
            }
        }
        out.push(self.readout_weight.data());
        out.push(self.readout_bias.data());
        out
    }
}

/// Euclidean norm over a list of blocks.
pub fn l2_norm<S: Scalar>(blocks: &[&[S]]) -> f64 {
    blocks
        .iter()
        .flat_map(|b| b.iter())
        .map(|&v| {
            let v = v.to_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Global L2 norm over all trainable parameter gradients.
pub fn gradient_norm<S: Scalar>(grads: &ParamGrads<S>) -> f64 {
    l2_norm(&grads.slices())
}

fn transpose<S: Scalar>(data: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

#[inline]
fn axpy<S: Scalar>(y: &mut [S], a: S, x: &[S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Visits every (output position, weight row offset) that input element
/// `(y, x, ci)` of a valid convolution touches: calls
/// `f(out_pos, tap)` with `tap = (ky * k + kx) * in_c + ci`.
#[inline]
fn conv_taps(g: &Geometry, idx: usize, mut f: impl FnMut(usize, usize)) {
    let Geometry::Conv {
        in_c,
        in_w,
        k,
        stride,
        out_h,
        out_w,
        ..
    } = *g
    else {
        unreachable!()
    };
    let ci = idx % in_c;
    let x = (idx / in_c) % in_w;
    let y = idx / (in_c * in_w);
    let mut ky = y % stride;
    while ky < k && ky <= y {
        let oy = (y - ky) / stride;
        if oy < out_h {
            let mut kx = x % stride;
            while kx < k && kx <= x {
                let ox = (x - kx) / stride;
                if ox < out_w {
                    f(oy * out_w + ox, (ky * k + kx) * in_c + ci);
                }
                kx += stride;
            }
        }
        ky += stride;
    }
}

/// `out = bias + W x` for one row, skipping zero inputs.
fn layer_forward_row<S: Scalar>(g: &Geometry, wt: &[S], bias: &[S], x: &[S], out: &mut [S]) {
    let rows = g.rows();
    for chunk in out.chunks_exact_mut(rows) {
        chunk.copy_from_slice(bias);
    }
    match g {
        Geometry::Dense { .. } => {
            for (i, &v) in x.iter().enumerate() {
                if v != S::ZERO {
                    axpy(out, v, &wt[i * rows..(i + 1) * rows]);
                }
            }
        }
        Geometry::Conv { .. } => {
            for (i, &v) in x.iter().enumerate() {
                if v != S::ZERO {
                    conv_taps(g, i, |pos, tap| {
                        axpy(&mut out[pos * rows..(pos + 1) * rows], v, &wt[tap * rows..(tap + 1) * rows]);
                    });
                }
            }
        }
    }
}

/// Accumulates `dW^T += x (outer) delta` for one row into the transposed
/// gradient `dwt`.
fn layer_weight_grad_row<S: Scalar>(g: &Geometry, x: &[S], delta: &[S], dwt: &mut [S]) {
    let rows = g.rows();
    match g {
        Geometry::Dense { .. } => {
            for (i, &v) in x.iter().enumerate() {
                if v != S::ZERO {
                    axpy(&mut dwt[i * rows..(i + 1) * rows], v, delta);
                }
            }
        }
        Geometry::Conv { .. } => {
            for (i, &v) in x.iter().enumerate() {
                if v != S::ZERO {
                    conv_taps(g, i, |pos, tap| {
                        axpy(&mut dwt[tap * rows..(tap + 1) * rows], v, &delta[pos * rows..(pos + 1) * rows]);
                    });
                }
            }
        }
    }
}

/// `dx = W^T delta` for all rows at once.
fn layer_input_grad<S: Scalar>(g: &Geometry, w: &[S], delta: &[S], n_rows: usize) -> Vec<S> {
    let n_in = g.n_in();
    let mut dx = vec![S::ZERO; n_rows * n_in];
    match *g {
        Geometry::Dense { n_in, n_out } => {
            S::gemm(n_rows, n_out, n_in, delta, (n_out, 1), w, (n_in, 1), S::ZERO, &mut dx);
        }
        Geometry::Conv {
            in_c,
            in_w,
            out_c,
            k,
            stride,
            out_h,
            out_w,
            ..
        } => {
            let taps = k * k * in_c;
            let positions = out_h * out_w;
            let mut cols = vec![S::ZERO; positions * taps];
            for r in 0..n_rows {
                let d = &delta[r * positions * out_c..(r + 1) * positions * out_c];
                S::gemm(positions, out_c, taps, d, (out_c, 1), w, (taps, 1), S::ZERO, &mut cols);
                let dxr = &mut dx[r * n_in..(r + 1) * n_in];
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let col = &cols[(oy * out_w + ox) * taps..(oy * out_w + ox + 1) * taps];
                        for ky in 0..k {
                            let y = oy * stride + ky;
                            let row = (y * in_w + ox * stride) * in_c;
                            let span = k * in_c;
                            // kx and ci are contiguous in both buffers
                            for (o, &v) in dxr[row..row + span].iter_mut().zip(&col[ky * span..(ky + 1) * span]) {
                                *o += v;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn chw_to_hwc<S: Scalar>(src: &[S], c: usize, h: usize, w: usize, dst: &mut [S]) {
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                dst[(y * w + x) * c + ci] = src[(ci * h + y) * w + x];
            }
        }
    }
}

impl<S: Scalar> SpikingNetwork<S> {
    /// Uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights, zero biases and
    /// the model's default thresholds.
    pub fn init(arch: Architecture, kind: NeuronKind, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(arch, kind)?;
        for layer in &mut net.hidden {
            let bound = 1.0 / (layer.geometry.fan_in() as f64).sqrt();
            for w in layer.weight.data_mut() {
                *w = S::from_f64(rng.uniform_range(-bound, bound));
            }
        }
        let bound = 1.0 / (net.readout_weight.shape()[1] as f64).sqrt();
        for w in net.readout_weight.data_mut() {
            *w = S::from_f64(rng.uniform_range(-bound, bound));
        }
        Ok(net)
    }

    /// All weights and biases zero, default thresholds.
    pub fn zeros(arch: Architecture, kind: NeuronKind) -> Result<Self> {
        let geoms = arch.resolve()?;
        let neuron = NeuronParams::for_model(kind.model);
        let hidden = geoms
            .iter()
            .map(|g| HiddenLayer {
                geometry: *g,
                weight: Tensor::zeros(&g.weight_shape()),
                bias: Tensor::zeros(&[g.rows()]),
                neuron,
            })
            .collect::<Vec<_>>();
        let last = geoms.last().expect("non-empty").n_out();
        Ok(Self {
            readout_weight: Tensor::zeros(&[arch.n_actions, last]),
            readout_bias: Tensor::zeros(&[arch.n_actions]),
            arch,
            kind,
            hidden,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn kind(&self) -> NeuronKind {
        self.kind
    }

    /// Changes which thresholds train. The model itself is fixed.
    pub fn set_trainable(&mut self, pos: bool, neg: bool) {
        self.kind.trainable_pos = pos;
        self.kind.trainable_neg = neg;
    }

    pub fn n_actions(&self) -> usize {
        self.arch.n_actions
    }

    pub fn layers(&self) -> &[HiddenLayer<S>] {
        &self.hidden
    }

    pub fn layers_mut(&mut self) -> &mut [HiddenLayer<S>] {
        &mut self.hidden
    }

    pub fn readout_weight(&self) -> &Tensor<S> {
        &self.readout_weight
    }

    pub fn readout_weight_mut(&mut self) -> &mut Tensor<S> {
        &mut self.readout_weight
    }

    pub fn readout_bias(&self) -> &Tensor<S> {
        &self.readout_bias
    }

    pub fn readout_bias_mut(&mut self) -> &mut Tensor<S> {
        &mut self.readout_bias
    }

    /// Sets both thresholds of every hidden layer.
    pub fn set_thresholds(&mut self, v_th_p: S, v_th_n: S) {
        for l in &mut self.hidden {
            l.neuron.v_th_p = v_th_p;
            l.neuron.v_th_n = v_th_n;
        }
    }

    pub fn clamp_thresholds(&mut self) {
        for l in &mut self.hidden {
            l.neuron.clamp_thresholds();
        }
    }

    /// Convolution weights of layer `layer` in `[C_out, C_in, k, k]` order.
    pub fn conv_weight_oihw(&self, layer: usize) -> Option<Tensor<S>> {
        let l = &self.hidden[layer];
        let Geometry::Conv { in_c, out_c, k, .. } = l.geometry else {
            return None;
        };
        let w = l.weight.data();
        let t = Tensor::from_fn(&[out_c, in_c, k, k], |i| {
            let kx = i % k;
            let ky = (i / k) % k;
            let ci = (i / (k * k)) % in_c;
            let co = i / (k * k * in_c);
            w[((co * k + ky) * k + kx) * in_c + ci]
        });
        Some(t)
    }

    /// Mutable views of every trainable parameter block. Thresholds appear
    /// only when trainable.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
        let kind = self.kind;
        let mut out: Vec<&mut [S]> = Vec::new();
        for l in &mut self.hidden {
            out.push(l.weight.data_mut());
            out.push(l.bias.data_mut());
            if kind.pos_trainable() {
                out.push(std::slice::from_mut(&mut l.neuron.v_th_p));
            }
            if kind.neg_trainable() {
                out.push(std::slice::from_mut(&mut l.neuron.v_th_n));
            }
        }
        out.push(self.readout_weight.data_mut());
        out.push(self.readout_bias.data_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.readout_weight.len() + self.readout_bias.len();
        for l in &self.hidden {
            n += l.weight.len() + l.bias.len();
        }
        n
    }

    /// Same network in another precision.
    pub fn cast<T: Scalar>(&self) -> SpikingNetwork<T> {
        let conv = |t: &Tensor<S>| t.map_to(|v| T::from_f64(v.to_f64()));
        SpikingNetwork {
            arch: self.arch.clone(),
            kind: self.kind,
            hidden: self
                .hidden
                .iter()
                .map(|l| HiddenLayer {
                    geometry: l.geometry,
                    weight: conv(&l.weight),
                    bias: conv(&l.bias),
                    neuron: NeuronParams {
                        beta: T::from_f64(l.neuron.beta.to_f64()),
                        v_reset: T::from_f64(l.neuron.v_reset.to_f64()),
                        v_th_p: T::from_f64(l.neuron.v_th_p.to_f64()),
                        v_th_n: T::from_f64(l.neuron.v_th_n.to_f64()),
                    },
                })
                .collect(),
            readout_weight: conv(&self.readout_weight),
            readout_bias: conv(&self.readout_bias),
        }
    }

    pub fn prepare(&self) -> Prepared<S> {
        Prepared {
            hidden: self
                .hidden
                .iter()
                .map(|l| transpose(l.weight.data(), l.geometry.rows(), l.geometry.fan_in()))
                .collect(),
            readout: transpose(
                self.readout_weight.data(),
                self.arch.n_actions,
                self.readout_weight.shape()[1],
            ),
        }
    }

    fn input_dims(&self, input: &Tensor<S>) -> Result<(usize, usize)> {
        let frame = &self.arch.input;
        let shape = input.shape();
        let err = || NetworkError::InputShape {
            expected: frame.to_vec(),
            actual: shape.to_vec(),
        };
        match shape.len() {
            4 if shape[1..] == frame[..] => Ok((1, shape[0])),
            5 if shape[2..] == frame[..] => Ok((shape[0], shape[1])),
            _ => Err(err()),
        }
    }

    /// Runs the network over an input of shape `[T, C, H, W]` or
    /// `[B, T, C, H, W]` and returns Q of shape `[B, n_actions]`.
    pub fn forward(&self, input: &Tensor<S>, mode: SpikeMode) -> Result<(Tensor<S>, Tape<S>)> {
        self.forward_prepared(&self.prepare(), input, mode)
    }

    pub fn forward_prepared(&self, prep: &Prepared<S>, input: &Tensor<S>, mode: SpikeMode) -> Result<(Tensor<S>, Tape<S>)> {
        let (batch, window) = self.input_dims(input)?;
        if let SpikeMode::Smooth(spec) = mode {
            spec.validate()?;
            if spec.kind == SurrogateKind::Ste {
                return Err(NetworkError::NoSmoothForm(spec.kind));
            }
        }
        let rows = batch * window;
        let [c, h, w] = self.arch.input;
        let n0 = c * h * w;
        let mut x = vec![S::ZERO; rows * n0];
        for (src, dst) in input.data().chunks_exact(n0).zip(x.chunks_exact_mut(n0)) {
            chw_to_hwc(src, c, h, w, dst);
        }

        let model = self.kind.model;
        let mut layers: Vec<LayerTape<S>> = Vec::with_capacity(self.hidden.len());
        for (li, layer) in self.hidden.iter().enumerate() {
            let g = &layer.geometry;
            let (n_in, width) = (g.n_in(), g.n_out());
            let prev: &[S] = if li == 0 { &x } else { &layers[li - 1].spikes };
            let mut membrane = vec![S::ZERO; rows * width];
            for r in 0..rows {
                layer_forward_row(
                    g,
                    &prep.hidden[li],
                    layer.bias.data(),
                    &prev[r * n_in..(r + 1) * n_in],
                    &mut membrane[r * width..(r + 1) * width],
                );
            }
            let mut spikes = vec![S::ZERO; rows * width];
            let mut hard = match mode {
                SpikeMode::Hard => Vec::new(),
                SpikeMode::Smooth(_) => vec![S::ZERO; rows * width],
            };
            let p = &layer.neuron;
            let mut v = vec![S::ZERO; width];
            for b in 0..batch {
                v.fill(S::ZERO);
                for t in 0..window {
                    let base = (b * window + t) * width;
                    for j in 0..width {
                        let m = v[j] + membrane[base + j];
                        membrane[base + j] = m;
                        let s = fire_value(m, p, model);
                        v[j] = reset_value(m, s, p);
                        match mode {
                            SpikeMode::Hard => spikes[base + j] = s,
                            SpikeMode::Smooth(spec) => {
                                hard[base + j] = s;
                                spikes[base + j] = smooth_spike(m, p, model, &spec);
                            }
                        }
                    }
                }
            }
            layers.push(LayerTape {
                width,
                membrane,
                spikes,
                hard,
            });
        }

        let n_act = self.arch.n_actions;
        let last = layers.last().expect("non-empty");
        let mut readout_steps = vec![S::ZERO; rows * n_act];
        let mut q = vec![S::ZERO; batch * n_act];
        let ro = Geometry::Dense {
            n_in: last.width,
            n_out: n_act,
        };
        for r in 0..rows {
            let y = &mut readout_steps[r * n_act..(r + 1) * n_act];
            layer_forward_row(
                &ro,
                &prep.readout,
                self.readout_bias.data(),
                &last.spikes[r * last.width..(r + 1) * last.width],
                y,
            );
            let b = r / window;
            for (qv, &yv) in q[b * n_act..(b + 1) * n_act].iter_mut().zip(y.iter()) {
                *qv += yv;
            }
        }

        let tape = Tape {
            batch,
            window,
            widths: self.hidden.iter().map(|l| l.geometry.n_out()).collect(),
            input: x,
            layers,
            readout_steps,
        };
        Ok((Tensor::new(vec![batch, n_act], q)?, tape))
    }

    /// Backpropagation through time from `dl_dq` (`[B, n_actions]`).
    ///
    /// Credit reaches `m(t)` through the spike (`ds/dm` from `spec`) and
    /// through the membrane carry `v(t) = beta m(t) (1 - |s(t)|)`, where the
    /// reset gate `|s(t)|` is held constant.
    pub fn backward(&self, tape: &Tape<S>, dl_dq: &Tensor<S>, spec: &SurrogateSpec) -> Result<ParamGrads<S>> {
        spec.validate()?;
        let widths: Vec<usize> = self.hidden.iter().map(|l| l.geometry.n_out()).collect();
        if widths != tape.widths || tape.input.len() != tape.batch * tape.window * self.hidden[0].geometry.n_in() {
            return Err(NetworkError::StaleTape(format!(
                "layer widths {:?} vs tape {:?}",
                widths, tape.widths
            )));
        }
        let (batch, window) = (tape.batch, tape.window);
        let n_act = self.arch.n_actions;
        if dl_dq.shape() != [batch, n_act] {
            return Err(NetworkError::GradShape {
                expected: vec![batch, n_act],
                actual: dl_dq.shape().to_vec(),
            });
        }
        let rows = batch * window;
        let dq = dl_dq.data();
        let model = self.kind.model;

        // readout
        let last_w = *widths.last().expect("non-empty");
        let last_s = &tape.layers.last().expect("non-empty").spikes;
        let mut summed = vec![S::ZERO; batch * last_w];
        for r in 0..rows {
            let b = r / window;
            for (o, &v) in summed[b * last_w..(b + 1) * last_w]
                .iter_mut()
                .zip(&last_s[r * last_w..(r + 1) * last_w])
            {
                *o += v;
            }
        }
        let mut readout_weight = vec![S::ZERO; n_act * last_w];
        S::gemm(n_act, batch, last_w, dq, (1, n_act), &summed, (last_w, 1), S::ZERO, &mut readout_weight);
        let mut readout_bias = vec![S::ZERO; n_act];
        for b in 0..batch {
            for a in 0..n_act {
                readout_bias[a] += dq[b * n_act + a];
            }
        }
        let t_scale = S::from_f64(window as f64);
        for v in &mut readout_bias {
            *v *= t_scale;
        }
        let mut per_sample = vec![S::ZERO; batch * last_w];
        S::gemm(
            batch,
            n_act,
            last_w,
            dq,
            (n_act, 1),
            self.readout_weight.data(),
            (last_w, 1),
            S::ZERO,
            &mut per_sample,
        );
        let mut ds = vec![S::ZERO; rows * last_w];
        for r in 0..rows {
            let b = r / window;
            ds[r * last_w..(r + 1) * last_w].copy_from_slice(&per_sample[b * last_w..(b + 1) * last_w]);
        }

        let mut hidden_grads = Vec::with_capacity(self.hidden.len());
        for li in (0..self.hidden.len()).rev() {
            let layer = &self.hidden[li];
            let g = &layer.geometry;
            let p = &layer.neuron;
            let width = widths[li];
            let lt = &tape.layers[li];
            let mut delta = vec![S::ZERO; rows * width];
            let (mut g_pos, mut g_neg) = (S::ZERO, S::ZERO);
            let want_thresholds = self.kind.pos_trainable() || self.kind.neg_trainable();
            let mut dv = vec![S::ZERO; width];
            for b in 0..batch {
                dv.fill(S::ZERO);
                for t in (0..window).rev() {
                    let base = (b * window + t) * width;
                    for j in 0..width {
                        let m = lt.membrane[base + j];
                        let hard = fire_value(m, p, model);
                        let up = ds[base + j];
                        let dm = up * spike_grad(m, p, model, spec) + dv[j] * p.beta * (S::ONE - hard.abs());
                        if want_thresholds && up != S::ZERO {
                            let (tp, tn) = threshold_sensitivity(m, p, model, spec);
                            g_pos += up * tp;
                            g_neg += up * tn;
                        }
                        delta[base + j] = dm;
                        dv[j] = dm;
                    }
                }
            }

            let rows_w = g.rows();
            let mut bias = vec![S::ZERO; rows_w];
            for chunk in delta.chunks_exact(rows_w) {
                for (o, &v) in bias.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            let n_in = g.n_in();
            let x: &[S] = if li == 0 { &tape.input } else { &tape.layers[li - 1].spikes };
            let mut dwt = vec![S::ZERO; layer.weight.len()];
            for r in 0..rows {
                layer_weight_grad_row(g, &x[r * n_in..(r + 1) * n_in], &delta[r * width..(r + 1) * width], &mut dwt);
            }
            let weight = transpose(&dwt, g.fan_in(), rows_w);
            if li > 0 {
                ds = layer_input_grad(g, layer.weight.data(), &delta, rows);
            }
            hidden_grads.push(LayerGrads {
                weight: Tensor::new(layer.weight.shape().to_vec(), weight)?,
                bias: Tensor::new(vec![rows_w], bias)?,
                v_th_p: if self.kind.pos_trainable() { g_pos } else { S::ZERO },
                v_th_n: if self.kind.neg_trainable() { g_neg } else { S::ZERO },
            });
        }
        hidden_grads.reverse();
        Ok(ParamGrads {
            hidden: hidden_grads,
            readout_weight: Tensor::new(vec![n_act, last_w], readout_weight)?,
            readout_bias: Tensor::new(vec![n_act], readout_bias)?,
            kind: self.kind,
        })
    }
}
