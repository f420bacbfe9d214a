//! Rate coding of pixel observations into input spike trains.
//!
//! Input spikes are always in {0, 1}, whatever neuron model the hidden
//! layers use.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum EncodeError {
    #[error("pixel value {value} at index {index} is outside [0, 255]")]
    PixelOutOfRange { index: usize, value: i64 },
    #[error("observation {channels}x{height}x{width} needs {expected} values, got {actual}")]
    Length {
        channels: usize,
        height: usize,
        width: usize,
        expected: usize,
        actual: usize,
    },
    #[error("firing probability {value} at index {index} is outside [0, 1]")]
    ProbabilityOutOfRange { index: usize, value: f64 },
    #[error("simulation window must be at least 1 step")]
    EmptyWindow,
}

/// Stack of `channels` grayscale frames with 8-bit pixels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl Observation {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self, EncodeError> {
        let expected = channels * height * width;
        if pixels.len() != expected || expected == 0 {
            return Err(EncodeError::Length {
                channels,
                height,
                width,
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
        })
    }

    /// Builds an observation from arbitrary integers, rejecting anything
    /// outside the 8-bit range.
    pub fn from_ints(channels: usize, height: usize, width: usize, values: &[i64]) -> Result<Self, EncodeError> {
        let pixels = values
            .iter()
            .enumerate()
            .map(|(index, &value)| {
                u8::try_from(value).map_err(|_| EncodeError::PixelOutOfRange { index, value })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(channels, height, width, pixels)
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            pixels: vec![0; channels * height * width],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }
}

/// Pixel intensities scaled into `[0, 1]`, shaped `[C, H, W]`.
pub fn normalize(obs: &Observation) -> Tensor<f32> {
    let data = obs.pixels.iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::new(obs.shape().to_vec(), data).expect("observation shape is non-empty")
}

fn check_probabilities(p: &Tensor<f32>, window: usize) -> Result<(), EncodeError> {
    if window == 0 {
        return Err(EncodeError::EmptyWindow);
    }
    if let Some((index, &value)) = p
        .data()
        .iter()
        .enumerate()
        .find(|(_, &v)| !(0.0..=1.0).contains(&v))
    {
        return Err(EncodeError::ProbabilityOutOfRange {
            index,
            value: value as f64,
        });
    }
    Ok(())
}

fn with_time_axis(p: &Tensor<f32>, window: usize, data: Vec<f32>) -> Tensor<f32> {
    let mut shape = Vec::with_capacity(p.shape().len() + 1);
    shape.push(window);
    shape.extend_from_slice(p.shape());
    Tensor::new(shape, data).expect("shape matches data")
}

/// Independent Bernoulli spike per element and step. Elements with `p` of
/// exactly 0 or 1 are deterministic and draw nothing from `rng`.
pub fn bernoulli_encode(p: &Tensor<f32>, window: usize, rng: &mut Rng) -> Result<Tensor<f32>, EncodeError> {
    check_probabilities(p, window)?;
    let n = p.len();
    let mut out = vec![0.0f32; window * n];
    for step in out.chunks_exact_mut(n) {
        for (o, &prob) in step.iter_mut().zip(p.data()) {
            *o = if prob >= 1.0 {
                1.0
            } else if prob <= 0.0 {
                0.0
            } else if rng.uniform_f32() < prob {
                1.0
            } else {
                0.0
            };
        }
    }
    Ok(with_time_axis(p, window, out))
}

/// Poisson-process rate coding: each element carries a Poisson process of
/// intensity `-ln(1 - p)` per step, and a step spikes if it holds at least
/// one arrival. Arrivals are generated by exponential inter-arrival times,
/// so the per-step firing probability is exactly `p`.
pub fn poisson_encode(p: &Tensor<f32>, window: usize, rng: &mut Rng) -> Result<Tensor<f32>, EncodeError> {
    check_probabilities(p, window)?;
    let n = p.len();
    let mut out = vec![0.0f32; window * n];
    for (i, &prob) in p.data().iter().enumerate() {
        if prob <= 0.0 {
            continue;
        }
        if prob >= 1.0 {
            for t in 0..window {
                out[t * n + i] = 1.0;
            }
            continue;
        }
        let intensity = -(1.0 - prob as f64).ln();
        let mut time = rng.exponential() / intensity;
        while time < window as f64 {
            out[time as usize * n + i] = 1.0;
            time += rng.exponential() / intensity;
        }
    }
    Ok(with_time_axis(p, window, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    Bernoulli,
    Poisson,
}

impl std::str::FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bernoulli" => Ok(EncoderKind::Bernoulli),
            "poisson" => Ok(EncoderKind::Poisson),
            other => Err(format!("unknown encoder `{other}` (expected bernoulli or poisson)")),
        }
    }
}

impl EncoderKind {
    pub fn encode(self, obs: &Observation, window: usize, rng: &mut Rng) -> Result<Tensor<f32>, EncodeError> {
        let p = normalize(obs);
        match self {
            EncoderKind::Bernoulli => bernoulli_encode(&p, window, rng),
            EncoderKind::Poisson => poisson_encode(&p, window, rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let obs = Observation::from_ints(1, 1, 3, &[255, 0, 128]).unwrap();
        let t = normalize(&obs);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[1], 0.0);
        assert!((t.data()[2] as f64 - 0.501961).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_pixels_rejected() {
        let err = Observation::from_ints(1, 1, 2, &[10, 256]).unwrap_err();
        assert_eq!(err, EncodeError::PixelOutOfRange { index: 1, value: 256 });
        assert!(Observation::from_ints(1, 1, 1, &[-1]).is_err());
        assert!(Observation::new(1, 2, 2, vec![0; 3]).is_err());
    }

    #[test]
    fn certain_and_impossible_probabilities() {
        let mut rng = Rng::new(3);
        for encode in [bernoulli_encode, poisson_encode] {
            let ones = encode(&Tensor::full(&[4, 5], 1.0), 20, &mut rng).unwrap();
            assert_eq!(ones.shape(), &[20, 4, 5]);
            assert!(ones.data().iter().all(|&v| v == 1.0));
            let zeros = encode(&Tensor::zeros(&[4, 5]), 20, &mut rng).unwrap();
            assert!(zeros.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn invalid_probability_and_window() {
        let mut rng = Rng::new(0);
        let bad = Tensor::new(vec![2], vec![0.5f32, 1.5]).unwrap();
        assert!(matches!(
            bernoulli_encode(&bad, 4, &mut rng),
            Err(EncodeError::ProbabilityOutOfRange { index: 1, .. })
        ));
        assert!(poisson_encode(&bad, 4, &mut rng).is_err());
        assert_eq!(
            bernoulli_encode(&Tensor::zeros(&[2]), 0, &mut rng),
            Err(EncodeError::EmptyWindow)
        );
    }

    #[test]
    fn half_probability_rate_within_three_sigma() {
        // 1e5 draws at p = 0.5: sigma of the mean is 0.5/sqrt(1e5) ~ 0.00158,
        // so [0.495, 0.505] is a > 3 sigma band.
        for (k, encode) in [bernoulli_encode, poisson_encode].into_iter().enumerate() {
            let mut rng = Rng::new(100 + k as u64);
            let p = Tensor::full(&[5000], 0.5f32);
            let s = encode(&p, 20, &mut rng).unwrap();
            let mean = s.data().iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64;
            assert!((0.495..=0.505).contains(&mean), "encoder {k}: {mean}");
        }
    }

    #[test]
    fn same_seed_same_train() {
        let p = Tensor::from_fn(&[3, 6, 6], |i| (i % 11) as f32 / 10.0);
        for encode in [bernoulli_encode, poisson_encode] {
            let a = encode(&p, 8, &mut Rng::new(9)).unwrap();
            let b = encode(&p, 8, &mut Rng::new(9)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rate_fidelity_over_probability_grid() {
        let n = 2000usize;
        let window = 10usize;
        let draws = (n * window) as f64;
        for step in 0..=20 {
            let prob = step as f32 / 20.0;
            let p = Tensor::full(&[n], prob);
            for (k, encode) in [bernoulli_encode, poisson_encode].into_iter().enumerate() {
                let s = encode(&p, window, &mut Rng::new(step * 7 + k as u64)).unwrap();
                assert!(s.data().iter().all(|&v| v == 0.0 || v == 1.0));
                let mean = s.data().iter().map(|&v| v as f64).sum::<f64>() / draws;
                let sigma = (prob as f64 * (1.0 - prob as f64) / draws).sqrt();
                assert!(
                    (mean - prob as f64).abs() <= 3.0 * sigma,
                    "encoder {k} p={prob}: mean {mean}"
                );
            }
        }
    }
}
