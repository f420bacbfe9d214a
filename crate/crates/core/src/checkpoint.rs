//! Single-file network checkpoints.
//!
//! Layout: a UTF-8 manifest of `key = value` lines and `tensor` entries,
//! terminated by a line reading `end`, followed immediately by the raw
//! little-endian `f32` data of every tensor in manifest order.
//!
//! ```text
//! dsqn-checkpoint 1
//! model = datsqn
//! trainable_pos = false
//! trainable_neg = true
//! input = 4,24,24
//! n_actions = 3
//! layer.0 = conv 16 4 2
//! layer.0.beta = 0.9
//! ...
//! meta.window = 20
//! tensor layer.0.weight f32 16,4,4,4
//! ...
//! end
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::network::{Architecture, LayerSpec, NetworkError, SpikingNetwork};
use crate::neuron::{NeuronKind, NeuronModel};
use crate::tensor::Tensor;

const MAGIC: &str = "dsqn-checkpoint 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// A network plus free-form string metadata (hyperparameters the network
/// needs at inference time, provenance of the run, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: SpikingNetwork<f32>,
    pub meta: BTreeMap<String, String>,
}

fn fmt_dims(d: &[usize]) -> String {
    d.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_dims(s: &str) -> Result<Vec<usize>, CheckpointError> {
    s.split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| CheckpointError::Format(format!("bad dimension list `{s}`: {e}")))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CheckpointError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| CheckpointError::Format(format!("{key}: cannot parse `{value}`: {e}")))
}

impl Checkpoint {
    pub fn new(network: SpikingNetwork<f32>) -> Self {
        Self {
            network,
            meta: BTreeMap::new(),
        }
    }

    fn tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let net = &self.network;
        let mut out = Vec::new();
        for (i, l) in net.layers().iter().enumerate() {
            out.push((format!("layer.{i}.weight"), &l.weight));
            out.push((format!("layer.{i}.bias"), &l.bias));
        }
        out.push(("readout.weight".to_string(), net.readout_weight()));
        out.push(("readout.bias".to_string(), net.readout_bias()));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let net = &self.network;
        let kind = net.kind();
        let arch = net.arch();
        let mut m = String::new();
        m.push_str(MAGIC);
        m.push('\n');
        m.push_str(&format!("model = {}\n", kind.model.network_name()));
        m.push_str(&format!("trainable_pos = {}\n", kind.trainable_pos));
        m.push_str(&format!("trainable_neg = {}\n", kind.trainable_neg));
        m.push_str(&format!("input = {}\n", fmt_dims(&arch.input)));
        m.push_str(&format!("n_actions = {}\n", arch.n_actions));
        for (i, spec) in arch.hidden.iter().enumerate() {
            match *spec {
                LayerSpec::Conv { channels, kernel, stride } => {
                    m.push_str(&format!("layer.{i} = conv {channels} {kernel} {stride}\n"))
                }
                LayerSpec::Dense { units } => m.push_str(&format!("layer.{i} = dense {units}\n")),
            }
        }
        for (i, l) in net.layers().iter().enumerate() {
            let p = &l.neuron;
            m.push_str(&format!("layer.{i}.beta = {}\n", p.beta));
            m.push_str(&format!("layer.{i}.v_reset = {}\n", p.v_reset));
            m.push_str(&format!("layer.{i}.v_th_p = {}\n", p.v_th_p));
            m.push_str(&format!("layer.{i}.v_th_n = {}\n", p.v_th_n));
        }
        for (k, v) in &self.meta {
            m.push_str(&format!("meta.{k} = {v}\n"));
        }
        let tensors = self.tensors();
        for (name, t) in &tensors {
            m.push_str(&format!("tensor {name} f32 {}\n", fmt_dims(t.shape())));
        }
        m.push_str("end\n");
        let mut bytes = m.into_bytes();
        for (_, t) in &tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let fmt = |s: String| CheckpointError::Format(s);
        let end = bytes
            .windows(5)
            .position(|w| w == b"\nend\n")
            .ok_or_else(|| fmt("no `end` line".into()))?;
        let manifest = std::str::from_utf8(&bytes[..end]).map_err(|e| fmt(format!("manifest is not UTF-8: {e}")))?;
        let mut blob = &bytes[end + 5..];
        let mut lines = manifest.lines();
        if lines.next() != Some(MAGIC) {
            return Err(fmt("missing header line".into()));
        }
        let mut kv = BTreeMap::new();
        let mut tensors = Vec::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let [name, dtype, dims] = parts[..] else {
                    return Err(fmt(format!("bad tensor line `{line}`")));
                };
                if dtype != "f32" {
                    return Err(fmt(format!("{name}: unsupported dtype {dtype}")));
                }
                tensors.push((name.to_string(), parse_dims(dims)?));
            } else if let Some((k, v)) = line.split_once(" = ") {
                kv.insert(k.trim().to_string(), v.trim().to_string());
            } else if !line.trim().is_empty() {
                return Err(fmt(format!("unrecognised line `{line}`")));
            }
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| fmt(format!("missing key `{k}`")));

        let model: NeuronModel = parse("model", get("model")?)?;
        let kind = NeuronKind {
            model,
            trainable_pos: parse("trainable_pos", get("trainable_pos")?)?,
            trainable_neg: parse("trainable_neg", get("trainable_neg")?)?,
        };
        let input = parse_dims(get("input")?)?;
        let input: [usize; 3] = input
            .try_into()
            .map_err(|_| fmt("input must have three dimensions".into()))?;
        let n_actions = parse("n_actions", get("n_actions")?)?;
        let mut hidden = Vec::new();
        while let Some(spec) = kv.get(&format!("layer.{}", hidden.len())) {
            let key = format!("layer.{}", hidden.len());
            let parts: Vec<&str> = spec.split_whitespace().collect();
            let layer = match parts[..] {
                ["conv", c, k, s] => LayerSpec::Conv {
                    channels: parse(&key, c)?,
                    kernel: parse(&key, k)?,
                    stride: parse(&key, s)?,
                },
                ["dense", u] => LayerSpec::Dense { units: parse(&key, u)? },
                _ => return Err(fmt(format!("{key}: bad layer spec `{spec}`"))),
            };
            hidden.push(layer);
        }
        let arch = Architecture {
            input,
            hidden,
            n_actions,
        };
        let mut net = SpikingNetwork::zeros(arch, kind)?;
        for (i, l) in net.layers_mut().iter_mut().enumerate() {
            let p = &mut l.neuron;
            for (name, slot) in [
                ("beta", &mut p.beta),
                ("v_reset", &mut p.v_reset),
                ("v_th_p", &mut p.v_th_p),
                ("v_th_n", &mut p.v_th_n),
            ] {
                let key = format!("layer.{i}.{name}");
                *slot = parse(&key, get(&key)?)?;
            }
        }

        let mut ckpt = Checkpoint::new(net);
        let expected: Vec<(String, Vec<usize>)> = ckpt
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected != tensors {
            return Err(fmt(format!(
                "tensor entries {tensors:?} do not match the declared layers {expected:?}"
            )));
        }
        let total: usize = tensors.iter().map(|(_, d)| d.iter().product::<usize>()).sum();
        if blob.len() != total * 4 {
            return Err(fmt(format!("data section has {} bytes, expected {}", blob.len(), total * 4)));
        }
        let mut fill = |t: &mut Tensor<f32>| {
            for (v, chunk) in t.data_mut().iter_mut().zip(blob.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
            blob = &blob[t.len() * 4..];
        };
        let net = &mut ckpt.network;
        for l in net.layers_mut() {
            fill(&mut l.weight);
            fill(&mut l.bias);
        }
        fill(net.readout_weight_mut());
        fill(net.readout_bias_mut());

        for (k, v) in kv {
            if let Some(key) = k.strip_prefix("meta.") {
                ckpt.meta.insert(key.to_string(), v);
            }
        }
        Ok(ckpt)
    }

    /// Writes via a temporary file and rename, so an interrupted write never
    /// leaves a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn sample(seed: u64, model: NeuronModel) -> Checkpoint {
        let mut rng = Rng::new(seed);
        let mut net = SpikingNetwork::init(Architecture::desk([4, 12, 12], 3), NeuronKind::default_for(model), &mut rng)
            .unwrap();
        for l in net.layers_mut() {
            for b in l.bias.data_mut() {
                *b = rng.normal() as f32;
            }
            l.neuron.v_th_n = 1.0 + rng.uniform() as f32;
            l.neuron.v_th_p = 0.1 + rng.uniform() as f32 / 3.0;
        }
        let mut c = Checkpoint::new(net);
        c.meta.insert("window".into(), "20".into());
        c.meta.insert("env".into(), "catch".into());
        c
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("dsqn-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.ckpt");
        let c = sample(1, NeuronModel::TernaryAsymmetric);
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample(2, NeuronModel::Binary).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"hello").is_err());
        let text = String::from_utf8_lossy(&bytes).replace("n_actions = 3", "n_actions = 4");
        assert!(Checkpoint::from_bytes(text.as_bytes()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn bytes_round_trip_bit_exact(seed in any::<u64>(), m in 0usize..3) {
            let model = [NeuronModel::Binary, NeuronModel::TernarySymmetric, NeuronModel::TernaryAsymmetric][m];
            let c = sample(seed, model);
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            let bits = |c: &Checkpoint| -> Vec<u32> {
                c.tensors().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
            };
            prop_assert_eq!(bits(&back), bits(&c));
            prop_assert_eq!(back, c);
        }
    }
}
