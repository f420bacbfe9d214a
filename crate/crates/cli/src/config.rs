//! Run configuration: a TOML file with `[neuron]` and `[agent]` sections,
//! merged with command-line overrides and snapshotted into the run
//! directory.

use std::path::{Path, PathBuf};

use dsqn_core::network::Architecture;
use dsqn_core::neuron::{NeuronKind, NeuronModel, NeuronParams};
use dsqn_core::rl::AgentConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable naming the default output root.
pub const OUT_DIR_VAR: &str = "DSQN_OUT_DIR";

pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_DIR_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    /// 16@4x4/2, 32@3x3/1, dense 128.
    #[default]
    Desk,
    /// 32@8x8/4, 64@4x4/2, 64@3x3/1, dense 512 on 4x84x84 input.
    Atari,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeuronSection {
    /// dsqn, dtsqn or datsqn.
    pub model: String,
    pub beta: f64,
    pub v_reset: f64,
    pub v_th_p: f64,
    /// Defaults to 2 for datsqn and to `v_th_p` otherwise.
    pub v_th_n: Option<f64>,
    pub trainable_pos: bool,
    /// Defaults to true for datsqn.
    pub trainable_neg: Option<bool>,
}

impl Default for NeuronSection {
    fn default() -> Self {
        Self {
            model: "datsqn".into(),
            beta: 0.9,
            v_reset: 0.0,
            v_th_p: 1.0,
            v_th_n: None,
            trainable_pos: false,
            trainable_neg: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: String,
    pub arch: ArchKind,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub neuron: NeuronSection,
    pub agent: AgentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: "catch".into(),
            arch: ArchKind::Desk,
            seed: 0,
            out_dir: None,
            neuron: NeuronSection::default(),
            agent: AgentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn model(&self) -> Result<NeuronModel, CliError> {
        self.neuron
            .model
            .parse()
            .map_err(|e: dsqn_core::neuron::UnknownModel| CliError::Usage(e.to_string()))
    }

    pub fn kind(&self) -> Result<NeuronKind, CliError> {
        let model = self.model()?;
        Ok(NeuronKind {
            model,
            trainable_pos: self.neuron.trainable_pos,
            trainable_neg: self
                .neuron
                .trainable_neg
                .unwrap_or(model == NeuronModel::TernaryAsymmetric),
        })
    }

    pub fn neuron_params(&self) -> Result<NeuronParams<f32>, CliError> {
        let model = self.model()?;
        let n = &self.neuron;
        let default_neg = NeuronParams::<f64>::for_model(model).v_th_n;
        let v_th_n = n.v_th_n.unwrap_or(if model == NeuronModel::TernaryAsymmetric {
            default_neg
        } else {
            n.v_th_p
        });
        let p = NeuronParams {
            beta: n.beta as f32,
            v_reset: n.v_reset as f32,
            v_th_p: n.v_th_p as f32,
            v_th_n: v_th_n as f32,
        };
        p.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(p)
    }

    pub fn architecture(&self, input: [usize; 3], n_actions: usize) -> Architecture {
        match self.arch {
            ArchKind::Desk => Architecture::desk(input, n_actions),
            ArchKind::Atari => Architecture::atari(n_actions),
        }
    }

    pub fn out_root(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(default_out_root)
    }

    /// Checks every field and fills the model-dependent defaults so the
    /// snapshot states the values actually used.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let kind = self.kind()?;
        let params = self.neuron_params()?;
        self.neuron.model = kind.model.network_name().into();
        self.neuron.v_th_n = Some(params.v_th_n as f64);
        self.neuron.trainable_neg = Some(kind.trainable_neg);
        self.out_dir = Some(self.out_root());
        self.agent.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        dsqn_core::env::make_env(&self.env).map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
