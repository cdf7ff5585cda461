use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::Result;
use crate::model::{Architecture, ModelConfig, ModelParams, ParamKind};
use crate::spectral::{self, SnMode, SpectralState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SnConfig {
    pub enabled: bool,
    pub target: f64,
    pub mode: SnMode,
}

impl Default for SnConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            target: 5.0,
            mode: SnMode::Rescale,
        }
    }
}

impl SnConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

/// FNV-1a, used to derive per-matrix seeds from parameter names.
pub(crate) fn name_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Everything needed to resume or evaluate a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub params: ModelParams,
    pub spectral: BTreeMap<String, SpectralState>,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Epochs taken so far; drives the shuffling stream.
    pub epochs: u64,
    pub seed: u64,
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::full(&config);
        let params = ModelParams::init(&config, &arch, seed)?;
        Ok(Self {
            config,
            arch,
            params,
            spectral: BTreeMap::new(),
            step: 0,
            epochs: 0,
            seed,
        })
    }

    pub fn spectral_state(&mut self, name: &str, w: &Tensor) -> &mut SpectralState {
        let seed = self.seed ^ name_hash(name);
        self.spectral
            .entry(name.to_string())
            .or_insert_with(|| SpectralState::new(w.rows(), w.cols(), seed))
    }

    /// Weights as applied in the forward pass. With SN on, each projection is
    /// rescaled using one power-iteration step from its stored `u`, without
    /// mutating the state.
    pub fn effective_params(&self, sn: &SnConfig) -> ModelParams {
        if !sn.enabled {
            return self.params.clone();
        }
        self.params.map(&mut |k, w| {
            if k.kind != ParamKind::Projection {
                return w.clone();
            }
            let mut st = match self.spectral.get(&k.name) {
                Some(s) => s.clone(),
                None => SpectralState::new(w.rows(), w.cols(), self.seed ^ name_hash(&k.name)),
            };
            let sigma = st.step(w);
            w.scaled(spectral::sn_factor(sigma, sn.target, sn.mode))
        })
    }

    /// Shrinks to `arch`, dropping parameters and spectral state of removed
    /// units while keeping survivors' weights.
    pub fn apply_architecture(&mut self, arch: Architecture) {
        self.params.restrict_to(&arch);
        let live: std::collections::BTreeSet<String> = self.params.keys().into_iter().map(|k| k.name).collect();
        self.spectral.retain(|name, _| live.contains(name));
        self.arch = arch;
    }
}
