//! The `--config` file: TOML with optional `[model]`, `[training]` and
//! `[eval]` tables. Command-line flags override anything set here.

use std::path::Path;

use anyhow::Context;
use serde::Deserialize;

use haicu::model::{ModelConfig, Variant};
use haicu::training::TrainingConfig;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub model: ModelSection,
    pub training: TrainingConfig,
    pub eval: EvalSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Option<Variant>,
    pub history: Option<usize>,
    pub horizon: Option<usize>,
    pub node_hidden: Option<usize>,
    pub edge_hidden: Option<usize>,
    pub future_hidden: Option<usize>,
    pub decoder_hidden: Option<usize>,
    pub latent: Option<usize>,
    pub interaction_radius: Option<f64>,
    pub edge_window_union: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub horizons: Option<Vec<f64>>,
    pub n_samples: Option<usize>,
    pub stride: Option<usize>,
    pub batch_size: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

impl ModelSection {
    pub fn build(&self, class_names: Vec<String>, dt: f64, variant: Option<Variant>) -> ModelConfig {
        let mut c = ModelConfig::new(class_names, variant.or(self.variant).unwrap_or(Variant::FullProbs));
        c.dt = dt;
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut c.history, self.history);
        set(&mut c.horizon, self.horizon);
        set(&mut c.node_hidden, self.node_hidden);
        set(&mut c.edge_hidden, self.edge_hidden);
        set(&mut c.future_hidden, self.future_hidden);
        set(&mut c.decoder_hidden, self.decoder_hidden);
        set(&mut c.latent, self.latent);
        if let Some(r) = self.interaction_radius {
            c.interaction_radius = r;
        }
        if let Some(u) = self.edge_window_union {
            c.edge_window_union = u;
        }
        c
    }
}
