//! Configuration types shared across the pipeline.

use serde::{Deserialize, Serialize};

use crate::data::SplitSpec;

/// Architecture configuration (everything a checkpoint must restore).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Embedding / token dimension.
    pub d: usize,
    /// Number of hypergraph convolution layers.
    pub conv_layers: usize,
    pub ln_eps: f64,
    /// Hyperedge time-window in seconds; 0 disables windowing.
    pub window_seconds: i64,
    /// Ego sub-hypergraph radius (1 or 2).
    pub hops: usize,
    /// Agents per MoA layer, e.g. [3, 3, 1].
    pub moa_layers: Vec<usize>,
    /// Agent hidden dimension (adapters reconcile it with `d`).
    pub d_agent: usize,
    pub prompt_template: String,
    /// Top-k used when instantiating the prompt.
    pub prompt_k: usize,
    /// When false, graph tokens are replaced by zeros of identical shape
    /// (the encoder-removal ablation).
    #[serde(default = "default_true")]
    pub encoder_enabled: bool,
}

fn default_true() -> bool {
    true
}

pub const DEFAULT_PROMPT_TEMPLATE: &str =
    "Recommend the top {K} most relevant items for user {U} based on their interactions from {T2} to {T1}";

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            conv_layers: 2,
            ln_eps: 1e-5,
            window_seconds: 86_400,
            hops: 1,
            moa_layers: vec![3, 3, 1],
            d_agent: 0, // 0 means "same as d"
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            prompt_k: 5,
            encoder_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn agent_dim(&self) -> usize {
        if self.d_agent == 0 {
            self.d
        } else {
            self.d_agent
        }
    }
}

/// Optimiser and loop configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Negatives sampled per positive per behaviour.
    pub negatives_per_positive: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            warmup_steps: 500,
            weight_decay: 1e-5,
            negatives_per_positive: 4,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

/// Fully resolved run configuration; persisted verbatim with every output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: Option<String>,
    pub min_interactions: usize,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Agent roster file (JSON); None means an all-mock roster derived
    /// from the seed.
    pub agents: Option<String>,
    pub prices: Option<String>,
    pub out: Option<String>,
    pub checkpoint: Option<String>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            min_interactions: 5,
            split: SplitSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            agents: None,
            prices: None,
            out: None,
            checkpoint: None,
            seed: 0,
        }
    }
}

/// Stable sub-seed derivation so components can be varied independently.
pub fn sub_seed(master: u64, label: &str) -> u64 {
    // FNV-1a over the label, mixed with the master seed.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ master.wrapping_mul(0x9E3779B97F4A7C15)
}
