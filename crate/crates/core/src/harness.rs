//! Ablation harness: train and evaluate named variants of the base
//! configuration from one entry point, with labelled, provenance-stamped
//! reports.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ModelConfig, TrainConfig};
use crate::data::{
    build_candidate_sets, chronological_split, Behaviour, Dataset, SplitSpec,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_instances, EvalReport};
use crate::moa::MoaRunner;
use crate::pipeline::{build_graph, Model};
use crate::train::train;

/// The ablation variants of the experiment table, plus the unmodified
/// base model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoEncoder,
    SingleAgent,
    Layers1,
    Layers2,
    Layers3,
}

pub const ALL_VARIANTS: [Variant; 6] = [
    Variant::Full,
    Variant::NoEncoder,
    Variant::SingleAgent,
    Variant::Layers1,
    Variant::Layers2,
    Variant::Layers3,
];

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "full" => Ok(Variant::Full),
            "no_encoder" => Ok(Variant::NoEncoder),
            "single_agent" => Ok(Variant::SingleAgent),
            "layers_1" => Ok(Variant::Layers1),
            "layers_2" => Ok(Variant::Layers2),
            "layers_3" => Ok(Variant::Layers3),
            other => Err(Error::Config(format!("unknown ablation variant {other}"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEncoder => "no_encoder",
            Variant::SingleAgent => "single_agent",
            Variant::Layers1 => "layers_1",
            Variant::Layers2 => "layers_2",
            Variant::Layers3 => "layers_3",
        }
    }

    /// Derive the variant's model config from the base. Layer-count
    /// variants keep the final single-agent aggregator layer, so
    /// layers_1 issues exactly one agent call per forward.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut config = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoEncoder => config.encoder_enabled = false,
            Variant::SingleAgent | Variant::Layers1 => config.moa_layers = vec![1],
            Variant::Layers2 => config.moa_layers = vec![3, 1],
            Variant::Layers3 => config.moa_layers = vec![3, 3, 1],
        }
        config
    }
}

/// SHA-256 over the canonical JSON form of a config.
pub fn config_digest(config: &ModelConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub variant: &'static str,
    pub config_digest: String,
    pub report: EvalReport,
    /// Agent calls made during evaluation (cost-log length).
    pub eval_agent_calls: usize,
}

/// Train and evaluate each variant from scratch with the shared seed.
pub fn ablation_run(
    base: &ModelConfig,
    tc: &TrainConfig,
    ds: &Dataset,
    split_spec: &SplitSpec,
    variants: &[Variant],
) -> Result<Vec<AblationReport>> {
    let split = chronological_split(ds, split_spec)?;
    let test = build_candidate_sets(&split.test, ds, split_spec, 1)?;
    let mut out = Vec::with_capacity(variants.len());
    for &variant in variants {
        let config = variant.apply(base);
        let graph = build_graph(&split.train, &config);
        let mut model = Model::init(
            config.clone(),
            ds.n_users(),
            ds.n_items(),
            tc.seed,
        );
        let runner = MoaRunner::all_mock(&config, tc.seed);
        let mut train_cost = Vec::new();
        train(
            &mut model,
            &split.train,
            &graph,
            &[],
            &runner,
            tc,
            &mut train_cost,
        )?;
        let mut eval_cost = Vec::new();
        let report = evaluate_instances(
            &model,
            &graph,
            &test,
            &runner,
            Behaviour::Buy,
            &mut eval_cost,
        )?;
        out.push(AblationReport {
            variant: variant.label(),
            config_digest: config_digest(&config),
            report,
            eval_agent_calls: eval_cost.len(),
        });
    }
    Ok(out)
}
