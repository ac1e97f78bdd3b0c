//! Per-user forward pass: ego encoding, graph tokens, prompt fusion and
//! the MoA stack, on one tape.

use ndarray::Array2;

use crate::config::ModelConfig;
use crate::data::{Dataset, BEHAVIOURS};
use crate::encoder;
use crate::error::Result;
use crate::fusion::{instantiate_template, positional_encoding, PromptVocab};
use crate::hypergraph::{ego_subgraph, EgoGraph, Hypergraph};
use crate::moa::{CostRecord, MoaRunner};
use crate::params::{Bindings, ModelParams};
use crate::tape::{NodeId, Tape};

/// Number of graph-token slots: one per behaviour plus one global.
pub fn graph_token_count() -> usize {
    BEHAVIOURS.len() + 1
}

/// A checkpointable model: architecture, parameters and prompt vocabulary.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub vocab: PromptVocab,
    pub n_users: usize,
    pub n_items: usize,
}

impl Model {
    pub fn init(config: ModelConfig, n_users: usize, n_items: usize, seed: u64) -> Model {
        let vocab = PromptVocab::build(&config.prompt_template);
        let params = ModelParams::init(&config, n_users, n_items, vocab.len(), seed);
        Model {
            config,
            params,
            vocab,
            n_users,
            n_items,
        }
    }

    /// Prompt token ids for the configured template; identical for every
    /// user because ids and timestamps map to bucket tokens.
    pub fn prompt_ids(&self) -> Result<Vec<usize>> {
        let text = instantiate_template(&self.config.prompt_template, self.config.prompt_k, "", 0, 0);
        self.vocab.tokenize(&text)
    }
}

pub struct ForwardOut {
    /// Fused input x_1 (k+m rows).
    pub x1: NodeId,
    /// Final MoA output, same shape as x_1.
    pub moa_out: NodeId,
    /// Which graph-token slots were populated.
    pub token_present: Vec<bool>,
}

/// Build the full differentiable forward for one user's ego graph.
/// `zero_graph_tokens` replaces the encoder output with a zero block of
/// identical shape (the encoder-removal ablation).
pub fn user_forward(
    tape: &mut Tape,
    model: &Model,
    bindings: &Bindings,
    ego: &EgoGraph,
    runner: &MoaRunner,
    cost: &mut Vec<CostRecord>,
    zero_graph_tokens: bool,
) -> Result<ForwardOut> {
    let d = model.config.d;
    let k = graph_token_count();
    let (tokens, present) = if zero_graph_tokens || !model.config.encoder_enabled {
        let zeros = tape.constant(Array2::zeros((k, d)));
        (zeros, vec![false; k])
    } else {
        let encoded = encoder::encode(
            tape,
            ego,
            bindings,
            &model.config,
            model.n_users,
            model.n_items,
        )?;
        encoder::generate_graph_tokens(tape, ego, encoded, bindings, d)?
    };

    let ids = model.prompt_ids()?;
    let prompt = tape.gather_rows(bindings.id("prompt.embed"), ids);
    let cat = tape.concat_rows(tokens, prompt);
    let pe = positional_encoding(tape.value(cat).nrows(), d)?;
    let pe_id = tape.constant(pe);
    let x1 = tape.add(cat, pe_id);

    let moa_out = runner.forward(tape, x1, bindings, cost)?;
    Ok(ForwardOut {
        x1,
        moa_out,
        token_present: present,
    })
}

/// Convenience: extract the ego graph for a user index.
pub fn ego_for_user(graph: &Hypergraph, user: usize, config: &ModelConfig) -> Result<EgoGraph> {
    ego_subgraph(graph, user, config.hops)
}

/// Build the interaction hypergraph for a dataset under this config.
pub fn build_graph(ds: &Dataset, config: &ModelConfig) -> Hypergraph {
    crate::hypergraph::build_hypergraph(ds, config.window_seconds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Behaviour, InteractionRecord};
    use crate::moa::MoaRunner;

    fn rec(u: &str, i: &str, b: Behaviour, t: i64) -> InteractionRecord {
        InteractionRecord {
            user_id: u.into(),
            item_id: i.into(),
            behaviour: b,
            timestamp: t,
        }
    }

    fn toy() -> (Model, Hypergraph, MoaRunner) {
        let ds = Dataset::from_records(vec![
            rec("u", "i1", Behaviour::View, 1),
            rec("u", "i2", Behaviour::Buy, 2),
            rec("w", "i1", Behaviour::Cart, 3),
        ]);
        let config = ModelConfig {
            d: 8,
            moa_layers: vec![2, 1],
            ..Default::default()
        };
        let graph = build_graph(&ds, &config);
        let model = Model::init(config.clone(), ds.n_users(), ds.n_items(), 5);
        let runner = MoaRunner::all_mock(&config, 5);
        (model, graph, runner)
    }

    #[test]
    fn forward_shapes_and_call_count() {
        let (model, graph, runner) = toy();
        let ego = ego_for_user(&graph, 0, &model.config).unwrap();
        let mut tape = Tape::new();
        let b = model.params.bind(&mut tape);
        let mut cost = Vec::new();
        let out = user_forward(&mut tape, &model, &b, &ego, &runner, &mut cost, false).unwrap();
        let m = model.prompt_ids().unwrap().len();
        assert_eq!(tape.value(out.x1).nrows(), 5 + m);
        assert_eq!(tape.value(out.moa_out).dim(), tape.value(out.x1).dim());
        assert_eq!(cost.len(), 3);
        assert_eq!(out.token_present, vec![true, true, false, false, true]);
    }

    #[test]
    fn zero_graph_tokens_keeps_prompt_rows_identical() {
        let (model, graph, runner) = toy();
        let ego = ego_for_user(&graph, 0, &model.config).unwrap();
        let run = |zero: bool| {
            let mut tape = Tape::new();
            let b = model.params.bind(&mut tape);
            let mut cost = Vec::new();
            let out =
                user_forward(&mut tape, &model, &b, &ego, &runner, &mut cost, zero).unwrap();
            tape.value(out.x1).clone()
        };
        let full = run(false);
        let ablated = run(true);
        let k = graph_token_count();
        // prompt rows are untouched by encoder removal
        for r in k..full.nrows() {
            for c in 0..full.ncols() {
                assert_eq!(full[[r, c]], ablated[[r, c]]);
            }
        }
        // graph-token rows of the ablated run carry only positional encoding
        let pe = positional_encoding(full.nrows(), 8).unwrap();
        for r in 0..k {
            for c in 0..full.ncols() {
                assert_eq!(ablated[[r, c]], pe[[r, c]]);
            }
        }
    }

    #[test]
    fn deterministic_forward() {
        let (model, graph, runner) = toy();
        let ego = ego_for_user(&graph, 0, &model.config).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let b = model.params.bind(&mut tape);
            let mut cost = Vec::new();
            let out =
                user_forward(&mut tape, &model, &b, &ego, &runner, &mut cost, false).unwrap();
            tape.value(out.moa_out).clone()
        };
        assert_eq!(run(), run());
    }
}
