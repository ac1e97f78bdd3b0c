//! The trainable parameter set and its tape bindings.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{sub_seed, ModelConfig};
use crate::data::BEHAVIOURS;
use crate::tape::{NodeId, Tape};

/// Readout slot names: one global token plus one per behaviour.
pub fn readout_slots() -> Vec<String> {
    let mut slots = vec!["global".to_string()];
    slots.extend(BEHAVIOURS.iter().map(|b| b.name().to_string()));
    slots
}

/// All trainable parameters, keyed by block name. Insertion order is
/// fixed by construction, so iteration is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    blocks: Vec<(String, Array2<f64>)>,
    index: BTreeMap<String, usize>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    // Box-Muller; rand_distr not needed for this one use.
    Array2::from_shape_fn((rows, cols), |_| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

fn identity_affine(rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows, cols));
    for i in 0..rows.min(cols) {
        m[[i, i]] = 1.0;
    }
    m
}

impl ModelParams {
    /// Initialise the full parameter set. Weight matrices are Glorot
    /// uniform, embedding tables normal(0, 0.02), LayerNorm affine at
    /// (1, 0), adapters at identity.
    pub fn init(
        config: &ModelConfig,
        n_users: usize,
        n_items: usize,
        vocab_size: usize,
        seed: u64,
    ) -> ModelParams {
        let d = config.d;
        let da = config.agent_dim();
        let mut p = ModelParams {
            blocks: Vec::new(),
            index: BTreeMap::new(),
        };
        let rng_for = |label: &str| ChaCha8Rng::seed_from_u64(sub_seed(seed, label));

        p.insert(
            "embed.user",
            normal(&mut rng_for("embed.user"), n_users, d, 0.02),
        );
        p.insert(
            "embed.item",
            normal(&mut rng_for("embed.item"), n_items, d, 0.02),
        );
        for l in 0..config.conv_layers {
            p.insert(
                &format!("conv.{l}.w"),
                glorot(&mut rng_for(&format!("conv.{l}.w")), d, d),
            );
            p.insert(&format!("conv.{l}.gain"), Array2::from_elem((1, d), 1.0));
            p.insert(&format!("conv.{l}.bias"), Array2::zeros((1, d)));
        }
        for slot in readout_slots() {
            let mut rng = rng_for(&format!("readout.{slot}"));
            p.insert(&format!("readout.{slot}.wa"), glorot(&mut rng, d, d));
            p.insert(&format!("readout.{slot}.a"), glorot(&mut rng, 1, d));
            p.insert(&format!("readout.{slot}.mlp.w1"), glorot(&mut rng, d, d));
            p.insert(&format!("readout.{slot}.mlp.b1"), Array2::zeros((1, d)));
            p.insert(&format!("readout.{slot}.mlp.w2"), glorot(&mut rng, d, d));
            p.insert(&format!("readout.{slot}.mlp.b2"), Array2::zeros((1, d)));
        }
        p.insert(
            "prompt.embed",
            normal(&mut rng_for("prompt.embed"), vocab_size, d, 0.02),
        );
        for (i, &n) in config.moa_layers.iter().enumerate() {
            p.insert(
                &format!("moa.{i}.q"),
                glorot(&mut rng_for(&format!("moa.{i}.q")), 1, d),
            );
            for j in 0..n {
                p.insert(&format!("agent.{i}.{j}.in.w"), identity_affine(d, da));
                p.insert(&format!("agent.{i}.{j}.in.b"), Array2::zeros((1, da)));
                p.insert(&format!("agent.{i}.{j}.out.w"), identity_affine(da, d));
                p.insert(&format!("agent.{i}.{j}.out.b"), Array2::zeros((1, d)));
            }
        }
        for b in BEHAVIOURS {
            p.insert(
                &format!("head.{}", b.name()),
                glorot(&mut rng_for(&format!("head.{}", b.name())), d, d),
            );
        }
        p
    }

    pub fn from_blocks(blocks: Vec<(String, Array2<f64>)>) -> ModelParams {
        let index = blocks
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        ModelParams { blocks, index }
    }

    fn insert(&mut self, name: &str, value: Array2<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter block {name}"
        );
        self.index.insert(name.to_string(), self.blocks.len());
        self.blocks.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        let i = self.index[name];
        &self.blocks[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        let i = self.index[name];
        &mut self.blocks[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.blocks.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.blocks.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Sum of squares over every entry of every block (the L2 term).
    pub fn sum_squares(&self) -> f64 {
        self.blocks
            .iter()
            .map(|(_, v)| v.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    /// L2 norm of the whole parameter vector.
    pub fn l2_norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    /// Register every block as a trainable leaf on a fresh tape.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let ids = self
            .blocks
            .iter()
            .map(|(n, v)| (n.clone(), tape.leaf(v.clone(), true)))
            .collect();
        Bindings { ids }
    }
}

/// Block name -> tape leaf id for one forward pass.
pub struct Bindings {
    ids: BTreeMap<String, NodeId>,
}

impl Bindings {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter block {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(n, &id)| (n.as_str(), id))
    }
}

/// Per-block gradients aligned with ModelParams; blocks untouched by the
/// loss get zeros.
pub fn collect_grads(
    params: &ModelParams,
    bindings: &Bindings,
    grads: &crate::tape::Gradients,
) -> BTreeMap<String, Array2<f64>> {
    params
        .blocks()
        .map(|(name, value)| {
            let g = grads
                .get(bindings.id(name))
                .cloned()
                .unwrap_or_else(|| Array2::zeros(value.raw_dim()));
            (name.to_string(), g)
        })
        .collect()
}
