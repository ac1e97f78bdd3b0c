//! Mixture-of-agents stack: per-layer parallel frozen agents, cross-agent
//! attention aggregation, residual connection to the fused input, and the
//! per-behaviour scoring head.
//!
//! Mock agents are deterministic frozen transformer blocks generated from a
//! seed; remote agents speak an embeddings-in/embeddings-out HTTP protocol.
//! Mock branches are differentiable end-to-end (frozen weights are tape
//! constants, adapters trainable); remote branches are stop-gradient: the
//! response enters the tape as a constant, so only adapter_out and the
//! residual path carry gradient.

use std::collections::HashMap;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{sub_seed, ModelConfig};
use crate::data::Behaviour;
use crate::error::{Error, Result};
use crate::params::Bindings;
use crate::tape::{NodeId, Tape};

pub const MOCK_ENDPOINT: &str = "mock";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AgentKind {
    /// Frozen transformer-style block with weights drawn from `seed`.
    Mock { seed: u64 },
    /// Self-hosted model behind the embeddings wire protocol.
    Remote {
        endpoint: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_retries")]
        retries: usize,
    },
    /// Test mode: block bypassed, output = adapterless input.
    Identity,
    /// Test mode: output is the zero matrix.
    Zero,
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_retries() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AgentSpec {
    pub layer: usize,
    pub index: usize,
    #[serde(flatten)]
    pub kind: AgentKind,
}

/// One frozen transformer block: single-head self-attention plus a
/// d -> 4d -> d feed-forward, two layer norms. Never a member of the
/// trainable set.
#[derive(Debug, Clone)]
pub struct MockAgentParams {
    pub d: usize,
    pub ln1_gain: Array2<f64>,
    pub ln1_bias: Array2<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_gain: Array2<f64>,
    pub ln2_bias: Array2<f64>,
    pub ff_w1: Array2<f64>,
    pub ff_b1: Array2<f64>,
    pub ff_w2: Array2<f64>,
    pub ff_b2: Array2<f64>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

impl MockAgentParams {
    pub fn from_seed(seed: u64, d: usize) -> MockAgentParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MockAgentParams {
            d,
            ln1_gain: Array2::from_elem((1, d), 1.0),
            ln1_bias: Array2::zeros((1, d)),
            wq: glorot(&mut rng, d, d),
            wk: glorot(&mut rng, d, d),
            wv: glorot(&mut rng, d, d),
            wo: glorot(&mut rng, d, d),
            ln2_gain: Array2::from_elem((1, d), 1.0),
            ln2_bias: Array2::zeros((1, d)),
            ff_w1: glorot(&mut rng, d, 4 * d),
            ff_b1: Array2::zeros((1, 4 * d)),
            ff_w2: glorot(&mut rng, 4 * d, d),
            ff_b2: Array2::zeros((1, d)),
        }
    }

    /// SHA-256 over all weight bytes, for frozen-weight checks.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for m in [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.ff_w1,
            &self.ff_b1,
            &self.ff_w2,
            &self.ff_b2,
        ] {
            for x in m.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Frozen block forward on the tape (pre-LN transformer block).
fn mock_block(tape: &mut Tape, x: NodeId, p: &MockAgentParams, eps: f64) -> NodeId {
    let ln1g = tape.constant(p.ln1_gain.clone());
    let ln1b = tape.constant(p.ln1_bias.clone());
    let h = tape.layer_norm_rows(x, ln1g, ln1b, eps);
    let wq = tape.constant(p.wq.clone());
    let wk = tape.constant(p.wk.clone());
    let wv = tape.constant(p.wv.clone());
    let q = tape.matmul(h, wq);
    let k = tape.matmul(h, wk);
    let v = tape.matmul(h, wv);
    let kt = tape.transpose(k);
    let qk = tape.matmul(q, kt);
    let scaled = tape.scale(qk, 1.0 / (p.d as f64).sqrt());
    let attn_w = tape.softmax_rows(scaled);
    let attn = tape.matmul(attn_w, v);
    let wo = tape.constant(p.wo.clone());
    let proj = tape.matmul(attn, wo);
    let x2 = tape.add(x, proj);
    let ln2g = tape.constant(p.ln2_gain.clone());
    let ln2b = tape.constant(p.ln2_bias.clone());
    let h2 = tape.layer_norm_rows(x2, ln2g, ln2b, eps);
    let w1 = tape.constant(p.ff_w1.clone());
    let b1 = tape.constant(p.ff_b1.clone());
    let f1 = tape.affine(h2, w1, b1);
    let f1r = tape.relu(f1);
    let w2 = tape.constant(p.ff_w2.clone());
    let b2 = tape.constant(p.ff_b2.clone());
    let f2 = tape.affine(f1r, w2, b2);
    tape.add(x2, f2)
}

/// One line-delimited cost-log record per agent call.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CostRecord {
    pub endpoint: String,
    pub layer: usize,
    pub agent: usize,
    pub tokens_in: usize,
    pub tokens_out: usize,
    pub latency_ms: f64,
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    layer: usize,
    agent: usize,
    dim: usize,
    tokens: &'a Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct RemoteResponse {
    tokens: Vec<Vec<f64>>,
}

/// Blocking HTTP client for the remote-agent wire protocol.
pub struct RemoteClient {
    http: reqwest::blocking::Client,
    token: Option<String>,
}

impl RemoteClient {
    pub fn new() -> RemoteClient {
        RemoteClient {
            http: reqwest::blocking::Client::new(),
            token: std::env::var("HGREC_AGENT_TOKEN").ok(),
        }
    }

    /// POST the token matrix; returns the response matrix, which must
    /// have the same row count and `dim` columns.
    pub fn call(
        &self,
        endpoint: &str,
        timeout_ms: u64,
        retries: usize,
        layer: usize,
        agent: usize,
        tokens: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let dim = tokens.ncols();
        let rows: Vec<Vec<f64>> = tokens.rows().into_iter().map(|r| r.to_vec()).collect();
        let body = RemoteRequest {
            layer,
            agent,
            dim,
            tokens: &rows,
        };
        let mut last_err = String::new();
        for _ in 0..=retries {
            let mut req = self
                .http
                .post(endpoint)
                .timeout(std::time::Duration::from_millis(timeout_ms))
                .json(&body);
            if let Some(t) = &self.token {
                req = req.bearer_auth(t);
            }
            match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    let parsed: RemoteResponse = resp.json().map_err(|e| Error::RemoteAgent {
                        layer,
                        agent,
                        detail: format!("bad response body: {e}"),
                    })?;
                    if parsed.tokens.len() != rows.len() {
                        return Err(Error::ShapeMismatch {
                            expected: rows.len(),
                            got: parsed.tokens.len(),
                        });
                    }
                    let mut out = Array2::zeros((rows.len(), dim));
                    for (i, row) in parsed.tokens.iter().enumerate() {
                        if row.len() != dim {
                            return Err(Error::ShapeMismatch {
                                expected: dim,
                                got: row.len(),
                            });
                        }
                        for (j, &x) in row.iter().enumerate() {
                            out[[i, j]] = x;
                        }
                    }
                    return Ok(out);
                }
                Ok(resp) => last_err = format!("status {}", resp.status()),
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::RemoteAgent {
            layer,
            agent,
            detail: last_err,
        })
    }
}

impl Default for RemoteClient {
    fn default() -> Self {
        Self::new()
    }
}

/// Cross-agent attention aggregation: per token position, softmax over
/// agents of (q . output_j[t]) / sqrt(d), weighted sum of outputs.
/// n = 1 is the identity by construction.
pub fn aggregate_agents(tape: &mut Tape, outputs: &[NodeId], q: NodeId, d: usize) -> NodeId {
    assert!(!outputs.is_empty());
    if outputs.len() == 1 {
        return outputs[0];
    }
    let qt = tape.transpose(q);
    let mut score_cols = None;
    for &o in outputs {
        let col = tape.matmul(o, qt); // s x 1
        score_cols = Some(match score_cols {
            None => col,
            Some(prev) => tape.concat_cols(prev, col),
        });
    }
    let scores = tape.scale(score_cols.unwrap(), 1.0 / (d as f64).sqrt());
    let beta = tape.softmax_rows(scores); // s x n
    let mut result = None;
    for (j, &o) in outputs.iter().enumerate() {
        let bj = tape.gather_cols(beta, vec![j]); // s x 1
        let term = tape.mul_col_broadcast(o, bj);
        result = Some(match result {
            None => term,
            Some(prev) => tape.add(prev, term),
        });
    }
    result.unwrap()
}

/// The agent stack with its frozen mock weights and remote client.
pub struct MoaRunner {
    pub layers: Vec<Vec<AgentSpec>>,
    mocks: HashMap<(usize, usize), MockAgentParams>,
    client: Option<RemoteClient>,
    ln_eps: f64,
}

impl MoaRunner {
    /// Build from an explicit roster; specs must cover exactly the
    /// configured layer sizes.
    pub fn new(config: &ModelConfig, roster: Vec<AgentSpec>) -> Result<MoaRunner> {
        let mut layers: Vec<Vec<AgentSpec>> =
            config.moa_layers.iter().map(|_| Vec::new()).collect();
        let mut any_remote = false;
        for spec in roster {
            if spec.layer >= layers.len() {
                return Err(Error::Config(format!(
                    "agent layer {} out of range ({} layers configured)",
                    spec.layer,
                    layers.len()
                )));
            }
            if matches!(spec.kind, AgentKind::Remote { .. }) {
                any_remote = true;
            }
            layers[spec.layer].push(spec);
        }
        for (i, layer) in layers.iter_mut().enumerate() {
            layer.sort_by_key(|s| s.index);
            let expect = config.moa_layers[i];
            let got: Vec<usize> = layer.iter().map(|s| s.index).collect();
            if got != (0..expect).collect::<Vec<_>>() {
                return Err(Error::Config(format!(
                    "layer {i}: expected agent indices 0..{expect}, got {got:?}"
                )));
            }
        }
        let da = config.agent_dim();
        let mocks = layers
            .iter()
            .flatten()
            .filter_map(|s| match s.kind {
                AgentKind::Mock { seed } => {
                    Some(((s.layer, s.index), MockAgentParams::from_seed(seed, da)))
                }
                _ => None,
            })
            .collect();
        Ok(MoaRunner {
            layers,
            mocks,
            client: any_remote.then(RemoteClient::new),
            ln_eps: config.ln_eps,
        })
    }

    /// All-mock roster with per-agent seeds derived from the master seed.
    pub fn all_mock(config: &ModelConfig, master_seed: u64) -> MoaRunner {
        let roster = config
            .moa_layers
            .iter()
            .enumerate()
            .flat_map(|(i, &n)| {
                (0..n).map(move |j| AgentSpec {
                    layer: i,
                    index: j,
                    kind: AgentKind::Mock {
                        seed: sub_seed(master_seed, &format!("agent.{i}.{j}")),
                    },
                })
            })
            .collect();
        MoaRunner::new(config, roster).expect("derived roster is always consistent")
    }

    pub fn total_agents(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }

    /// Digest over all frozen mock weights, in (layer, index) order.
    pub fn mock_digest(&self) -> String {
        let mut keys: Vec<&(usize, usize)> = self.mocks.keys().collect();
        keys.sort();
        let mut h = Sha256::new();
        for k in keys {
            h.update(self.mocks[k].digest().as_bytes());
        }
        hex(&h.finalize())
    }

    /// One agent applied to x (s x d): adapter_in, agent body, adapter_out.
    pub fn agent_forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
        spec: &AgentSpec,
        bindings: &Bindings,
        cost: &mut Vec<CostRecord>,
    ) -> Result<NodeId> {
        let (i, j) = (spec.layer, spec.index);
        let in_w = bindings.id(&format!("agent.{i}.{j}.in.w"));
        let in_b = bindings.id(&format!("agent.{i}.{j}.in.b"));
        let out_w = bindings.id(&format!("agent.{i}.{j}.out.w"));
        let out_b = bindings.id(&format!("agent.{i}.{j}.out.b"));
        let s = tape.value(x).nrows();
        let started = Instant::now();
        let (out, endpoint) = match &spec.kind {
            AgentKind::Mock { .. } => {
                let adapted = tape.affine(x, in_w, in_b);
                let block = mock_block(tape, adapted, &self.mocks[&(i, j)], self.ln_eps);
                (tape.affine(block, out_w, out_b), MOCK_ENDPOINT.to_string())
            }
            AgentKind::Identity => (x, "identity".to_string()),
            AgentKind::Zero => {
                let dim = tape.value(x).ncols();
                (tape.constant(Array2::zeros((s, dim))), "zero".to_string())
            }
            AgentKind::Remote {
                endpoint,
                timeout_ms,
                retries,
            } => {
                let client = self.client.as_ref().expect("remote roster has a client");
                // Stop-gradient: adapter_in applied to values, response
                // re-enters the tape as a constant.
                let in_w_v = tape.value(in_w).clone();
                let in_b_v = tape.value(in_b).clone();
                let request = tape.value(x).dot(&in_w_v) + &in_b_v;
                let response =
                    client.call(endpoint, *timeout_ms, *retries, i, j, &request)?;
                let resp = tape.constant(response);
                (tape.affine(resp, out_w, out_b), endpoint.clone())
            }
        };
        if !tape.all_finite(out) {
            return Err(Error::NonFinite(format!("agent.{i}.{j}")));
        }
        cost.push(CostRecord {
            endpoint,
            layer: i,
            agent: j,
            tokens_in: s,
            tokens_out: s,
            latency_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        Ok(out)
    }

    /// y_i = aggregate(agent outputs on x_i) + x_1.
    pub fn layer_forward(
        &self,
        tape: &mut Tape,
        x_i: NodeId,
        x_1: NodeId,
        layer: usize,
        bindings: &Bindings,
        cost: &mut Vec<CostRecord>,
    ) -> Result<NodeId> {
        let mut outs = Vec::new();
        for spec in &self.layers[layer] {
            outs.push(self.agent_forward(tape, x_i, spec, bindings, cost)?);
        }
        let d = tape.value(x_i).ncols();
        let q = bindings.id(&format!("moa.{layer}.q"));
        let agg = aggregate_agents(tape, &outs, q, d);
        Ok(tape.add(agg, x_1))
    }

    /// Full recurrence: x_{i+1} = y_i; zero layers returns x_1.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x_1: NodeId,
        bindings: &Bindings,
        cost: &mut Vec<CostRecord>,
    ) -> Result<NodeId> {
        let mut x = x_1;
        for layer in 0..self.layers.len() {
            x = self.layer_forward(tape, x, x_1, layer, bindings, cost)?;
        }
        Ok(x)
    }
}

/// Scores for candidate items under behaviour b:
/// score(i) = sigmoid((z W_b) . E_i[i]) with z the mean MoA output row.
/// Returns an s x 1 column of probabilities aligned with `candidates`.
pub fn score_items(
    tape: &mut Tape,
    moa_out: NodeId,
    candidates: &[usize],
    behaviour: Behaviour,
    bindings: &Bindings,
    n_items: usize,
) -> Result<NodeId> {
    assert!(!candidates.is_empty());
    for &c in candidates {
        if c >= n_items {
            return Err(Error::NodeOutOfRange {
                kind: "item",
                index: c,
                count: n_items,
            });
        }
    }
    let z = tape.mean_rows(moa_out); // 1 x d
    let wb = bindings.id(&format!("head.{}", behaviour.name()));
    let zw = tape.matmul(z, wb); // 1 x d
    let zwt = tape.transpose(zw); // d x 1
    let emb = tape.gather_rows(bindings.id("embed.item"), candidates.to_vec());
    let logits = tape.matmul(emb, zwt); // c x 1
    Ok(tape.sigmoid(logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModelParams;
    use ndarray::array;

    fn toy_config(d: usize, layers: Vec<usize>) -> ModelConfig {
        ModelConfig {
            d,
            moa_layers: layers,
            ..Default::default()
        }
    }

    fn bind(
        params: &ModelParams,
        tape: &mut Tape,
    ) -> crate::params::Bindings {
        params.bind(tape)
    }

    #[test]
    fn mock_agent_is_deterministic_and_shape_preserving() {
        let cfg = toy_config(8, vec![1]);
        let params = ModelParams::init(&cfg, 2, 2, 5, 1);
        let runner = MoaRunner::all_mock(&cfg, 42);
        let x0 = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f64 * 0.01);

        let run = || {
            let mut tape = Tape::new();
            let b = bind(&params, &mut tape);
            let x = tape.constant(x0.clone());
            let mut cost = Vec::new();
            let out = runner
                .agent_forward(&mut tape, x, &runner.layers[0][0], &b, &mut cost)
                .unwrap();
            (tape.value(out).clone(), cost)
        };
        let (a, cost_a) = run();
        let (b2, _) = run();
        assert_eq!(a, b2);
        assert_eq!(a.dim(), (3, 8));
        assert_eq!(cost_a.len(), 1);
        assert_eq!(cost_a[0].tokens_in, 3);
        assert_eq!(cost_a[0].endpoint, MOCK_ENDPOINT);
    }

    #[test]
    fn mock_seed_changes_output() {
        let a = MockAgentParams::from_seed(1, 8);
        let b = MockAgentParams::from_seed(2, 8);
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), MockAgentParams::from_seed(1, 8).digest());
    }

    #[test]
    fn aggregation_singleton_is_identity() {
        let mut tape = Tape::new();
        let o = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let q = tape.constant(array![[0.3, -0.7]]);
        let agg = aggregate_agents(&mut tape, &[o], q, 2);
        assert_eq!(agg, o);
    }

    #[test]
    fn aggregation_of_identical_outputs_is_that_output() {
        let mut tape = Tape::new();
        let v = array![[1.0, -2.0], [0.5, 4.0]];
        let o1 = tape.constant(v.clone());
        let o2 = tape.constant(v.clone());
        let o3 = tape.constant(v.clone());
        let q = tape.constant(array![[0.3, -0.7]]);
        let agg = aggregate_agents(&mut tape, &[o1, o2, o3], q, 2);
        for (a, e) in tape.value(agg).iter().zip(v.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_matches_hand_softmax() {
        // n = 2, d = 2, s = 1
        let mut tape = Tape::new();
        let o1 = tape.constant(array![[1.0, 0.0]]);
        let o2 = tape.constant(array![[0.0, 1.0]]);
        let q = tape.constant(array![[2.0, -1.0]]);
        let agg = aggregate_agents(&mut tape, &[o1, o2], q, 2);
        let s1 = 2.0 / 2f64.sqrt();
        let s2 = -1.0 / 2f64.sqrt();
        let m = s1.max(s2);
        let (e1, e2) = ((s1 - m).exp(), (s2 - m).exp());
        let b1 = e1 / (e1 + e2);
        let b2 = e2 / (e1 + e2);
        let v = tape.value(agg);
        assert!((v[[0, 0]] - b1).abs() < 1e-6);
        assert!((v[[0, 1]] - b2).abs() < 1e-6);
    }

    #[test]
    fn identity_agent_layer_is_residual_sum() {
        let cfg = toy_config(4, vec![1]);
        let params = ModelParams::init(&cfg, 1, 1, 5, 1);
        let roster = vec![AgentSpec {
            layer: 0,
            index: 0,
            kind: AgentKind::Identity,
        }];
        let runner = MoaRunner::new(&cfg, roster).unwrap();
        let mut tape = Tape::new();
        let b = bind(&params, &mut tape);
        let x1v = Array2::from_shape_fn((3, 4), |(i, j)| (i + j) as f64);
        let x1 = tape.constant(x1v.clone());
        let mut cost = Vec::new();
        let y = runner.forward(&mut tape, x1, &b, &mut cost).unwrap();
        // y = x_1 + x_1 = 2 x_1 exactly
        for (a, e) in tape.value(y).iter().zip(x1v.iter()) {
            assert_eq!(*a, 2.0 * e);
        }
    }

    #[test]
    fn zero_agents_leave_residual_floor() {
        let cfg = toy_config(4, vec![2, 2]);
        let params = ModelParams::init(&cfg, 1, 1, 5, 1);
        let roster = (0..2)
            .flat_map(|i| {
                (0..2).map(move |j| AgentSpec {
                    layer: i,
                    index: j,
                    kind: AgentKind::Zero,
                })
            })
            .collect();
        let runner = MoaRunner::new(&cfg, roster).unwrap();
        let mut tape = Tape::new();
        let b = bind(&params, &mut tape);
        let x1v = Array2::from_shape_fn((2, 4), |(i, j)| 0.1 * (i as f64) - 0.2 * (j as f64));
        let x1 = tape.constant(x1v.clone());
        let mut cost = Vec::new();
        let y = runner.forward(&mut tape, x1, &b, &mut cost).unwrap();
        assert_eq!(tape.value(y), &x1v);
        assert_eq!(cost.len(), 4);
    }

    #[test]
    fn zero_layers_returns_input() {
        let cfg = toy_config(4, vec![]);
        let params = ModelParams::init(&cfg, 1, 1, 5, 1);
        let runner = MoaRunner::all_mock(&cfg, 0);
        let mut tape = Tape::new();
        let b = bind(&params, &mut tape);
        let x1 = tape.constant(array![[1.0, 2.0, 3.0, 4.0]]);
        let mut cost = Vec::new();
        let y = runner.forward(&mut tape, x1, &b, &mut cost).unwrap();
        assert_eq!(y, x1);
        assert!(cost.is_empty());
    }

    #[test]
    fn call_count_matches_layer_sizes() {
        let cfg = toy_config(4, vec![3, 3, 1]);
        let params = ModelParams::init(&cfg, 1, 1, 5, 1);
        let runner = MoaRunner::all_mock(&cfg, 7);
        let mut tape = Tape::new();
        let b = bind(&params, &mut tape);
        let x1 = tape.constant(Array2::zeros((2, 4)));
        let mut cost = Vec::new();
        runner.forward(&mut tape, x1, &b, &mut cost).unwrap();
        assert_eq!(cost.len(), 7);
    }

    #[test]
    fn beta_weights_sum_to_one_per_position() {
        let mut tape = Tape::new();
        let o1 = tape.constant(array![[1.0, 0.0], [2.0, 1.0]]);
        let o2 = tape.constant(array![[0.0, 1.0], [1.0, 2.0]]);
        let q = tape.constant(array![[0.5, 0.25]]);
        let qt = tape.transpose(q);
        let c1 = tape.matmul(o1, qt);
        let c2 = tape.matmul(o2, qt);
        let cat = tape.concat_cols(c1, c2);
        let scaled = tape.scale(cat, 1.0 / 2f64.sqrt());
        let beta = tape.softmax_rows(scaled);
        for row in tape.value(beta).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn scores_are_probabilities_and_order_independent() {
        let cfg = toy_config(4, vec![1]);
        let params = ModelParams::init(&cfg, 2, 6, 5, 3);
        let mut tape = Tape::new();
        let b = bind(&params, &mut tape);
        let out = tape.constant(Array2::from_shape_fn((3, 4), |(i, j)| {
            0.3 * i as f64 - 0.1 * j as f64
        }));
        let p1 = score_items(&mut tape, out, &[0, 1, 2], Behaviour::Buy, &b, 6).unwrap();
        let p2 = score_items(&mut tape, out, &[2, 0, 1], Behaviour::Buy, &b, 6).unwrap();
        let v1 = tape.value(p1).clone();
        let v2 = tape.value(p2);
        assert!((v1[[0, 0]] - v2[[1, 0]]).abs() < 1e-12);
        assert!((v1[[2, 0]] - v2[[0, 0]]).abs() < 1e-12);
        for &p in v1.iter() {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn zero_head_gives_half_scores() {
        let cfg = toy_config(4, vec![1]);
        let mut params = ModelParams::init(&cfg, 2, 3, 5, 3);
        params.get_mut("head.buy").fill(0.0);
        let mut tape = Tape::new();
        let b = bind(&params, &mut tape);
        let out = tape.constant(Array2::from_elem((2, 4), 1.0));
        let p = score_items(&mut tape, out, &[0, 1, 2], Behaviour::Buy, &b, 3).unwrap();
        for &x in tape.value(p).iter() {
            assert_eq!(x, 0.5);
        }
    }

    #[test]
    fn hand_sigmoid_inversion() {
        // (W_b z) . e = ln 3 -> score 0.75
        let p = 1.0 / (1.0 + (-(3f64.ln())).exp());
        assert!((p - 0.75).abs() < 1e-12);
    }

    #[test]
    fn roster_validation_rejects_gaps() {
        let cfg = toy_config(4, vec![2]);
        let roster = vec![AgentSpec {
            layer: 0,
            index: 1,
            kind: AgentKind::Zero,
        }];
        assert!(MoaRunner::new(&cfg, roster).is_err());
    }
}
