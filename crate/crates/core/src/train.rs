//! Training: the sampled cross-entropy objective, reverse-mode gradients
//! through the full differentiable path, AdamW with linear warm-up, and a
//! finite-difference gradient verifier.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{sub_seed, TrainConfig};
use crate::data::{Behaviour, Dataset, EvalInstance, BEHAVIOURS};
use crate::error::{Error, Result};
use crate::hypergraph::{EgoGraph, Hypergraph};
use crate::moa::{self, AgentKind, CostRecord, MoaRunner};
use crate::params::{collect_grads, ModelParams};
use crate::pipeline::{user_forward, Model};
use crate::tape::{Tape, PROB_CLAMP};

/// Plain-scalar loss oracle: mean BCE over (probability, label) pairs plus
/// lambda * sum_sq. Returns (loss, clamp count). The tape path must agree
/// with this.
pub fn compute_loss(predictions: &[(f64, f64)], sum_sq: f64, lambda: f64) -> (f64, usize) {
    assert!(!predictions.is_empty());
    let mut total = 0.0;
    let mut clamps = 0;
    for &(p, r) in predictions {
        let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        if pc != p {
            clamps += 1;
        }
        total += -(r * pc.ln() + (1.0 - r) * (1.0 - pc).ln());
    }
    (total / predictions.len() as f64 + lambda * sum_sq, clamps)
}

/// One user's training case: ego graph plus per-behaviour candidate lists
/// (positive first, then sampled negatives) with labels.
#[derive(Debug, Clone)]
pub struct UserSample {
    pub user: usize,
    pub ego: EgoGraph,
    pub targets: Vec<(Behaviour, Vec<usize>, Vec<f64>)>,
}

/// Per-user, per-behaviour item lists and touched sets from the train set.
pub struct TrainIndex {
    pub by_user_behaviour: Vec<[Vec<usize>; 4]>,
    pub touched: Vec<HashSet<usize>>,
    pub n_items: usize,
}

impl TrainIndex {
    pub fn build(train_ds: &Dataset) -> TrainIndex {
        let n_users = train_ds.n_users();
        let mut by_user_behaviour: Vec<[Vec<usize>; 4]> = vec![Default::default(); n_users];
        let mut touched = vec![HashSet::new(); n_users];
        for (u, i, b, _) in train_ds.dense_records() {
            by_user_behaviour[u][b.index()].push(i);
            touched[u].insert(i);
        }
        TrainIndex {
            by_user_behaviour,
            touched,
            n_items: train_ds.n_items(),
        }
    }

    /// Users with at least one train event.
    pub fn active_users(&self) -> Vec<usize> {
        (0..self.by_user_behaviour.len())
            .filter(|&u| !self.touched[u].is_empty())
            .collect()
    }

    /// Sample one positive per present behaviour plus `m` uniform
    /// negatives from items the user never touched.
    pub fn sample_user(
        &self,
        graph: &Hypergraph,
        user: usize,
        hops: usize,
        m: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<UserSample>> {
        let mut targets = Vec::new();
        let eligible: Vec<usize> = (0..self.n_items)
            .filter(|i| !self.touched[user].contains(i))
            .collect();
        for b in BEHAVIOURS {
            let items = &self.by_user_behaviour[user][b.index()];
            if items.is_empty() {
                continue;
            }
            if eligible.len() < m {
                continue; // user touched nearly everything; skip behaviour
            }
            let pos = items[rng.gen_range(0..items.len())];
            let mut candidates = vec![pos];
            let mut labels = vec![1.0];
            let mut pool = eligible.clone();
            pool.shuffle(rng);
            for &n in pool.iter().take(m) {
                candidates.push(n);
                labels.push(0.0);
            }
            targets.push((b, candidates, labels));
        }
        if targets.is_empty() {
            return Ok(None);
        }
        let ego = crate::hypergraph::ego_subgraph(graph, user, hops)?;
        Ok(Some(UserSample {
            user,
            ego,
            targets,
        }))
    }
}

pub struct LossResult {
    pub loss: f64,
    pub data_loss: f64,
    pub clamps: usize,
    pub grads: Option<BTreeMap<String, Array2<f64>>>,
}

/// Mean loss over a batch of user samples: (1/S) sum of per-sample BCE
/// means, plus lambda * ||theta||^2. Gradients, when requested, include
/// the exact penalty term 2*lambda*theta.
pub fn sample_loss(
    model: &Model,
    samples: &[UserSample],
    runner: &MoaRunner,
    lambda: f64,
    want_grads: bool,
    cost: &mut Vec<CostRecord>,
) -> Result<LossResult> {
    assert!(!samples.is_empty());
    let mut data_loss = 0.0;
    let mut clamps = 0;
    let mut acc: Option<BTreeMap<String, Array2<f64>>> = None;
    let scale = 1.0 / samples.len() as f64;

    for sample in samples {
        let mut tape = Tape::new();
        let bindings = model.params.bind(&mut tape);
        let fwd = user_forward(
            &mut tape,
            model,
            &bindings,
            &sample.ego,
            runner,
            cost,
            false,
        )?;
        let mut probs = None;
        let mut labels = Vec::new();
        for (b, candidates, lbls) in &sample.targets {
            let p = moa::score_items(
                &mut tape,
                fwd.moa_out,
                candidates,
                *b,
                &bindings,
                model.n_items,
            )?;
            probs = Some(match probs {
                None => p,
                Some(prev) => tape.concat_rows(prev, p),
            });
            labels.extend_from_slice(lbls);
        }
        let loss_node = tape.bce_mean(probs.expect("non-empty targets"), labels);
        let l = tape.scalar(loss_node);
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("loss for user {}", sample.user)));
        }
        data_loss += l * scale;
        clamps += tape.clamp_count();

        if want_grads {
            let grads = tape.backward(loss_node);
            let per_sample = collect_grads(&model.params, &bindings, &grads);
            match &mut acc {
                None => {
                    let mut scaled = per_sample;
                    for g in scaled.values_mut() {
                        *g *= scale;
                    }
                    acc = Some(scaled);
                }
                Some(total) => {
                    for (name, g) in per_sample {
                        *total.get_mut(&name).unwrap() += &(g * scale);
                    }
                }
            }
        }
    }

    let sum_sq = model.params.sum_squares();
    if want_grads && lambda != 0.0 {
        let total = acc.as_mut().unwrap();
        for (name, value) in model.params.blocks() {
            *total.get_mut(name).unwrap() += &(value * (2.0 * lambda));
        }
    }
    Ok(LossResult {
        loss: data_loss + lambda * sum_sq,
        data_loss,
        clamps,
        grads: acc,
    })
}

/// AdamW with decoupled weight decay and linear warm-up.
pub struct AdamW {
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
    step: usize,
    config: TrainConfig,
}

impl AdamW {
    pub fn new(params: &ModelParams, config: TrainConfig) -> AdamW {
        let zeros = |p: &ModelParams| {
            p.blocks()
                .map(|(n, v)| (n.to_string(), Array2::zeros(v.raw_dim())))
                .collect()
        };
        AdamW {
            m: zeros(params),
            v: zeros(params),
            step: 0,
            config,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Effective learning rate at a 1-based step:
    /// base_lr * min(1, step / warmup_steps).
    pub fn effective_lr(config: &TrainConfig, step: usize) -> f64 {
        if config.warmup_steps == 0 {
            return config.learning_rate;
        }
        config.learning_rate * (step as f64 / config.warmup_steps as f64).min(1.0)
    }

    pub fn apply(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Array2<f64>>) {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let lr = Self::effective_lr(c, self.step);
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, theta) in params.blocks_mut() {
            let g = &grads[name];
            let m = self.m.get_mut(name).unwrap();
            let v = self.v.get_mut(name).unwrap();
            for ((t_e, g_e), (m_e, v_e)) in theta
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m_e = c.beta1 * *m_e + (1.0 - c.beta1) * g_e;
                *v_e = c.beta2 * *v_e + (1.0 - c.beta2) * g_e * g_e;
                let m_hat = *m_e / bc1;
                let v_hat = *v_e / bc2;
                *t_e -= lr * (m_hat / (v_hat.sqrt() + c.adam_eps) + c.weight_decay * *t_e);
            }
        }
    }
}

/// One line of the training log (emitted as line-delimited JSON).
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub clamp_count: usize,
    pub val_hr5: f64,
    pub val_ndcg5: f64,
    pub wall_ms: f64,
}

/// Epoch loop: shuffled user batches, forward/backward per user, one
/// AdamW step per batch. Divergence restores the last good parameters
/// and aborts.
pub fn train(
    model: &mut Model,
    train_ds: &Dataset,
    graph: &Hypergraph,
    validation: &[EvalInstance],
    runner: &MoaRunner,
    tc: &TrainConfig,
    cost: &mut Vec<CostRecord>,
) -> Result<Vec<EpochLog>> {
    let index = TrainIndex::build(train_ds);
    let users = index.active_users();
    if users.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    let mut optimizer = AdamW::new(&model.params, tc.clone());
    let mut log = Vec::new();

    for epoch in 0..tc.epochs {
        let started = Instant::now();
        let snapshot = model.params.clone();
        let mut order = users.clone();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(sub_seed(tc.seed, &format!("shuffle.{epoch}")));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut epoch_clamps = 0;
        let mut counted = 0usize;
        for batch in order.chunks(tc.batch_size.max(1)) {
            let mut samples = Vec::new();
            for &u in batch {
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(
                    tc.seed,
                    &format!("sample.{epoch}.{u}"),
                ));
                if let Some(s) = index.sample_user(
                    graph,
                    u,
                    model.config.hops,
                    tc.negatives_per_positive,
                    &mut rng,
                )? {
                    samples.push(s);
                }
            }
            if samples.is_empty() {
                continue;
            }
            let result = sample_loss(model, &samples, runner, tc.weight_decay, true, cost)?;
            if !result.loss.is_finite() {
                model.params = snapshot;
                return Err(Error::Diverged { epoch });
            }
            epoch_loss += result.loss * samples.len() as f64;
            epoch_clamps += result.clamps;
            counted += samples.len();
            optimizer.apply(&mut model.params, result.grads.as_ref().unwrap());
        }

        let mean_loss = if counted > 0 {
            epoch_loss / counted as f64
        } else {
            0.0
        };
        let (val_hr5, val_ndcg5) = if validation.is_empty() {
            (0.0, 0.0)
        } else {
            let report = crate::eval::evaluate_instances(
                model,
                graph,
                validation,
                runner,
                Behaviour::Buy,
                cost,
            )?;
            (report.mean_hr5, report.mean_ndcg5)
        };
        log.push(EpochLog {
            epoch,
            mean_loss,
            clamp_count: epoch_clamps,
            val_hr5,
            val_ndcg5,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(log)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckBlock {
    pub name: String,
    pub sampled: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub passed: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub blocks: Vec<GradCheckBlock>,
    pub n_coords: usize,
    pub n_passed: usize,
    pub pass_rate: f64,
    pub max_rel_err: f64,
}

/// rel err = |analytic - fd| / max(|analytic|, |fd|, 1e-5); a coordinate
/// passes below `tol`.
pub const GRAD_CHECK_TOL: f64 = 1e-3;

/// Central-difference verification of the analytic gradients on randomly
/// sampled coordinates of every parameter block. Mock/test agents only:
/// remote branches are non-differentiable by policy.
pub fn grad_check(
    model: &Model,
    samples: &[UserSample],
    runner: &MoaRunner,
    lambda: f64,
    epsilon: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if runner
        .layers
        .iter()
        .flatten()
        .any(|s| matches!(s.kind, AgentKind::Remote { .. }))
    {
        return Err(Error::Config(
            "grad_check requires mock agents (remote branches are stop-gradient)".into(),
        ));
    }
    let mut cost = Vec::new();
    let analytic = sample_loss(model, samples, runner, lambda, true, &mut cost)?
        .grads
        .unwrap();

    // Distribute coordinates: at least two per block, remainder sampled
    // uniformly over all blocks.
    let block_info: Vec<(String, usize, usize)> = model
        .params
        .blocks()
        .map(|(n, v)| (n.to_string(), v.nrows(), v.ncols()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<(usize, usize, usize)> = Vec::new(); // (block, r, c)
    for (bi, (_, rows, cols)) in block_info.iter().enumerate() {
        for _ in 0..2.min(rows * cols) {
            coords.push((bi, rng.gen_range(0..*rows), rng.gen_range(0..*cols)));
        }
    }
    while coords.len() < n_coords {
        let bi = rng.gen_range(0..block_info.len());
        let (_, rows, cols) = block_info[bi];
        coords.push((bi, rng.gen_range(0..rows), rng.gen_range(0..cols)));
    }
    coords.truncate(n_coords.max(coords.len()));

    let eval_at = |params: ModelParams| -> Result<f64> {
        let probe = Model {
            params,
            ..model.clone()
        };
        let mut c = Vec::new();
        Ok(sample_loss(&probe, samples, runner, lambda, false, &mut c)?.loss)
    };

    let mut per_block: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (bi, r, c) in &coords {
        let (name, _, _) = &block_info[*bi];
        let base = model.params.get(name)[[*r, *c]];
        let mut plus = model.params.clone();
        plus.get_mut(name)[[*r, *c]] = base + epsilon;
        let mut minus = model.params.clone();
        minus.get_mut(name)[[*r, *c]] = base - epsilon;
        let fd = (eval_at(plus)? - eval_at(minus)?) / (2.0 * epsilon);
        let a = analytic[name][[*r, *c]];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-5);
        per_block.entry(name.clone()).or_default().push(rel);
    }

    let mut blocks = Vec::new();
    let mut n_passed = 0;
    let mut total = 0;
    let mut max_rel = 0.0f64;
    for (name, errs) in per_block {
        let passed = errs.iter().filter(|&&e| e < GRAD_CHECK_TOL).count();
        n_passed += passed;
        total += errs.len();
        let block_max = errs.iter().cloned().fold(0.0, f64::max);
        max_rel = max_rel.max(block_max);
        blocks.push(GradCheckBlock {
            name,
            sampled: errs.len(),
            max_rel_err: block_max,
            mean_rel_err: errs.iter().sum::<f64>() / errs.len() as f64,
            passed,
        });
    }
    Ok(GradCheckReport {
        blocks,
        n_coords: total,
        n_passed,
        pass_rate: n_passed as f64 / total as f64,
        max_rel_err: max_rel,
    })
}
