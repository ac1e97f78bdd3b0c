//! Ranking metrics (HR@k, NDCG@k), paired significance testing, and the
//! full-pipeline evaluation loop over held-out instances.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{Behaviour, EvalInstance};
use crate::error::{Error, Result};
use crate::hypergraph::Hypergraph;
use crate::moa::{self, CostRecord, MoaRunner};
use crate::pipeline::{ego_for_user, user_forward, Model};
use crate::tape::Tape;

/// 1-based rank of the positive among scored candidates: higher score
/// ranks first, ties broken by ascending item index.
pub fn rank_positive(scores: &[(usize, f64)], positive: usize) -> Result<usize> {
    let (_, p_score) = scores
        .iter()
        .find(|(i, _)| *i == positive)
        .ok_or(Error::PositiveMissing)?;
    let mut rank = 1;
    for &(item, s) in scores {
        if item == positive {
            continue;
        }
        if s > *p_score || (s == *p_score && item < positive) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// HR@k: 1 iff the positive ranks within the top k.
pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    assert!(rank >= 1 && k >= 1);
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Single-positive NDCG@k: 1/log2(rank+1) inside the cutoff, else 0
/// (ideal DCG = 1 with one relevant item).
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    assert!(rank >= 1 && k >= 1);
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: usize,
    pub p_two_sided: f64,
    pub significant: bool,
    /// Zero variance of differences: the t statistic is undefined, the
    /// stated degenerate rule applies.
    pub degenerate: bool,
}

/// Paired two-sided Student t-test on aligned per-user metric vectors.
/// Zero-variance differences: nonzero mean reports significant with
/// p = 0 and the degeneracy flag; zero mean reports t = 0, p = 1.
pub fn paired_t_test(a: &[f64], b: &[f64], alpha: f64) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::Config(format!(
            "paired vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Config("paired t-test needs n >= 2".into()));
    }
    let n = a.len();
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTestResult {
                t: 0.0,
                df,
                p_two_sided: 1.0,
                significant: false,
                degenerate: true,
            }
        } else {
            TTestResult {
                t: if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY },
                df,
                p_two_sided: 0.0,
                significant: true,
                degenerate: true,
            }
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64)
        .map_err(|e| Error::Config(format!("t distribution: {e}")))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTestResult {
        t,
        df,
        p_two_sided: p,
        significant: p < alpha,
        degenerate: false,
    })
}

/// One evaluated instance.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvalRow {
    pub user: usize,
    pub rank: usize,
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub instances: usize,
    pub mean_hr5: f64,
    pub mean_hr10: f64,
    pub mean_ndcg5: f64,
    pub mean_ndcg10: f64,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> EvalReport {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        EvalReport {
            instances: rows.len(),
            mean_hr5: mean(|r| r.hr5),
            mean_hr10: mean(|r| r.hr10),
            mean_ndcg5: mean(|r| r.ndcg5),
            mean_ndcg10: mean(|r| r.ndcg10),
            rows,
        }
    }

    /// Line-delimited JSON: one row object per line, then the aggregate.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("row serializes"));
            out.push('\n');
        }
        out.push_str(&format!(
            "{{\"instances\":{},\"mean_hr5\":{},\"mean_hr10\":{},\"mean_ndcg5\":{},\"mean_ndcg10\":{}}}\n",
            self.instances, self.mean_hr5, self.mean_hr10, self.mean_ndcg5, self.mean_ndcg10
        ));
        out
    }

    /// Human-readable aggregate table.
    pub fn to_table(&self, label: &str) -> String {
        format!(
            "{label:<16} instances {:>5}  HR@5 {:.4}  HR@10 {:.4}  NDCG@5 {:.4}  NDCG@10 {:.4}\n",
            self.instances, self.mean_hr5, self.mean_hr10, self.mean_ndcg5, self.mean_ndcg10
        )
    }
}

/// Score one instance's candidates through the full pipeline.
pub fn score_instance(
    model: &Model,
    graph: &Hypergraph,
    inst: &EvalInstance,
    runner: &MoaRunner,
    behaviour: Behaviour,
    cost: &mut Vec<CostRecord>,
    zero_graph_tokens: bool,
) -> Result<Vec<(usize, f64)>> {
    if inst.candidates.is_empty() {
        return Err(Error::Config(format!(
            "instance for user {} has no candidate set",
            inst.user
        )));
    }
    let ego = ego_for_user(graph, inst.user, &model.config)?;
    let mut tape = Tape::new();
    let bindings = model.params.bind(&mut tape);
    let fwd = user_forward(
        &mut tape,
        model,
        &bindings,
        &ego,
        runner,
        cost,
        zero_graph_tokens,
    )?;
    let probs = moa::score_items(
        &mut tape,
        fwd.moa_out,
        &inst.candidates,
        behaviour,
        &bindings,
        model.n_items,
    )?;
    let v = tape.value(probs);
    Ok(inst
        .candidates
        .iter()
        .enumerate()
        .map(|(i, &item)| (item, v[[i, 0]]))
        .collect())
}

/// Evaluate held-out instances; rows are emitted in input (user-index)
/// order.
pub fn evaluate_instances(
    model: &Model,
    graph: &Hypergraph,
    instances: &[EvalInstance],
    runner: &MoaRunner,
    behaviour: Behaviour,
    cost: &mut Vec<CostRecord>,
) -> Result<EvalReport> {
    evaluate_instances_ablated(model, graph, instances, runner, behaviour, cost, false)
}

pub fn evaluate_instances_ablated(
    model: &Model,
    graph: &Hypergraph,
    instances: &[EvalInstance],
    runner: &MoaRunner,
    behaviour: Behaviour,
    cost: &mut Vec<CostRecord>,
    zero_graph_tokens: bool,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(instances.len());
    for inst in instances {
        let scores = score_instance(
            model,
            graph,
            inst,
            runner,
            behaviour,
            cost,
            zero_graph_tokens,
        )?;
        let rank = rank_positive(&scores, inst.positive)?;
        rows.push(EvalRow {
            user: inst.user,
            rank,
            hr5: hr_at_k(rank, 5),
            hr10: hr_at_k(rank, 10),
            ndcg5: ndcg_at_k(rank, 5),
            ndcg10: ndcg_at_k(rank, 10),
        });
    }
    Ok(EvalReport::from_rows(rows))
}
