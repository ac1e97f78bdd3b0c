//! Interaction-log ingest: parsing, minimum-interaction filtering,
//! chronological splitting and negative-sampled candidate sets.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four interaction types carried by the datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behaviour {
    View,
    Fav,
    Cart,
    Buy,
}

pub const BEHAVIOURS: [Behaviour; 4] = [
    Behaviour::View,
    Behaviour::Fav,
    Behaviour::Cart,
    Behaviour::Buy,
];

impl Behaviour {
    pub fn parse(s: &str) -> Option<Behaviour> {
        match s {
            "view" => Some(Behaviour::View),
            "fav" => Some(Behaviour::Fav),
            "cart" => Some(Behaviour::Cart),
            "buy" => Some(Behaviour::Buy),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Behaviour::View => "view",
            Behaviour::Fav => "fav",
            Behaviour::Cart => "cart",
            Behaviour::Buy => "buy",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Behaviour::View => 0,
            Behaviour::Fav => 1,
            Behaviour::Cart => 2,
            Behaviour::Buy => 3,
        }
    }
}

impl fmt::Display for Behaviour {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One (user, item, behaviour, timestamp) event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub behaviour: Behaviour,
    pub timestamp: i64,
}

/// Parsed interaction log with dense user/item indices.
///
/// Record order is part of the contract: timestamp ties are broken by
/// input order everywhere downstream.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<InteractionRecord>,
    pub user_index: BTreeMap<String, usize>,
    pub item_index: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn from_records(records: Vec<InteractionRecord>) -> Dataset {
        let mut ds = Dataset {
            records,
            ..Default::default()
        };
        ds.reindex();
        ds
    }

    /// Rebuild dense indices from the current records, contiguous from 0,
    /// in first-appearance order.
    fn reindex(&mut self) {
        self.user_index.clear();
        self.item_index.clear();
        let mut next_u = 0;
        let mut next_i = 0;
        let mut seen_u: HashMap<&str, usize> = HashMap::new();
        let mut seen_i: HashMap<&str, usize> = HashMap::new();
        for r in &self.records {
            if !seen_u.contains_key(r.user_id.as_str()) {
                seen_u.insert(&r.user_id, next_u);
                next_u += 1;
            }
            if !seen_i.contains_key(r.item_id.as_str()) {
                seen_i.insert(&r.item_id, next_i);
                next_i += 1;
            }
        }
        for (k, v) in seen_u {
            self.user_index.insert(k.to_string(), v);
        }
        for (k, v) in seen_i {
            self.item_index.insert(k.to_string(), v);
        }
    }

    pub fn n_users(&self) -> usize {
        self.user_index.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_index.len()
    }

    pub fn user_of(&self, id: &str) -> Result<usize> {
        self.user_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    /// user id string for a dense index (linear scan; fine at desk scale).
    pub fn user_id_of(&self, idx: usize) -> Option<&str> {
        self.user_index
            .iter()
            .find(|(_, &v)| v == idx)
            .map(|(k, _)| k.as_str())
    }

    pub fn item_id_of(&self, idx: usize) -> Option<&str> {
        self.item_index
            .iter()
            .find(|(_, &v)| v == idx)
            .map(|(k, _)| k.as_str())
    }

    /// Dense (user, item) index pairs in record order.
    pub fn dense_records(&self) -> Vec<(usize, usize, Behaviour, i64)> {
        self.records
            .iter()
            .map(|r| {
                (
                    self.user_index[&r.user_id],
                    self.item_index[&r.item_id],
                    r.behaviour,
                    r.timestamp,
                )
            })
            .collect()
    }
}

/// How malformed lines are handled while parsing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    /// Any malformed line aborts with an error.
    Strict,
    /// Malformed lines are skipped and counted.
    Lenient,
}

#[derive(Debug, Clone, Default)]
pub struct ParseSummary {
    pub records: usize,
    pub skipped: usize,
}

/// Parse a delimited interaction log: user_id,item_id,behaviour,timestamp.
pub fn parse_interactions<R: BufRead>(
    reader: R,
    delimiter: char,
    skip_header: bool,
    mode: ParseMode,
) -> Result<(Vec<InteractionRecord>, ParseSummary)> {
    let mut out = Vec::new();
    let mut summary = ParseSummary::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if skip_header && i == 0 {
            continue;
        }
        match parse_line(&line, delimiter, line_no) {
            Ok(rec) => {
                out.push(rec);
                summary.records += 1;
            }
            Err(e) => match mode {
                ParseMode::Strict => return Err(e),
                ParseMode::Lenient => summary.skipped += 1,
            },
        }
    }
    Ok((out, summary))
}

fn parse_line(line: &str, delimiter: char, line_no: usize) -> Result<InteractionRecord> {
    let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split(delimiter).collect();
    if fields.len() != 4 {
        return Err(Error::MalformedLine {
            line: line_no,
            detail: format!("expected 4 fields, got {}", fields.len()),
        });
    }
    let behaviour = Behaviour::parse(fields[2].trim()).ok_or_else(|| Error::UnknownBehaviour {
        line: line_no,
        value: fields[2].trim().to_string(),
    })?;
    let timestamp: i64 = fields[3].trim().parse().map_err(|_| Error::MalformedLine {
        line: line_no,
        detail: format!("bad timestamp \"{}\"", fields[3].trim()),
    })?;
    if timestamp < 0 {
        return Err(Error::MalformedLine {
            line: line_no,
            detail: format!("negative timestamp {timestamp}"),
        });
    }
    let user_id = fields[0].trim();
    let item_id = fields[1].trim();
    if user_id.is_empty() || item_id.is_empty() {
        return Err(Error::MalformedLine {
            line: line_no,
            detail: "empty id field".into(),
        });
    }
    Ok(InteractionRecord {
        user_id: user_id.to_string(),
        item_id: item_id.to_string(),
        behaviour,
        timestamp,
    })
}

#[derive(Debug, Clone, Default)]
pub struct FilterReport {
    pub passes: usize,
    pub removed_users: usize,
    pub removed_items: usize,
}

/// Alternately drop users and items with fewer than `min_count`
/// interactions until a fixed point (k-core style). Record order is
/// preserved; indices are re-densified.
pub fn filter_min_interactions(
    ds: &Dataset,
    min_count: usize,
) -> Result<(Dataset, FilterReport)> {
    assert!(min_count >= 1);
    let mut records = ds.records.clone();
    let mut report = FilterReport::default();
    loop {
        report.passes += 1;
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            *user_counts.entry(r.user_id.as_str()).or_default() += 1;
        }
        let bad_users: HashSet<String> = user_counts
            .iter()
            .filter(|(_, &c)| c < min_count)
            .map(|(u, _)| u.to_string())
            .collect();
        report.removed_users += bad_users.len();
        records.retain(|r| !bad_users.contains(&r.user_id));

        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            *item_counts.entry(r.item_id.as_str()).or_default() += 1;
        }
        let bad_items: HashSet<String> = item_counts
            .iter()
            .filter(|(_, &c)| c < min_count)
            .map(|(i, _)| i.to_string())
            .collect();
        report.removed_items += bad_items.len();
        records.retain(|r| !bad_items.contains(&r.item_id));

        if bad_users.is_empty() && bad_items.is_empty() {
            break;
        }
    }
    if records.is_empty() {
        return Err(Error::DatasetExhausted { min_count });
    }
    Ok((Dataset::from_records(records), report))
}

/// Split protocol configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub target_behaviour: Behaviour,
    pub n_negatives: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            target_behaviour: Behaviour::Buy,
            n_negatives: 99,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_negatives < 1 {
            return Err(Error::Config("n_negatives must be >= 1".into()));
        }
        Ok(())
    }
}

/// One held-out evaluation case: a user, their positive item, and
/// (after sampling) the negative candidates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalInstance {
    pub user: usize,
    pub positive: usize,
    #[serde(default)]
    pub candidates: Vec<usize>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SplitReport {
    pub evaluated_users: usize,
    pub excluded_users: usize,
}

pub struct Split {
    pub train: Dataset,
    pub validation: Vec<EvalInstance>,
    pub test: Vec<EvalInstance>,
    pub report: SplitReport,
}

/// Leave-one-out on the target behaviour: per user the last
/// target-behaviour event becomes the test positive, the second-last the
/// validation positive, everything else stays in train. Users with fewer
/// than 3 target events keep all events in train and are excluded from
/// evaluation. Timestamp ties are broken by input order.
pub fn chronological_split(ds: &Dataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    // per user: record positions of target-behaviour events
    let mut per_user: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let dense = ds.dense_records();
    for (pos, (u, _, b, _)) in dense.iter().enumerate() {
        if *b == spec.target_behaviour {
            per_user.entry(*u).or_default().push(pos);
        }
    }
    let mut held_out: HashSet<usize> = HashSet::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    let mut report = SplitReport::default();

    for u in 0..ds.n_users() {
        let Some(positions) = per_user.get(&u) else {
            report.excluded_users += 1;
            continue;
        };
        if positions.len() < 3 {
            report.excluded_users += 1;
            continue;
        }
        // stable sort by timestamp, ties by input position
        let mut sorted = positions.clone();
        sorted.sort_by_key(|&p| (dense[p].3, p));
        let test_pos = *sorted.last().unwrap();
        let val_pos = sorted[sorted.len() - 2];
        held_out.insert(test_pos);
        held_out.insert(val_pos);
        validation.push(EvalInstance {
            user: u,
            positive: dense[val_pos].1,
            candidates: Vec::new(),
        });
        test.push(EvalInstance {
            user: u,
            positive: dense[test_pos].1,
            candidates: Vec::new(),
        });
        report.evaluated_users += 1;
    }

    let train_records: Vec<InteractionRecord> = ds
        .records
        .iter()
        .enumerate()
        .filter(|(i, _)| !held_out.contains(i))
        .map(|(_, r)| r.clone())
        .collect();

    // Train keeps the full dataset's index space so that held-out items
    // stay addressable.
    let train = Dataset {
        records: train_records,
        user_index: ds.user_index.clone(),
        item_index: ds.item_index.clone(),
    };

    Ok(Split {
        train,
        validation,
        test,
        report,
    })
}

/// Items each user interacted with under any behaviour.
pub fn interacted_items(ds: &Dataset) -> Vec<HashSet<usize>> {
    let mut touched = vec![HashSet::new(); ds.n_users()];
    for (u, i, _, _) in ds.dense_records() {
        touched[u].insert(i);
    }
    touched
}

/// Fill candidate sets: 1 positive + n_negatives items sampled uniformly
/// without replacement from items the user never touched (any behaviour).
/// Deterministic given the spec seed.
pub fn build_candidate_sets(
    instances: &[EvalInstance],
    ds: &Dataset,
    spec: &SplitSpec,
    stream: u64,
) -> Result<Vec<EvalInstance>> {
    spec.validate()?;
    let touched = interacted_items(ds);
    let mut out = Vec::with_capacity(instances.len());
    for inst in instances {
        let eligible: Vec<usize> = (0..ds.n_items())
            .filter(|i| !touched[inst.user].contains(i))
            .collect();
        if eligible.len() < spec.n_negatives {
            let user = ds
                .user_id_of(inst.user)
                .unwrap_or("<unknown>")
                .to_string();
            return Err(Error::NegativeShortfall {
                user,
                available: eligible.len(),
                needed: spec.n_negatives,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(
            spec.seed
                .wrapping_mul(0x9E3779B97F4A7C15)
                .wrapping_add(stream)
                .wrapping_add(inst.user as u64),
        );
        let mut negs = eligible;
        negs.shuffle(&mut rng);
        negs.truncate(spec.n_negatives);
        let mut candidates = Vec::with_capacity(spec.n_negatives + 1);
        candidates.push(inst.positive);
        candidates.extend(negs);
        out.push(EvalInstance {
            user: inst.user,
            positive: inst.positive,
            candidates,
        });
    }
    Ok(out)
}
