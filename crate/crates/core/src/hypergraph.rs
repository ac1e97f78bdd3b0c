//! Behaviour-labelled hypergraph construction and per-user ego extraction.
//!
//! Node convention: users occupy global indices [0, n_users), items occupy
//! [n_users, n_users + n_items).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::Serialize;

use crate::data::{Behaviour, Dataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hyperedge {
    pub behaviour: Behaviour,
    /// Sorted, unique global node indices; exactly one user node.
    pub nodes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Hypergraph {
    pub n_users: usize,
    pub n_items: usize,
    pub hyperedges: Vec<Hyperedge>,
}

impl Hypergraph {
    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn is_user_node(&self, v: usize) -> bool {
        v < self.n_users
    }

    pub fn item_global(&self, item: usize) -> usize {
        self.n_users + item
    }

    /// Debug dump: one line per hyperedge, `behaviour<TAB>node,node,...`.
    pub fn dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.hyperedges {
            let nodes: Vec<String> = e.nodes.iter().map(|n| n.to_string()).collect();
            writeln!(w, "{}\t{}", e.behaviour, nodes.join(","))?;
        }
        Ok(())
    }
}

/// One hyperedge per (user, behaviour, time-window bucket), containing the
/// user node and every item the user touched with that behaviour in that
/// bucket. `window_seconds == 0` means no windowing: one hyperedge per
/// (user, behaviour). Output is canonically sorted by
/// (behaviour, user, bucket) so it is byte-deterministic.
pub fn build_hypergraph(ds: &Dataset, window_seconds: i64) -> Hypergraph {
    assert!(window_seconds >= 0);
    let n_users = ds.n_users();
    let n_items = ds.n_items();
    let mut groups: BTreeMap<(usize, usize, i64), BTreeSet<usize>> = BTreeMap::new();
    for (u, i, b, t) in ds.dense_records() {
        let bucket = if window_seconds == 0 {
            0
        } else {
            t.div_euclid(window_seconds)
        };
        groups
            .entry((b.index(), u, bucket))
            .or_default()
            .insert(n_users + i);
    }
    let behaviours = crate::data::BEHAVIOURS;
    let hyperedges = groups
        .into_iter()
        .map(|((b, u, _), items)| {
            let mut nodes = vec![u];
            nodes.extend(items);
            Hyperedge {
                behaviour: behaviours[b],
                nodes,
            }
        })
        .collect();
    Hypergraph {
        n_users,
        n_items,
        hyperedges,
    }
}

/// A hypergraph restricted to one anchor user's neighbourhood, with
/// local node indices. Local ordering: anchor first, then remaining user
/// nodes sorted by global index, then item nodes sorted by global index.
#[derive(Debug, Clone)]
pub struct EgoGraph {
    pub anchor_local: usize,
    /// local index -> global index
    pub node_map: Vec<usize>,
    /// hyperedges with local node indices, sorted
    pub hyperedges: Vec<Hyperedge>,
    /// whether each local node is a user node
    pub is_user: Vec<bool>,
}

impl EgoGraph {
    pub fn n_nodes(&self) -> usize {
        self.node_map.len()
    }
}

/// Extract the anchor user's ego sub-hypergraph. hops = 1 keeps all
/// hyperedges containing the user; hops = 2 additionally keeps all
/// hyperedges containing any of those items.
pub fn ego_subgraph(g: &Hypergraph, user: usize, hops: usize) -> Result<EgoGraph> {
    if user >= g.n_users {
        return Err(Error::NodeOutOfRange {
            kind: "user",
            index: user,
            count: g.n_users,
        });
    }
    assert!(hops == 1 || hops == 2, "hops must be 1 or 2");

    let mut edge_ids: BTreeSet<usize> = g
        .hyperedges
        .iter()
        .enumerate()
        .filter(|(_, e)| e.nodes.binary_search(&user).is_ok())
        .map(|(i, _)| i)
        .collect();

    if hops == 2 {
        let frontier: BTreeSet<usize> = edge_ids
            .iter()
            .flat_map(|&i| g.hyperedges[i].nodes.iter().copied())
            .filter(|&v| !g.is_user_node(v))
            .collect();
        for (i, e) in g.hyperedges.iter().enumerate() {
            if e.nodes.iter().any(|v| frontier.contains(v)) {
                edge_ids.insert(i);
            }
        }
    }

    let mut users: BTreeSet<usize> = BTreeSet::new();
    let mut items: BTreeSet<usize> = BTreeSet::new();
    for &i in &edge_ids {
        for &v in &g.hyperedges[i].nodes {
            if g.is_user_node(v) {
                users.insert(v);
            } else {
                items.insert(v);
            }
        }
    }
    users.remove(&user);

    let mut node_map = vec![user];
    node_map.extend(users);
    node_map.extend(items);
    let local: BTreeMap<usize, usize> = node_map
        .iter()
        .enumerate()
        .map(|(l, &gidx)| (gidx, l))
        .collect();

    let hyperedges = edge_ids
        .iter()
        .map(|&i| {
            let e = &g.hyperedges[i];
            let mut nodes: Vec<usize> = e.nodes.iter().map(|v| local[v]).collect();
            nodes.sort_unstable();
            Hyperedge {
                behaviour: e.behaviour,
                nodes,
            }
        })
        .collect();

    let is_user = node_map.iter().map(|&v| g.is_user_node(v)).collect();
    Ok(EgoGraph {
        anchor_local: 0,
        node_map,
        hyperedges,
        is_user,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct IncidenceStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_hyperedges: usize,
    pub interactions: usize,
    pub mean_edge_size: f64,
    pub density: f64,
    pub empty: bool,
}

/// Summary statistics; density = interactions / (users * items).
pub fn incidence_stats(g: &Hypergraph, interactions: usize) -> IncidenceStats {
    let empty = g.hyperedges.is_empty();
    let mean_edge_size = if empty {
        0.0
    } else {
        g.hyperedges.iter().map(|e| e.nodes.len()).sum::<usize>() as f64
            / g.hyperedges.len() as f64
    };
    let denom = (g.n_users * g.n_items) as f64;
    let density = if denom > 0.0 {
        interactions as f64 / denom
    } else {
        0.0
    };
    IncidenceStats {
        n_users: g.n_users,
        n_items: g.n_items,
        n_hyperedges: g.hyperedges.len(),
        interactions,
        mean_edge_size,
        density,
        empty,
    }
}
