//! Synthetic planted-preference dataset for overfit/ablation runs.
//!
//! 20 users in 4 clusters of 5; 50 items, 12 owned by each cluster plus 2
//! unowned noise items. Every user's buys stay inside their cluster, so
//! the recoverable signal lives in the interaction graph structure.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Behaviour, Dataset, InteractionRecord};

pub const N_USERS: usize = 20;
pub const N_ITEMS: usize = 50;
pub const N_CLUSTERS: usize = 4;
pub const ITEMS_PER_CLUSTER: usize = 12;

pub fn cluster_of_user(user: usize) -> usize {
    user / (N_USERS / N_CLUSTERS)
}

pub fn cluster_items(cluster: usize) -> Vec<usize> {
    (cluster * ITEMS_PER_CLUSTER..(cluster + 1) * ITEMS_PER_CLUSTER).collect()
}

/// ~800 events: per user 20 views (10% out-of-cluster noise), 8 favs,
/// 6 carts and 6 buys, buys strictly in-cluster. Timestamps strictly
/// increase in generation order so splits are unambiguous.
pub fn planted_dataset(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut t: i64 = 0;
    let mut push = |records: &mut Vec<InteractionRecord>, u: usize, i: usize, b: Behaviour| {
        t += 1;
        records.push(InteractionRecord {
            user_id: format!("u{u}"),
            item_id: format!("i{i}"),
            behaviour: b,
            timestamp: t,
        });
    };
    for u in 0..N_USERS {
        let own = cluster_items(cluster_of_user(u));
        let pick = |rng: &mut ChaCha8Rng| own[rng.gen_range(0..own.len())];
        for _ in 0..20 {
            let item = if rng.gen_bool(0.1) {
                rng.gen_range(0..N_ITEMS)
            } else {
                pick(&mut rng)
            };
            push(&mut records, u, item, Behaviour::View);
        }
        for _ in 0..8 {
            let item = pick(&mut rng);
            push(&mut records, u, item, Behaviour::Fav);
        }
        for _ in 0..6 {
            let item = pick(&mut rng);
            push(&mut records, u, item, Behaviour::Cart);
        }
        // buys over distinct in-cluster items, strictly in-cluster
        let mut buy_pool = own.clone();
        buy_pool.shuffle(&mut rng);
        for &item in buy_pool.iter().take(6) {
            push(&mut records, u, item, Behaviour::Buy);
        }
    }
    Dataset::from_records(records)
}
