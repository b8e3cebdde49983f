//! Identity-balanced (P x K) batch sampling: every batch holds exactly
//! batch_size / K distinct identities with K instances each, seeded and
//! deterministic. Identities with fewer than K images are padded by
//! sampling with replacement.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Build one epoch of batches over sample indices. Falls back to smaller
/// batches (with a warning) when there are fewer identities than P.
pub fn pk_sample_epoch(
    labels: &[u32],
    batch_size: usize,
    instances_per_id: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let k = instances_per_id.max(1);
    let p = (batch_size / k).max(1);
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &label) in labels.iter().enumerate() {
        by_id.entry(label).or_default().push(i);
    }
    if by_id.is_empty() {
        return Vec::new();
    }
    let p_eff = if by_id.len() < p {
        eprintln!(
            "warning: only {} identities available for P={p} x K={k} batches; \
             falling back to {}-identity batches",
            by_id.len(),
            by_id.len()
        );
        by_id.len()
    } else {
        p
    };

    // Chunk each identity's (shuffled) samples into groups of K, padding the
    // tail by resampling from the same identity.
    let mut groups: BTreeMap<u32, Vec<Vec<usize>>> = BTreeMap::new();
    for (&id, indices) in &by_id {
        let mut pool = indices.clone();
        pool.shuffle(rng);
        let mut id_groups = Vec::new();
        let mut current = Vec::with_capacity(k);
        for &idx in &pool {
            current.push(idx);
            if current.len() == k {
                id_groups.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() || id_groups.is_empty() {
            while current.len() < k {
                current.push(pool[rng.random_range(0..pool.len())]);
            }
            id_groups.push(current);
        }
        groups.insert(id, id_groups);
    }

    let mut batches = Vec::new();
    loop {
        let mut available: Vec<u32> = groups
            .iter()
            .filter(|(_, g)| !g.is_empty())
            .map(|(&id, _)| id)
            .collect();
        if available.len() < p_eff {
            break;
        }
        available.shuffle(rng);
        let mut batch = Vec::with_capacity(p_eff * k);
        for &id in available.iter().take(p_eff) {
            let group = groups.get_mut(&id).expect("id present").pop().expect("nonempty");
            batch.extend(group);
        }
        batches.push(batch);
    }
    batches
}
