//! Data deletion and retraining on the remaining data.
//!
//! Unlearning here is exact by construction: deleted examples are dropped by
//! [`apply_deletion`] and never read again. What remains is to retrain the
//! federation on the remaining data, either with the Fisher quasi-Newton
//! update ([`run_unlearning`]) or with plain SGD from scratch
//! ([`run_baseline_retrain`]).

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::LocalDataset;
use crate::error::{Error, Result};
use crate::federated::{
    run_rounds, ClientState, LocalOptimizer, RoundPlan, RoundRecord, RunOutcome,
    ServerState,
};
use crate::model::{ModelSpec, ParamVector};
use crate::seed;

/// Ordered deletion requests of one client, as indices into its dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeletionSequence {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

impl DeletionSequence {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Removes the indexed examples, keeping the rest in their original order.
pub fn apply_deletion(data: &LocalDataset, seq: &DeletionSequence) -> Result<LocalDataset> {
    let mut doomed = vec![false; data.len()];
    for &i in &seq.indices {
        match doomed.get_mut(i) {
            None => {
                return Err(Error::contract(format!(
                    "deletion index {i} out of range for client {} with {} examples",
                    seq.client_id,
                    data.len()
                )))
            }
            Some(true) => {
                return Err(Error::contract(format!(
                    "deletion index {i} repeated for client {}",
                    seq.client_id
                )))
            }
            Some(flag) => *flag = true,
        }
    }
    let (examples, origin) = data
        .examples()
        .iter()
        .zip(data.origin())
        .zip(&doomed)
        .filter(|(_, &gone)| !gone)
        .map(|((ex, &o), _)| (ex.clone(), o))
        .unzip();
    Ok(LocalDataset::from_parts(examples, origin, data.original_len()))
}

fn even_share(total: usize, parts: usize, i: usize) -> usize {
    total / parts + usize::from(i < total % parts)
}

/// Picks `floor(rate * n)` deletions over the first `k_u` clients, split as
/// evenly as possible, each client's share sampled uniformly without
/// replacement. No client may lose more than `max_fraction` of its data.
pub fn select_deletions(
    client_sizes: &[usize],
    rate: f64,
    k_u: usize,
    max_fraction: f64,
    seed_value: u64,
) -> Result<Vec<DeletionSequence>> {
    if k_u == 0 || k_u > client_sizes.len() {
        return Err(Error::contract(format!(
            "number of unlearned clients {k_u} must be in [1, {}]",
            client_sizes.len()
        )));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(format!("deletion rate {rate} must be in [0, 1)")));
    }
    if !(max_fraction > 0.0 && max_fraction <= 1.0) {
        return Err(Error::contract("maximum deletion fraction must be in (0, 1]"));
    }
    let n: usize = client_sizes.iter().sum();
    // tolerance keeps e.g. 0.29 * 100 from flooring to 28
    let total = (rate * n as f64 + 1e-9).floor() as usize;
    let caps: Vec<usize> = client_sizes[..k_u]
        .iter()
        .map(|&nk| ((max_fraction * nk as f64 + 1e-9).floor() as usize).min(nk))
        .collect();
    let feasible = |t: usize| (0..k_u).all(|i| even_share(t, k_u, i) <= caps[i]);
    if !feasible(total) {
        // feasibility is monotone in the total
        let (mut lo, mut hi) = (0usize, total);
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if feasible(mid) {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        return Err(Error::InfeasibleDeletion {
            requested: rate,
            max_feasible: lo as f64 / n as f64,
        });
    }
    Ok((0..k_u)
        .map(|i| {
            let mut rng = seed::rng(seed_value, &[i as u64]);
            DeletionSequence {
                client_id: i,
                indices: index::sample(&mut rng, client_sizes[i], even_share(total, k_u, i)).into_vec(),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchingMode {
    /// Keep the pre-deletion batch layout and drop deleted members.
    #[default]
    Mask,
    /// Reshuffle the remaining data into full batches.
    Rebatch,
}

/// One mini-batch: indices into the client's remaining examples and the
/// number of deleted examples that fell into this batch's original slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub delta: usize,
}

/// Mini-batches for one epoch. The order is a deterministic shuffle keyed by
/// `(seed, round, epoch)`; with no deletions both modes coincide.
pub fn make_batches(
    data: &LocalDataset,
    batch_size: usize,
    mode: BatchingMode,
    seed_value: u64,
    round: u64,
    epoch: u64,
) -> Vec<Batch> {
    let batch_size = batch_size.max(1);
    let mut rng = seed::rng(seed_value, &[round, epoch]);
    match mode {
        BatchingMode::Mask => {
            let mut slot = vec![None; data.original_len()];
            for (pos, &o) in data.origin().iter().enumerate() {
                slot[o] = Some(pos);
            }
            let mut order: Vec<usize> = (0..data.original_len()).collect();
            order.shuffle(&mut rng);
            order
                .chunks(batch_size)
                .map(|chunk| {
                    let indices: Vec<usize> = chunk.iter().filter_map(|&o| slot[o]).collect();
                    Batch {
                        delta: chunk.len() - indices.len(),
                        indices,
                    }
                })
                .filter(|b| !b.indices.is_empty())
                .collect()
        }
        BatchingMode::Rebatch => {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            order
                .chunks(batch_size)
                .map(|chunk| Batch {
                    indices: chunk.to_vec(),
                    delta: 0,
                })
                .collect()
        }
    }
}

/// Applies each client's deletion sequence in place.
pub fn apply_deletions(clients: &mut [ClientState], deletions: &[DeletionSequence]) -> Result<()> {
    let mut seen = HashSet::new();
    for seq in deletions {
        if !seen.insert(seq.client_id) {
            return Err(Error::contract(format!(
                "more than one deletion sequence for client {}",
                seq.client_id
            )));
        }
        let client = clients
            .iter_mut()
            .find(|c| c.id == seq.client_id)
            .ok_or_else(|| Error::contract(format!("no client with id {}", seq.client_id)))?;
        client.data = apply_deletion(&client.data, seq)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReinitMode {
    /// New random initialization.
    #[default]
    Fresh,
    /// Start from the trained model (experimental).
    Warm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlearnOutcome {
    pub unlearned_params: ParamVector,
    pub rounds: Vec<RoundRecord>,
    pub total_wall_time_ms: f64,
    pub rounds_to_threshold: Option<usize>,
    pub mean_delta_batch: f64,
    pub server: ServerState,
}

impl From<RunOutcome> for UnlearnOutcome {
    fn from(run: RunOutcome) -> Self {
        Self {
            unlearned_params: run.server.global_params.clone(),
            total_wall_time_ms: run.total_wall_time_ms(),
            rounds: run.rounds,
            rounds_to_threshold: run.rounds_to_threshold,
            mean_delta_batch: run.mean_delta_batch,
            server: run.server,
        }
    }
}

/// Rapid retraining: every client (learned or unlearned) trains on its
/// current data with the Fisher quasi-Newton update. `plan.local.optimizer`
/// must be the Fisher optimizer.
pub fn run_unlearning(
    spec: &ModelSpec,
    trained: &ServerState,
    clients: &mut [ClientState],
    plan: &RoundPlan,
    reinit: ReinitMode,
    reinit_seed: u64,
) -> Result<UnlearnOutcome> {
    if !matches!(plan.local.optimizer, LocalOptimizer::Fim(_)) {
        return Err(Error::contract("rapid retraining requires the Fisher optimizer"));
    }
    let init = match reinit {
        ReinitMode::Fresh => spec.init_params(reinit_seed),
        ReinitMode::Warm => trained.global_params.clone(),
    };
    Ok(run_rounds(spec, clients, init, plan)?.into())
}

/// Retraining from scratch with plain mini-batch SGD on the remaining data.
pub fn run_baseline_retrain(
    spec: &ModelSpec,
    clients: &mut [ClientState],
    plan: &RoundPlan,
    reinit_seed: u64,
) -> Result<UnlearnOutcome> {
    if plan.local.optimizer != LocalOptimizer::Sgd {
        return Err(Error::contract("the baseline retrains with SGD"));
    }
    Ok(run_rounds(spec, clients, spec.init_params(reinit_seed), plan)?.into())
}
