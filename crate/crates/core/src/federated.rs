//! Simulated federated training: IID partitioning, client-side local
//! training with either plain SGD or the Fisher quasi-Newton update, and
//! weighted model averaging on the server.
//!
//! Clients of one round train in parallel; aggregation is a sequential
//! reduction in ascending client-id order, so results are bitwise
//! reproducible regardless of thread scheduling.

use std::time::Instant;

use log::warn;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LocalDataset;
use crate::error::{Error, Result};
use crate::fim::{self, FimMomentState, StepScaling};
use crate::model::{Example, ModelSpec, ParamVector};
use crate::seed;
use crate::unlearning::{make_batches, BatchingMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Learned,
    Unlearned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Fim,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FimSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stab: f64,
    pub block_size: usize,
    pub scaling: StepScaling,
}

impl Default for FimSettings {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps_stab: 1e-8,
            block_size: 1,
            scaling: StepScaling::Mean,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LocalOptimizer {
    Sgd,
    Fim(FimSettings),
}

impl LocalOptimizer {
    pub fn kind(&self) -> OptimizerKind {
        match self {
            LocalOptimizer::Sgd => OptimizerKind::Sgd,
            LocalOptimizer::Fim(_) => OptimizerKind::Fim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptState {
    Sgd,
    Fim(FimMomentState),
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub data: LocalDataset,
    pub opt_state: OptState,
    /// Base seed for this client's mini-batch order.
    pub rng_seed: u64,
}

impl ClientState {
    pub fn new(id: usize, data: LocalDataset, batching_seed: u64) -> Self {
        Self {
            id,
            data,
            opt_state: OptState::Sgd,
            rng_seed: seed::derive(batching_seed, &[id as u64]),
        }
    }

    /// `Unlearned` iff the client has deleted at least one example.
    pub fn role(&self) -> Role {
        if self.data.deleted_count() > 0 {
            Role::Unlearned
        } else {
            Role::Learned
        }
    }

    /// Fresh optimizer state for a new training run.
    pub fn reset_optimizer(&mut self, optimizer: &LocalOptimizer, dim: usize) -> Result<()> {
        self.opt_state = match optimizer {
            LocalOptimizer::Sgd => OptState::Sgd,
            LocalOptimizer::Fim(s) => {
                OptState::Fim(FimMomentState::new(dim, s.beta1, s.beta2, s.eps_stab)?)
            }
        };
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// `sum_k p_k w_k / sum_k p_k`.
    #[default]
    Fedavg,
    /// Learned and unlearned groups averaged separately, each divided by its
    /// group size, then summed.
    TwoGroup,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `p_k = n_k`, the client's current sample count.
    #[default]
    Samples,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub global_params: ParamVector,
    /// Aggregation weight of every client, indexed by id.
    pub weights: Vec<f64>,
    pub round: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub global_loss: f64,
    pub global_accuracy: Option<f64>,
    pub wall_time_ms: f64,
    /// `||w_k - w_global||` per participating client, in id order.
    pub per_client_update_norms: Vec<f64>,
    pub participants: Vec<usize>,
    pub skipped: Vec<usize>,
}

/// Per-client outcome of one round of local training.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalRecord {
    pub client_id: usize,
    pub steps: usize,
    pub samples: usize,
    pub update_norm: f64,
    /// Sum of per-batch deletion counts.
    pub deleted_in_batches: usize,
    pub skipped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainingConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub optimizer: LocalOptimizer,
    pub batching: BatchingMode,
}

/// Splits `data` into `k` disjoint parts after a seeded shuffle; part sizes
/// differ by at most one and larger parts come first.
pub fn partition_iid(data: &[Example], k: usize, seed_value: u64) -> Result<Vec<LocalDataset>> {
    if k == 0 {
        return Err(Error::contract("number of clients must be >= 1"));
    }
    if data.len() < k {
        return Err(Error::contract(format!(
            "cannot split {} examples across {k} clients",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seed::rng(seed_value, &[0x9a27]));
    let (base, extra) = (data.len() / k, data.len() % k);
    let mut parts = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        let examples = order[start..start + len]
            .iter()
            .map(|&j| data[j].clone())
            .collect();
        parts.push(LocalDataset::new(examples));
        start += len;
    }
    Ok(parts)
}

/// Runs `local_epochs` passes of mini-batch updates starting from
/// `global`. Returns `None` for clients with no data.
pub fn local_training(
    spec: &ModelSpec,
    client: &mut ClientState,
    global: &ParamVector,
    cfg: &LocalTrainingConfig,
    round: usize,
) -> Result<(Option<ParamVector>, LocalRecord)> {
    let mut record = LocalRecord {
        client_id: client.id,
        steps: 0,
        samples: 0,
        update_norm: 0.0,
        deleted_in_batches: 0,
        skipped: false,
    };
    if client.data.is_empty() {
        warn!("client {} has no local data; skipping round {round}", client.id);
        record.skipped = true;
        return Ok((None, record));
    }
    if cfg.local_epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::contract("local epochs and batch size must be >= 1"));
    }
    let mut w = global.clone();
    let examples = client.data.examples();
    for epoch in 0..cfg.local_epochs {
        let batches = make_batches(
            &client.data,
            cfg.batch_size,
            cfg.batching,
            client.rng_seed,
            round as u64,
            epoch as u64,
        );
        for batch in batches {
            let members = batch.indices.iter().map(|&i| &examples[i]);
            match (&cfg.optimizer, &mut client.opt_state) {
                (LocalOptimizer::Sgd, _) => {
                    let g = spec.mean_gradient(&w, members)?;
                    for (j, (wj, gj)) in w.as_mut_slice().iter_mut().zip(&g).enumerate() {
                        *wj -= cfg.eta * gj;
                        if !wj.is_finite() {
                            return Err(Error::NonFinite { index: j, value: *wj });
                        }
                    }
                }
                (LocalOptimizer::Fim(settings), OptState::Fim(state)) => {
                    let grads = spec.gradient(&w, members)?;
                    let n = grads.len();
                    let fim = fim::estimate_block_fim(&grads.per_sample, n, settings.block_size)?;
                    state.update_moments(&grads.mean, &fim)?;
                    w = fim::apply_update(&w, state, cfg.eta, n, settings.scaling)?;
                }
                (LocalOptimizer::Fim(_), OptState::Sgd) => {
                    return Err(Error::contract(format!(
                        "client {} has no Fisher optimizer state",
                        client.id
                    )));
                }
            }
            record.steps += 1;
            record.samples += batch.indices.len();
            record.deleted_in_batches += batch.delta;
        }
    }
    record.update_norm = w.l2_distance(global);
    Ok((Some(w), record))
}

/// A client's model as submitted for aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub role: Role,
    pub params: ParamVector,
    pub weight: f64,
}

/// Weighted model average. Inputs are reduced in ascending client-id order.
///
/// FedAvg is evaluated as `w_0 + sum_k (p_k / P) (w_k - w_0)` around the
/// lowest-id model `w_0`, which equals `sum_k p_k w_k / P` exactly in real
/// arithmetic and returns identical inputs bit-for-bit.
pub fn aggregate(updates: &[ClientUpdate], mode: AggregationMode) -> Result<ParamVector> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let first = sorted
        .first()
        .ok_or_else(|| Error::contract("aggregation needs at least one update"))?;
    let d = first.params.len();
    for u in &sorted {
        if u.params.len() != d {
            return Err(Error::DimensionMismatch {
                what: "client parameters",
                expected: d,
                got: u.params.len(),
            });
        }
        if !(u.weight >= 0.0 && u.weight.is_finite()) {
            return Err(Error::contract(format!(
                "client {} has invalid weight {}",
                u.client_id, u.weight
            )));
        }
    }
    match mode {
        AggregationMode::Fedavg => weighted_mean(&sorted),
        AggregationMode::TwoGroup => {
            let mut out = vec![0.0; d];
            for role in [Role::Learned, Role::Unlearned] {
                let group: Vec<&ClientUpdate> =
                    sorted.iter().copied().filter(|u| u.role == role).collect();
                if group.is_empty() {
                    continue;
                }
                let total: f64 = group.iter().map(|u| u.weight).sum();
                if total == 0.0 {
                    return Err(Error::contract("all aggregation weights in a group are zero"));
                }
                let scale = group.len() as f64 * total;
                for u in &group {
                    for (o, w) in out.iter_mut().zip(u.params.as_slice()) {
                        *o += u.weight * w / scale;
                    }
                }
            }
            Ok(ParamVector::new(out))
        }
    }
}

fn weighted_mean(sorted: &[&ClientUpdate]) -> Result<ParamVector> {
    let total: f64 = sorted.iter().map(|u| u.weight).sum();
    if total == 0.0 {
        return Err(Error::contract("all aggregation weights are zero"));
    }
    let anchor = &sorted[0].params;
    let mut out = anchor.clone();
    for u in &sorted[1..] {
        let share = u.weight / total;
        for (o, (w, a)) in out
            .as_mut_slice()
            .iter_mut()
            .zip(u.params.as_slice().iter().zip(anchor.as_slice()))
        {
            *o += share * (w - a);
        }
    }
    Ok(out)
}

/// Everything a multi-round federated run needs besides data and model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub rounds: usize,
    /// Fraction of clients selected per round.
    pub participation: f64,
    pub local: LocalTrainingConfig,
    pub aggregation: AggregationMode,
    pub weighting: Weighting,
    /// Stop as soon as the global loss reaches this value.
    pub loss_threshold: Option<f64>,
    pub selection_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub server: ServerState,
    pub rounds: Vec<RoundRecord>,
    /// First round (1-based count) whose loss met the threshold.
    pub rounds_to_threshold: Option<usize>,
    /// Mean per-batch deletion count over unlearned clients' batches.
    pub mean_delta_batch: f64,
}

impl RunOutcome {
    pub fn total_wall_time_ms(&self) -> f64 {
        self.rounds.iter().map(|r| r.wall_time_ms).sum()
    }
}

/// Deterministic subset of `ceil(q * k)` client ids (at least one) for a round.
pub fn select_clients(k: usize, participation: f64, selection_seed: u64, round: usize) -> Vec<usize> {
    let m = ((participation * k as f64).ceil() as usize).clamp(1, k);
    if m == k {
        return (0..k).collect();
    }
    let mut ids: Vec<usize> = (0..k).collect();
    ids.shuffle(&mut seed::rng(selection_seed, &[round as u64]));
    let mut chosen = ids[..m].to_vec();
    chosen.sort_unstable();
    chosen
}

fn client_weight(client: &ClientState, weighting: Weighting) -> f64 {
    match weighting {
        Weighting::Samples => client.data.len() as f64,
        Weighting::Uniform => 1.0,
    }
}

/// Evaluates the global objective over the union of all clients' data.
pub fn global_metrics(spec: &ModelSpec, clients: &[ClientState], params: &ParamVector) -> Result<(f64, Option<f64>)> {
    spec.evaluate(params, clients.iter().flat_map(|c| c.data.examples()))
}

/// Broadcast, local training, aggregation; repeated for `plan.rounds`
/// rounds or until the loss threshold is reached. Optimizer states are
/// reset at the start.
pub fn run_rounds(
    spec: &ModelSpec,
    clients: &mut [ClientState],
    init: ParamVector,
    plan: &RoundPlan,
) -> Result<RunOutcome> {
    if clients.is_empty() {
        return Err(Error::contract("federation has no clients"));
    }
    if !(plan.participation > 0.0 && plan.participation <= 1.0) {
        return Err(Error::contract("participation must be in (0, 1]"));
    }
    if init.len() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            what: "initial parameters",
            expected: spec.param_count(),
            got: init.len(),
        });
    }
    clients.sort_by_key(|c| c.id);
    if clients.iter().enumerate().any(|(i, c)| c.id != i) {
        return Err(Error::contract("client ids must be 0..K"));
    }
    for c in clients.iter_mut() {
        c.reset_optimizer(&plan.local.optimizer, spec.param_count())?;
    }
    let weights: Vec<f64> = clients.iter().map(|c| client_weight(c, plan.weighting)).collect();
    let mut global = init;
    let mut records = Vec::with_capacity(plan.rounds);
    let mut rounds_to_threshold = None;
    let (mut delta_sum, mut delta_batches) = (0usize, 0usize);

    for round in 0..plan.rounds {
        let selected = select_clients(clients.len(), plan.participation, plan.selection_seed, round);
        let started = Instant::now();
        let results: Vec<Result<(Option<ParamVector>, LocalRecord)>> = clients
            .par_iter_mut()
            .filter(|c| selected.binary_search(&c.id).is_ok())
            .map(|c| local_training(spec, c, &global, &plan.local, round))
            .collect();

        let mut updates = Vec::new();
        let mut norms = Vec::new();
        let mut skipped = Vec::new();
        for res in results {
            let (params, rec) = res?;
            let client = &clients[rec.client_id];
            match params {
                Some(p) => {
                    if client.role() == Role::Unlearned {
                        delta_sum += rec.deleted_in_batches;
                        delta_batches += rec.steps;
                    }
                    norms.push(rec.update_norm);
                    updates.push(ClientUpdate {
                        client_id: rec.client_id,
                        role: client.role(),
                        params: p,
                        weight: weights[rec.client_id],
                    });
                }
                None => skipped.push(rec.client_id),
            }
        }
        if updates.is_empty() {
            warn!("round {round}: no client produced an update; global model unchanged");
        } else {
            global = aggregate(&updates, plan.aggregation)?;
        }
        let wall_time_ms = started.elapsed().as_secs_f64() * 1e3;

        let (global_loss, global_accuracy) = global_metrics(spec, clients, &global)?;
        if !global_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "global loss became {global_loss} in round {round}"
            )));
        }
        records.push(RoundRecord {
            round,
            global_loss,
            global_accuracy,
            wall_time_ms,
            per_client_update_norms: norms,
            participants: selected,
            skipped,
        });
        if let Some(threshold) = plan.loss_threshold {
            if global_loss <= threshold {
                rounds_to_threshold = Some(round + 1);
                break;
            }
        }
    }

    let server = ServerState {
        global_params: global,
        weights,
        round: records.len(),
    };
    Ok(RunOutcome {
        server,
        rounds: records,
        rounds_to_threshold,
        mean_delta_batch: if delta_batches == 0 {
            0.0
        } else {
            delta_sum as f64 / delta_batches as f64
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upd(id: usize, params: Vec<f64>, weight: f64) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            role: Role::Learned,
            params: ParamVector::new(params),
            weight,
        }
    }

    fn toy(n: usize) -> Vec<Example> {
        (0..n).map(|i| Example::new(vec![i as f64], 0.0)).collect()
    }

    #[test]
    fn partition_sizes_and_cover() {
        let data = toy(10);
        let parts = partition_iid(&data, 3, 1).unwrap();
        let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        let mut all: Vec<f64> = parts
            .iter()
            .flat_map(|p| p.examples().iter().map(|e| e.x[0]))
            .collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..10).map(|i| i as f64).collect::<Vec<_>>());

        let singles = partition_iid(&data, 10, 1).unwrap();
        assert!(singles.iter().all(|p| p.len() == 1));
        assert_eq!(parts, partition_iid(&data, 3, 1).unwrap());
        assert!(partition_iid(&data, 0, 1).is_err());
        assert!(partition_iid(&data, 11, 1).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let out = aggregate(&[upd(0, vec![0.0, 0.0], 1.0), upd(1, vec![2.0, 4.0], 1.0)], AggregationMode::Fedavg)
            .unwrap();
        assert_eq!(out.as_slice(), &[1.0, 2.0]);
        let out = aggregate(&[upd(3, vec![0.1, -7.3], 5.0)], AggregationMode::Fedavg).unwrap();
        assert_eq!(out.as_slice(), &[0.1, -7.3]);
        let out = aggregate(&[upd(0, vec![0.0], 1.0), upd(1, vec![4.0], 3.0)], AggregationMode::Fedavg).unwrap();
        assert_eq!(out.as_slice(), &[3.0]);
    }

    #[test]
    fn aggregate_rejects_bad_input() {
        assert!(aggregate(&[], AggregationMode::Fedavg).is_err());
        assert!(aggregate(&[upd(0, vec![1.0], 0.0), upd(1, vec![2.0], 0.0)], AggregationMode::Fedavg).is_err());
        assert!(aggregate(&[upd(0, vec![1.0], 1.0), upd(1, vec![2.0, 3.0], 1.0)], AggregationMode::Fedavg).is_err());
        assert!(aggregate(&[upd(0, vec![1.0], -1.0)], AggregationMode::Fedavg).is_err());
    }

    #[test]
    fn two_group_follows_printed_prefactors() {
        let mut u = vec![
            upd(0, vec![3.0], 1.0),
            upd(1, vec![6.0], 2.0),
            upd(2, vec![10.0], 4.0),
        ];
        u[0].role = Role::Unlearned;
        // learned: (2*6 + 4*10) / (2 * 6); unlearned: (1*3) / (1 * 1)
        let out = aggregate(&u, AggregationMode::TwoGroup).unwrap();
        let expected = (2.0 * 6.0 + 4.0 * 10.0) / 12.0 + 3.0;
        assert!((out.as_slice()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn selection_is_deterministic_subset() {
        let a = select_clients(10, 0.3, 4, 2);
        assert_eq!(a.len(), 3);
        assert_eq!(a, select_clients(10, 0.3, 4, 2));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(select_clients(10, 1.0, 4, 2), (0..10).collect::<Vec<_>>());
        assert_eq!(select_clients(10, 0.01, 4, 2).len(), 1);
    }

    #[test]
    fn empty_client_is_skipped() {
        let spec = ModelSpec::linear_regression(1, 0.0);
        let mut c = ClientState::new(0, LocalDataset::new(vec![]), 1);
        let cfg = LocalTrainingConfig {
            local_epochs: 1,
            batch_size: 4,
            eta: 0.1,
            optimizer: LocalOptimizer::Sgd,
            batching: BatchingMode::Mask,
        };
        let (p, rec) = local_training(&spec, &mut c, &ParamVector::zeros(2), &cfg, 0).unwrap();
        assert!(p.is_none());
        assert!(rec.skipped);
    }

    #[test]
    fn zero_learning_rate_leaves_model() {
        let spec = ModelSpec::linear_regression(1, 0.0);
        let data: Vec<_> = (0..6).map(|i| Example::new(vec![i as f64], 1.0)).collect();
        let mut c = ClientState::new(0, LocalDataset::new(data), 1);
        let cfg = LocalTrainingConfig {
            local_epochs: 1,
            batch_size: 64,
            eta: 0.0,
            optimizer: LocalOptimizer::Sgd,
            batching: BatchingMode::Mask,
        };
        let w = ParamVector::new(vec![0.3, -0.2]);
        let (p, rec) = local_training(&spec, &mut c, &w, &cfg, 0).unwrap();
        assert_eq!(p.unwrap(), w);
        assert_eq!(rec.update_norm, 0.0);
        assert_eq!(rec.steps, 1);
    }
}
