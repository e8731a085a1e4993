//! End-to-end workflows driven by an [`ExperimentConfig`]: load data,
//! partition it, train, delete, retrain, and summarize runs as reports.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::{canonical_json, sha256_hex, DatasetConfig, ExperimentConfig};
use crate::data::{self, LocalDataset};
use crate::error::{Error, Result};
use crate::federated::{
    partition_iid, run_rounds, ClientState, FimSettings, LocalOptimizer, LocalTrainingConfig,
    OptimizerKind, RoundPlan, RoundRecord, RunOutcome, ServerState,
};
use crate::fim::StepScaling;
use crate::metrics::{self, MetricReport, SpeedupInputs};
use crate::model::{Example, ModelSpec, ParamVector};
use crate::seed;
use crate::unlearning::{
    apply_deletions, run_baseline_retrain, run_unlearning, select_deletions, BatchingMode,
    DeletionSequence, UnlearnOutcome,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Rapid retraining with the Fisher update.
    Fim,
    /// SGD retraining from scratch.
    Baseline,
}

/// Loaded data plus the config it came from.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub partition: Vec<LocalDataset>,
    pub dataset_hash: String,
}

/// A finished retraining run and the deletions it honoured.
#[derive(Clone, Debug)]
pub struct UnlearnRun {
    pub method: Method,
    pub deletions: Vec<DeletionSequence>,
    pub outcome: UnlearnOutcome,
}

fn check_dims(spec: &ModelSpec, data: &[Example], what: &str) -> Result<()> {
    if let Some((i, ex)) = data.iter().enumerate().find(|(_, e)| e.x.len() != spec.input_dim) {
        return Err(Error::Schema(format!(
            "{what} example {i} has {} features, model expects {}",
            ex.x.len(),
            spec.input_dim
        )));
    }
    Ok(())
}

impl Experiment {
    pub fn load(config: ExperimentConfig) -> Result<Self> {
        if let Err(e) = config.validate() {
            return Err(Error::contract(e.to_string()));
        }
        let spec = &config.model;
        let classifier = spec.kind.is_classifier();
        let (train, test) = match &config.dataset {
            DatasetConfig::Synth(s) => {
                let truth =
                    data::random_true_params(spec, s.weight_scale, seed::derive(config.seeds.data, &[0]));
                let draw = |n: usize, stream: u64| {
                    let sd = seed::derive(config.seeds.data, &[stream]);
                    if classifier {
                        data::synth_logistic(spec, &truth, n, sd)
                    } else {
                        data::synth_regression(spec, &truth, n, s.noise_std, sd)
                    }
                };
                (draw(s.n_train, 1)?, draw(s.n_test, 2)?)
            }
            DatasetConfig::Csv(c) => {
                let train = data::load_csv(&c.train, &c.schema, classifier)?;
                let test = match &c.test {
                    Some(p) => data::load_csv(p, &c.schema, classifier)?,
                    None => Vec::new(),
                };
                (train, test)
            }
            DatasetConfig::Idx(i) => {
                let mut train = data::load_idx(&i.train_images, &i.train_labels)?;
                if let Some(n) = i.limit_train {
                    train.truncate(n);
                }
                let mut test = match (&i.test_images, &i.test_labels) {
                    (Some(im), Some(lb)) => data::load_idx(im, lb)?,
                    _ => Vec::new(),
                };
                if let Some(n) = i.limit_test {
                    test.truncate(n);
                }
                (train, test)
            }
        };
        check_dims(spec, &train, "training")?;
        check_dims(spec, &test, "test")?;
        let partition = partition_iid(&train, config.federation.clients, config.seeds.partition)?;
        let dataset_hash = sha256_hex(&format!(
            "{}{}",
            data::dataset_hash(&train),
            data::dataset_hash(&test)
        ));
        Ok(Self {
            config,
            train,
            test,
            partition,
            dataset_hash,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.config.model
    }

    /// Fresh client states over the original partition.
    pub fn clients(&self) -> Vec<ClientState> {
        self.partition
            .iter()
            .enumerate()
            .map(|(i, d)| ClientState::new(i, d.clone(), self.config.seeds.batching))
            .collect()
    }

    pub fn fim_settings(&self) -> FimSettings {
        let o = &self.config.optimizer;
        FimSettings {
            beta1: o.beta1,
            beta2: o.beta2,
            eps_stab: o.eps_stab,
            block_size: o.block_size,
            scaling: if o.divide_step_by_batch {
                StepScaling::DivideByBatch
            } else {
                StepScaling::Mean
            },
        }
    }

    pub fn plan(&self, optimizer: OptimizerKind, rounds: usize) -> RoundPlan {
        let c = &self.config;
        let (optimizer, eta) = match optimizer {
            OptimizerKind::Sgd => (LocalOptimizer::Sgd, c.optimizer.sgd_eta()),
            OptimizerKind::Fim => (LocalOptimizer::Fim(self.fim_settings()), c.optimizer.eta),
        };
        RoundPlan {
            rounds,
            participation: c.federation.participation,
            local: LocalTrainingConfig {
                local_epochs: c.federation.local_epochs,
                batch_size: c.federation.batch_size,
                eta,
                optimizer,
                batching: c.unlearning.batching,
            },
            aggregation: c.federation.aggregation,
            weighting: c.federation.weighting,
            loss_threshold: c.stop.loss_threshold,
            selection_seed: c.seeds.selection,
        }
    }

    /// Ordinary federated training on the full data.
    pub fn train(&self) -> Result<RunOutcome> {
        let c = &self.config;
        let plan = self.plan(c.federation.train_optimizer, c.federation.rounds);
        let mut clients = self.clients();
        run_rounds(self.spec(), &mut clients, self.spec().init_params(c.seeds.init), &plan)
    }

    pub fn deletions(&self) -> Result<Vec<DeletionSequence>> {
        let u = &self.config.unlearning;
        let sizes: Vec<usize> = self.partition.iter().map(LocalDataset::len).collect();
        select_deletions(
            &sizes,
            u.deletion_rate,
            u.unlearned_clients,
            u.max_deletion_fraction,
            self.config.seeds.deletion,
        )
    }

    /// Deletes the configured data and retrains with `method`.
    pub fn unlearn(&self, method: Method, trained: &ServerState) -> Result<UnlearnRun> {
        let deletions = self.deletions()?;
        let mut clients = self.clients();
        apply_deletions(&mut clients, &deletions)?;
        let c = &self.config;
        let u = &c.unlearning;
        let outcome = match method {
            Method::Fim => {
                let plan = self.plan(OptimizerKind::Fim, u.fim_rounds.unwrap_or(c.federation.rounds));
                run_unlearning(self.spec(), trained, &mut clients, &plan, u.reinit, c.seeds.reinit)?
            }
            Method::Baseline => {
                let plan =
                    self.plan(OptimizerKind::Sgd, u.baseline_rounds.unwrap_or(c.federation.rounds));
                run_baseline_retrain(self.spec(), &mut clients, &plan, c.seeds.reinit)?
            }
        };
        Ok(UnlearnRun {
            method,
            deletions,
            outcome,
        })
    }

    /// Test examples, or the training data when there is no test split.
    pub fn eval_set(&self) -> &[Example] {
        if self.test.is_empty() {
            &self.train
        } else {
            &self.test
        }
    }

    pub fn provenance(&self, deletions: Option<&[DeletionSequence]>) -> Provenance {
        Provenance {
            training_hash: self.config.training_hash(),
            dataset_hash: self.dataset_hash.clone(),
            deletion_hash: deletions.map(deletion_hash),
        }
    }

    /// Report for an ordinary training run.
    pub fn train_report(&self, run: &RunOutcome, started_at_unix_ms: u64) -> Result<RunReport> {
        let summary = self.summary(
            &run.rounds,
            &run.server.global_params,
            run.rounds_to_threshold,
            run.mean_delta_batch,
            &[],
        )?;
        Ok(RunReport {
            artifact_version: crate::ARTIFACT_VERSION.into(),
            command: "train".into(),
            method: None,
            config: self.config.clone(),
            provenance: self.provenance(None),
            rounds: run.rounds.clone(),
            summary,
            final_params: run.server.global_params.clone(),
            started_at_unix_ms,
            finished_at_unix_ms: unix_ms(),
        })
    }

    /// Report for a retraining run.
    pub fn unlearn_report(&self, run: &UnlearnRun, started_at_unix_ms: u64) -> Result<RunReport> {
        let o = &run.outcome;
        let summary = self.summary(
            &o.rounds,
            &o.unlearned_params,
            o.rounds_to_threshold,
            o.mean_delta_batch,
            &run.deletions,
        )?;
        Ok(RunReport {
            artifact_version: crate::ARTIFACT_VERSION.into(),
            command: "unlearn".into(),
            method: Some(run.method),
            config: self.config.clone(),
            provenance: self.provenance(Some(&run.deletions)),
            rounds: o.rounds.clone(),
            summary,
            final_params: o.unlearned_params.clone(),
            started_at_unix_ms,
            finished_at_unix_ms: unix_ms(),
        })
    }

    fn summary(
        &self,
        rounds: &[RoundRecord],
        params: &ParamVector,
        rounds_to_threshold: Option<usize>,
        mean_delta_batch: f64,
        deletions: &[DeletionSequence],
    ) -> Result<RunSummary> {
        let last = rounds.last();
        let (test_loss, test_accuracy) = if self.test.is_empty() {
            (None, None)
        } else {
            let (l, a) = self.spec().evaluate(params, &self.test)?;
            (Some(l), a)
        };
        let k = self.config.federation.clients;
        let k_u = deletions.iter().filter(|d| !d.is_empty()).count();
        Ok(RunSummary {
            rounds_run: rounds.len(),
            rounds_to_threshold,
            final_loss: last.map(|r| r.global_loss),
            final_train_accuracy: last.and_then(|r| r.global_accuracy),
            test_loss,
            test_accuracy,
            total_wall_time_ms: rounds.iter().map(|r| r.wall_time_ms).sum(),
            k,
            k_u,
            k_c: k - k_u,
            batch_size: self.config.federation.batch_size,
            batching: self.config.unlearning.batching,
            mean_delta_batch,
            deleted_total: deletions.iter().map(DeletionSequence::len).sum(),
        })
    }
}

/// Hashes tying a report to its inputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub training_hash: String,
    pub dataset_hash: String,
    pub deletion_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rounds_run: usize,
    pub rounds_to_threshold: Option<usize>,
    pub final_loss: Option<f64>,
    pub final_train_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub total_wall_time_ms: f64,
    pub k: usize,
    pub k_u: usize,
    pub k_c: usize,
    pub batch_size: usize,
    pub batching: BatchingMode,
    pub mean_delta_batch: f64,
    pub deleted_total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub artifact_version: String,
    pub command: String,
    pub method: Option<Method>,
    pub config: ExperimentConfig,
    pub provenance: Provenance,
    pub rounds: Vec<RoundRecord>,
    pub summary: RunSummary,
    pub final_params: ParamVector,
    pub started_at_unix_ms: u64,
    pub finished_at_unix_ms: u64,
}

impl RunReport {
    /// Copy with all wall-clock fields zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> RunReport {
        let mut r = self.clone();
        r.started_at_unix_ms = 0;
        r.finished_at_unix_ms = 0;
        r.summary.total_wall_time_ms = 0.0;
        for round in &mut r.rounds {
            round.wall_time_ms = 0.0;
        }
        r
    }

    /// Accuracy used for comparisons, in percent: test accuracy when a test
    /// split exists, otherwise final training accuracy.
    pub fn accuracy_percent(&self) -> Option<f64> {
        self.summary
            .test_accuracy
            .or(self.summary.final_train_accuracy)
            .map(|a| 100.0 * a)
    }

    pub fn read(path: &Path) -> Result<RunReport> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Per-round CSV log: `round,loss,accuracy,wall_time_ms`.
pub fn write_round_log(path: &Path, rounds: &[RoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(["round", "loss", "accuracy", "wall_time_ms"]).map_err(io)?;
    for r in rounds {
        w.write_record([
            r.round.to_string(),
            r.global_loss.to_string(),
            r.global_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            r.wall_time_ms.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn deletion_hash(deletions: &[DeletionSequence]) -> String {
    sha256_hex(&canonical_json(&serde_json::to_value(deletions).expect("deletions serialize")))
}

pub fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn check_provenance(a: &RunReport, b: &RunReport) -> Result<()> {
    let mut problems = Vec::new();
    if a.provenance.dataset_hash != b.provenance.dataset_hash {
        problems.push("dataset hashes differ");
    }
    if a.provenance.training_hash != b.provenance.training_hash {
        problems.push("training configurations differ");
    }
    if a.provenance.deletion_hash != b.provenance.deletion_hash {
        problems.push("deletion sets differ");
    }
    if a.config.model != b.config.model {
        problems.push("model specs differ");
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Provenance(problems.join("; ")))
    }
}

/// Compares two retraining reports. When one report is the baseline and
/// the other the Fisher run they are ordered accordingly; otherwise the
/// first argument plays the baseline. `probes` feed the output distance.
pub fn compare_reports(a: &RunReport, b: &RunReport, probes: &[Example]) -> Result<MetricReport> {
    check_provenance(a, b)?;
    let (base, ours) = if a.method == Some(Method::Fim) && b.method == Some(Method::Baseline) {
        (b, a)
    } else {
        (a, b)
    };
    let acc_baseline = base.accuracy_percent().ok_or(Error::Unsupported("accuracy"))?;
    let acc_unlearned = ours.accuracy_percent().ok_or(Error::Unsupported("accuracy"))?;
    let (t_b, t_u) = (base.summary.total_wall_time_ms, ours.summary.total_wall_time_ms);
    let (rb, ru) = (base.summary.rounds_run as f64, ours.summary.rounds_run as f64);
    let s = &ours.summary;
    let predicted_v = metrics::predicted_speedup(&SpeedupInputs {
        rounds_b: rb,
        time_b: t_b / rb,
        rounds_u: ru,
        time_u: t_u / ru,
        k: s.k as f64,
        k_u: s.k_u as f64,
        k_c: s.k_c as f64,
        batch: s.batch_size as f64,
        delta_batch: s.mean_delta_batch,
    })?;
    Ok(MetricReport {
        acc_baseline,
        acc_unlearned,
        sape: metrics::sape(acc_baseline, acc_unlearned)?,
        t_b_ms: t_b,
        t_u_ms: t_u,
        speedup_v: metrics::speedup(t_b, t_u)?,
        predicted_v,
        d_u: metrics::output_distance(&base.config.model, &base.final_params, &ours.final_params, probes)?,
    })
}
