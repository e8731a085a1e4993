//! Evaluation metrics for comparing a rapidly retrained model against the
//! retrain-from-scratch baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, ModelSpec, ParamVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Test accuracy of the baseline, in percent.
    pub acc_baseline: f64,
    /// Test accuracy of the rapidly retrained model, in percent.
    pub acc_unlearned: f64,
    pub sape: f64,
    pub t_b_ms: f64,
    pub t_u_ms: f64,
    pub speedup_v: f64,
    pub predicted_v: f64,
    pub d_u: f64,
}

/// Symmetric absolute percentage error `|b - a| / (|a| + |b|)`.
pub fn sape(acc_a: f64, acc_b: f64) -> Result<f64> {
    if acc_a < 0.0 || acc_b < 0.0 {
        return Err(Error::contract("accuracies must be non-negative"));
    }
    let denom = acc_a.abs() + acc_b.abs();
    if denom == 0.0 {
        return Err(Error::contract("SAPE is undefined when both accuracies are zero"));
    }
    Ok((acc_b - acc_a).abs() / denom)
}

/// Measured speedup `t_b / t_u`.
pub fn speedup(t_b_ms: f64, t_u_ms: f64) -> Result<f64> {
    if !(t_b_ms > 0.0 && t_u_ms > 0.0) {
        return Err(Error::contract(format!(
            "running times must be positive (got {t_b_ms}, {t_u_ms})"
        )));
    }
    Ok(t_b_ms / t_u_ms)
}

/// Inputs to the analytic speedup model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupInputs {
    /// Baseline round count.
    pub rounds_b: f64,
    /// Baseline time per round.
    pub time_b: f64,
    /// Rapid-retraining round count.
    pub rounds_u: f64,
    /// Rapid-retraining time per round.
    pub time_u: f64,
    /// Total clients.
    pub k: f64,
    pub k_u: f64,
    pub k_c: f64,
    pub batch: f64,
    pub delta_batch: f64,
}

impl SpeedupInputs {
    fn check(&self) -> Result<()> {
        let all = [
            self.rounds_b,
            self.time_b,
            self.rounds_u,
            self.time_u,
            self.k,
            self.batch,
        ];
        if all.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::contract("speedup inputs must be positive and finite"));
        }
        if self.k_u < 0.0 || self.k_c < 0.0 || self.delta_batch < 0.0 {
            return Err(Error::contract("client counts and deleted batch size must be >= 0"));
        }
        if self.delta_batch >= self.batch {
            return Err(Error::contract("deleted batch size must be below the batch size"));
        }
        Ok(())
    }

    /// Per-step gradient workload `k_u (B - dB) + k_c B`, in samples.
    fn workload(&self) -> f64 {
        self.k_u * (self.batch - self.delta_batch) + self.k_c * self.batch
    }
}

/// Speedup model with the curvature estimation cost approximated as five
/// forward passes per client:
/// `v = [ (T_u t_u)/(T_b t_b) * (1 + 5k / (6 (k_u (B - dB) + k_c B))) ]^-1`.
pub fn predicted_speedup(inputs: &SpeedupInputs) -> Result<f64> {
    inputs.check()?;
    let workload = inputs.workload();
    if workload <= 0.0 {
        return Err(Error::contract("per-step workload must be positive"));
    }
    let ratio = (inputs.rounds_u * inputs.time_u) / (inputs.rounds_b * inputs.time_b);
    Ok(1.0 / (ratio * (1.0 + 5.0 * inputs.k / (6.0 * workload))))
}

/// Speedup model with an explicit curvature cost: `extra_cost` is the
/// `k * O(b (B - dB) d)` term and `forward_cost` is `f(p)`, both in the same
/// (arbitrary) unit.
pub fn predicted_speedup_unreduced(
    inputs: &SpeedupInputs,
    extra_cost: f64,
    forward_cost: f64,
) -> Result<f64> {
    inputs.check()?;
    let base = 6.0 * forward_cost * inputs.workload();
    if !(base > 0.0) || extra_cost < 0.0 {
        return Err(Error::contract("costs must be positive"));
    }
    let ratio = (inputs.rounds_u * inputs.time_u) / (inputs.rounds_b * inputs.time_b);
    Ok(1.0 / (ratio * (1.0 + extra_cost / base)))
}

/// Sum over probes of the L2 distance between the two models' outputs.
pub fn output_distance(
    spec: &ModelSpec,
    params_a: &ParamVector,
    params_b: &ParamVector,
    probes: &[Example],
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::contract("output distance needs at least one probe"));
    }
    let mut total = 0.0;
    for ex in probes {
        let a = spec.predict(params_a, &ex.x)?;
        let b = spec.predict(params_b, &ex.x)?;
        total += a
            .iter()
            .zip(&b)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sape_values() {
        assert!((sape(98.39, 98.02).unwrap() - 1.884e-3).abs() < 1e-6);
        assert!((sape(97.31, 97.12).unwrap() - 9.772e-4).abs() < 1e-6);
        assert_eq!(sape(42.0, 42.0).unwrap(), 0.0);
        assert!(sape(0.0, 0.0).is_err());
        assert!(sape(-1.0, 2.0).is_err());
    }

    #[test]
    fn speedup_values() {
        assert_eq!(speedup(10_000.0, 5_000.0).unwrap(), 2.0);
        assert_eq!(speedup(3.7, 3.7).unwrap(), 1.0);
        assert!(speedup(0.0, 1.0).is_err());
        assert!(speedup(1.0, -1.0).is_err());
    }

    fn inputs(rounds_u: f64, batch: f64) -> SpeedupInputs {
        SpeedupInputs {
            rounds_b: 100.0,
            time_b: 1.0,
            rounds_u,
            time_u: 1.0,
            k: 10.0,
            k_u: 1.0,
            k_c: 9.0,
            batch,
            delta_batch: 20.0,
        }
    }

    #[test]
    fn predicted_limits() {
        let v = predicted_speedup(&inputs(100.0, 1e15)).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let a = predicted_speedup(&inputs(50.0, 2048.0)).unwrap();
        let b = predicted_speedup(&inputs(25.0, 2048.0)).unwrap();
        assert!((b / a - 2.0).abs() < 1e-12);
        let mut bad = inputs(50.0, 2048.0);
        bad.delta_batch = 2048.0;
        assert!(predicted_speedup(&bad).is_err());
        bad = inputs(50.0, 2048.0);
        bad.k_u = 0.0;
        bad.k_c = 0.0;
        assert!(predicted_speedup(&bad).is_err());
    }

    #[test]
    fn unreduced_matches_reduced_when_cost_is_five_forwards() {
        let i = inputs(50.0, 2048.0);
        let reduced = predicted_speedup(&i).unwrap();
        let f = 3.0;
        let unreduced = predicted_speedup_unreduced(&i, 5.0 * i.k * f, f).unwrap();
        assert!((reduced - unreduced).abs() < 1e-14);
    }

    #[test]
    fn output_distance_basics() {
        let spec = ModelSpec::softmax(1, 2, 0.0);
        let probes = [Example::new(vec![1.0], 0.0)];
        let w = ParamVector::new(vec![1.0, -1.0, 0.5, 0.0]);
        assert_eq!(output_distance(&spec, &w, &w, &probes).unwrap(), 0.0);
        // saturated logits give one-hot outputs [1,0] and [0,1]
        let a = ParamVector::new(vec![800.0, -800.0, 0.0, 0.0]);
        let b = ParamVector::new(vec![-800.0, 800.0, 0.0, 0.0]);
        let d = output_distance(&spec, &a, &b, &probes).unwrap();
        assert!((d - std::f64::consts::SQRT_2).abs() < 1e-12);
        assert!(output_distance(&spec, &a, &b, &[]).is_err());
    }
}
