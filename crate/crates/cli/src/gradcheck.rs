//! Finite-difference gradient check and Fisher-diagonal check.

use fedunlearn_core::data;
use fedunlearn_core::fim::estimate_diag_fim;
use fedunlearn_core::model::{Example, ModelKind, ModelSpec, ParamVector};
use fedunlearn_core::seed;
use fedunlearn_core::Result;
use rand::seq::index;
use serde::Serialize;

pub const TOLERANCE: f64 = 1e-5;
const STEP: f64 = 1e-6;
const CASES: usize = 40;
/// Coordinates probed per case on large models.
const MAX_COORDS: usize = 64;

#[derive(Clone, Debug, Serialize)]
pub struct ModelCheck {
    pub model: String,
    pub param_count: usize,
    pub cases: usize,
    pub max_grad_rel_error: f64,
    /// Coordinate with the largest absolute gradient error.
    pub worst_coordinate: usize,
    pub fim_rel_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub models: Vec<ModelCheck>,
    pub pass: bool,
}

/// Test hook: perturbs one analytic gradient coordinate.
#[derive(Clone, Copy, Debug)]
pub struct Fault {
    pub coordinate: usize,
    pub amount: f64,
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

/// Small instances of every model kind plus `configured`.
pub fn shipped_models(configured: &ModelSpec) -> Vec<ModelSpec> {
    let mut specs: Vec<ModelSpec> = ModelKind::ALL
        .iter()
        .map(|kind| match kind {
            ModelKind::LinearRegression => ModelSpec::linear_regression(6, 1e-3),
            ModelKind::SoftmaxClassifier => ModelSpec::softmax(6, 4, 1e-3),
            ModelKind::Mlp1h => ModelSpec::mlp(6, 5, 3, 1e-3),
        })
        .collect();
    if !specs.contains(configured) {
        specs.push(configured.clone());
    }
    specs
}

pub fn check_model(spec: &ModelSpec, seed_value: u64, fault: Option<Fault>) -> Result<ModelCheck> {
    let d = spec.param_count();
    let truth = data::random_true_params(spec, 0.5, seed::derive(seed_value, &[0]));
    let examples: Vec<Example> = if spec.kind.is_classifier() {
        data::synth_logistic(spec, &truth, CASES, seed::derive(seed_value, &[1]))?
    } else {
        data::synth_regression(spec, &truth, CASES, 0.5, seed::derive(seed_value, &[1]))?
    };
    let mut rng = seed::rng(seed_value, &[2]);
    let (mut worst_rel, mut worst_abs, mut worst_coord) = (0.0f64, 0.0f64, 0);
    let mut fd_per_sample = Vec::with_capacity(CASES);
    let mut an_per_sample = Vec::with_capacity(CASES);
    for (case, ex) in examples.iter().enumerate() {
        let params = data::random_true_params(spec, 0.7, seed::derive(seed_value, &[3, case as u64]));
        let mut analytic = spec.gradient(&params, [ex])?.per_sample.remove(0);
        if let Some(f) = fault {
            if f.coordinate < d {
                analytic[f.coordinate] += f.amount;
            }
        }
        let coords: Vec<usize> = if d <= MAX_COORDS {
            (0..d).collect()
        } else {
            index::sample(&mut rng, d, MAX_COORDS).into_vec()
        };
        let mut fd = Vec::with_capacity(coords.len());
        let mut an = Vec::with_capacity(coords.len());
        for &j in &coords {
            let mut w = params.clone().into_inner();
            w[j] = params.as_slice()[j] + STEP;
            let up = spec.loss(&ParamVector::new(w.clone()), [ex])?;
            w[j] = params.as_slice()[j] - STEP;
            let down = spec.loss(&ParamVector::new(w), [ex])?;
            let g = (up - down) / (2.0 * STEP);
            if (g - analytic[j]).abs() > worst_abs {
                worst_abs = (g - analytic[j]).abs();
                worst_coord = j;
            }
            fd.push(g);
            an.push(analytic[j]);
        }
        worst_rel = worst_rel.max(rel_l2(&an, &fd));
        if d <= MAX_COORDS {
            fd_per_sample.push(fd);
            an_per_sample.push(analytic);
        }
    }
    // Fisher diagonal from analytic per-sample gradients vs squared FD gradients
    let fim_rel_error = if fd_per_sample.is_empty() {
        0.0
    } else {
        let est = estimate_diag_fim(&an_per_sample, an_per_sample.len())?;
        let oracle: Vec<f64> = (0..d)
            .map(|j| fd_per_sample.iter().map(|g| g[j] * g[j]).sum::<f64>() / fd_per_sample.len() as f64)
            .collect();
        rel_l2(&est.gamma, &oracle)
    };
    Ok(ModelCheck {
        model: format!("{}({} params)", spec.kind.name(), d),
        param_count: d,
        cases: CASES,
        max_grad_rel_error: worst_rel,
        worst_coordinate: worst_coord,
        fim_rel_error,
        pass: worst_rel < TOLERANCE && fim_rel_error < TOLERANCE,
    })
}

pub fn run(configured: &ModelSpec, seed_value: u64, fault: Option<Fault>) -> Result<GradcheckReport> {
    let models = shipped_models(configured)
        .iter()
        .map(|s| check_model(s, seed_value, fault))
        .collect::<Result<Vec<_>>>()?;
    let pass = models.iter().all(|m| m.pass);
    Ok(GradcheckReport {
        tolerance: TOLERANCE,
        models,
        pass,
    })
}
