//! Diagonal empirical Fisher quasi-Newton update.
//!
//! Per mini-batch, the curvature estimate is the diagonal of the average
//! outer product of per-sample gradients. Gradients and squared curvature are
//! tracked with bias-corrected exponential moving averages:
//!
//! ```text
//! m_t = (1 - b1) * sum_i b1^(t-i) * grad_i / (1 - b1^t)
//! v_t = sqrt((1 - b2) * sum_i b2^(t-i) * gamma_i * gamma_i / (1 - b2^t))
//! w  <- w - eta * m_t / (v_t + eps)
//! ```
//!
//! With `block_size > 1` the estimate keeps `b x b` blocks along the
//! diagonal. Only the block diagonals receive momentum; off-diagonal entries
//! come from the current mini-batch and each damped block is solved directly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamVector;

/// One square block of the block-diagonal Fisher estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FimBlock {
    /// First parameter index covered by the block.
    pub offset: usize,
    pub size: usize,
    /// Row-major `size x size`, symmetric PSD.
    pub data: Vec<f64>,
}

impl FimBlock {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagFim {
    /// Diagonal of the empirical Fisher; always populated.
    pub gamma: Vec<f64>,
    pub effective_batch: usize,
    pub block_size: usize,
    /// Empty when `block_size == 1`.
    pub blocks: Vec<FimBlock>,
}

impl DiagFim {
    /// Wraps an externally known curvature diagonal (e.g. an exact Hessian).
    pub fn from_diagonal(gamma: Vec<f64>) -> Self {
        Self {
            gamma,
            effective_batch: 1,
            block_size: 1,
            blocks: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

fn check_grads(per_sample: &[Vec<f64>], effective_batch: usize) -> Result<usize> {
    let first = per_sample
        .first()
        .ok_or_else(|| Error::contract("empirical Fisher of an empty batch"))?;
    if effective_batch != per_sample.len() {
        return Err(Error::contract(format!(
            "effective batch {effective_batch} does not match {} per-sample gradients",
            per_sample.len()
        )));
    }
    let d = first.len();
    if let Some(g) = per_sample.iter().find(|g| g.len() != d) {
        return Err(Error::DimensionMismatch {
            what: "per-sample gradient",
            expected: d,
            got: g.len(),
        });
    }
    Ok(d)
}

/// `gamma[j] = (1/n) * sum_i g_i[j]^2`.
pub fn estimate_diag_fim(per_sample: &[Vec<f64>], effective_batch: usize) -> Result<DiagFim> {
    let d = check_grads(per_sample, effective_batch)?;
    let mut gamma = vec![0.0; d];
    for g in per_sample {
        for (acc, gj) in gamma.iter_mut().zip(g) {
            *acc += gj * gj;
        }
    }
    let n = effective_batch as f64;
    gamma.iter_mut().for_each(|v| *v /= n);
    Ok(DiagFim {
        gamma,
        effective_batch,
        block_size: 1,
        blocks: Vec::new(),
    })
}

/// Block-diagonal empirical Fisher with blocks of `block_size` consecutive
/// parameters; the last block may be smaller.
pub fn estimate_block_fim(
    per_sample: &[Vec<f64>],
    effective_batch: usize,
    block_size: usize,
) -> Result<DiagFim> {
    let d = check_grads(per_sample, effective_batch)?;
    if block_size == 0 || block_size > d {
        return Err(Error::contract(format!(
            "block size {block_size} must be in [1, {d}]"
        )));
    }
    if block_size == 1 {
        return estimate_diag_fim(per_sample, effective_batch);
    }
    let n = effective_batch as f64;
    let mut blocks = Vec::with_capacity(d.div_ceil(block_size));
    for offset in (0..d).step_by(block_size) {
        let size = block_size.min(d - offset);
        let mut data = vec![0.0; size * size];
        for g in per_sample {
            let gb = &g[offset..offset + size];
            for (r, gr) in gb.iter().enumerate() {
                for (c, gc) in gb.iter().enumerate() {
                    data[r * size + c] += gr * gc;
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= n);
        blocks.push(FimBlock { offset, size, data });
    }
    let gamma = blocks
        .iter()
        .flat_map(|b| (0..b.size).map(move |k| b.get(k, k)))
        .collect();
    Ok(DiagFim {
        gamma,
        effective_batch,
        block_size,
        blocks,
    })
}

/// Moment accumulators for the Fisher-preconditioned update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FimMomentState {
    /// Bias-corrected first moment of gradients.
    pub m: Vec<f64>,
    /// Bias-corrected root-mean-square of the curvature diagonals.
    pub v: Vec<f64>,
    pub m_accum: Vec<f64>,
    pub v_accum: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stab: f64,
    /// Current-step blocks, kept for the block-mode solve.
    pub blocks: Vec<FimBlock>,
}

impl FimMomentState {
    pub fn new(dim: usize, beta1: f64, beta2: f64, eps_stab: f64) -> Result<Self> {
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::contract(format!("{name} = {b} must be in [0, 1)")));
            }
        }
        if !(eps_stab > 0.0 && eps_stab.is_finite()) {
            return Err(Error::contract(format!("eps_stab = {eps_stab} must be > 0")));
        }
        Ok(Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            m_accum: vec![0.0; dim],
            v_accum: vec![0.0; dim],
            t: 0,
            beta1,
            beta2,
            eps_stab,
            blocks: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// Folds one step's mean gradient and curvature estimate into the moments.
    pub fn update_moments(&mut self, grad: &[f64], fim: &DiagFim) -> Result<()> {
        let d = self.dim();
        for (what, got) in [("gradient", grad.len()), ("fisher diagonal", fim.dim())] {
            if got != d {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: d,
                    got,
                });
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let corr1 = 1.0 - b1.powi(t);
        let corr2 = 1.0 - b2.powi(t);
        for j in 0..d {
            let gamma = fim.gamma[j];
            self.m_accum[j] = b1 * self.m_accum[j] + (1.0 - b1) * grad[j];
            self.v_accum[j] = b2 * self.v_accum[j] + (1.0 - b2) * (gamma * gamma);
            self.m[j] = self.m_accum[j] / corr1;
            self.v[j] = (self.v_accum[j] / corr2).sqrt();
        }
        self.blocks.clone_from(&fim.blocks);
        Ok(())
    }
}

/// How the step length relates to the learning rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepScaling {
    /// Step of `eta`; gradients are already batch means.
    #[default]
    Mean,
    /// Step of `eta / effective_batch`, applied on top of mean gradients.
    DivideByBatch,
}

/// Applies `w - step * m / (v + eps)` (or the damped block solve).
pub fn apply_update(
    params: &ParamVector,
    state: &FimMomentState,
    eta: f64,
    effective_batch: usize,
    scaling: StepScaling,
) -> Result<ParamVector> {
    if state.t == 0 {
        return Err(Error::contract("apply_update before any moment update"));
    }
    if effective_batch == 0 {
        return Err(Error::contract("effective batch must be >= 1"));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::contract(format!("learning rate {eta} must be >= 0")));
    }
    if params.len() != state.dim() {
        return Err(Error::DimensionMismatch {
            what: "parameter vector",
            expected: state.dim(),
            got: params.len(),
        });
    }
    let step = match scaling {
        StepScaling::Mean => eta,
        StepScaling::DivideByBatch => eta / effective_batch as f64,
    };
    let direction = if state.blocks.is_empty() {
        diagonal_direction(state, 0..state.dim())
    } else {
        block_direction(state)
    };
    let mut out = params.clone();
    for (j, (w, dir)) in out.as_mut_slice().iter_mut().zip(&direction).enumerate() {
        *w -= step * dir;
        if !w.is_finite() {
            return Err(Error::NonFinite { index: j, value: *w });
        }
    }
    Ok(out)
}

fn diagonal_direction(state: &FimMomentState, range: std::ops::Range<usize>) -> Vec<f64> {
    range
        .map(|j| state.m[j] / (state.v[j] + state.eps_stab))
        .collect()
}

fn block_direction(state: &FimMomentState) -> Vec<f64> {
    let mut dir = Vec::with_capacity(state.dim());
    for block in &state.blocks {
        let (o, s) = (block.offset, block.size);
        let mut mat = DMatrix::from_row_slice(s, s, &block.data);
        for k in 0..s {
            mat[(k, k)] = state.v[o + k] + state.eps_stab;
        }
        let rhs = DVector::from_column_slice(&state.m[o..o + s]);
        match mat.cholesky() {
            Some(chol) => dir.extend(chol.solve(&rhs).iter()),
            // momentum diagonal plus current off-diagonals need not be PD
            None => dir.extend(diagonal_direction(state, o..o + s)),
        }
    }
    dir
}

/// `params - H^-1 grad` by dense Cholesky solve. `hessian` is row-major
/// `d x d` and must be symmetric positive definite.
pub fn newton_step_exact(params: &ParamVector, grad: &[f64], hessian: &[f64]) -> Result<ParamVector> {
    let d = params.len();
    if grad.len() != d {
        return Err(Error::DimensionMismatch {
            what: "gradient",
            expected: d,
            got: grad.len(),
        });
    }
    if hessian.len() != d * d {
        return Err(Error::DimensionMismatch {
            what: "hessian entries",
            expected: d * d,
            got: hessian.len(),
        });
    }
    let h = DMatrix::from_row_slice(d, d, hessian);
    let chol = h
        .cholesky()
        .ok_or_else(|| Error::Numerical("hessian is not positive definite".into()))?;
    let delta = chol.solve(&DVector::from_column_slice(grad));
    Ok(ParamVector::new(
        params.as_slice().iter().zip(delta.iter()).map(|(w, s)| w - s).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diag_by_hand() {
        let f = estimate_diag_fim(&[vec![1.0, -2.0]], 1).unwrap();
        assert_eq!(f.gamma, vec![1.0, 4.0]);
        let f = estimate_diag_fim(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2).unwrap();
        assert_eq!(f.gamma, vec![0.5, 0.5]);
    }

    #[test]
    fn diag_rejects_bad_input() {
        assert!(estimate_diag_fim(&[], 0).is_err());
        assert!(estimate_diag_fim(&[vec![1.0]], 2).is_err());
        assert!(estimate_diag_fim(&[vec![1.0], vec![1.0, 2.0]], 2).is_err());
    }

    #[test]
    fn blocks_by_hand() {
        let g = [vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 1.0]];
        let f = estimate_block_fim(&g, 2, 2).unwrap();
        assert_eq!(f.blocks.len(), 2);
        for b in &f.blocks {
            assert_eq!(b.data, vec![0.5, 0.5, 0.5, 0.5]);
        }
        assert_eq!(f.gamma, vec![0.5; 4]);
        assert!(estimate_block_fim(&g, 2, 5).is_err());
        assert!(estimate_block_fim(&g, 2, 0).is_err());
    }

    #[test]
    fn trailing_partial_block() {
        let g = [vec![1.0, 2.0, 3.0, 4.0, 5.0]];
        let f = estimate_block_fim(&g, 1, 3).unwrap();
        assert_eq!(f.blocks[1].offset, 3);
        assert_eq!(f.blocks[1].size, 2);
        assert_eq!(f.blocks[1].data, vec![16.0, 20.0, 20.0, 25.0]);
        assert_eq!(f.gamma, vec![1.0, 4.0, 9.0, 16.0, 25.0]);
    }

    #[test]
    fn first_step_cancels_bias_correction() {
        let mut s = FimMomentState::new(3, 0.9, 0.999, 1e-8).unwrap();
        let g = [0.3, -1.7, 2.5];
        let gamma = vec![0.25, 4.0, 1e-3];
        s.update_moments(&g, &DiagFim::from_diagonal(gamma.clone())).unwrap();
        assert_eq!(s.t, 1);
        for j in 0..3 {
            assert!((s.m[j] - g[j]).abs() <= 1e-15 * g[j].abs());
            assert!((s.v[j] - gamma[j]).abs() <= 1e-15 * gamma[j]);
        }
    }

    #[test]
    fn zero_betas_degenerate_to_current_step() {
        let mut s = FimMomentState::new(2, 0.0, 0.0, 1e-8).unwrap();
        for k in 1..4 {
            let g = [k as f64, -2.0 * k as f64];
            let gamma = vec![3.0 * k as f64, 0.5];
            s.update_moments(&g, &DiagFim::from_diagonal(gamma.clone())).unwrap();
            assert_eq!(s.m, g.to_vec());
            assert_eq!(s.v, gamma);
        }
    }

    #[test]
    fn constant_inputs_are_a_fixed_point() {
        let mut s = FimMomentState::new(2, 0.9, 0.999, 1e-8).unwrap();
        let g = [1.25, -0.5];
        let gamma = DiagFim::from_diagonal(vec![2.0, 0.125]);
        for _ in 0..40 {
            s.update_moments(&g, &gamma).unwrap();
            for j in 0..2 {
                assert!((s.m[j] - g[j]).abs() < 1e-12);
                assert!((s.v[j] - gamma.gamma[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_ratio_moves_by_eta() {
        let mut s = FimMomentState::new(3, 0.0, 0.0, 1e-300).unwrap();
        let m = [2.0, -3.0, 0.5];
        s.update_moments(&m, &DiagFim::from_diagonal(vec![2.0, 3.0, 0.5]))
            .unwrap();
        let w = ParamVector::new(vec![1.0, 1.0, 1.0]);
        let out = apply_update(&w, &s, 0.1, 4, StepScaling::Mean).unwrap();
        assert_eq!(out.as_slice(), &[0.9, 1.1, 0.9]);
        let lit = apply_update(&w, &s, 0.4, 4, StepScaling::DivideByBatch).unwrap();
        assert_eq!(lit.as_slice(), &[0.9, 1.1, 0.9]);
    }

    #[test]
    fn zero_momentum_leaves_params() {
        let mut s = FimMomentState::new(2, 0.9, 0.999, 1e-8).unwrap();
        s.update_moments(&[0.0, 0.0], &DiagFim::from_diagonal(vec![0.0, 0.0]))
            .unwrap();
        let w = ParamVector::new(vec![1.5, -2.0]);
        assert_eq!(apply_update(&w, &s, 1.0, 1, StepScaling::Mean).unwrap(), w);
    }

    #[test]
    fn update_preconditions() {
        let s = FimMomentState::new(1, 0.9, 0.999, 1e-8).unwrap();
        let w = ParamVector::zeros(1);
        assert!(apply_update(&w, &s, 0.1, 1, StepScaling::Mean).is_err());
        assert!(FimMomentState::new(1, 1.0, 0.999, 1e-8).is_err());
        assert!(FimMomentState::new(1, 0.9, 0.999, 0.0).is_err());
    }

    #[test]
    fn non_finite_result_names_index() {
        let mut s = FimMomentState::new(2, 0.0, 0.0, 1e-300).unwrap();
        s.update_moments(&[0.0, 1e300], &DiagFim::from_diagonal(vec![1.0, 1e-300]))
            .unwrap();
        let err = apply_update(&ParamVector::zeros(2), &s, 1.0, 1, StepScaling::Mean).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }

    #[test]
    fn newton_identity_is_gradient_step() {
        let w = ParamVector::new(vec![1.0, 2.0]);
        let out = newton_step_exact(&w, &[0.5, -1.0], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(out.as_slice(), &[0.5, 3.0]);
        assert!(newton_step_exact(&w, &[0.5, -1.0], &[1.0, 0.0, 0.0, -1.0]).is_err());
    }

    #[test]
    fn block_mode_solves_damped_block() {
        // single 2x2 block, zero betas: direction = (block + eps I)^-1 m
        let g = [vec![1.0, 1.0], vec![1.0, 0.0], vec![2.0, 1.0]];
        let fim = estimate_block_fim(&g, 3, 2).unwrap();
        let mut s = FimMomentState::new(2, 0.0, 0.0, 1e-300).unwrap();
        let m = [1.0, 0.5];
        s.update_moments(&m, &fim).unwrap();
        // block = [[2, 1], [1, 2/3]]
        let out = apply_update(&ParamVector::zeros(2), &s, 1.0, 3, StepScaling::Mean).unwrap();
        let det = 2.0 * (2.0 / 3.0) - 1.0;
        let x0 = ((2.0 / 3.0) * 1.0 - 1.0 * 0.5) / det;
        let x1 = (2.0 * 0.5 - 1.0 * 1.0) / det;
        assert!((out.as_slice()[0] + x0).abs() < 1e-12);
        assert!((out.as_slice()[1] + x1).abs() < 1e-12);
    }
}
