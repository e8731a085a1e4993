//! Self-contained differentiable models.
//!
//! Three model kinds are supported: affine least-squares regression, a
//! multinomial logistic (softmax) classifier, and a one-hidden-layer tanh
//! network with a softmax head. All of them expose loss, analytic
//! per-sample gradients and predictions over a flat [`ParamVector`].
//!
//! # Parameter layout
//!
//! Each layer stores its weight matrix row-major with shape `(out, in)`,
//! immediately followed by its bias vector of length `out`. Layers are laid
//! out in forward order. For the MLP that is `W1 (h x in) | b1 (h) |
//! W2 (c x h) | b2 (c)`. The layout is shared by every module that indexes
//! into parameters, so FIM diagonals and gradients line up coordinate by
//! coordinate.
//!
//! # Objective
//!
//! `loss = (1/n) * sum_i l_i(w) + (lambda / 2) * ||w||^2`, where `l_i` is
//! `(prediction - y)^2 / 2` for regression and the softmax cross-entropy for
//! classifiers. Per-sample gradients include the regularizer term `lambda * w`
//! so that their average is exactly the gradient of the batch objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Flat model parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.0.iter().position(|v| !v.is_finite())
    }

    pub fn l2_distance(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// One labelled sample. For classifiers `y` holds the class index as an
/// integral float; for regression it is the real-valued target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: f64,
}

impl Example {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        Self { x, y }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "linear-regression")]
    LinearRegression,
    #[serde(rename = "softmax-classifier")]
    SoftmaxClassifier,
    #[serde(rename = "mlp-1h")]
    Mlp1h,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [
        ModelKind::LinearRegression,
        ModelKind::SoftmaxClassifier,
        ModelKind::Mlp1h,
    ];

    pub fn is_classifier(self) -> bool {
        !matches!(self, ModelKind::LinearRegression)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::LinearRegression => "linear-regression",
            ModelKind::SoftmaxClassifier => "softmax-classifier",
            ModelKind::Mlp1h => "mlp-1h",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Ignored for regression.
    pub num_classes: usize,
    /// Only used by `mlp-1h`.
    pub hidden_dim: usize,
    pub lambda_reg: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::SoftmaxClassifier,
            input_dim: 784,
            num_classes: 10,
            hidden_dim: 0,
            lambda_reg: 1e-4,
        }
    }
}

/// Per-sample gradients of a mini-batch plus their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBatch {
    pub per_sample: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

impl GradientBatch {
    pub fn len(&self) -> usize {
        self.per_sample.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_sample.is_empty()
    }
}

impl ModelSpec {
    pub fn linear_regression(input_dim: usize, lambda_reg: f64) -> Self {
        Self {
            kind: ModelKind::LinearRegression,
            input_dim,
            num_classes: 0,
            hidden_dim: 0,
            lambda_reg,
        }
    }

    pub fn softmax(input_dim: usize, num_classes: usize, lambda_reg: f64) -> Self {
        Self {
            kind: ModelKind::SoftmaxClassifier,
            input_dim,
            num_classes,
            hidden_dim: 0,
            lambda_reg,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize, lambda_reg: f64) -> Self {
        Self {
            kind: ModelKind::Mlp1h,
            input_dim,
            num_classes,
            hidden_dim,
            lambda_reg,
        }
    }

    /// Lists every violated constraint; empty when the spec is usable.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.input_dim == 0 {
            out.push("model.input_dim must be >= 1".to_string());
        }
        if self.kind.is_classifier() && self.num_classes < 2 {
            out.push("model.num_classes must be >= 2 for classifiers".to_string());
        }
        if self.kind == ModelKind::Mlp1h && self.hidden_dim == 0 {
            out.push("model.hidden_dim must be >= 1 for mlp-1h".to_string());
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            out.push("model.lambda_reg must be finite and >= 0".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().first() {
            None => Ok(()),
            Some(v) => Err(Error::contract(v.clone())),
        }
    }

    /// Number of scalar parameters `d`.
    pub fn param_count(&self) -> usize {
        let (i, c, h) = (self.input_dim, self.num_classes, self.hidden_dim);
        match self.kind {
            ModelKind::LinearRegression => i + 1,
            ModelKind::SoftmaxClassifier => i * c + c,
            ModelKind::Mlp1h => i * h + h + h * c + c,
        }
    }

    /// Length of the vector returned by [`predict`](Self::predict).
    pub fn output_dim(&self) -> usize {
        if self.kind.is_classifier() {
            self.num_classes
        } else {
            1
        }
    }

    /// `(fan_in, fan_out)` for each layer in forward order.
    fn layers(&self) -> Vec<(usize, usize)> {
        match self.kind {
            ModelKind::LinearRegression => vec![(self.input_dim, 1)],
            ModelKind::SoftmaxClassifier => vec![(self.input_dim, self.num_classes)],
            ModelKind::Mlp1h => vec![
                (self.input_dim, self.hidden_dim),
                (self.hidden_dim, self.num_classes),
            ],
        }
    }

    /// Glorot-uniform weights, zero biases. Deterministic in `(self, seed)`.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = seed::rng(seed, &[0x1417]);
        let mut values = Vec::with_capacity(self.param_count());
        for (fan_in, fan_out) in self.layers() {
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-s..=s)));
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ParamVector(values)
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: self.param_count(),
                got: params.len(),
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                what: "feature vector",
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn class_of(&self, y: f64) -> Result<usize> {
        if y.fract() != 0.0 || y < 0.0 || y >= self.num_classes as f64 {
            return Err(Error::contract(format!(
                "label {y} is not a class index in [0, {})",
                self.num_classes
            )));
        }
        Ok(y as usize)
    }

    /// Pre-softmax outputs (or the scalar prediction for regression). The
    /// MLP's hidden activations are left in `hidden`.
    fn logits(&self, w: &[f64], x: &[f64], hidden: &mut Vec<f64>, out: &mut Vec<f64>) {
        out.clear();
        match self.kind {
            ModelKind::LinearRegression => {
                out.push(dot(&w[..self.input_dim], x) + w[self.input_dim]);
            }
            ModelKind::SoftmaxClassifier => dense(w, x, self.num_classes, out),
            ModelKind::Mlp1h => {
                let split = self.input_dim * self.hidden_dim + self.hidden_dim;
                dense(&w[..split], x, self.hidden_dim, hidden);
                hidden.iter_mut().for_each(|a| *a = a.tanh());
                dense(&w[split..], hidden, self.num_classes, out);
            }
        }
    }

    fn forward(&self, w: &[f64], x: &[f64], hidden: &mut Vec<f64>, out: &mut Vec<f64>) {
        self.logits(w, x, hidden, out);
        if self.kind.is_classifier() {
            softmax_in_place(out);
        }
    }

    /// Unregularized loss of one sample, forward pass only.
    fn sample_loss(&self, w: &[f64], ex: &Example, hidden: &mut Vec<f64>, out: &mut Vec<f64>) -> Result<f64> {
        self.check_input(&ex.x)?;
        self.logits(w, &ex.x, hidden, out);
        if self.kind.is_classifier() {
            let y = self.class_of(ex.y)?;
            Ok(log_sum_exp(out) - out[y])
        } else {
            let r = out[0] - ex.y;
            Ok(0.5 * r * r)
        }
    }

    /// Loss of one sample (without regularizer) and its data gradient,
    /// written to `grad` (overwritten, length `d`).
    fn sample_loss_grad(&self, w: &[f64], ex: &Example, grad: &mut [f64]) -> Result<f64> {
        self.check_input(&ex.x)?;
        let mut hidden = Vec::new();
        let mut out = Vec::new();
        match self.kind {
            ModelKind::LinearRegression => {
                self.logits(w, &ex.x, &mut hidden, &mut out);
                let r = out[0] - ex.y;
                let (wg, bg) = grad.split_at_mut(self.input_dim);
                for (g, xi) in wg.iter_mut().zip(&ex.x) {
                    *g = r * xi;
                }
                bg[0] = r;
                Ok(0.5 * r * r)
            }
            ModelKind::SoftmaxClassifier => {
                let y = self.class_of(ex.y)?;
                let (i, c) = (self.input_dim, self.num_classes);
                dense(w, &ex.x, c, &mut out);
                let nll = log_sum_exp(&out) - out[y];
                softmax_in_place(&mut out);
                out[y] -= 1.0;
                let (wg, bg) = grad.split_at_mut(i * c);
                for (k, dz) in out.iter().enumerate() {
                    for (g, xi) in wg[k * i..(k + 1) * i].iter_mut().zip(&ex.x) {
                        *g = dz * xi;
                    }
                    bg[k] = *dz;
                }
                Ok(nll)
            }
            ModelKind::Mlp1h => {
                let y = self.class_of(ex.y)?;
                let (i, h, c) = (self.input_dim, self.hidden_dim, self.num_classes);
                let split = i * h + h;
                dense(&w[..split], &ex.x, h, &mut hidden);
                hidden.iter_mut().for_each(|a| *a = a.tanh());
                dense(&w[split..], &hidden, c, &mut out);
                let nll = log_sum_exp(&out) - out[y];
                softmax_in_place(&mut out);
                out[y] -= 1.0;

                let (g1, g2) = grad.split_at_mut(split);
                let (gw2, gb2) = g2.split_at_mut(h * c);
                let w2 = &w[split..split + h * c];
                // back-propagated signal on the hidden pre-activations
                let mut da = vec![0.0; h];
                for (k, dz) in out.iter().enumerate() {
                    let row = k * h..(k + 1) * h;
                    for ((g, a), (d, wk)) in gw2[row.clone()]
                        .iter_mut()
                        .zip(&hidden)
                        .zip(da.iter_mut().zip(&w2[row]))
                    {
                        *g = dz * a;
                        *d += dz * wk;
                    }
                    gb2[k] = *dz;
                }
                let (gw1, gb1) = g1.split_at_mut(i * h);
                for (j, (d, a)) in da.iter().zip(&hidden).enumerate() {
                    let d = d * (1.0 - a * a);
                    for (g, xi) in gw1[j * i..(j + 1) * i].iter_mut().zip(&ex.x) {
                        *g = d * xi;
                    }
                    gb1[j] = d;
                }
                Ok(nll)
            }
        }
    }

    fn reg_term(&self, w: &[f64]) -> f64 {
        0.5 * self.lambda_reg * w.iter().map(|v| v * v).sum::<f64>()
    }

    /// Regularized mean loss over `batch`.
    pub fn loss<'a, I>(&self, params: &ParamVector, batch: I) -> Result<f64>
    where
        I: IntoIterator<Item = &'a Example>,
    {
        self.check_params(params)?;
        let w = params.as_slice();
        let (mut hidden, mut out) = (Vec::new(), Vec::new());
        let mut sum = 0.0;
        let mut n = 0usize;
        for ex in batch {
            sum += self.sample_loss(w, ex, &mut hidden, &mut out)?;
            n += 1;
        }
        if n == 0 {
            return Err(Error::contract("loss of an empty batch"));
        }
        Ok(sum / n as f64 + self.reg_term(w))
    }

    /// Per-sample gradients of `l_i + (lambda/2)||w||^2` and their mean.
    pub fn gradient<'a, I>(&self, params: &ParamVector, batch: I) -> Result<GradientBatch>
    where
        I: IntoIterator<Item = &'a Example>,
    {
        self.check_params(params)?;
        let w = params.as_slice();
        let mut per_sample = Vec::new();
        let mut sum = vec![0.0; w.len()];
        for ex in batch {
            let mut g = vec![0.0; w.len()];
            self.sample_loss_grad(w, ex, &mut g)?;
            self.add_reg(w, &mut g);
            for (s, gi) in sum.iter_mut().zip(&g) {
                *s += gi;
            }
            per_sample.push(g);
        }
        if per_sample.is_empty() {
            return Err(Error::contract("gradient of an empty batch"));
        }
        let n = per_sample.len() as f64;
        sum.iter_mut().for_each(|s| *s /= n);
        Ok(GradientBatch {
            per_sample,
            mean: sum,
        })
    }

    /// Mean gradient only. Bitwise identical to `gradient(..).mean`.
    pub fn mean_gradient<'a, I>(&self, params: &ParamVector, batch: I) -> Result<Vec<f64>>
    where
        I: IntoIterator<Item = &'a Example>,
    {
        self.check_params(params)?;
        let w = params.as_slice();
        let mut g = vec![0.0; w.len()];
        let mut sum = vec![0.0; w.len()];
        let mut out = Vec::new();
        let mut n = 0usize;
        for ex in batch {
            if self.kind == ModelKind::SoftmaxClassifier {
                self.accumulate_softmax_grad(w, ex, &mut out, &mut sum)?;
            } else {
                self.sample_loss_grad(w, ex, &mut g)?;
                self.add_reg(w, &mut g);
                for (s, gi) in sum.iter_mut().zip(&g) {
                    *s += gi;
                }
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::contract("gradient of an empty batch"));
        }
        sum.iter_mut().for_each(|s| *s /= n as f64);
        Ok(sum)
    }

    /// `sum += grad(l_i) + lambda w` in one pass; rounds exactly like
    /// `sample_loss_grad` followed by `add_reg` and an elementwise add.
    fn accumulate_softmax_grad(&self, w: &[f64], ex: &Example, out: &mut Vec<f64>, sum: &mut [f64]) -> Result<()> {
        self.check_input(&ex.x)?;
        let y = self.class_of(ex.y)?;
        let (i, c) = (self.input_dim, self.num_classes);
        dense(w, &ex.x, c, out);
        softmax_in_place(out);
        out[y] -= 1.0;
        let lambda = self.lambda_reg;
        let (sw, sb) = sum.split_at_mut(i * c);
        let (ww, wb) = w.split_at(i * c);
        for (k, &dz) in out.iter().enumerate() {
            let row = k * i..(k + 1) * i;
            let (srow, wrow) = (&mut sw[row.clone()], &ww[row]);
            if lambda != 0.0 {
                for ((s, xj), wj) in srow.iter_mut().zip(&ex.x).zip(wrow) {
                    *s += dz * xj + lambda * wj;
                }
                sb[k] += dz + lambda * wb[k];
            } else {
                for (s, xj) in srow.iter_mut().zip(&ex.x) {
                    *s += dz * xj;
                }
                sb[k] += dz;
            }
        }
        Ok(())
    }

    fn add_reg(&self, w: &[f64], g: &mut [f64]) {
        if self.lambda_reg != 0.0 {
            for (gi, wi) in g.iter_mut().zip(w) {
                *gi += self.lambda_reg * wi;
            }
        }
    }

    /// Class probabilities for classifiers, `[prediction]` for regression.
    pub fn predict(&self, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        self.check_input(x)?;
        let mut hidden = Vec::new();
        let mut out = Vec::new();
        self.forward(params.as_slice(), x, &mut hidden, &mut out);
        Ok(out)
    }

    /// Predicted class; ties resolve to the lowest class index.
    pub fn predict_class(&self, params: &ParamVector, x: &[f64]) -> Result<usize> {
        if !self.kind.is_classifier() {
            return Err(Error::Unsupported("classification"));
        }
        self.check_params(params)?;
        self.check_input(x)?;
        let (mut hidden, mut out) = (Vec::new(), Vec::new());
        self.logits(params.as_slice(), x, &mut hidden, &mut out);
        Ok(argmax(&out))
    }

    /// Fraction of examples whose predicted class equals the label.
    pub fn accuracy<'a, I>(&self, params: &ParamVector, data: I) -> Result<f64>
    where
        I: IntoIterator<Item = &'a Example>,
    {
        if !self.kind.is_classifier() {
            return Err(Error::Unsupported("accuracy"));
        }
        let mut hits = 0usize;
        let mut n = 0usize;
        for ex in data {
            let y = self.class_of(ex.y)?;
            if self.predict_class(params, &ex.x)? == y {
                hits += 1;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::contract("accuracy of an empty dataset"));
        }
        Ok(hits as f64 / n as f64)
    }
}

impl ModelSpec {
    /// Regularized mean loss and, for classifiers, accuracy in one pass.
    pub fn evaluate<'a, I>(&self, params: &ParamVector, data: I) -> Result<(f64, Option<f64>)>
    where
        I: IntoIterator<Item = &'a Example>,
    {
        self.check_params(params)?;
        let w = params.as_slice();
        let (mut hidden, mut out) = (Vec::new(), Vec::new());
        let (mut sum, mut hits, mut n) = (0.0, 0usize, 0usize);
        for ex in data {
            sum += self.sample_loss(w, ex, &mut hidden, &mut out)?;
            // softmax is monotone, so the logits give the predicted class
            if self.kind.is_classifier() {
                if argmax(&out) as f64 == ex.y {
                    hits += 1;
                }
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::contract("evaluation on an empty dataset"));
        }
        let acc = self.kind.is_classifier().then(|| hits as f64 / n as f64);
        Ok((sum / n as f64 + self.reg_term(w), acc))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &p) in v.iter().enumerate().skip(1) {
        if p > v[best] {
            best = k;
        }
    }
    best
}

/// Four-lane dot product; fixed association order, so still deterministic.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out = W x + b` for a layer stored as `W (rows x x.len()) | b (rows)`.
fn dense(layer: &[f64], x: &[f64], rows: usize, out: &mut Vec<f64>) {
    let cols = x.len();
    let bias = &layer[rows * cols..rows * cols + rows];
    out.clear();
    out.extend(
        (0..rows).map(|r| dot(&layer[r * cols..(r + 1) * cols], x) + bias[r]),
    );
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    z.iter_mut().for_each(|v| *v /= total);
}
