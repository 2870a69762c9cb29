//! Differentiable models.
//!
//! Two model families are supported:
//!
//! * [`ModelSpec::Mlp`]: a fully connected network with `tanh` hidden units
//!   and a softmax cross-entropy head. The activation is smooth so the loss is
//!   twice continuously differentiable with a Lipschitz Hessian.
//! * [`ModelSpec::Quadratic`]: `½ wᵀAw + bᵀw`, independent of the batch. Its
//!   constant Hessian makes every meta-gradient formula exactly computable in
//!   closed form, which anchors the tests.
//!
//! All reductions over a batch are means, never sums. Hessian-vector
//! products are exact (forward-over-reverse propagation of a directional
//! derivative), not finite differences.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Default cap on the dimension for which [`ModelSpec::dense_hessian`] will
/// materialize a `d x d` matrix.
pub const DEFAULT_DENSE_CAP: usize = 512;

/// Shape of one parameter block: a `rows x cols` weight matrix stored
/// row-major, followed by `bias` bias entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
    pub bias: usize,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols + self.bias
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter vector with its layer layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    values: Vec<f64>,
    shapes: Vec<LayerShape>,
}

impl ModelParams {
    pub fn new(values: Vec<f64>, shapes: Vec<LayerShape>) -> Result<Self> {
        let total: usize = shapes.iter().map(LayerShape::len).sum();
        if total != values.len() {
            return Err(Error::DimensionMismatch {
                axis: "parameter count",
                expected: total,
                found: values.len(),
            });
        }
        if !linalg::all_finite(&values) {
            return Err(Error::NonFinite {
                stage: "parameter construction",
                step: 0,
            });
        }
        Ok(Self { values, shapes })
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, self.shapes.clone())
    }

    /// `self - step * direction`, element by element.
    pub fn stepped(&self, step: f64, direction: &[f64]) -> Result<Self> {
        if direction.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                axis: "direction length",
                expected: self.values.len(),
                found: direction.len(),
            });
        }
        let values = self.values.iter().zip(direction).map(|(w, d)| w - step * d).collect();
        self.with_values(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Inputs (`n x features`) and integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                axis: "batch rows",
                expected: inputs.nrows(),
                found: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::EmptyData("batch"));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.inputs.ncols()
    }

    /// Single-sample batch holding row `i`.
    pub fn row(&self, i: usize) -> Batch {
        Batch {
            inputs: self.inputs.select(Axis(0), &[i]),
            labels: vec![self.labels[i]],
        }
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        let inputs = ndarray::concatenate(Axis(0), &[self.inputs.view(), other.inputs.view()]).map_err(|_| {
            Error::DimensionMismatch {
                axis: "input features",
                expected: self.n_features(),
                found: other.n_features(),
            }
        })?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Batch::new(inputs, labels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

/// `½ wᵀAw + bᵀw` with symmetric `A` stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSpec {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl QuadraticSpec {
    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Mlp(MlpSpec),
    Quadratic(QuadraticSpec),
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let spec = MlpSpec {
            input_dim,
            hidden: hidden.to_vec(),
            classes,
        };
        let s = ModelSpec::Mlp(spec);
        s.validate()?;
        Ok(s)
    }

    /// `a` is row-major `d x d`.
    pub fn quadratic(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let s = ModelSpec::Quadratic(QuadraticSpec { a, b });
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Mlp(m) => {
                if m.input_dim == 0 || m.classes == 0 || m.hidden.contains(&0) {
                    return Err(Error::InvalidSpec("MLP widths must all be >= 1".into()));
                }
            }
            ModelSpec::Quadratic(q) => {
                let d = q.b.len();
                if d == 0 {
                    return Err(Error::InvalidSpec("quadratic dimension must be >= 1".into()));
                }
                if q.a.len() != d * d {
                    return Err(Error::DimensionMismatch {
                        axis: "quadratic matrix entries",
                        expected: d * d,
                        found: q.a.len(),
                    });
                }
                let scale = q.a.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
                for i in 0..d {
                    for j in 0..i {
                        if (q.a[i * d + j] - q.a[j * d + i]).abs() > 1e-12 * scale {
                            return Err(Error::InvalidSpec(format!(
                                "quadratic matrix not symmetric at ({i}, {j})"
                            )));
                        }
                    }
                }
                if !linalg::all_finite(&q.a) || !linalg::all_finite(&q.b) {
                    return Err(Error::InvalidSpec("quadratic coefficients must be finite".into()));
                }
            }
        }
        Ok(())
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        match self {
            ModelSpec::Mlp(m) => {
                let mut widths = vec![m.input_dim];
                widths.extend_from_slice(&m.hidden);
                widths.push(m.classes);
                widths
                    .windows(2)
                    .map(|w| LayerShape {
                        rows: w[0],
                        cols: w[1],
                        bias: w[1],
                    })
                    .collect()
            }
            ModelSpec::Quadratic(q) => vec![LayerShape {
                rows: q.dim(),
                cols: 1,
                bias: 0,
            }],
        }
    }

    pub fn dim(&self) -> usize {
        self.shapes().iter().map(LayerShape::len).sum()
    }

    /// Number of output classes; `None` for the quadratic model.
    pub fn classes(&self) -> Option<usize> {
        match self {
            ModelSpec::Mlp(m) => Some(m.classes),
            ModelSpec::Quadratic(_) => None,
        }
    }

    /// Deterministic initialization. MLP weights are `N(0, 1) / sqrt(fan_in)`
    /// and biases are zero; the quadratic model starts at the origin.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let shapes = self.shapes();
        let values = match self {
            ModelSpec::Quadratic(q) => vec![0.0; q.dim()],
            ModelSpec::Mlp(_) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut values = Vec::with_capacity(self.dim());
                for s in &shapes {
                    let scale = 1.0 / (s.rows as f64).sqrt();
                    for _ in 0..s.rows * s.cols {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        values.push(z * scale);
                    }
                    values.extend(std::iter::repeat_n(0.0, s.bias));
                }
                values
            }
        };
        ModelParams { values, shapes }
    }

    fn check_params(&self, w: &[f64]) -> Result<()> {
        let d = self.dim();
        if w.len() != d {
            return Err(Error::DimensionMismatch {
                axis: "parameter count",
                expected: d,
                found: w.len(),
            });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if let ModelSpec::Mlp(m) = self {
            if batch.n_features() != m.input_dim {
                return Err(Error::DimensionMismatch {
                    axis: "input features",
                    expected: m.input_dim,
                    found: batch.n_features(),
                });
            }
            if let Some(&label) = batch.labels.iter().find(|&&y| y >= m.classes) {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: m.classes,
                });
            }
        }
        if batch.is_empty() {
            return Err(Error::EmptyData("batch"));
        }
        Ok(())
    }

    /// Mean per-sample loss over the batch.
    pub fn loss(&self, w: &ModelParams, batch: &Batch) -> Result<f64> {
        self.check_params(w.values())?;
        self.check_batch(batch)?;
        Ok(match self {
            ModelSpec::Quadratic(q) => {
                let aw = linalg::mat_vec(&q.a, w.values());
                0.5 * linalg::dot(w.values(), &aw) + linalg::dot(&q.b, w.values())
            }
            ModelSpec::Mlp(m) => {
                let layers = mlp_layers(m, w.values());
                let fwd = forward(&layers, &batch.inputs);
                cross_entropy(&fwd.logits, &batch.labels)
            }
        })
    }

    /// Exact gradient of [`ModelSpec::loss`] with respect to the parameters.
    pub fn grad(&self, w: &ModelParams, batch: &Batch) -> Result<Vec<f64>> {
        self.check_params(w.values())?;
        self.check_batch(batch)?;
        Ok(match self {
            ModelSpec::Quadratic(q) => {
                let mut g = linalg::mat_vec(&q.a, w.values());
                for (gi, bi) in g.iter_mut().zip(&q.b) {
                    *gi += bi;
                }
                g
            }
            ModelSpec::Mlp(m) => {
                let layers = mlp_layers(m, w.values());
                let fwd = forward(&layers, &batch.inputs);
                backward(&layers, &fwd, &batch.labels, self.dim())
            }
        })
    }

    /// Exact Hessian-vector product `∇²loss(w) · v`.
    pub fn hvp(&self, w: &ModelParams, v: &[f64], batch: &Batch) -> Result<Vec<f64>> {
        self.check_params(w.values())?;
        self.check_params(v)?;
        self.check_batch(batch)?;
        if !linalg::all_finite(v) {
            return Err(Error::NonFinite {
                stage: "hvp direction",
                step: 0,
            });
        }
        Ok(match self {
            ModelSpec::Quadratic(q) => linalg::mat_vec(&q.a, v),
            ModelSpec::Mlp(m) => {
                let layers = mlp_layers(m, w.values());
                let dirs = mlp_layers(m, v);
                mlp_hvp(&layers, &dirs, &batch.inputs, &batch.labels, self.dim())
            }
        })
    }

    /// Dense `d x d` Hessian, row-major. Column `j` is `hvp(w, e_j)`.
    pub fn dense_hessian(&self, w: &ModelParams, batch: &Batch, cap: usize) -> Result<Vec<f64>> {
        let d = self.dim();
        if d > cap {
            return Err(Error::HessianTooLarge { dim: d, cap });
        }
        if let ModelSpec::Quadratic(q) = self {
            self.check_params(w.values())?;
            self.check_batch(batch)?;
            return Ok(q.a.clone());
        }
        let mut h = vec![0.0; d * d];
        let mut e = vec![0.0; d];
        for j in 0..d {
            e[j] = 1.0;
            let col = self.hvp(w, &e, batch)?;
            e[j] = 0.0;
            for (i, c) in col.iter().enumerate() {
                h[i * d + j] = *c;
            }
        }
        Ok(h)
    }

    /// Class logits for every input row (MLP only).
    pub fn logits(&self, w: &ModelParams, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_params(w.values())?;
        match self {
            ModelSpec::Mlp(m) => {
                if inputs.ncols() != m.input_dim {
                    return Err(Error::DimensionMismatch {
                        axis: "input features",
                        expected: m.input_dim,
                        found: inputs.ncols(),
                    });
                }
                let layers = mlp_layers(m, w.values());
                Ok(forward(&layers, inputs).logits)
            }
            ModelSpec::Quadratic(_) => Err(Error::InvalidSpec("the quadratic model has no classifier head".into())),
        }
    }

    /// Fraction of rows whose arg-max logit equals the label. Ties resolve to
    /// the lowest class index.
    pub fn accuracy(&self, w: &ModelParams, batch: &Batch) -> Result<f64> {
        self.check_batch(batch)?;
        let logits = self.logits(w, &batch.inputs)?;
        let correct = logits
            .rows()
            .into_iter()
            .zip(&batch.labels)
            .filter(|(row, &y)| argmax(row.iter().copied()) == y)
            .count();
        Ok(correct as f64 / batch.len() as f64)
    }
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in it.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

struct Layer<'a> {
    weight: ArrayView2<'a, f64>,
    bias: &'a [f64],
}

fn mlp_layers<'a>(m: &MlpSpec, values: &'a [f64]) -> Vec<Layer<'a>> {
    let spec = ModelSpec::Mlp(m.clone());
    let mut offset = 0;
    spec.shapes()
        .iter()
        .map(|s| {
            let nw = s.rows * s.cols;
            let weight = ArrayView2::from_shape((s.rows, s.cols), &values[offset..offset + nw])
                .expect("layout checked against spec");
            let bias = &values[offset + nw..offset + nw + s.bias];
            offset += s.len();
            Layer { weight, bias }
        })
        .collect()
}

struct Forward {
    /// `acts[0]` is the input; `acts[k]` for `k >= 1` is the k-th hidden
    /// activation.
    acts: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

fn affine(x: &Array2<f64>, layer: &Layer<'_>) -> Array2<f64> {
    let mut z = x.dot(&layer.weight);
    let b = Array1::from(layer.bias.to_vec());
    z += &b;
    z
}

fn forward(layers: &[Layer<'_>], inputs: &Array2<f64>) -> Forward {
    let mut acts = vec![inputs.clone()];
    let last = layers.len() - 1;
    for layer in &layers[..last] {
        let z = affine(acts.last().unwrap(), layer);
        acts.push(z.mapv(f64::tanh));
    }
    let logits = affine(acts.last().unwrap(), &layers[last]);
    Forward { acts, logits }
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum::<f64>()
        / n
}

/// `(softmax - onehot) / n`
fn output_delta(logits: &Array2<f64>, labels: &[usize]) -> (Array2<f64>, Array2<f64>) {
    let p = softmax_rows(logits);
    let n = labels.len() as f64;
    let mut delta = p.clone();
    for (mut row, &y) in delta.rows_mut().into_iter().zip(labels) {
        row[y] -= 1.0;
    }
    delta /= n;
    (p, delta)
}

fn write_block(out: &mut [f64], offset: usize, gw: &Array2<f64>, gb: &Array1<f64>) -> usize {
    let nw = gw.len();
    for (o, x) in out[offset..offset + nw].iter_mut().zip(gw.iter()) {
        *o = *x;
    }
    for (o, x) in out[offset + nw..offset + nw + gb.len()].iter_mut().zip(gb.iter()) {
        *o = *x;
    }
    nw + gb.len()
}

fn layer_offsets(layers: &[Layer<'_>]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(layers.len());
    let mut acc = 0;
    for l in layers {
        offsets.push(acc);
        acc += l.weight.len() + l.bias.len();
    }
    offsets
}

fn backward(layers: &[Layer<'_>], fwd: &Forward, labels: &[usize], dim: usize) -> Vec<f64> {
    let mut grad = vec![0.0; dim];
    let offsets = layer_offsets(layers);
    let (_, mut delta) = output_delta(&fwd.logits, labels);
    for k in (0..layers.len()).rev() {
        let a = &fwd.acts[k];
        let gw = a.t().dot(&delta);
        let gb = delta.sum_axis(Axis(0));
        write_block(&mut grad, offsets[k], &gw, &gb);
        if k > 0 {
            let back = delta.dot(&layers[k].weight.t());
            delta = back * a.mapv(|x| 1.0 - x * x);
        }
    }
    grad
}

/// Forward-over-reverse Hessian-vector product. `dirs` holds the direction
/// `v` laid out like the parameters.
fn mlp_hvp(layers: &[Layer<'_>], dirs: &[Layer<'_>], inputs: &Array2<f64>, labels: &[usize], dim: usize) -> Vec<f64> {
    let fwd = forward(layers, inputs);
    let last = layers.len() - 1;

    // Directional derivatives of every activation along v.
    let mut r_acts = vec![Array2::<f64>::zeros(inputs.raw_dim())];
    let mut r_logits = None;
    for k in 0..layers.len() {
        let mut rz = r_acts[k].dot(&layers[k].weight) + fwd.acts[k].dot(&dirs[k].weight);
        rz += &Array1::from(dirs[k].bias.to_vec());
        if k < last {
            let a = &fwd.acts[k + 1];
            r_acts.push(rz * a.mapv(|x| 1.0 - x * x));
        } else {
            r_logits = Some(rz);
        }
    }
    let r_logits = r_logits.expect("at least one layer");

    let (p, mut delta) = output_delta(&fwd.logits, labels);
    let n = labels.len() as f64;
    let mut r_delta = &p * &r_logits;
    let inner = r_delta.sum_axis(Axis(1));
    for (mut row, (p_row, s)) in r_delta
        .rows_mut()
        .into_iter()
        .zip(p.rows().into_iter().zip(inner.iter()))
    {
        row.zip_mut_with(&p_row, |r, &pi| *r -= pi * s);
    }
    r_delta /= n;

    let mut out = vec![0.0; dim];
    let offsets = layer_offsets(layers);
    for k in (0..layers.len()).rev() {
        let a = &fwd.acts[k];
        let ra = &r_acts[k];
        let hw = ra.t().dot(&delta) + a.t().dot(&r_delta);
        let hb = r_delta.sum_axis(Axis(0));
        write_block(&mut out, offsets[k], &hw, &hb);
        if k > 0 {
            let back = delta.dot(&layers[k].weight.t());
            let r_back = r_delta.dot(&layers[k].weight.t()) + delta.dot(&dirs[k].weight.t());
            let slope = a.mapv(|x| 1.0 - x * x);
            let r_slope = a * ra * -2.0;
            r_delta = &r_back * &slope + &back * &r_slope;
            delta = back * slope;
        }
    }
    out
}
