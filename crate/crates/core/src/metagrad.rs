//! Local-update engines for the ν-step meta objective.
//!
//! The meta function of a client is `F(w) = f(w_ν)` where
//! `w_l = w_{l-1} - α ∇f(w_{l-1})` and `w_0 = w`. Its gradient is
//!
//! ```text
//! ∇F(w) = (I - α∇²f(w_0)) ··· (I - α∇²f(w_{ν-1})) ∇f(w_ν)
//! ```
//!
//! Three stochastic estimators of this gradient are provided:
//!
//! * [`Engine::Exact`] applies every `(I - αH)` factor, using one fresh
//!   Hessian batch per factor (2ν+1 batches in total).
//! * [`Engine::FirstOrder`] drops the factors and keeps `∇f(w_ν)`
//!   (ν+1 batches). With ν = 0 this is the FedAvg local step.
//! * [`Engine::HessianFree`] replaces each Hessian-vector product by a
//!   symmetric gradient difference at `±δ` (2ν+1 batches).
//!
//! Batches come from a [`BatchSource`], either fresh stochastic draws
//! ([`StochasticBatches`]) or the whole client train split ([`FullBatches`]).

use std::borrow::Cow;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, ClientDataset};
use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::{Batch, ModelParams, ModelSpec, DEFAULT_DENSE_CAP};
use crate::rng::RngStream;

/// Batch sizes for one local update: `d_sizes[l]` for the gradient batch at
/// fine-tuning step `l` (the last one evaluates the outer gradient) and
/// `dprime_sizes[l]` for the Hessian batch paired with model `w_l`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub d_sizes: Vec<usize>,
    pub dprime_sizes: Vec<usize>,
}

impl BatchPlan {
    pub fn uniform(nu: usize, size: usize) -> Self {
        Self {
            d_sizes: vec![size; nu + 1],
            dprime_sizes: vec![size; nu],
        }
    }

    pub fn validate(&self, nu: usize) -> Result<()> {
        if self.d_sizes.len() != nu + 1 || self.dprime_sizes.len() != nu {
            return Err(Error::InvalidConfig(format!(
                "batch plan for nu = {nu} needs {} gradient and {nu} Hessian sizes, got {} and {}",
                nu + 1,
                self.d_sizes.len(),
                self.dprime_sizes.len()
            )));
        }
        if self.d_sizes.iter().chain(&self.dprime_sizes).any(|&s| s == 0) {
            return Err(Error::InvalidConfig("batch sizes must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Fine-tuning stepsize α.
    pub alpha: f64,
    /// Outer (meta) stepsize β.
    pub beta: f64,
    /// Fine-tuning steps ν.
    pub nu: usize,
    /// Local updates per round τ.
    pub tau: usize,
    /// Perturbation radius of the Hessian-free engine.
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub batch_plan: BatchPlan,
}

pub fn default_delta() -> f64 {
    1e-3
}

impl HyperParams {
    /// Equal batch sizes everywhere and the default δ.
    pub fn new(alpha: f64, beta: f64, nu: usize, tau: usize, batch_size: usize) -> Self {
        Self {
            alpha,
            beta,
            nu,
            tau,
            delta: default_delta(),
            batch_plan: BatchPlan::uniform(nu, batch_size),
        }
    }

    pub fn validate(&self, engine: Engine) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig("alpha must be finite and >= 0".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig("beta must be finite and > 0".into()));
        }
        if self.tau == 0 {
            return Err(Error::InvalidConfig("tau must be >= 1".into()));
        }
        if self.nu == 0 && engine != Engine::FirstOrder {
            return Err(Error::InvalidConfig(format!(
                "nu = 0 is FedAvg mode and needs the first_order engine, not {}",
                engine.name()
            )));
        }
        if engine == Engine::HessianFree && !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidConfig("delta must be finite and > 0".into()));
        }
        self.batch_plan.validate(self.nu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Exact,
    FirstOrder,
    HessianFree,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Exact => "exact",
            Engine::FirstOrder => "first_order",
            Engine::HessianFree => "hessian_free",
        }
    }
}

/// How the exact engine applies `(I - αH) d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum HessianApplication {
    /// Dense matrix when the dimension is at most `cap`, otherwise hvp.
    Auto {
        cap: usize,
    },
    Dense,
    Hvp,
}

impl Default for HessianApplication {
    fn default() -> Self {
        HessianApplication::Auto { cap: DEFAULT_DENSE_CAP }
    }
}

impl HessianApplication {
    fn uses_dense(self, dim: usize) -> bool {
        match self {
            HessianApplication::Auto { cap } => dim <= cap,
            HessianApplication::Dense => true,
            HessianApplication::Hvp => false,
        }
    }

    fn cap(self) -> usize {
        match self {
            HessianApplication::Auto { cap } => cap,
            HessianApplication::Dense => usize::MAX,
            HessianApplication::Hvp => 0,
        }
    }
}

/// Supplies the batch for each gradient (`step` in `0..=ν`) and each
/// Hessian or perturbed-gradient evaluation (`step` in `0..ν`).
pub trait BatchSource {
    fn gradient_batch(&mut self, step: usize) -> Result<Cow<'_, Batch>>;
    fn hessian_batch(&mut self, step: usize) -> Result<Cow<'_, Batch>>;
}

/// The same batch for every evaluation: the deterministic full-gradient mode.
pub struct FullBatches<'a>(pub &'a Batch);

impl BatchSource for FullBatches<'_> {
    fn gradient_batch(&mut self, _step: usize) -> Result<Cow<'_, Batch>> {
        Ok(Cow::Borrowed(self.0))
    }

    fn hessian_batch(&mut self, _step: usize) -> Result<Cow<'_, Batch>> {
        Ok(Cow::Borrowed(self.0))
    }
}

/// Separate streams for gradient and Hessian batches. Keeping them apart
/// means the first-order and exact engines see the same gradient batches
/// from the same stream state.
#[derive(Debug, Clone)]
pub struct LocalStreams {
    pub grad: RngStream,
    pub hess: RngStream,
}

impl LocalStreams {
    pub fn batches_drawn(&self) -> usize {
        self.grad.batches_drawn() + self.hess.batches_drawn()
    }
}

/// Fresh batches drawn with replacement from a client's train split.
pub struct StochasticBatches<'a> {
    pub client: &'a ClientDataset,
    pub plan: &'a BatchPlan,
    pub streams: &'a mut LocalStreams,
}

impl BatchSource for StochasticBatches<'_> {
    fn gradient_batch(&mut self, step: usize) -> Result<Cow<'_, Batch>> {
        let size = self.plan.d_sizes[step];
        Ok(Cow::Owned(sample_batch(self.client, size, &mut self.streams.grad)?))
    }

    fn hessian_batch(&mut self, step: usize) -> Result<Cow<'_, Batch>> {
        let size = self.plan.dprime_sizes[step];
        Ok(Cow::Owned(sample_batch(self.client, size, &mut self.streams.hess)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdateTrace {
    /// `w_0 ..= w_ν`, with `w_0` the input model.
    pub intermediates: Vec<ModelParams>,
    /// Estimated meta-gradient.
    pub direction: Vec<f64>,
    /// `input - β · direction`.
    pub updated: ModelParams,
}

fn checked_step(w: &ModelParams, step: f64, dir: &[f64], stage: &'static str, index: usize) -> Result<ModelParams> {
    w.stepped(step, dir).map_err(|e| match e {
        Error::NonFinite { .. } => Error::NonFinite { stage, step: index },
        other => other,
    })
}

fn ensure_finite(v: &[f64], stage: &'static str, step: usize) -> Result<()> {
    if linalg::all_finite(v) {
        Ok(())
    } else {
        Err(Error::NonFinite { stage, step })
    }
}

/// `w_0 ..= w_ν` with `w_l = w_{l-1} - α ∇f(w_{l-1}, gradient batch l-1)`.
pub fn finetune_path(
    spec: &ModelSpec,
    w: &ModelParams,
    alpha: f64,
    nu: usize,
    source: &mut dyn BatchSource,
) -> Result<Vec<ModelParams>> {
    let mut path = Vec::with_capacity(nu + 1);
    path.push(w.clone());
    for l in 0..nu {
        let prev = &path[l];
        let g = {
            let batch = source.gradient_batch(l)?;
            spec.grad(prev, &batch)?
        };
        ensure_finite(&g, "fine-tuning gradient", l)?;
        let next = checked_step(prev, alpha, &g, "fine-tuning", l + 1)?;
        path.push(next);
    }
    Ok(path)
}

/// `f(w_ν)` on one batch, the scalar whose gradient the exact engine
/// estimates.
pub fn meta_loss(spec: &ModelSpec, w: &ModelParams, batch: &Batch, alpha: f64, nu: usize) -> Result<f64> {
    let path = finetune_path(spec, w, alpha, nu, &mut FullBatches(batch))?;
    spec.loss(&path[nu], batch)
}

/// Run the configured engine once.
pub fn local_update(
    spec: &ModelSpec,
    w: &ModelParams,
    hp: &HyperParams,
    engine: Engine,
    hessian: HessianApplication,
    source: &mut dyn BatchSource,
) -> Result<LocalUpdateTrace> {
    match engine {
        Engine::Exact => exact_local_update(spec, w, hp, hessian, source),
        Engine::FirstOrder => fo_local_update(spec, w, hp, source),
        Engine::HessianFree => hf_local_update(spec, w, hp, source),
    }
}

fn outer_gradient(spec: &ModelSpec, path: &[ModelParams], source: &mut dyn BatchSource) -> Result<Vec<f64>> {
    let nu = path.len() - 1;
    let batch = source.gradient_batch(nu)?;
    let g = spec.grad(&path[nu], &batch)?;
    ensure_finite(&g, "outer gradient", nu)?;
    Ok(g)
}

fn finish(w: &ModelParams, beta: f64, path: Vec<ModelParams>, direction: Vec<f64>) -> Result<LocalUpdateTrace> {
    let updated = checked_step(w, beta, &direction, "meta update", path.len() - 1)?;
    Ok(LocalUpdateTrace {
        intermediates: path,
        direction,
        updated,
    })
}

/// Backward loop of the exact engine with the factor `(I - hessian_alpha H)`.
/// `hessian_alpha` differs from the fine-tuning α only in tests.
fn exact_direction(
    spec: &ModelSpec,
    path: &[ModelParams],
    mut d: Vec<f64>,
    hessian_alpha: f64,
    hessian: HessianApplication,
    source: &mut dyn BatchSource,
) -> Result<Vec<f64>> {
    let nu = path.len() - 1;
    let dense = hessian.uses_dense(spec.dim());
    for lp in 1..=nu {
        let idx = nu - lp;
        let batch = source.hessian_batch(idx)?;
        let hd = if dense {
            let h = spec.dense_hessian(&path[idx], &batch, hessian.cap())?;
            linalg::mat_vec(&h, &d)
        } else {
            spec.hvp(&path[idx], &d, &batch)?
        };
        d = linalg::add_scaled(&d, -hessian_alpha, &hd);
        ensure_finite(&d, "meta-gradient backward pass", idx)?;
    }
    Ok(d)
}

pub fn exact_local_update(
    spec: &ModelSpec,
    w: &ModelParams,
    hp: &HyperParams,
    hessian: HessianApplication,
    source: &mut dyn BatchSource,
) -> Result<LocalUpdateTrace> {
    hp.validate(Engine::Exact)?;
    let path = finetune_path(spec, w, hp.alpha, hp.nu, source)?;
    let g = outer_gradient(spec, &path, source)?;
    let d = exact_direction(spec, &path, g, hp.alpha, hessian, source)?;
    finish(w, hp.beta, path, d)
}

pub fn fo_local_update(
    spec: &ModelSpec,
    w: &ModelParams,
    hp: &HyperParams,
    source: &mut dyn BatchSource,
) -> Result<LocalUpdateTrace> {
    hp.validate(Engine::FirstOrder)?;
    let path = finetune_path(spec, w, hp.alpha, hp.nu, source)?;
    let d = outer_gradient(spec, &path, source)?;
    finish(w, hp.beta, path, d)
}

pub fn hf_local_update(
    spec: &ModelSpec,
    w: &ModelParams,
    hp: &HyperParams,
    source: &mut dyn BatchSource,
) -> Result<LocalUpdateTrace> {
    hp.validate(Engine::HessianFree)?;
    let path = finetune_path(spec, w, hp.alpha, hp.nu, source)?;
    let mut d = outer_gradient(spec, &path, source)?;
    let delta = hp.delta;
    let scale = hp.alpha / (2.0 * delta);
    for lp in 1..=hp.nu {
        let idx = hp.nu - lp;
        let batch = source.hessian_batch(idx)?;
        let plus = path[idx].with_values(linalg::add_scaled(path[idx].values(), delta, &d));
        let minus = path[idx].with_values(linalg::add_scaled(path[idx].values(), -delta, &d));
        let (plus, minus) = match (plus, minus) {
            (Ok(p), Ok(m)) => (p, m),
            _ => return Err(Error::NonFiniteHessianFree { step: idx, delta }),
        };
        let g_plus = spec.grad(&plus, &batch)?;
        let g_minus = spec.grad(&minus, &batch)?;
        let diff = linalg::sub(&g_plus, &g_minus);
        d = linalg::add_scaled(&d, -scale, &diff);
        if !linalg::all_finite(&d) {
            return Err(Error::NonFiniteHessianFree { step: idx, delta });
        }
    }
    finish(w, hp.beta, path, d)
}

/// Deterministic `∇F(w)` on one batch (normally the full client train split).
///
/// When the dimension is within `cap` the factors are multiplied out as
/// dense matrices, `S = (I - αH_0)(I - αH_1)···`, and `S` is then applied to
/// `∇f(w_ν)`. This takes a different route than the engines' backward
/// matrix-vector loop. Above the cap the factors are applied through hvp.
pub fn exact_meta_gradient_oracle(
    spec: &ModelSpec,
    w: &ModelParams,
    batch: &Batch,
    alpha: f64,
    nu: usize,
    cap: usize,
) -> Result<Vec<f64>> {
    let path = finetune_path(spec, w, alpha, nu, &mut FullBatches(batch))?;
    let g = spec.grad(&path[nu], batch)?;
    let dim = spec.dim();
    let out = if dim <= cap {
        let mut s = Array2::<f64>::eye(dim);
        for wl in &path[..nu] {
            let h = spec.dense_hessian(wl, batch, cap)?;
            let mut factor = Array2::from_shape_vec((dim, dim), h).expect("square Hessian");
            factor.mapv_inplace(|x| -alpha * x);
            for i in 0..dim {
                factor[(i, i)] += 1.0;
            }
            s = s.dot(&factor);
        }
        s.dot(&ndarray::Array1::from(g)).to_vec()
    } else {
        let mut v = g;
        for wl in path[..nu].iter().rev() {
            let hv = spec.hvp(wl, &v, batch)?;
            v = linalg::add_scaled(&v, -alpha, &hv);
        }
        v
    };
    ensure_finite(&out, "meta-gradient oracle", nu)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, partition_dirichlet, PartitionConfig};
    use crate::rng::Purpose;
    use ndarray::array;

    fn dummy_batch() -> Batch {
        Batch::new(array![[0.0]], vec![0]).unwrap()
    }

    fn quadratic() -> (ModelSpec, ModelParams) {
        let a = vec![2.0, 0.5, 0.0, 0.5, 1.0, 0.3, 0.0, 0.3, 1.5];
        let spec = ModelSpec::quadratic(a, vec![0.0; 3]).unwrap();
        let w = ModelParams::new(vec![1.0, -2.0, 0.5], spec.shapes()).unwrap();
        (spec, w)
    }

    /// `(I - αA)^k w` by repeated matrix-vector products.
    fn contract(a: &[f64], alpha: f64, k: usize, w: &[f64]) -> Vec<f64> {
        let mut v = w.to_vec();
        for _ in 0..k {
            let av = linalg::mat_vec(a, &v);
            v = linalg::add_scaled(&v, -alpha, &av);
        }
        v
    }

    fn small_client() -> (ModelSpec, ClientDataset) {
        let master = generate_synthetic(4, 3, 0.15, 3000, 2).unwrap();
        let mut cfg = PartitionConfig::new(1, 1.0, 5);
        cfg.samples_per_client = 100;
        let client = partition_dirichlet(&master, &cfg).unwrap().remove(0);
        (ModelSpec::mlp(4, &[5], 3).unwrap(), client)
    }

    fn streams(seed: u64) -> LocalStreams {
        LocalStreams {
            grad: RngStream::derive(seed, 0, 0, Purpose::GradientBatches),
            hess: RngStream::derive(seed, 0, 0, Purpose::HessianBatches),
        }
    }

    #[test]
    fn quadratic_closed_forms() {
        let (spec, w) = quadratic();
        let a = match &spec {
            ModelSpec::Quadratic(q) => q.a().to_vec(),
            _ => unreachable!(),
        };
        let batch = dummy_batch();
        for nu in 1..=3 {
            let hp = HyperParams::new(0.1, 0.5, nu, 1, 1);
            let path = finetune_path(&spec, &w, 0.1, nu, &mut FullBatches(&batch)).unwrap();
            for (l, wl) in path.iter().enumerate() {
                let expect = contract(&a, 0.1, l, w.values());
                assert!(linalg::distance(wl.values(), &expect) < 1e-14);
            }
            let exact = exact_local_update(&spec, &w, &hp, HessianApplication::Hvp, &mut FullBatches(&batch)).unwrap();
            let expect = linalg::mat_vec(&a, &contract(&a, 0.1, 2 * nu, w.values()));
            assert!(linalg::distance(&exact.direction, &expect) < 1e-13);
            let fo = fo_local_update(&spec, &w, &hp, &mut FullBatches(&batch)).unwrap();
            let expect_fo = linalg::mat_vec(&a, &contract(&a, 0.1, nu, w.values()));
            assert!(linalg::distance(&fo.direction, &expect_fo) < 1e-13);
            let hf = hf_local_update(&spec, &w, &hp, &mut FullBatches(&batch)).unwrap();
            assert!(linalg::distance(&hf.direction, &expect) < 1e-10);
        }
    }

    #[test]
    fn update_identity_is_bit_exact() {
        let (spec, w) = quadratic();
        let hp = HyperParams::new(0.1, 0.3, 2, 1, 1);
        let t = exact_local_update(
            &spec,
            &w,
            &hp,
            HessianApplication::Dense,
            &mut FullBatches(&dummy_batch()),
        )
        .unwrap();
        assert_eq!(t.intermediates[0], w);
        let expect: Vec<f64> = w.values().iter().zip(&t.direction).map(|(a, d)| a - 0.3 * d).collect();
        assert_eq!(t.updated.values(), &expect[..]);
    }

    #[test]
    fn nu_zero_needs_first_order() {
        let (spec, w) = quadratic();
        let hp = HyperParams::new(0.1, 0.3, 0, 1, 1);
        let b = dummy_batch();
        let err = exact_local_update(&spec, &w, &hp, HessianApplication::Hvp, &mut FullBatches(&b)).unwrap_err();
        assert!(err.to_string().contains("FedAvg"));
        assert!(hf_local_update(&spec, &w, &hp, &mut FullBatches(&b)).is_err());
        let fo = fo_local_update(&spec, &w, &hp, &mut FullBatches(&b)).unwrap();
        assert_eq!(fo.direction, spec.grad(&w, &b).unwrap());
    }

    #[test]
    fn bad_batch_plan_rejected() {
        let mut hp = HyperParams::new(0.1, 0.3, 2, 1, 4);
        hp.batch_plan.dprime_sizes.pop();
        assert!(hp.validate(Engine::Exact).is_err());
        let mut hp = HyperParams::new(0.1, 0.3, 2, 1, 4);
        hp.batch_plan.d_sizes[0] = 0;
        assert!(hp.validate(Engine::FirstOrder).is_err());
    }

    #[test]
    fn batch_accounting() {
        let (spec, client) = small_client();
        let w = spec.init_params(1);
        for nu in 1..=3 {
            let hp = HyperParams::new(0.05, 0.1, nu, 1, 8);
            for engine in [Engine::Exact, Engine::FirstOrder, Engine::HessianFree] {
                let mut s = streams(3);
                let mut src = StochasticBatches {
                    client: &client,
                    plan: &hp.batch_plan,
                    streams: &mut s,
                };
                local_update(&spec, &w, &hp, engine, HessianApplication::default(), &mut src).unwrap();
                let expect = if engine == Engine::FirstOrder {
                    nu + 1
                } else {
                    2 * nu + 1
                };
                assert_eq!(s.batches_drawn(), expect, "{engine:?} nu={nu}");
            }
        }
    }

    #[test]
    fn first_order_is_exact_with_identity_factors() {
        let (spec, client) = small_client();
        let w = spec.init_params(2);
        let hp = HyperParams::new(0.05, 0.1, 3, 1, 8);
        let mut s1 = streams(9);
        let fo = fo_local_update(
            &spec,
            &w,
            &hp,
            &mut StochasticBatches {
                client: &client,
                plan: &hp.batch_plan,
                streams: &mut s1,
            },
        )
        .unwrap();
        let mut s2 = streams(9);
        let mut src = StochasticBatches {
            client: &client,
            plan: &hp.batch_plan,
            streams: &mut s2,
        };
        let path = finetune_path(&spec, &w, hp.alpha, hp.nu, &mut src).unwrap();
        let g = outer_gradient(&spec, &path, &mut src).unwrap();
        let d = exact_direction(&spec, &path, g, 0.0, HessianApplication::Hvp, &mut src).unwrap();
        assert_eq!(fo.direction, d);
    }

    #[test]
    fn zero_alpha_collapses_engines() {
        let (spec, client) = small_client();
        let w = spec.init_params(2);
        let hp = HyperParams::new(0.0, 0.1, 2, 1, 8);
        let run = |engine| {
            let mut s = streams(4);
            let mut src = StochasticBatches {
                client: &client,
                plan: &hp.batch_plan,
                streams: &mut s,
            };
            local_update(&spec, &w, &hp, engine, HessianApplication::Hvp, &mut src).unwrap()
        };
        let exact = run(Engine::Exact);
        let fo = run(Engine::FirstOrder);
        let hf = run(Engine::HessianFree);
        assert!(exact.intermediates.iter().all(|m| m == &w));
        assert_eq!(exact.direction, fo.direction);
        assert_eq!(hf.direction, fo.direction);
    }

    #[test]
    fn per_fedavg_form_at_nu_one() {
        let (spec, client) = small_client();
        let w = spec.init_params(3);
        let hp = HyperParams::new(0.2, 0.1, 1, 1, 8);
        let mut s = streams(5);
        let mut replay = s.clone();
        let t = exact_local_update(
            &spec,
            &w,
            &hp,
            HessianApplication::Dense,
            &mut StochasticBatches {
                client: &client,
                plan: &hp.batch_plan,
                streams: &mut s,
            },
        )
        .unwrap();
        let d0 = sample_batch(&client, 8, &mut replay.grad).unwrap();
        let d1 = sample_batch(&client, 8, &mut replay.grad).unwrap();
        let dp0 = sample_batch(&client, 8, &mut replay.hess).unwrap();
        let inner = w.stepped(0.2, &spec.grad(&w, &d0).unwrap()).unwrap();
        let g = spec.grad(&inner, &d1).unwrap();
        let hg = spec.hvp(&w, &g, &dp0).unwrap();
        let expect = linalg::add_scaled(&g, -0.2, &hg);
        assert!(linalg::distance(&t.direction, &expect) <= 1e-14 * (1.0 + linalg::norm(&expect)));
    }

    #[test]
    fn dense_and_hvp_paths_agree_with_oracle() {
        let (spec, client) = small_client();
        let w = spec.init_params(4);
        let hp = HyperParams::new(0.3, 0.1, 3, 1, 1);
        let full = &client.train;
        let oracle = exact_meta_gradient_oracle(&spec, &w, full, 0.3, 3, DEFAULT_DENSE_CAP).unwrap();
        let oracle_hvp = exact_meta_gradient_oracle(&spec, &w, full, 0.3, 3, 0).unwrap();
        for mode in [HessianApplication::Dense, HessianApplication::Hvp] {
            let t = exact_local_update(&spec, &w, &hp, mode, &mut FullBatches(full)).unwrap();
            let rel = linalg::distance(&t.direction, &oracle) / linalg::norm(&oracle);
            assert!(rel < 1e-12, "{mode:?}: {rel}");
        }
        assert!(linalg::distance(&oracle, &oracle_hvp) / linalg::norm(&oracle) < 1e-12);
    }

    #[test]
    fn exploding_finetune_reports_step() {
        let spec = ModelSpec::quadratic(vec![1e200], vec![0.0]).unwrap();
        let w = ModelParams::new(vec![1e200], spec.shapes()).unwrap();
        let err = finetune_path(&spec, &w, 1.0, 2, &mut FullBatches(&dummy_batch())).unwrap_err();
        assert!(
            matches!(err, Error::NonFinite { step: 0, .. } | Error::NonFinite { step: 1, .. }),
            "{err:?}"
        );
    }
}
