//! Browser bindings for three interactive views: bound curves over ν, the
//! meta-gradient directions of a 2-D quadratic, and Dirichlet partitions.
//!
//! Each export takes plain numbers or a JSON string and returns JSON, so the
//! page needs no generated TypeScript glue beyond the `wasm-bindgen` loader.

use gmeta::data::{generate_synthetic, partition_dirichlet, PartitionConfig};
use gmeta::metagrad::{
    exact_local_update, fo_local_update, hf_local_update, meta_loss, FullBatches, HessianApplication, HyperParams,
};
use gmeta::nn::{Batch, ModelSpec};
use gmeta::theory::report::bound_sweep;
use gmeta::theory::{TheoremSetting, TheoryConstants};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, Deserialize)]
pub struct CurveRequest {
    pub constants: TheoryConstants,
    pub alpha: f64,
    pub delta: f64,
    pub batch_size: usize,
    pub beta: f64,
    pub tau: usize,
    pub rounds: usize,
    pub participation: f64,
    pub n_clients: usize,
    pub f0_gap: f64,
    pub nu_max: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EngineCurve {
    pub bias: f64,
    pub second_moment: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CurvePoint {
    pub nu: usize,
    pub l_f: f64,
    pub gamma_f_sq: f64,
    pub beta_limit: f64,
    pub exact: EngineCurve,
    pub first_order: EngineCurve,
    pub hessian_free: EngineCurve,
}

pub fn curves(req: &CurveRequest) -> gmeta::Result<Vec<CurvePoint>> {
    let setting = TheoremSetting {
        beta: req.beta,
        tau: req.tau,
        rounds: req.rounds,
        participation: req.participation,
        n_clients: req.n_clients,
        f0_gap: req.f0_gap,
        big_o_const: 1.0,
    };
    let nus: Vec<usize> = (1..=req.nu_max.max(1)).collect();
    let report = bound_sweep(
        &req.constants,
        false,
        req.alpha,
        req.delta,
        req.batch_size,
        &nus,
        &setting,
    )?;
    let engine = |e: &gmeta::theory::report::EngineBounds| EngineCurve {
        bias: e.gradient_estimate.bias,
        second_moment: e.gradient_estimate.second_moment,
        rhs: e.stationarity.rhs,
    };
    Ok(report
        .rows
        .iter()
        .map(|r| CurvePoint {
            nu: r.nu,
            l_f: r.meta_smoothness,
            gamma_f_sq: r.meta_gradient_similarity.gamma_f_sq,
            beta_limit: r.exact.stationarity.beta_limit,
            exact: engine(&r.exact),
            first_order: engine(&r.first_order),
            hessian_free: engine(&r.hessian_free),
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Geometry {
    /// Fine-tuning path `w₀ … w_ν`.
    pub path: Vec<[f64; 2]>,
    pub exact: [f64; 2],
    pub first_order: [f64; 2],
    pub hessian_free: [f64; 2],
    /// Meta-loss `f(w_ν)` on a `grid × grid` lattice over `[-extent, extent]²`, row-major from the top.
    pub grid: usize,
    pub extent: f64,
    pub meta_loss: Vec<f64>,
}

/// Directions of the three engines at `w` for `½ wᵀAw + bᵀw` with
/// `A = [[a11, a12], [a12, a22]]`.
#[allow(clippy::too_many_arguments)]
pub fn geometry(
    a: [f64; 3],
    b: [f64; 2],
    w: [f64; 2],
    alpha: f64,
    nu: usize,
    delta: f64,
    extent: f64,
    grid: usize,
) -> gmeta::Result<Geometry> {
    let spec = ModelSpec::quadratic(vec![a[0], a[1], a[1], a[2]], b.to_vec())?;
    let batch = Batch::new(ndarray::Array2::zeros((1, 1)), vec![0])?;
    let w0 = spec.init_params(0).with_values(w.to_vec())?;
    let nu = nu.max(1);
    let mut hp = HyperParams::new(alpha, 1.0, nu, 1, 1);
    hp.delta = delta;
    let pair = |v: &[f64]| [v[0], v[1]];
    let exact = exact_local_update(&spec, &w0, &hp, HessianApplication::Dense, &mut FullBatches(&batch))?;
    let fo = fo_local_update(&spec, &w0, &hp, &mut FullBatches(&batch))?;
    let hf = hf_local_update(&spec, &w0, &hp, &mut FullBatches(&batch))?;
    let grid = grid.clamp(2, 200);
    let step = 2.0 * extent / (grid - 1) as f64;
    let mut values = Vec::with_capacity(grid * grid);
    for row in 0..grid {
        let y = extent - row as f64 * step;
        for col in 0..grid {
            let x = -extent + col as f64 * step;
            let p = w0.with_values(vec![x, y])?;
            values.push(meta_loss(&spec, &p, &batch, alpha, nu)?);
        }
    }
    Ok(Geometry {
        path: exact.intermediates.iter().map(|p| pair(p.values())).collect(),
        exact: pair(&exact.direction),
        first_order: pair(&fo.direction),
        hessian_free: pair(&hf.direction),
        grid,
        extent,
        meta_loss: values,
    })
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Partition {
    /// Per client, the drawn class probabilities.
    pub pmf: Vec<Vec<f64>>,
    /// Per client, class counts of its train and test samples.
    pub counts: Vec<Vec<usize>>,
}

pub fn partition(
    n_clients: usize,
    classes: usize,
    alpha: f64,
    samples_per_client: usize,
    seed: u64,
) -> gmeta::Result<Partition> {
    let master = generate_synthetic(1, classes, 0.1, n_clients * samples_per_client, seed)?;
    let mut cfg = PartitionConfig::new(n_clients, alpha, seed);
    cfg.samples_per_client = samples_per_client;
    let clients = partition_dirichlet(&master, &cfg)?;
    Ok(Partition {
        pmf: clients.iter().map(|c| c.class_pmf.clone()).collect(),
        counts: clients.iter().map(|c| c.class_histogram(classes)).collect(),
    })
}

fn to_js<T: Serialize>(r: gmeta::Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// `request` is a JSON [`CurveRequest`].
#[wasm_bindgen(js_name = boundCurves)]
pub fn bound_curves(request: &str) -> Result<String, JsError> {
    let req: CurveRequest = serde_json::from_str(request).map_err(|e| JsError::new(&e.to_string()))?;
    to_js(curves(&req))
}

#[wasm_bindgen(js_name = quadraticGeometry)]
#[allow(clippy::too_many_arguments)]
pub fn quadratic_geometry(
    a11: f64,
    a12: f64,
    a22: f64,
    b1: f64,
    b2: f64,
    w1: f64,
    w2: f64,
    alpha: f64,
    nu: usize,
    delta: f64,
    extent: f64,
    grid: usize,
) -> Result<String, JsError> {
    to_js(geometry(
        [a11, a12, a22],
        [b1, b2],
        [w1, w2],
        alpha,
        nu,
        delta,
        extent,
        grid,
    ))
}

#[wasm_bindgen(js_name = dirichletPartition)]
pub fn dirichlet_partition(
    n_clients: usize,
    classes: usize,
    alpha: f64,
    samples_per_client: usize,
    seed: u32,
) -> Result<String, JsError> {
    to_js(partition(
        n_clients,
        classes,
        alpha,
        samples_per_client,
        u64::from(seed),
    ))
}
