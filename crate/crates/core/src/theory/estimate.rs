//! Empirical estimates of the problem constants.
//!
//! Each constant is a supremum over all parameters, so sampling a few probe
//! points can only give a lower estimate. Probes are the centre point plus
//! random points at a fixed distance from it. Spectral norms come from power
//! iteration on Hessian-vector products and are themselves lower estimates.
//!
//! A client's local loss is taken as the mean loss over (a fixed subsample
//! of) its train split, and per-sample noise is measured against that mean.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::TheoryConstants;
use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::{Batch, ModelParams, ModelSpec};
use crate::rng::{Purpose, RngStream};
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Number of probe points, including the centre. At least 2.
    pub count: usize,
    /// Distance of the random probes from the centre.
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Train rows per client used for every estimate.
    #[serde(default = "default_sample_cap")]
    pub sample_cap: usize,
    /// Rows per client whose individual Hessians enter the Hessian noise
    /// estimates.
    #[serde(default = "default_hessian_samples")]
    pub hessian_samples: usize,
    /// Clients used; larger federations are subsampled.
    #[serde(default = "default_max_clients")]
    pub max_clients: usize,
    #[serde(default = "default_power_iters")]
    pub power_iters: usize,
    pub seed: u64,
}

fn default_radius() -> f64 {
    0.5
}
fn default_sample_cap() -> usize {
    128
}
fn default_hessian_samples() -> usize {
    16
}
fn default_max_clients() -> usize {
    10
}
fn default_power_iters() -> usize {
    50
}

impl ProbeConfig {
    pub fn new(count: usize, seed: u64) -> Self {
        Self {
            count,
            radius: default_radius(),
            sample_cap: default_sample_cap(),
            hessian_samples: default_hessian_samples(),
            max_clients: default_max_clients(),
            power_iters: default_power_iters(),
            seed,
        }
    }
}

/// Estimates around the seeded initial model.
pub fn estimate_constants(
    spec: &ModelSpec,
    clients: &[ClientDataset],
    probe_count: usize,
    seed: u64,
) -> Result<TheoryConstants> {
    estimate_constants_at(
        spec,
        clients,
        &spec.init_params(seed),
        &ProbeConfig::new(probe_count, seed),
    )
}

/// Largest `‖Av‖` over the power-iteration sequence for a symmetric
/// operator `A`.
fn spectral_norm(
    dim: usize,
    iters: usize,
    rng: &mut RngStream,
    mut apply: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = linalg::norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    let mut best = 0.0f64;
    for _ in 0..iters.max(1) {
        let y = apply(&v)?;
        let ny = linalg::norm(&y);
        best = best.max(ny);
        if ny == 0.0 || !ny.is_finite() {
            break;
        }
        v = linalg::scale(&y, 1.0 / ny);
    }
    Ok(best)
}

fn probe_points(center: &ModelParams, cfg: &ProbeConfig, rng: &mut RngStream) -> Result<Vec<ModelParams>> {
    let mut probes = vec![center.clone()];
    for _ in 1..cfg.count {
        let u: Vec<f64> = (0..center.dim()).map(|_| StandardNormal.sample(rng)).collect();
        let n = linalg::norm(&u);
        probes.push(center.with_values(linalg::add_scaled(center.values(), cfg.radius / n, &u))?);
    }
    Ok(probes)
}

pub fn estimate_constants_at(
    spec: &ModelSpec,
    clients: &[ClientDataset],
    center: &ModelParams,
    cfg: &ProbeConfig,
) -> Result<TheoryConstants> {
    if cfg.count < 2 {
        return Err(Error::InvalidConfig("constant estimation needs >= 2 probes".into()));
    }
    if clients.is_empty() {
        return Err(Error::EmptyData("client list"));
    }
    if cfg.sample_cap == 0 || cfg.max_clients == 0 {
        return Err(Error::InvalidConfig("sample_cap and max_clients must be >= 1".into()));
    }
    let mut rng = RngStream::derive(cfg.seed, 0, 0, Purpose::Probe);
    let dim = spec.dim();

    let chosen: Vec<&ClientDataset> = if clients.len() > cfg.max_clients {
        let mut ids = index::sample(&mut rng, clients.len(), cfg.max_clients).into_vec();
        ids.sort_unstable();
        ids.into_iter().map(|i| &clients[i]).collect()
    } else {
        clients.iter().collect()
    };
    // Same row subset for every client of a given size, so identical
    // clients give identical estimates.
    let batches: Vec<Batch> = chosen
        .iter()
        .map(|c| {
            let n = c.train.len();
            if n <= cfg.sample_cap {
                c.train.clone()
            } else {
                let mut sub = RngStream::derive(cfg.seed, n as u64, 1, Purpose::Probe);
                let mut rows = index::sample(&mut sub, n, cfg.sample_cap).into_vec();
                rows.sort_unstable();
                c.train.select(&rows)
            }
        })
        .collect();
    let m = batches.len() as f64;
    let probes = probe_points(center, cfg, &mut rng)?;

    let mut out = TheoryConstants::default();
    let mut grads_at: Vec<Vec<Vec<f64>>> = Vec::with_capacity(probes.len());
    for w in &probes {
        let grads: Vec<Vec<f64>> = batches.iter().map(|b| spec.grad(w, b)).collect::<Result<_>>()?;
        for g in &grads {
            out.b = out.b.max(linalg::norm(g));
        }
        let gbar = linalg::compensated_mean(grads.iter().map(Vec::as_slice), dim);
        let gamma_g_sq = grads.iter().map(|g| linalg::distance(g, &gbar).powi(2)).sum::<f64>() / m;
        out.gamma_g = out.gamma_g.max(gamma_g_sq.sqrt());

        let mut gamma_h_sq = 0.0;
        for (b, g) in batches.iter().zip(&grads) {
            let lh = spectral_norm(dim, cfg.power_iters, &mut rng, |v| spec.hvp(w, v, b))?;
            out.l = out.l.max(lh);

            if batches.len() > 1 {
                let gap = spectral_norm(dim, cfg.power_iters, &mut rng, |v| {
                    let own = spec.hvp(w, v, b)?;
                    let others: Vec<Vec<f64>> = batches.iter().map(|o| spec.hvp(w, v, o)).collect::<Result<_>>()?;
                    let mean = linalg::compensated_mean(others.iter().map(Vec::as_slice), dim);
                    Ok(linalg::sub(&own, &mean))
                })?;
                gamma_h_sq += gap * gap / m;
            }

            let (mut s2, mut s4) = (0.0, 0.0);
            for i in 0..b.len() {
                let e = linalg::distance(&spec.grad(w, &b.row(i))?, g).powi(2);
                s2 += e;
                s4 += e * e;
            }
            out.sigma_g = out.sigma_g.max((s2 / b.len() as f64).sqrt());
            out.kappa_g = out.kappa_g.max(s4 / b.len() as f64);

            let hs = cfg.hessian_samples.min(b.len());
            if hs > 0 {
                let (mut h2, mut h4) = (0.0, 0.0);
                for i in 0..hs {
                    let row = b.row(i);
                    let dev = spectral_norm(dim, cfg.power_iters, &mut rng, |v| {
                        Ok(linalg::sub(&spec.hvp(w, v, &row)?, &spec.hvp(w, v, b)?))
                    })?;
                    h2 += dev * dev;
                    h4 += dev.powi(4);
                }
                out.sigma_h = out.sigma_h.max((h2 / hs as f64).sqrt());
                out.kappa_h = out.kappa_h.max(h4 / hs as f64);
            }
        }
        out.gamma_h = out.gamma_h.max(gamma_h_sq.sqrt());
        grads_at.push(grads);
    }

    for a in 0..probes.len() {
        for z in a + 1..probes.len() {
            let dist = linalg::distance(probes[a].values(), probes[z].values());
            if dist == 0.0 {
                continue;
            }
            for (k, b) in batches.iter().enumerate() {
                let secant = linalg::distance(&grads_at[a][k], &grads_at[z][k]) / dist;
                out.l = out.l.max(secant);
                let diff = spectral_norm(dim, cfg.power_iters, &mut rng, |v| {
                    Ok(linalg::sub(&spec.hvp(&probes[a], v, b)?, &spec.hvp(&probes[z], v, b)?))
                })?;
                out.rho = out.rho.max(diff / dist);
            }
        }
    }
    out.validate()?;
    Ok(out)
}
