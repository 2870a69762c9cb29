//! Bound reports for a configured experiment.

use std::fmt::Write as _;

use anyhow::Context;
use gmeta::data::{partition_dirichlet, ClientDataset};
use gmeta::metagrad::meta_loss;
use gmeta::nn::ModelSpec;
use gmeta::theory::report::bound_sweep;
use gmeta::theory::{estimate_constants, BoundReport, TheoremSetting};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

/// Contents of `bounds.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsFile {
    pub tool: String,
    pub version: String,
    /// Seed used for the partition, the initial model and the probes.
    pub seed: u64,
    pub f0_gap_estimated: bool,
    /// Violated hypotheses, e.g. a step size above the bound's limit.
    pub warnings: Vec<String>,
    #[serde(flatten)]
    pub report: BoundReport,
}

/// Largest mean meta-loss at the initial model over the ν sweep. Losses are
/// taken as bounded below by zero.
fn initial_gap(cfg: &ExperimentConfig, spec: &ModelSpec, clients: &[ClientDataset], seed: u64) -> anyhow::Result<f64> {
    let w = spec.init_params(seed);
    let mut gap = 0.0f64;
    for &nu in &cfg.theory.nu_sweep {
        let mut total = 0.0;
        for c in clients {
            total += meta_loss(spec, &w, &c.train, cfg.federation.alpha, nu)?;
        }
        gap = gap.max(total / clients.len() as f64);
    }
    Ok(gap)
}

pub fn compute_bounds(cfg: &ExperimentConfig) -> anyhow::Result<BoundsFile> {
    let seed = cfg.seeds[0];
    let master = cfg.load_master().context("loading dataset")?;
    let spec = cfg.model_spec(master.n_features(), master.classes())?;
    let clients = partition_dirichlet(&master, &cfg.partition_config(seed))?;
    let constants = estimate_constants(&spec, &clients, cfg.theory.probe_count, seed)?;
    let (f0_gap, f0_gap_estimated) = match cfg.theory.f0_gap {
        Some(g) => (g, false),
        None => (initial_gap(cfg, &spec, &clients, seed)?, true),
    };
    let f = &cfg.federation;
    let setting = TheoremSetting {
        beta: f.beta,
        tau: f.tau,
        rounds: f.rounds,
        participation: f.participation,
        n_clients: cfg.partition.n_clients,
        f0_gap,
        big_o_const: cfg.theory.big_o_const,
    };
    let report = bound_sweep(
        &constants,
        true,
        f.alpha,
        cfg.engine.delta,
        f.batch_size,
        &cfg.theory.nu_sweep,
        &setting,
    )?;
    let warnings = report
        .rows
        .iter()
        .filter(|r| r.exact.stationarity.beta_exceeds_limit)
        .map(|r| {
            format!(
                "nu={}: beta={} exceeds 1/(10 tau L_F)={:.3e}; the stationarity bound does not apply",
                r.nu, f.beta, r.exact.stationarity.beta_limit
            )
        })
        .collect();
    Ok(BoundsFile {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        f0_gap_estimated,
        warnings,
        report,
    })
}

pub fn render_table(b: &BoundsFile) -> String {
    let mut s = String::new();
    let c = &b.report.constants;
    let _ = writeln!(
        s,
        "constants (lower estimates): B={:.3e} L={:.3e} rho={:.3e} sigma_G={:.3e} sigma_H={:.3e} gamma_G={:.3e} gamma_H={:.3e}",
        c.b, c.l, c.rho, c.sigma_g, c.sigma_h, c.gamma_g, c.gamma_h
    );
    let _ = writeln!(
        s,
        "{:>3} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "nu", "L_F", "gamma_F^2", "mu_exact", "mu_fo", "mu_hf", "rhs_exact", "rhs_fo", "rhs_hf"
    );
    for r in &b.report.rows {
        let _ = writeln!(
            s,
            "{:>3} {:>10.3e} {:>10.3e} {:>10.3e} {:>10.3e} {:>10.3e} {:>10.3e} {:>10.3e} {:>10.3e}",
            r.nu,
            r.meta_smoothness,
            r.meta_gradient_similarity.gamma_f_sq,
            r.exact.gradient_estimate.bias,
            r.first_order.gradient_estimate.bias,
            r.hessian_free.gradient_estimate.bias,
            r.exact.stationarity.rhs,
            r.first_order.stationarity.rhs,
            r.hessian_free.stationarity.rhs,
        );
    }
    for w in &b.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}
