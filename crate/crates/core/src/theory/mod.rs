//! Executable bound formulas for the meta objective.
//!
//! All formulas are evaluated literally, recursions in the order they are
//! written, from a set of [`TheoryConstants`]. Batch sizes come from a
//! [`BatchPlan`]: `D_l = d_sizes[l]` and `D'_l = dprime_sizes[l]`.
//!
//! Constants produced by [`estimate`] are lower estimates of the true
//! suprema, so bounds computed from them are plausibility checks rather than
//! certificates.

pub mod estimate;
pub mod report;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metagrad::BatchPlan;

pub use estimate::{estimate_constants, estimate_constants_at, ProbeConfig};
pub use report::{BoundReport, BoundRow, TheoremSetting};

/// Problem constants: gradient bound `B`, smoothness `L`, Hessian Lipschitz
/// constant `rho`, per-sample gradient and Hessian noise (`sigma_*` for the
/// second moment, `kappa_*` for the fourth), and cross-client dissimilarity
/// `gamma_*`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub b: f64,
    pub l: f64,
    pub rho: f64,
    pub sigma_g: f64,
    pub sigma_h: f64,
    pub kappa_g: f64,
    pub kappa_h: f64,
    pub gamma_g: f64,
    pub gamma_h: f64,
}

impl TheoryConstants {
    /// Replace the dissimilarity constants by the always-valid `2B` and `2L`.
    pub fn with_fallback_similarity(mut self) -> Self {
        self.gamma_g = 2.0 * self.b;
        self.gamma_h = 2.0 * self.l;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.b,
            self.l,
            self.rho,
            self.sigma_g,
            self.sigma_h,
            self.kappa_g,
            self.kappa_h,
            self.gamma_g,
            self.gamma_h,
        ];
        if all.iter().all(|x| x.is_finite() && *x >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig("theory constants must be finite and >= 0".into()))
        }
    }
}

/// First and second moment bounds of a stochastic meta-gradient error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    /// Bound on `‖E[estimate] - ∇F‖`.
    pub bias: f64,
    /// Bound on `E‖estimate - ∇F‖²`.
    pub second_moment: f64,
}

fn need_nu(nu: usize, what: &str) -> Result<()> {
    if nu == 0 {
        Err(Error::InvalidConfig(format!("{what} needs nu >= 1")))
    } else {
        Ok(())
    }
}

fn plan_nu(plan: &BatchPlan) -> Result<usize> {
    let nu = plan.dprime_sizes.len();
    plan.validate(nu)?;
    Ok(nu)
}

fn powi(x: f64, n: usize) -> f64 {
    x.powi(n as i32)
}

/// Smoothness constant of the meta function:
/// `L(1+αL)^{2ν} + Bαρ(1+αL)^{ν-1} Σ_{l<ν} (1+αL)^l`.
pub fn smoothness_lf(c: &TheoryConstants, alpha: f64, nu: usize) -> f64 {
    let k = 1.0 + alpha * c.l;
    let sum: f64 = (0..nu).map(|l| powi(k, l)).sum();
    let tail = if nu == 0 {
        0.0
    } else {
        c.b * alpha * c.rho * powi(k, nu - 1) * sum
    };
    c.l * powi(k, 2 * nu) + tail
}

/// `(κ + 3(D-1)σ⁴) / D³`: fourth moment bound for the mean of `D` samples.
pub fn fourth_moment_bound(kappa: f64, sigma4: f64, d: usize) -> f64 {
    let d = d as f64;
    (kappa + 3.0 * (d - 1.0) * sigma4) / (d * d * d)
}

/// Distance bounds between stochastic and exact fine-tuned models, for
/// `l = 0..=ν` (all zero at `l = 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelErrorBounds {
    /// Bound on `E‖w̃_l - w_l‖`.
    pub h: Vec<f64>,
    /// Bound on `E‖w̃_l - w_l‖²`.
    pub h_sq: Vec<f64>,
    /// Bound on `E‖w̃_l - w_l‖⁴`.
    pub h_quad: Vec<f64>,
}

pub fn model_error_bounds(c: &TheoryConstants, alpha: f64, plan: &BatchPlan) -> Result<ModelErrorBounds> {
    let nu = plan_nu(plan)?;
    let ds = &plan.d_sizes;
    let k = 1.0 + alpha * c.l;
    let a2 = 2.0 + 2.0 * alpha * alpha * c.l * c.l;
    let a4 = 8.0 + 64.0 * powi(alpha, 4) * powi(c.l, 4);
    let sg2 = c.sigma_g * c.sigma_g;
    let sg4 = sg2 * sg2;
    let m = |j: usize| fourth_moment_bound(c.kappa_g, sg4, ds[j]);

    let mut out = ModelErrorBounds {
        h: vec![0.0],
        h_sq: vec![0.0],
        h_quad: vec![0.0],
    };
    for l in 1..=nu {
        let h: f64 = (0..l).map(|j| powi(k, j) / (ds[l - 1 - j] as f64).sqrt()).sum();
        out.h.push(alpha * c.sigma_g * h);

        let mut h_sq = alpha * alpha * sg2 * powi(a2, l - 1) / ds[0] as f64;
        h_sq += 2.0 * alpha * alpha * sg2 * (1..l).map(|j| powi(a2, l - j - 1) / ds[j] as f64).sum::<f64>();
        out.h_sq.push(h_sq);

        let mut h_quad = powi(alpha, 4) * m(0) * powi(a4, l - 1);
        h_quad += 64.0 * powi(alpha, 4) * (1..l).map(|j| m(j) * powi(a4, l - j - 1)).sum::<f64>();
        out.h_quad.push(h_quad);
    }
    Ok(out)
}

/// Solutions of the Hessian-noise recursions, indexed `1..=ν` (entry 0 is
/// unused and zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianNoise {
    pub d: Vec<f64>,
    pub d_quad: Vec<f64>,
}

pub fn hessian_noise(
    c: &TheoryConstants,
    alpha: f64,
    plan: &BatchPlan,
    errs: &ModelErrorBounds,
) -> Result<HessianNoise> {
    let nu = plan_nu(plan)?;
    need_nu(nu, "the Hessian-noise recursion")?;
    let dp = &plan.dprime_sizes;
    let k = 1.0 + alpha * c.l;
    let sh2 = c.sigma_h * c.sigma_h;
    let mh = |j: usize| fourth_moment_bound(c.kappa_h, sh2 * sh2, dp[j]);
    let a4 = powi(alpha, 4);

    let mut d = vec![0.0, alpha * alpha * sh2 / dp[0] as f64];
    let mut dq = vec![0.0, a4 * mh(0)];
    for l in 2..=nu {
        let dpl = dp[l - 1] as f64;
        let grow = 1.0 + alpha * c.l + alpha * c.sigma_h / dpl.sqrt();
        let next = 2.0 * d[l - 1] * grow * grow
            + 2.0 * alpha * alpha * powi(k, 2 * l - 2) * (sh2 / dpl + c.rho * c.rho * errs.h_sq[l - 1]);
        d.push(next);
        let next_q = 64.0 * dq[l - 1] * (powi(k, 4) + a4 * mh(l - 1))
            + 64.0 * a4 * powi(k, 4 * l - 4) * (powi(c.rho, 4) * errs.h_quad[l - 1] + mh(l - 1));
        dq.push(next_q);
    }
    Ok(HessianNoise { d, d_quad: dq })
}

/// Bias and second moment bounds of the exact engine's estimate.
pub fn meta_grad_moments_exact(c: &TheoryConstants, alpha: f64, plan: &BatchPlan) -> Result<Moments> {
    let nu = plan_nu(plan)?;
    need_nu(nu, "the exact meta-gradient bound")?;
    let errs = model_error_bounds(c, alpha, plan)?;
    let noise = hessian_noise(c, alpha, plan, &errs)?;
    let k = 1.0 + alpha * c.l;
    let dn = plan.d_sizes[nu] as f64;
    let sg2 = c.sigma_g * c.sigma_g;
    let outer_sq = sg2 / dn + c.l * c.l * errs.h_sq[nu];

    let bias = powi(k, nu) * (c.sigma_g / dn.sqrt() + c.l * errs.h[nu])
        + c.b * alpha * c.rho * powi(k, nu - 1) * errs.h[1..nu].iter().sum::<f64>()
        + (noise.d[nu] * outer_sq).sqrt();

    let mg = fourth_moment_bound(c.kappa_g, sg2 * sg2, plan.d_sizes[nu]);
    let second = 3.0 * powi(k, 2 * nu) * outer_sq
        + 3.0 * c.b * c.b * noise.d[nu]
        + 6.0 * (2.0 * noise.d_quad[nu] * (mg + powi(c.l, 4) * errs.h_quad[nu])).sqrt();
    Ok(Moments {
        bias,
        second_moment: second,
    })
}

/// `α²γ_H²(1+αL)^{2ν-2}(2^{ν-1} + Σ_{l=1}^{ν-1} 2^l)`.
pub fn similarity_g(c: &TheoryConstants, alpha: f64, nu: usize) -> Result<f64> {
    need_nu(nu, "the similarity bound")?;
    let k = 1.0 + alpha * c.l;
    let pow2 = |n: usize| 2f64.powi(n as i32);
    let s = pow2(nu - 1) + (1..nu).map(pow2).sum::<f64>();
    Ok(alpha * alpha * c.gamma_h * c.gamma_h * powi(k, 2 * nu - 2) * s)
}

/// Cross-client meta-gradient dissimilarity `γ_F²`.
pub fn similarity_gamma_f(c: &TheoryConstants, alpha: f64, nu: usize) -> Result<f64> {
    let g = similarity_g(c, alpha, nu)?;
    let k = 1.0 + alpha * c.l;
    Ok(15.0 * c.b * c.b * g + 6.0 * c.gamma_g * c.gamma_g * powi(k, 2 * nu) * (1.0 + alpha * alpha * c.l * c.l))
}

/// Bounds for the first-order engine, measured against the exact `∇F`.
pub fn fo_moments(c: &TheoryConstants, alpha: f64, plan: &BatchPlan) -> Result<Moments> {
    let nu = plan_nu(plan)?;
    let errs = model_error_bounds(c, alpha, plan)?;
    let k = 1.0 + alpha * c.l;
    let dn = plan.d_sizes[nu] as f64;
    let drift = c.b * (powi(k, nu) + 1.0);
    Ok(Moments {
        bias: c.sigma_g / dn.sqrt() + c.l * errs.h[nu] + drift,
        second_moment: 2.0 * c.sigma_g * c.sigma_g / dn + 2.0 * c.l * c.l * errs.h_sq[nu] + 2.0 * drift * drift,
    })
}

/// Truncation bias of the symmetric-difference Hessian products:
/// `αρδB² Σ_{i<ν} (1+αL)^{ν+i-1}`. Linear in δ.
pub fn hf_truncation_bias(c: &TheoryConstants, alpha: f64, delta: f64, nu: usize) -> Result<f64> {
    need_nu(nu, "the Hessian-free bound")?;
    let k = 1.0 + alpha * c.l;
    let s: f64 = (0..nu).map(|i| powi(k, nu + i - 1)).sum();
    Ok(alpha * c.rho * delta * c.b * c.b * s)
}

/// Bounds for the Hessian-free engine.
pub fn hf_moments(c: &TheoryConstants, alpha: f64, delta: f64, plan: &BatchPlan) -> Result<Moments> {
    let nu = plan_nu(plan)?;
    need_nu(nu, "the Hessian-free bound")?;
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::InvalidConfig("delta must be > 0".into()));
    }
    let errs = model_error_bounds(c, alpha, plan)?;
    let k = 1.0 + alpha * c.l;
    let dn = plan.d_sizes[nu] as f64;
    let sg2 = c.sigma_g * c.sigma_g;
    let mut p = c.sigma_g / dn.sqrt() + c.l * errs.h[nu];
    let mut p_sq = sg2 / dn + c.l * c.l * errs.h_sq[nu];
    for l in 1..=nu {
        let dpl = plan.dprime_sizes[nu - l] as f64;
        p = k * p + (alpha / delta) * (c.sigma_g / dpl.sqrt() + c.l * errs.h[nu - l]);
        p_sq = 3.0 * p_sq * (1.0 + alpha * alpha * c.l * c.l)
            + (3.0 * alpha * alpha / (2.0 * delta * delta)) * (sg2 / dpl + 2.0 * c.l * c.l * errs.h_sq[nu - l]);
    }
    let q = hf_truncation_bias(c, alpha, delta, nu)?;
    Ok(Moments {
        bias: p + q,
        second_moment: 2.0 * p_sq + 2.0 * q * q,
    })
}

/// Meta-function statistics entering the stationarity bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaStatistics {
    pub l_f: f64,
    pub mu_f: f64,
    pub sigma_f_sq: f64,
    pub gamma_f_sq: f64,
}

/// The stationarity bound and its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremBound {
    pub rhs: f64,
    /// `4(F(w_0) - F*)/(βτK)`.
    pub optimization_term: f64,
    pub variance_term: f64,
    pub similarity_term: f64,
    pub bias_term: f64,
    /// `1/(10τL_F)`, the largest β the bound assumes.
    pub beta_limit: f64,
    pub beta_exceeds_limit: bool,
}

/// Bound on the time-averaged expected squared meta-gradient norm after
/// `rounds` rounds. `rounds` may be infinite. The unspecified constant in
/// front of the noise bracket is `big_o_const`. The participation term
/// `(1-r)/(r(N-1))` is zero at full participation or a single client.
#[allow(clippy::too_many_arguments)]
pub fn theorem_rhs(
    stats: &MetaStatistics,
    beta: f64,
    tau: usize,
    rounds: f64,
    participation: f64,
    n_clients: usize,
    f0_gap: f64,
    big_o_const: f64,
) -> TheoremBound {
    let t = tau as f64;
    let bl = beta * stats.l_f;
    let drift = bl * t * (t - 1.0);
    let part = if participation >= 1.0 || n_clients < 2 {
        0.0
    } else {
        (1.0 - participation) / (participation * (n_clients as f64 - 1.0))
    };
    let optimization_term = if rounds.is_infinite() {
        0.0
    } else {
        4.0 * f0_gap / (beta * t * rounds)
    };
    let variance_term = big_o_const * bl * (1.0 + drift) * stats.sigma_f_sq;
    let similarity_term = big_o_const * bl * stats.gamma_f_sq * (part + drift);
    let bias_term = big_o_const * stats.mu_f * stats.mu_f;
    let beta_limit = if stats.l_f > 0.0 {
        1.0 / (10.0 * t * stats.l_f)
    } else {
        f64::INFINITY
    };
    TheoremBound {
        rhs: optimization_term + variance_term + similarity_term + bias_term,
        optimization_term,
        variance_term,
        similarity_term,
        bias_term,
        beta_limit,
        beta_exceeds_limit: beta > beta_limit,
    }
}
