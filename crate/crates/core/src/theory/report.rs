//! Serializable summary of every bound for a sweep over ν.

use serde::{Deserialize, Serialize};

use super::{
    fo_moments, hessian_noise, hf_moments, meta_grad_moments_exact, model_error_bounds, similarity_g,
    similarity_gamma_f, smoothness_lf, theorem_rhs, HessianNoise, MetaStatistics, ModelErrorBounds, Moments,
    TheoremBound, TheoryConstants,
};
use crate::error::Result;
use crate::metagrad::BatchPlan;

/// Training setting for the stationarity bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremSetting {
    pub beta: f64,
    pub tau: usize,
    pub rounds: usize,
    pub participation: f64,
    pub n_clients: usize,
    /// `F(w_0) - F*`, or an upper estimate of it.
    pub f0_gap: f64,
    #[serde(default = "default_big_o")]
    pub big_o_const: f64,
}

fn default_big_o() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineBounds {
    pub gradient_estimate: Moments,
    pub stationarity: TheoremBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub gamma_f_sq: f64,
    pub g_nu: f64,
}

/// All bounds at one ν.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub nu: usize,
    pub meta_smoothness: f64,
    pub finetuned_model_error: ModelErrorBounds,
    pub hessian_estimate_noise: HessianNoise,
    pub meta_gradient_similarity: Similarity,
    pub exact: EngineBounds,
    pub first_order: EngineBounds,
    pub hessian_free: EngineBounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub constants: TheoryConstants,
    /// Set when the constants were estimated from samples and therefore
    /// only bound the true suprema from below.
    pub constants_are_lower_estimates: bool,
    pub alpha: f64,
    pub delta: f64,
    pub batch_size: usize,
    pub setting: TheoremSetting,
    pub rows: Vec<BoundRow>,
}

impl BoundReport {
    /// Any row whose β exceeds the bound's step-size hypothesis.
    pub fn beta_warning(&self) -> bool {
        self.rows.iter().any(|r| r.exact.stationarity.beta_exceeds_limit)
    }
}

pub fn bound_row(
    c: &TheoryConstants,
    alpha: f64,
    delta: f64,
    plan: &BatchPlan,
    setting: &TheoremSetting,
) -> Result<BoundRow> {
    let nu = plan.dprime_sizes.len();
    let errs = model_error_bounds(c, alpha, plan)?;
    let noise = hessian_noise(c, alpha, plan, &errs)?;
    let l_f = smoothness_lf(c, alpha, nu);
    let gamma_f_sq = similarity_gamma_f(c, alpha, nu)?;
    let engine = |m: Moments| {
        let stats = MetaStatistics {
            l_f,
            mu_f: m.bias,
            sigma_f_sq: m.second_moment,
            gamma_f_sq,
        };
        EngineBounds {
            gradient_estimate: m,
            stationarity: theorem_rhs(
                &stats,
                setting.beta,
                setting.tau,
                setting.rounds as f64,
                setting.participation,
                setting.n_clients,
                setting.f0_gap,
                setting.big_o_const,
            ),
        }
    };
    Ok(BoundRow {
        nu,
        meta_smoothness: l_f,
        finetuned_model_error: errs,
        hessian_estimate_noise: noise,
        meta_gradient_similarity: Similarity {
            gamma_f_sq,
            g_nu: similarity_g(c, alpha, nu)?,
        },
        exact: engine(meta_grad_moments_exact(c, alpha, plan)?),
        first_order: engine(fo_moments(c, alpha, plan)?),
        hessian_free: engine(hf_moments(c, alpha, delta, plan)?),
    })
}

/// Bounds for each ν in `nus` with equal batch sizes everywhere.
pub fn bound_sweep(
    c: &TheoryConstants,
    constants_are_lower_estimates: bool,
    alpha: f64,
    delta: f64,
    batch_size: usize,
    nus: &[usize],
    setting: &TheoremSetting,
) -> Result<BoundReport> {
    let rows = nus
        .iter()
        .map(|&nu| bound_row(c, alpha, delta, &BatchPlan::uniform(nu, batch_size), setting))
        .collect::<Result<_>>()?;
    Ok(BoundReport {
        constants: *c,
        constants_are_lower_estimates,
        alpha,
        delta,
        batch_size,
        setting: setting.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setting() -> TheoremSetting {
        TheoremSetting {
            beta: 1e-3,
            tau: 4,
            rounds: 100,
            participation: 0.2,
            n_clients: 50,
            f0_gap: 2.3,
            big_o_const: 1.0,
        }
    }

    #[test]
    fn sweep_is_monotone_and_serializes() {
        let c = TheoryConstants {
            b: 1.0,
            l: 3.0,
            rho: 2.0,
            sigma_g: 0.5,
            sigma_h: 0.8,
            kappa_g: 0.3,
            kappa_h: 0.9,
            gamma_g: 0.7,
            gamma_h: 1.2,
        };
        let r = bound_sweep(&c, true, 0.01, 1e-3, 40, &[1, 2, 3, 4], &setting()).unwrap();
        for w in r.rows.windows(2) {
            assert!(w[1].meta_smoothness >= w[0].meta_smoothness);
            assert!(w[1].exact.gradient_estimate.bias >= w[0].exact.gradient_estimate.bias);
            assert!(w[1].exact.gradient_estimate.second_moment >= w[0].exact.gradient_estimate.second_moment);
            assert!(w[1].meta_gradient_similarity.gamma_f_sq >= w[0].meta_gradient_similarity.gamma_f_sq);
            assert!(w[1].exact.stationarity.rhs >= w[0].exact.stationarity.rhs);
        }
        assert!(!r.beta_warning());
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("meta_smoothness") && json.contains("stationarity"));
        let back: BoundReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn noise_free_quadratic_rows() {
        let c = TheoryConstants {
            l: 2.0,
            b: 1.0,
            ..Default::default()
        };
        let r = bound_sweep(&c, false, 0.01, 1e-3, 40, &[1, 2], &setting()).unwrap();
        for row in &r.rows {
            assert_eq!(row.exact.gradient_estimate.bias, 0.0);
            assert_eq!(row.exact.gradient_estimate.second_moment, 0.0);
        }
        let mut s = setting();
        s.beta = 1.0;
        assert!(bound_sweep(&c, false, 0.01, 1e-3, 40, &[1], &s).unwrap().beta_warning());
    }
}
