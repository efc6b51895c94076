//! Unconstrained parametrization of the random-effect covariance.
//!
//! Correlations are driven by free reals filling the strictly-lower triangle
//! of a unit-diagonal matrix L row-wise; the correlation matrix is
//! `D^{-1/2} L Lᵀ D^{-1/2}` with `D = diag(L Lᵀ)`, which is unit-diagonal and
//! positive definite for every input. The covariance is `W Ω W` with W the
//! diagonal of standard deviations.

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, SquareMat};
use crate::scalar::{Dual, Scalar};
use serde::{Deserialize, Serialize};

/// Number of free correlation parameters for k responses.
pub fn n_corr_params(k: usize) -> usize {
    k * (k - 1) / 2
}

/// Correlation matrix from unconstrained parameters (row-wise lower
/// triangle of L). Unit diagonal exactly by construction.
pub fn build_corr<S: Scalar>(rho_raw: &[S], k: usize) -> SquareMat<S> {
    assert_eq!(
        rho_raw.len(),
        n_corr_params(k),
        "expected {} correlation parameters for k={k}",
        n_corr_params(k)
    );
    // rows of L: l_i = (ϱ…, 1, 0…)
    let mut l = SquareMat::<S>::identity(k);
    let mut idx = 0;
    for i in 1..k {
        for j in 0..i {
            l[(i, j)] = rho_raw[idx];
            idx += 1;
        }
    }
    // Ω_ij = ⟨l_i, l_j⟩ / (‖l_i‖‖l_j‖)
    let mut norms = Vec::with_capacity(k);
    for i in 0..k {
        let mut s = S::zero();
        for m in 0..=i {
            s += l[(i, m)] * l[(i, m)];
        }
        norms.push(s.sqrt());
    }
    let mut omega = SquareMat::<S>::identity(k);
    for i in 0..k {
        for j in 0..i {
            let mut dot = S::zero();
            for m in 0..=j {
                dot += l[(i, m)] * l[(j, m)];
            }
            let r = dot / (norms[i] * norms[j]);
            omega[(i, j)] = r;
            omega[(j, i)] = r;
        }
    }
    omega
}

/// Covariance Σ = W Ω W from a correlation matrix and standard deviations.
pub fn build_cov<S: Scalar>(omega: &SquareMat<S>, sd: &[S]) -> Result<SquareMat<S>> {
    let k = omega.n();
    assert_eq!(sd.len(), k);
    for s in sd {
        if !(s.value() > 0.0) {
            return Err(Error::Domain(format!(
                "standard deviations must be positive, got {}",
                s.value()
            )));
        }
    }
    Ok(SquareMat::from_fn(k, |i, j| omega[(i, j)] * sd[i] * sd[j]))
}

/// Recover unconstrained parameters reproducing a target correlation matrix
/// exactly: Cholesky of the target with rows rescaled to unit diagonal.
pub fn corr_to_rho_raw(omega: &SquareMat<f64>) -> Result<Vec<f64>> {
    let k = omega.n();
    let ch = Cholesky::new(omega).ok_or_else(|| {
        Error::Domain("target correlation matrix is not positive definite".into())
    })?;
    let l = ch.factor();
    let mut rho = Vec::with_capacity(n_corr_params(k));
    for i in 1..k {
        for j in 0..i {
            rho.push(l[(i, j)] / l[(i, i)]);
        }
    }
    Ok(rho)
}

/// Negative log-density of N(0, Σ) at b, with optional gradient (Σ⁻¹ b) and
/// Hessian (Σ⁻¹) in b.
#[derive(Debug, Clone)]
pub struct MvnNegLogDensity {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: SquareMat<f64>,
}

const LN_2PI: f64 = 1.8378770664093453;

/// (k/2) ln 2π + ½ ln|Σ| + ½ bᵀ Σ⁻¹ b via Cholesky.
pub fn mvn_neg_logdensity(b: &[f64], sigma: &SquareMat<f64>) -> Result<MvnNegLogDensity> {
    let k = sigma.n();
    assert_eq!(b.len(), k);
    let ch = Cholesky::new(sigma)
        .ok_or_else(|| Error::Numerical("covariance matrix is not positive definite".into()))?;
    let sig_inv_b = ch.solve(b);
    let mut quad = 0.0;
    for i in 0..k {
        quad += b[i] * sig_inv_b[i];
    }
    let value = 0.5 * (k as f64 * LN_2PI + ch.log_det() + quad);
    Ok(MvnNegLogDensity {
        value,
        grad: sig_inv_b,
        hess: ch.inverse(),
    })
}

/// Natural-scale report of the fitted random-effect structure: standard
/// deviations on the diagonal, correlations off it, with delta-method
/// standard errors and 5%-level significance flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmaReport {
    pub sd: Vec<SigmaEntry>,
    /// Correlation estimates, row-wise lower triangle (pairs (1,0), (2,0), (2,1), …).
    pub corr: Vec<CorrEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmaEntry {
    pub response: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub significant: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrEntry {
    pub row: String,
    pub col: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub significant: Option<bool>,
}

const Z_5PCT: f64 = 1.96;

pub(crate) fn flag(estimate: f64, se: Option<f64>) -> Option<bool> {
    se.map(|s| s > 0.0 && (estimate / s).abs() > Z_5PCT)
}

/// Delta-method SEs for the sd vector: sd = exp(s) ⇒ SE(sd) = exp(s)·SE(s).
pub(crate) fn sd_entry(response: &str, log_sd: f64, log_sd_se: Option<f64>) -> SigmaEntry {
    let estimate = log_sd.exp();
    let se = log_sd_se.map(|s| estimate * s);
    SigmaEntry {
        response: response.to_string(),
        estimate,
        se,
        significant: flag(estimate, se),
    }
}

/// Delta-method SEs for the correlations: for each entry of Ω(ϱ), the
/// gradient in ϱ is taken by forward duals and propagated through the
/// ϱ-block of the parameter covariance.
pub(crate) fn corr_entries(
    names: &[String],
    rho_raw: &[f64],
    rho_vcov: Option<&SquareMat<f64>>,
) -> Vec<CorrEntry> {
    let k = names.len();
    let m = rho_raw.len();
    let omega = build_corr(rho_raw, k);
    let mut entries = Vec::with_capacity(m);
    // jacobian rows: one dual sweep per free ϱ direction
    let mut jac: Vec<SquareMat<Dual>> = Vec::with_capacity(m);
    for d in 0..m {
        let rho_d: Vec<Dual> = rho_raw
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if i == d {
                    Dual::seeded(v)
                } else {
                    Dual::constant(v)
                }
            })
            .collect();
        jac.push(build_corr(&rho_d, k));
    }
    for i in 1..k {
        for j in 0..i {
            let est = omega[(i, j)];
            let se = rho_vcov.map(|v| {
                let g: Vec<f64> = (0..m).map(|d| jac[d][(i, j)].d).collect();
                let mut var = 0.0;
                for a in 0..m {
                    for b in 0..m {
                        var += g[a] * v[(a, b)] * g[b];
                    }
                }
                var.max(0.0).sqrt()
            });
            entries.push(CorrEntry {
                row: names[i].clone(),
                col: names[j].clone(),
                estimate: est,
                se,
                significant: flag(est, se),
            });
        }
    }
    entries
}
