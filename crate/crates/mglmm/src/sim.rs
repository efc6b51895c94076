//! Synthetic MGLMM data generation and moment checks against
//! semi-analytic targets.
//!
//! One root seed is split deterministically per stream (covariates, random
//! effects, responses), so generation is reproducible and independent of
//! any execution order.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covariance::n_corr_params;
use crate::error::{Error, Result};
use crate::families::{cmp_mean_variance, CmpDist, CmpTruncation, Family};
use crate::linalg::{canonical_sum, Cholesky, SquareMat};
use crate::model::{Dataset, ModelSpec};

/// splitmix64 mix of a root seed with two stream tags.
pub(crate) fn child_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(index.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

const STREAM_COVARIATE: u64 = 1;
const STREAM_EFFECT: u64 = 2;
const STREAM_RESPONSE: u64 = 3;

/// Distribution of the generated covariate columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateLaw {
    StandardNormal,
    /// Bernoulli(0.5) in {0, 1}.
    Binary,
    /// Constant one (only sensible for responses without named covariates;
    /// with an implicit intercept it makes the design rank deficient).
    Constant,
}

impl CovariateLaw {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "standard_normal" | "normal" => Ok(CovariateLaw::StandardNormal),
            "binary" => Ok(CovariateLaw::Binary),
            "constant" => Ok(CovariateLaw::Constant),
            other => Err(Error::Config(format!("unknown covariate law '{other}'"))),
        }
    }
}

/// Simulation truth: a model spec plus natural-scale parameters.
///
/// Correlations are given on the natural scale (lower triangle of the
/// random-effect correlation matrix, row-wise).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub spec: ModelSpec,
    pub beta: Vec<Vec<f64>>,
    /// Per-response dispersion (empty for Poisson).
    #[serde(default)]
    pub disp: Vec<f64>,
    pub sd: Vec<f64>,
    /// Natural correlations, pairs (1,0), (2,0), (2,1), …; empty for k=1.
    #[serde(default)]
    pub rho: Vec<f64>,
    pub n_subjects: usize,
    pub covariate_law: CovariateLaw,
    pub seed: u64,
}

impl SimConfig {
    /// The target random-effect correlation matrix, checked PD.
    pub fn corr_target(&self) -> Result<SquareMat<f64>> {
        let k = self.spec.k();
        if self.rho.len() != n_corr_params(k) {
            return Err(Error::Config(format!(
                "expected {} correlation entries for k={k}, got {}",
                n_corr_params(k),
                self.rho.len()
            )));
        }
        let mut omega = SquareMat::<f64>::identity(k);
        let mut idx = 0;
        for i in 1..k {
            for j in 0..i {
                let r = self.rho[idx];
                if !(r.abs() < 1.0) {
                    return Err(Error::Config(format!(
                        "correlations must lie in (−1, 1), got {r}"
                    )));
                }
                omega[(i, j)] = r;
                omega[(j, i)] = r;
                idx += 1;
            }
        }
        if Cholesky::new(&omega).is_none() {
            return Err(Error::Config(
                "the requested correlation matrix is not positive definite".into(),
            ));
        }
        Ok(omega)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.spec.k();
        if self.n_subjects < 2 {
            return Err(Error::Config(format!(
                "simulation needs at least 2 subjects, got {}",
                self.n_subjects
            )));
        }
        if self.beta.len() != k {
            return Err(Error::Config("one beta block per response required".into()));
        }
        for (r, b) in self.beta.iter().enumerate() {
            if b.len() != self.spec.p(r) {
                return Err(Error::Config(format!(
                    "beta block for '{}' has {} entries, expected {} (intercept first)",
                    self.spec.responses[r],
                    b.len(),
                    self.spec.p(r)
                )));
            }
        }
        let want_disp = if self.spec.family.has_dispersion() { k } else { 0 };
        if self.disp.len() != want_disp {
            return Err(Error::Config(format!(
                "expected {want_disp} dispersion values, got {}",
                self.disp.len()
            )));
        }
        if self.disp.iter().any(|&d| !(d > 0.0)) || self.sd.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(
                "dispersions and sds must be positive".into(),
            ));
        }
        if self.sd.len() != k {
            return Err(Error::Config("one sd per response required".into()));
        }
        self.corr_target()?;
        Ok(())
    }

    /// Covariance Cholesky factor for drawing random effects.
    fn effect_chol(&self) -> Result<Cholesky<f64>> {
        let omega = self.corr_target()?;
        let sigma = crate::covariance::build_cov(&omega, &self.sd)?;
        Cholesky::new(&sigma)
            .ok_or_else(|| Error::Config("effect covariance is not positive definite".into()))
    }
}

const MAX_SIM_MEAN: f64 = 1e6;

fn draw_count(
    family: Family,
    mu: f64,
    disp: Option<f64>,
    trunc: &CmpTruncation,
    cmp_warm: &mut f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if !(mu > 0.0 && mu < MAX_SIM_MEAN) {
        return Err(Error::Numerical(format!(
            "simulated conditional mean {mu} outside (0, {MAX_SIM_MEAN})"
        )));
    }
    match family {
        Family::Poisson => Ok(Poisson::new(mu).unwrap().sample(rng)),
        Family::Nb2 => {
            // gamma–Poisson mixture: shape φ, scale μ/φ
            let phi = disp.expect("nb2 dispersion");
            let g: f64 = Gamma::new(phi, mu / phi)
                .map_err(|e| Error::Numerical(format!("gamma mixing draw failed: {e}")))?
                .sample(rng);
            if g > 0.0 {
                Ok(Poisson::new(g).unwrap().sample(rng))
            } else {
                Ok(0.0)
            }
        }
        Family::Cmp => {
            let nu = disp.expect("cmp dispersion");
            let warm = if cmp_warm.is_finite() {
                Some(*cmp_warm)
            } else {
                None
            };
            let dist = CmpDist::new_warm(mu, nu, trunc, warm)?;
            *cmp_warm = dist.log_rate();
            let u: f64 = rng.random();
            Ok(dist.sample(u) as f64)
        }
    }
}

/// Generate a dataset from the truth: covariate columns by name (shared
/// across responses that reference the same name), random intercepts from
/// the MVN, counts from the conditional family. Fully determined by the
/// seed; subject order is the generation order.
pub fn simulate(config: &SimConfig) -> Result<Dataset> {
    config.validate()?;
    let spec = &config.spec;
    let k = spec.k();
    let n = config.n_subjects;
    let trunc = CmpTruncation::default();
    let ch = config.effect_chol()?;

    // unique covariate names in first-use order
    let mut names: Vec<String> = Vec::new();
    for covs in &spec.covariates {
        for c in covs {
            if !names.contains(c) {
                names.push(c.clone());
            }
        }
    }
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(names.len());
    for (ci, _) in names.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(config.seed, STREAM_COVARIATE, ci as u64));
        let col: Vec<f64> = (0..n)
            .map(|_| match config.covariate_law {
                CovariateLaw::StandardNormal => StandardNormal.sample(&mut rng),
                CovariateLaw::Binary => {
                    if rng.random::<bool>() {
                        1.0
                    } else {
                        0.0
                    }
                }
                CovariateLaw::Constant => 1.0,
            })
            .collect();
        columns.push(col);
    }
    let col_index = |name: &str| names.iter().position(|n| n == name).unwrap();

    let x: Vec<DMatrix<f64>> = (0..k)
        .map(|r| {
            DMatrix::from_fn(n, spec.p(r), |i, j| {
                if j == 0 {
                    1.0
                } else {
                    columns[col_index(&spec.covariates[r][j - 1])][i]
                }
            })
        })
        .collect();

    let mut y = DMatrix::zeros(n, k);
    let mut cmp_warm = vec![f64::NAN; k];
    for i in 0..n {
        let mut rng_b =
            ChaCha8Rng::seed_from_u64(child_seed(config.seed, STREAM_EFFECT, i as u64));
        let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng_b)).collect();
        let b = ch.factor().mul_vec(&z);
        for r in 0..k {
            let mut eta = b[r];
            for j in 0..spec.p(r) {
                eta += x[r][(i, j)] * config.beta[r][j];
            }
            let mu = eta.exp();
            let mut rng_y = ChaCha8Rng::seed_from_u64(child_seed(
                config.seed,
                STREAM_RESPONSE,
                (i * k + r) as u64,
            ));
            y[(i, r)] = draw_count(
                spec.family,
                mu,
                config.disp.get(r).copied(),
                &trunc,
                &mut cmp_warm[r],
                &mut rng_y,
            )?;
        }
    }

    Dataset::new(
        (0..n).map(|i| format!("s{i}")).collect(),
        y,
        x,
        spec.responses.clone(),
        spec.covariates.clone(),
    )
}

/// Physicists' Gauss–Hermite rule (weight e^{−x²}) by Golub–Welsch.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        j[(i - 1, i)] = b;
        j[(i, i - 1)] = b;
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (
                eig.eigenvalues[i],
                std::f64::consts::PI.sqrt() * v0 * v0,
            )
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

const GH_NODES: usize = 50;

/// E[g(b)] over b ~ N(0, σ²) with a 50-node rule.
fn expect_1d(sigma: f64, mut g: impl FnMut(f64) -> f64) -> f64 {
    let (nodes, weights) = gauss_hermite(GH_NODES);
    let norm = std::f64::consts::PI.sqrt();
    let mut terms: Vec<f64> = nodes
        .iter()
        .zip(&weights)
        .map(|(&x, &w)| w / norm * g(std::f64::consts::SQRT_2 * sigma * x))
        .collect();
    canonical_sum(&mut terms)
}

/// E[g(b_r, b_s)] over the bivariate normal block with sds and correlation.
fn expect_2d(sd_r: f64, sd_s: f64, rho: f64, mut g: impl FnMut(f64, f64) -> f64) -> f64 {
    let (nodes, weights) = gauss_hermite(GH_NODES);
    let norm = std::f64::consts::PI;
    // chol of [[σr², ρσrσs], [ρσrσs, σs²]]
    let l11 = sd_r;
    let l21 = rho * sd_s;
    let l22 = sd_s * (1.0 - rho * rho).sqrt();
    let mut terms = Vec::with_capacity(GH_NODES * GH_NODES);
    for (&x1, &w1) in nodes.iter().zip(&weights) {
        for (&x2, &w2) in nodes.iter().zip(&weights) {
            let z1 = std::f64::consts::SQRT_2 * x1;
            let z2 = std::f64::consts::SQRT_2 * x2;
            terms.push(w1 * w2 / norm * g(l11 * z1, l21 * z1 + l22 * z2));
        }
    }
    canonical_sum(&mut terms)
}

/// Conditional variance of one observation given its mean.
fn family_cond_var(family: Family, mu: f64, disp: Option<f64>, trunc: &CmpTruncation) -> f64 {
    match family {
        Family::Poisson => mu,
        Family::Nb2 => {
            let phi = disp.unwrap();
            mu + mu * mu / phi
        }
        Family::Cmp => cmp_mean_variance(mu, disp.unwrap(), trunc)
            .map(|(_, v)| v)
            .unwrap_or(f64::NAN),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResponseCheck {
    pub response: String,
    pub observed_mean: f64,
    pub target_mean: f64,
    /// Monte-Carlo standard error of the observed mean.
    pub mc_se_mean: f64,
    pub observed_variance: f64,
    pub target_variance: f64,
    pub observed_di: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairCheck {
    pub row: String,
    pub col: String,
    pub observed_cov: f64,
    pub target_cov: f64,
    /// Monte-Carlo standard error of the observed covariance.
    pub mc_se_cov: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimCheckReport {
    pub responses: Vec<ResponseCheck>,
    pub pairs: Vec<PairCheck>,
}

/// Compare dataset moments against semi-analytic targets obtained by
/// integrating the conditional moments over the random-effect distribution
/// with Gauss–Hermite quadrature.
pub fn empirical_check(data: &Dataset, config: &SimConfig) -> Result<SimCheckReport> {
    config.validate()?;
    let spec = &config.spec;
    let k = spec.k();
    let n = data.n_subjects();
    let trunc = CmpTruncation::default();
    let omega = config.corr_target()?;

    // per-subject fixed-effect parts; identical rows are computed once
    let eta_fix = |r: usize, i: usize| -> f64 {
        let mut e = 0.0;
        for j in 0..spec.p(r) {
            e += data.x[r][(i, j)] * config.beta[r][j];
        }
        e
    };
    let uniform_design = (0..k).all(|r| spec.p(r) == 1);

    let mut responses = Vec::with_capacity(k);
    let mut per_subject_mean: Vec<Vec<f64>> = vec![Vec::with_capacity(n); k];
    for r in 0..k {
        let disp = config.disp.get(r).copied();
        let subject_stats = |e0: f64| -> (f64, f64) {
            let mean = expect_1d(config.sd[r], |b| (e0 + b).exp());
            let ex2 = expect_1d(config.sd[r], |b| {
                let mu = (e0 + b).exp();
                family_cond_var(spec.family, mu, disp, &trunc) + mu * mu
            });
            (mean, ex2 - mean * mean)
        };
        let mut means = Vec::with_capacity(n);
        let mut vars = Vec::with_capacity(n);
        if uniform_design {
            let (m, v) = subject_stats(config.beta[r][0]);
            means = vec![m; n];
            vars = vec![v; n];
        } else {
            for i in 0..n {
                let (m, v) = subject_stats(eta_fix(r, i));
                means.push(m);
                vars.push(v);
            }
        }
        // pooled target: mean of means; variance = E[var] + Var(mean)
        let mut m_terms = means.clone();
        let target_mean = canonical_sum(&mut m_terms) / n as f64;
        let mut v_terms = vars.clone();
        let e_var = canonical_sum(&mut v_terms) / n as f64;
        let mut dev: Vec<f64> = means
            .iter()
            .map(|m| (m - target_mean) * (m - target_mean))
            .collect();
        let var_mean = canonical_sum(&mut dev) / n as f64;
        let target_variance = e_var + var_mean;

        let col: Vec<f64> = (0..n).map(|i| data.y[(i, r)]).collect();
        let mut c = col.clone();
        let observed_mean = canonical_sum(&mut c) / n as f64;
        let mut sq: Vec<f64> = col
            .iter()
            .map(|v| (v - observed_mean) * (v - observed_mean))
            .collect();
        let observed_variance = canonical_sum(&mut sq) / (n as f64 - 1.0);
        responses.push(ResponseCheck {
            response: spec.responses[r].clone(),
            observed_mean,
            target_mean,
            mc_se_mean: (target_variance / n as f64).sqrt(),
            observed_variance,
            target_variance,
            observed_di: observed_variance / observed_mean,
        });
        per_subject_mean[r] = means;
    }

    let mut pairs = Vec::new();
    let mut idx = 0;
    for i in 1..k {
        for j in 0..i {
            let rho = omega[(i, j)];
            let cross = |e_i: f64, e_j: f64| -> f64 {
                expect_2d(config.sd[i], config.sd[j], rho, |bi, bj| {
                    ((e_i + bi) + (e_j + bj)).exp()
                })
            };
            // pooled covariance: E[cov_i] + Cov over subjects of the means
            let mut cov_terms = Vec::with_capacity(n);
            if uniform_design {
                let c = cross(config.beta[i][0], config.beta[j][0])
                    - per_subject_mean[i][0] * per_subject_mean[j][0];
                cov_terms = vec![c; n];
            } else {
                for s in 0..n {
                    let c = cross(eta_fix(i, s), eta_fix(j, s))
                        - per_subject_mean[i][s] * per_subject_mean[j][s];
                    cov_terms.push(c);
                }
            }
            let e_cov = canonical_sum(&mut cov_terms.clone()) / n as f64;
            let mi = responses[i].target_mean;
            let mj = responses[j].target_mean;
            let mut cross_dev: Vec<f64> = (0..n)
                .map(|s| (per_subject_mean[i][s] - mi) * (per_subject_mean[j][s] - mj))
                .collect();
            let cov_means = canonical_sum(&mut cross_dev) / n as f64;
            let target_cov = e_cov + cov_means;

            let coli: Vec<f64> = (0..n).map(|s| data.y[(s, i)]).collect();
            let colj: Vec<f64> = (0..n).map(|s| data.y[(s, j)]).collect();
            let oi = responses[i].observed_mean;
            let oj = responses[j].observed_mean;
            let mut prod: Vec<f64> = coli
                .iter()
                .zip(&colj)
                .map(|(a, b)| (a - oi) * (b - oj))
                .collect();
            let observed_cov = canonical_sum(&mut prod) / (n as f64 - 1.0);
            let mc_se_cov = ((responses[i].target_variance * responses[j].target_variance
                + target_cov * target_cov)
                / n as f64)
                .sqrt();
            pairs.push(PairCheck {
                row: spec.responses[i].clone(),
                col: spec.responses[j].clone(),
                observed_cov,
                target_cov,
                mc_se_cov,
            });
            idx += 1;
        }
    }
    let _ = idx;
    Ok(SimCheckReport { responses, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn intercept_only_config(family: Family, k: usize, beta0: f64, sd: f64, n: usize) -> SimConfig {
        let responses: Vec<String> = (0..k).map(|r| format!("y{r}")).collect();
        let covs: Vec<Vec<String>> = (0..k).map(|_| vec![]).collect();
        let spec = ModelSpec::new(family, responses, covs, Variant::Full).unwrap();
        SimConfig {
            spec,
            beta: (0..k).map(|_| vec![beta0]).collect(),
            disp: if family.has_dispersion() {
                vec![1.5; k]
            } else {
                vec![]
            },
            sd: vec![sd; k],
            rho: vec![0.0; n_corr_params(k)],
            n_subjects: n,
            covariate_law: CovariateLaw::StandardNormal,
            seed: 99,
        }
    }

    #[test]
    fn gauss_hermite_integrates_polynomials() {
        // ∫ e^{−x²} dx = √π, ∫ x² e^{−x²} dx = √π/2
        let (nodes, weights) = gauss_hermite(20);
        let total: f64 = weights.iter().sum();
        assert!((total - std::f64::consts::PI.sqrt()).abs() < 1e-12);
        let second: f64 = nodes
            .iter()
            .zip(&weights)
            .map(|(x, w)| w * x * x)
            .sum();
        assert!((second - std::f64::consts::PI.sqrt() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn lognormal_moment_via_quadrature() {
        // E[exp(b)] = exp(σ²/2) for b ~ N(0, σ²)
        for &sigma in &[0.3, 0.8, 1.5] {
            let got = expect_1d(sigma, |b| b.exp());
            let want = (sigma * sigma / 2.0).exp();
            assert!((got - want).abs() < 1e-10 * want, "σ={sigma}");
        }
    }

    #[test]
    fn same_seed_reproduces_dataset_bitwise() {
        let cfg = intercept_only_config(Family::Cmp, 2, 0.5, 0.4, 60);
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        assert_eq!(a.y, b.y);
        for (xa, xb) in a.x.iter().zip(&b.x) {
            assert_eq!(xa, xb);
        }
        let mut cfg2 = cfg.clone();
        cfg2.seed = 100;
        let c = simulate(&cfg2).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn poisson_small_sigma_recovers_intercept_mean() {
        let mut cfg = intercept_only_config(Family::Poisson, 1, 2.0f64.ln(), 1e-6, 1_000_000);
        cfg.seed = 7;
        let data = simulate(&cfg).unwrap();
        let mean = data.y.column(0).sum() / data.n_subjects() as f64;
        assert!((mean - 2.0).abs() < 0.01, "got {mean}");
    }

    #[test]
    fn cmp_underdispersed_truth_shows_di_below_one() {
        let mut cfg = intercept_only_config(Family::Cmp, 1, 0.7, 1e-6, 200_000);
        cfg.disp = vec![2.0];
        cfg.seed = 3;
        let data = simulate(&cfg).unwrap();
        let col: Vec<f64> = data.y.column(0).iter().copied().collect();
        let di = crate::dispersion::di(&col).unwrap();
        assert!(di < 1.0, "expected underdispersion, DI = {di}");
    }

    #[test]
    fn nb2_sample_variance_matches_mean_plus_quadratic() {
        // NB2(μ=2, φ=0.5): variance μ + μ²/φ = 10
        let responses = vec!["y".to_string()];
        let spec = ModelSpec::new(Family::Nb2, responses, vec![vec![]], Variant::Full).unwrap();
        let cfg = SimConfig {
            spec,
            beta: vec![vec![2.0f64.ln()]],
            disp: vec![0.5],
            sd: vec![1e-7],
            rho: vec![],
            n_subjects: 1_000_000,
            covariate_law: CovariateLaw::StandardNormal,
            seed: 11,
        };
        let data = simulate(&cfg).unwrap();
        let col: Vec<f64> = data.y.column(0).iter().copied().collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        let v = col.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / (col.len() as f64 - 1.0);
        // Monte-Carlo error of a variance estimate at N=10^6 is ~1.5%
        assert!((m - 2.0).abs() < 0.02, "mean {m}");
        assert!((v - 10.0).abs() < 0.4, "variance {v}");
    }

    #[test]
    fn cmp_sampler_matches_pmf() {
        let trunc = CmpTruncation::default();
        let dist = CmpDist::new(2.0, 1.5, &trunc).unwrap();
        let n = 1_000_000usize;
        let mut counts = vec![0u64; 16];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..n {
            let u: f64 = rng.random();
            let y = dist.sample(u) as usize;
            if y < counts.len() {
                counts[y] += 1;
            }
        }
        for j in 0..=15u64 {
            let p = dist.logpmf(j).exp();
            let se = (p * (1.0 - p) / n as f64).sqrt();
            let obs = counts[j as usize] as f64 / n as f64;
            assert!(
                (obs - p).abs() <= 4.0 * se + 1e-9,
                "j={j}: observed {obs}, pmf {p}, se {se}"
            );
        }
    }

    #[test]
    fn empirical_check_poisson_lognormal_moments() {
        let cfg = intercept_only_config(Family::Poisson, 2, 0.4, 0.5, 150_000);
        let data = simulate(&cfg).unwrap();
        let report = empirical_check(&data, &cfg).unwrap();
        for rc in &report.responses {
            // marginal mean of a Poisson-lognormal: exp(β0 + σ²/2)
            let want = (0.4f64 + 0.5 * 0.5 / 2.0).exp();
            assert!((rc.target_mean - want).abs() < 1e-9 * want);
            assert!(
                (rc.observed_mean - rc.target_mean).abs() <= 3.0 * rc.mc_se_mean,
                "{}: observed {} target {} se {}",
                rc.response,
                rc.observed_mean,
                rc.target_mean,
                rc.mc_se_mean
            );
        }
        // independent truth: covariance within noise of zero
        for pc in &report.pairs {
            assert!((pc.target_cov).abs() < 1e-9);
            assert!(pc.observed_cov.abs() <= 3.0 * pc.mc_se_cov);
        }
    }

    #[test]
    fn empirical_check_detects_positive_correlation() {
        let responses: Vec<String> = vec!["a".into(), "b".into()];
        let spec = ModelSpec::new(
            Family::Poisson,
            responses,
            vec![vec![], vec![]],
            Variant::Full,
        )
        .unwrap();
        let cfg = SimConfig {
            spec,
            beta: vec![vec![0.5], vec![0.5]],
            disp: vec![],
            sd: vec![0.6, 0.6],
            rho: vec![0.9],
            n_subjects: 120_000,
            covariate_law: CovariateLaw::StandardNormal,
            seed: 23,
        };
        let data = simulate(&cfg).unwrap();
        let report = empirical_check(&data, &cfg).unwrap();
        let pc = &report.pairs[0];
        assert!(pc.target_cov > 0.0);
        assert!(pc.observed_cov > 0.0);
        assert!((pc.observed_cov - pc.target_cov).abs() <= 3.0 * pc.mc_se_cov);
    }
}
