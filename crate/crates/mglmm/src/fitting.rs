//! Initialization, the staged outer optimization pipeline, and post-fit
//! inference (observed information, SEs, AIC/BIC, the Σ′ report).
//!
//! A fit runs an ordered list of stages. Each stage optimizes the marginal
//! negative log-likelihood on either a seeded random subsample of subjects
//! or the full data, warm-started from the best point found so far; the
//! reported estimate is the stage output with the highest full-data
//! log-likelihood. Two optimizers are available: a box-bounded projected
//! quasi-Newton (the PORT role) and an unbounded dense BFGS with a cubic
//! line search satisfying the strong Wolfe conditions.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::covariance::{corr_entries, sd_entry, SigmaReport};
use crate::diff::{hessian, DiffObjective};
use crate::error::{Error, Result};
use crate::families::CmpTruncation;
use crate::laplace::MarginalObjective;
use crate::linalg::{Cholesky, SquareMat};
use crate::model::{
    aic, bic, ConvergenceTrace, Dataset, FitResult, ModelSpec, NaturalParams, ParamEstimate,
    SlotRole, StageTrace, Theta, ThetaLayout,
};

/// Outer optimizer role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// Box-bounded projected quasi-Newton (the PORT role).
    Port,
    /// Unbounded dense BFGS with a strong-Wolfe cubic line search.
    Bfgs,
}

impl Algorithm {
    pub fn label(self) -> &'static str {
        match self {
            Algorithm::Port => "port",
            Algorithm::Bfgs => "bfgs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "port" => Ok(Algorithm::Port),
            "bfgs" => Ok(Algorithm::Bfgs),
            other => Err(Error::Config(format!("unknown algorithm '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OptimOptions {
    pub grad_tol: f64,
    pub f_rel_tol: f64,
    pub max_iters: usize,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            grad_tol: 1e-6,
            f_rel_tol: 1e-10,
            max_iters: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradTol,
    FTol,
    MaxIters,
    LineSearchFailed,
}

impl Termination {
    pub fn label(self) -> &'static str {
        match self {
            Termination::GradTol => "gradient_tolerance",
            Termination::FTol => "objective_tolerance",
            Termination::MaxIters => "max_iterations",
            Termination::LineSearchFailed => "line_search_failed",
        }
    }
}

/// Componentwise box on the unconstrained scale.
#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| v.clamp(self.lower[i], self.upper[i]))
            .collect()
    }

    fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(i, &v)| v >= self.lower[i] && v <= self.upper[i])
    }
}

/// Default box half-widths per slot role; wide enough for any plausible
/// estimate, tight enough to keep the CMP truncation budget finite.
#[derive(Debug, Clone, Copy)]
pub struct BoundSettings {
    pub beta_abs: f64,
    pub log_disp_min: f64,
    pub log_disp_max: f64,
    pub log_sd_min: f64,
    pub log_sd_max: f64,
    pub rho_abs: f64,
}

impl Default for BoundSettings {
    fn default() -> Self {
        BoundSettings {
            beta_abs: 30.0,
            log_disp_min: 1e-4f64.ln(),
            log_disp_max: 1e6f64.ln(),
            log_sd_min: 1e-3f64.ln(),
            log_sd_max: 1e2f64.ln(),
            rho_abs: 30.0,
        }
    }
}

impl BoundSettings {
    pub fn bounds_for(&self, layout: &ThetaLayout) -> Bounds {
        let mut lower = Vec::with_capacity(layout.np());
        let mut upper = Vec::with_capacity(layout.np());
        for f in 0..layout.np() {
            let slot = &layout.slots[layout.slot_of_free(f)];
            let (lo, hi) = match slot.role {
                SlotRole::Beta { .. } => (-self.beta_abs, self.beta_abs),
                SlotRole::LogDisp { .. } => (self.log_disp_min, self.log_disp_max),
                SlotRole::LogSd { .. } | SlotRole::LogSdShared => {
                    (self.log_sd_min, self.log_sd_max)
                }
                SlotRole::RhoRaw { .. } => (-self.rho_abs, self.rho_abs),
            };
            lower.push(lo);
            upper.push(hi);
        }
        Bounds { lower, upper }
    }
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub n_evals: usize,
    pub termination: Termination,
}

fn linf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// First-order quasi-Newton minimization. Terminates when the (projected)
/// gradient ∞-norm drops below `grad_tol`, the relative objective change
/// drops below `f_rel_tol`, or `max_iters` is reached; a failed line search
/// returns the best point seen with the failure recorded.
pub fn optimize(
    obj: &mut dyn DiffObjective,
    x0: &[f64],
    bounds: Option<&Bounds>,
    algorithm: Algorithm,
    opts: &OptimOptions,
) -> Result<OptimOutcome> {
    match algorithm {
        Algorithm::Bfgs => bfgs(obj, x0, opts),
        Algorithm::Port => {
            let owned;
            let b = match bounds {
                Some(b) => b,
                None => {
                    owned = Bounds {
                        lower: vec![f64::NEG_INFINITY; x0.len()],
                        upper: vec![f64::INFINITY; x0.len()],
                    };
                    &owned
                }
            };
            projected_quasi_newton(obj, x0, b, opts)
        }
    }
}

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;

struct LineSearchResult {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

/// Strong-Wolfe line search: bracketing with doubling steps, then zoom by
/// guarded cubic interpolation.
fn wolfe_search(
    obj: &mut dyn DiffObjective,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    evals: &mut usize,
) -> Option<LineSearchResult> {
    let dphi0 = dot(g0, d);
    if dphi0 >= 0.0 {
        return None;
    }

    fn eval_at(
        obj: &mut dyn DiffObjective,
        x: &[f64],
        d: &[f64],
        alpha: f64,
        evals: &mut usize,
    ) -> (Vec<f64>, f64, Vec<f64>) {
        let xt: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
        let (f, g) = obj.value_grad(&xt);
        *evals += 1;
        (xt, f, g)
    }

    // minimizer of the cubic through (flo, dlo) at alo and fhi at ahi,
    // guarded into the middle 80% of the interval
    fn cubic(alo: f64, flo: f64, dlo: f64, ahi: f64, fhi: f64) -> f64 {
        let h = ahi - alo;
        let a = (fhi - flo - dlo * h) / (h * h);
        let cand = if a.abs() > 1e-12 && fhi.is_finite() {
            alo - dlo / (2.0 * a)
        } else {
            alo + 0.5 * h
        };
        let lo = alo.min(ahi);
        let hi = alo.max(ahi);
        let pad = 0.1 * (hi - lo);
        if cand.is_finite() {
            cand.clamp(lo + pad, hi - pad)
        } else {
            0.5 * (lo + hi)
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn zoom(
        obj: &mut dyn DiffObjective,
        x: &[f64],
        d: &[f64],
        f0: f64,
        dphi0: f64,
        mut alo: f64,
        mut flo: f64,
        mut dlo: f64,
        mut ahi: f64,
        mut fhi: f64,
        evals: &mut usize,
    ) -> Option<LineSearchResult> {
        let mut best: Option<LineSearchResult> = None;
        for _ in 0..25 {
            let alpha = cubic(alo, flo, dlo, ahi, fhi);
            let (xt, f, g) = eval_at(obj, x, d, alpha, evals);
            if !f.is_finite() || f > f0 + WOLFE_C1 * alpha * dphi0 || f >= flo {
                ahi = alpha;
                fhi = if f.is_finite() { f } else { f64::MAX };
            } else {
                let dphi = dot(&g, d);
                let candidate = LineSearchResult { x: xt, f, g };
                if dphi.abs() <= -WOLFE_C2 * dphi0 {
                    return Some(candidate);
                }
                best = Some(candidate);
                if dphi * (ahi - alo) >= 0.0 {
                    ahi = alo;
                    fhi = flo;
                }
                alo = alpha;
                flo = f;
                dlo = dphi;
            }
            if (ahi - alo).abs() < 1e-14 * alo.abs().max(1.0) {
                break;
            }
        }
        best
    }

    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut d_prev = dphi0;
    let mut alpha = 1.0;
    for i in 0..12 {
        let (xt, f, g) = eval_at(obj, x, d, alpha, evals);
        if !f.is_finite() || f > f0 + WOLFE_C1 * alpha * dphi0 || (i > 0 && f >= f_prev) {
            let fhi = if f.is_finite() { f } else { f64::MAX };
            return zoom(
                obj, x, d, f0, dphi0, alpha_prev, f_prev, d_prev, alpha, fhi, evals,
            );
        }
        let dphi = dot(&g, d);
        if dphi.abs() <= -WOLFE_C2 * dphi0 {
            return Some(LineSearchResult { x: xt, f, g });
        }
        if dphi >= 0.0 {
            return zoom(
                obj, x, d, f0, dphi0, alpha, f, dphi, alpha_prev, f_prev, evals,
            );
        }
        alpha_prev = alpha;
        f_prev = f;
        d_prev = dphi;
        alpha = (2.0 * alpha).min(1e3);
    }
    None
}

fn bfgs_update(h: &mut SquareMat<f64>, s: &[f64], y: &[f64]) {
    let n = s.len();
    let sy = dot(s, y);
    if !(sy > 1e-10 * linf(s) * linf(y)) {
        return; // curvature condition failed: skip the update
    }
    let rho = 1.0 / sy;
    let hy = h.mul_vec(y);
    let yhy = dot(y, &hy);
    // H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
    for i in 0..n {
        for j in 0..n {
            h[(i, j)] += -rho * (s[i] * hy[j] + hy[i] * s[j])
                + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

fn scale_initial_hessian(h: &mut SquareMat<f64>, s: &[f64], y: &[f64]) {
    let sy = dot(s, y);
    let yy = dot(y, y);
    if sy > 0.0 && yy > 0.0 {
        let gamma = sy / yy;
        for i in 0..s.len() {
            h[(i, i)] = gamma;
        }
    }
}

fn bfgs(obj: &mut dyn DiffObjective, x0: &[f64], opts: &OptimOptions) -> Result<OptimOutcome> {
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut f, mut g) = obj.value_grad(&x);
    let mut n_evals = 1;
    if !f.is_finite() {
        return Err(Error::Numerical(
            "objective is not finite at the starting point".into(),
        ));
    }
    let mut h = SquareMat::<f64>::identity(n);
    let mut first = true;
    let mut best = (x.clone(), f, g.clone());
    let mut termination = Termination::MaxIters;
    let mut iters = 0;
    while iters < opts.max_iters {
        if linf(&g) < opts.grad_tol {
            termination = Termination::GradTol;
            break;
        }
        let mut d: Vec<f64> = h.mul_vec(&g).iter().map(|v| -v).collect();
        if dot(&d, &g) >= 0.0 {
            h = SquareMat::identity(n);
            d = g.iter().map(|v| -v).collect();
        }
        let Some(ls) = wolfe_search(obj, &x, f, &g, &d, &mut n_evals) else {
            termination = Termination::LineSearchFailed;
            break;
        };
        let s: Vec<f64> = ls.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = ls.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        if first {
            scale_initial_hessian(&mut h, &s, &yv);
            first = false;
        }
        bfgs_update(&mut h, &s, &yv);
        let f_old = f;
        x = ls.x;
        f = ls.f;
        g = ls.g;
        iters += 1;
        if f < best.1 {
            best = (x.clone(), f, g.clone());
        }
        if (f_old - f).abs() < opts.f_rel_tol * f_old.abs().max(1.0) {
            termination = Termination::FTol;
            break;
        }
    }
    if f > best.1 {
        (x, f, g) = best;
    }
    Ok(OptimOutcome {
        x,
        value: f,
        grad: g,
        iterations: iters,
        n_evals,
        termination,
    })
}

fn projected_quasi_newton(
    obj: &mut dyn DiffObjective,
    x0: &[f64],
    bounds: &Bounds,
    opts: &OptimOptions,
) -> Result<OptimOutcome> {
    let n = x0.len();
    let mut x = bounds.clamp(x0);
    let (mut f, mut g) = obj.value_grad(&x);
    let mut n_evals = 1;
    if !f.is_finite() {
        return Err(Error::Numerical(
            "objective is not finite at the starting point".into(),
        ));
    }
    let proj_grad_norm = |x: &[f64], g: &[f64]| -> f64 {
        let stepped: Vec<f64> = x.iter().zip(g).map(|(xi, gi)| xi - gi).collect();
        let proj = bounds.clamp(&stepped);
        proj.iter()
            .zip(x)
            .fold(0.0f64, |m, (p, xi)| m.max((p - xi).abs()))
    };
    let mut h = SquareMat::<f64>::identity(n);
    let mut first = true;
    let mut best = (x.clone(), f, g.clone());
    let mut termination = Termination::MaxIters;
    let mut iters = 0;
    while iters < opts.max_iters {
        if proj_grad_norm(&x, &g) < opts.grad_tol {
            termination = Termination::GradTol;
            break;
        }
        let mut d: Vec<f64> = h.mul_vec(&g).iter().map(|v| -v).collect();
        if dot(&d, &g) >= 0.0 {
            h = SquareMat::identity(n);
            d = g.iter().map(|v| -v).collect();
        }
        // backtracking Armijo along the projected path
        let mut alpha = 1.0;
        let mut accepted: Option<Vec<f64>> = None;
        for _ in 0..60 {
            let cand: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            let xt = bounds.clamp(&cand);
            let step: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
            if linf(&step) < 1e-15 * linf(&x).max(1.0) {
                break;
            }
            let ft = obj.value(&xt);
            n_evals += 1;
            if ft.is_finite() && ft <= f + WOLFE_C1 * dot(&g, &step) {
                accepted = Some(xt);
                break;
            }
            alpha *= 0.5;
        }
        let Some(xt) = accepted else {
            termination = Termination::LineSearchFailed;
            break;
        };
        let (ft, gt) = obj.value_grad(&xt);
        n_evals += 1;
        if !ft.is_finite() {
            termination = Termination::LineSearchFailed;
            break;
        }
        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        if first {
            scale_initial_hessian(&mut h, &s, &yv);
            first = false;
        }
        bfgs_update(&mut h, &s, &yv);
        let f_old = f;
        x = xt;
        f = ft;
        g = gt;
        iters += 1;
        if f < best.1 {
            best = (x.clone(), f, g.clone());
        }
        if (f_old - f).abs() < opts.f_rel_tol * f_old.abs().max(1.0) {
            termination = Termination::FTol;
            break;
        }
    }
    if f > best.1 {
        (x, f, g) = best;
    }
    Ok(OptimOutcome {
        x,
        value: f,
        grad: g,
        iterations: iters,
        n_evals,
        termination,
    })
}

/// Floor for the residual-based random-effect sd initialization.
const SD_INIT_FLOOR: f64 = 0.05;

/// Univariate Poisson IRLS (no random effect) for one response.
fn poisson_irls(x: &nalgebra::DMatrix<f64>, y: &[f64]) -> Result<Vec<f64>> {
    let n = x.nrows();
    let p = x.ncols();
    let ybar = y.iter().sum::<f64>() / n as f64;
    let mut mu: Vec<f64> = y.iter().map(|&yi| ((yi + ybar) * 0.5).max(0.1)).collect();
    let mut eta: Vec<f64> = mu.iter().map(|m| m.ln()).collect();
    let mut beta = vec![0.0; p];
    for _ in 0..50 {
        let mut xtwx = nalgebra::DMatrix::<f64>::zeros(p, p);
        let mut xtwz = nalgebra::DVector::<f64>::zeros(p);
        for i in 0..n {
            let w = mu[i];
            let z = eta[i] + (y[i] - mu[i]) / mu[i];
            for a in 0..p {
                let xa = x[(i, a)];
                xtwz[a] += w * xa * z;
                for b in 0..p {
                    xtwx[(a, b)] += w * xa * x[(i, b)];
                }
            }
        }
        let chol = nalgebra::Cholesky::new(xtwx)
            .ok_or_else(|| Error::Numerical("singular weighted design in Poisson IRLS".into()))?;
        let new_beta = chol.solve(&xtwz);
        let delta = (0..p)
            .map(|j| (new_beta[j] - beta[j]).abs())
            .fold(0.0f64, f64::max);
        beta = new_beta.iter().copied().collect();
        for i in 0..n {
            let mut e = 0.0;
            for j in 0..p {
                e += x[(i, j)] * beta[j];
            }
            if e > 30.0 || !e.is_finite() {
                return Err(Error::Numerical("diverging Poisson IRLS".into()));
            }
            eta[i] = e;
            mu[i] = e.exp();
        }
        if delta < 1e-10 {
            return Ok(beta);
        }
    }
    Ok(beta)
}

/// Initial values: per-response univariate Poisson fits for β, the standard
/// deviation of the working residuals (floored at 0.05) for the
/// random-effect sd, unit dispersions and zero correlations. A warm-start
/// fit overrides the shared slots (β, sd, ϱ) by name; dispersions always
/// restart at their family defaults.
pub fn initial_values(
    data: &Dataset,
    spec: &ModelSpec,
    warm_start_from: Option<&FitResult>,
) -> Result<Theta> {
    let layout = Arc::new(ThetaLayout::new(spec));
    let k = spec.k();
    let n = data.n_subjects();
    let mut beta: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut log_sds = Vec::with_capacity(k);
    for r in 0..k {
        let y: Vec<f64> = (0..n).map(|i| data.y[(i, r)]).collect();
        let ybar = y.iter().sum::<f64>() / n as f64;
        let fallback = {
            let mut b = vec![0.0; spec.p(r)];
            b[0] = ybar.max(1e-2).ln();
            b
        };
        let b = poisson_irls(&data.x[r], &y).unwrap_or(fallback);
        // working residuals (y − μ)/μ on the log link
        let mut resid = Vec::with_capacity(n);
        for i in 0..n {
            let mut eta = 0.0;
            for j in 0..spec.p(r) {
                eta += data.x[r][(i, j)] * b[j];
            }
            let mu = eta.exp().max(1e-10);
            resid.push((y[i] - mu) / mu);
        }
        let mean = resid.iter().sum::<f64>() / n as f64;
        let var = resid.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n as f64 - 1.0);
        log_sds.push(var.sqrt().max(SD_INIT_FLOOR).ln());
        beta.push(b);
    }
    let sd: Vec<f64> = match spec.variant {
        crate::model::Variant::CommonVariance => {
            let shared = log_sds.iter().sum::<f64>() / k as f64;
            vec![shared.exp(); k]
        }
        _ => log_sds.iter().map(|s| s.exp()).collect(),
    };
    let nat = NaturalParams {
        beta,
        disp: if spec.family.has_dispersion() {
            vec![1.0; k]
        } else {
            Vec::new()
        },
        sd,
        rho_raw: vec![0.0; crate::covariance::n_corr_params(k)],
    };
    let mut theta = Theta::pack(layout.clone(), &nat)?;
    if let Some(prev) = warm_start_from {
        for (i, slot) in layout.slots.iter().enumerate() {
            if matches!(slot.role, SlotRole::LogDisp { .. }) {
                continue; // dispersions restart at their family defaults
            }
            if let Some(old) = prev.params.iter().find(|p| p.name == slot.name) {
                theta.set_slot(i, old.unconstrained);
            }
        }
    }
    Ok(theta)
}

/// Where a stage evaluates its objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataScope {
    /// Seeded simple random sample of subjects, without replacement.
    Subsample { size: usize },
    Full,
}

#[derive(Debug, Clone, Copy)]
pub struct Stage {
    pub scope: DataScope,
    pub algorithm: Algorithm,
}

/// The staged estimation plan: a subsample stage followed by full-data
/// PORT → BFGS → PORT by default, with one seed driving the subsample draw.
#[derive(Debug, Clone)]
pub struct FitPlan {
    pub stages: Vec<Stage>,
    pub seed: u64,
    pub optim: OptimOptions,
    pub bound_settings: BoundSettings,
    pub trunc: CmpTruncation,
    pub warm_start_from: Option<FitResult>,
}

pub const DEFAULT_SUBSAMPLE: usize = 350;

impl FitPlan {
    pub fn default_plan(seed: u64) -> Self {
        FitPlan {
            stages: vec![
                Stage {
                    scope: DataScope::Subsample {
                        size: DEFAULT_SUBSAMPLE,
                    },
                    algorithm: Algorithm::Port,
                },
                Stage {
                    scope: DataScope::Full,
                    algorithm: Algorithm::Port,
                },
                Stage {
                    scope: DataScope::Full,
                    algorithm: Algorithm::Bfgs,
                },
                Stage {
                    scope: DataScope::Full,
                    algorithm: Algorithm::Port,
                },
            ],
            seed,
            optim: OptimOptions::default(),
            bound_settings: BoundSettings::default(),
            trunc: CmpTruncation::default(),
            warm_start_from: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config(
                "fit plan must contain at least one stage".into(),
            ));
        }
        if !matches!(self.stages.last().unwrap().scope, DataScope::Full) {
            return Err(Error::Config(
                "the last fit stage must run on the full data".into(),
            ));
        }
        Ok(())
    }
}

/// Seeded SRS of subject indices, returned in ascending order.
fn srs_indices(n: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut chosen: Vec<usize> = idx.into_iter().take(size).collect();
    chosen.sort_unstable();
    chosen
}

/// Executes the staged pipeline and assembles the full report. Each stage
/// starts from the best point so far (by full-data log-likelihood); the
/// reported fit is the best stage output.
pub fn staged_fit(data: &Dataset, spec: &ModelSpec, plan: &FitPlan) -> Result<FitResult> {
    plan.validate()?;
    plan.trunc.validate()?;
    let layout = Arc::new(ThetaLayout::new(spec));
    let theta0 = initial_values(data, spec, plan.warm_start_from.as_ref())?;
    let bounds = plan.bound_settings.bounds_for(&layout);

    let mut full_obj = MarginalObjective::new(data, layout.clone(), plan.trunc);
    let mut best_free = theta0.free();
    let mut best_full_nll = full_obj.value_at(&best_free);

    // the subsample is drawn once per size and shared across stages
    let mut sub_cache: Option<(usize, Dataset)> = None;
    let mut stages = Vec::with_capacity(plan.stages.len());
    for stage in &plan.stages {
        let (scope_label, scope_data): (String, Option<&Dataset>) = match stage.scope {
            DataScope::Full => ("full".into(), None),
            DataScope::Subsample { size } => {
                if size >= data.n_subjects() {
                    log::warn!(
                        "subsample size {size} >= {} subjects; stage degrades to the full data",
                        data.n_subjects()
                    );
                    ("full(degraded_subsample)".into(), None)
                } else {
                    let need_draw = !matches!(&sub_cache, Some((s, _)) if *s == size);
                    if need_draw {
                        let idx = srs_indices(data.n_subjects(), size, plan.seed);
                        sub_cache = Some((size, data.subset(&idx)));
                    }
                    (
                        format!("subsample({size})"),
                        Some(&sub_cache.as_ref().unwrap().1),
                    )
                }
            }
        };

        let outcome = match scope_data {
            Some(sub) => {
                let mut obj = MarginalObjective::new(sub, layout.clone(), plan.trunc);
                optimize(
                    &mut obj,
                    &best_free,
                    Some(&bounds),
                    stage.algorithm,
                    &plan.optim,
                )
            }
            None => optimize(
                &mut full_obj,
                &best_free,
                Some(&bounds),
                stage.algorithm,
                &plan.optim,
            ),
        };

        match outcome {
            Ok(out) => {
                let full_nll = full_obj.value_at(&out.x);
                let accepted = full_nll.is_finite() && full_nll < best_full_nll;
                if accepted {
                    best_full_nll = full_nll;
                    best_free = out.x.clone();
                }
                stages.push(StageTrace {
                    scope: scope_label,
                    algorithm: stage.algorithm.label().into(),
                    iterations: out.iterations,
                    n_evaluations: out.n_evals,
                    objective: out.value,
                    grad_norm: linf(&out.grad),
                    termination: out.termination.label().into(),
                    full_nll,
                    accepted,
                });
            }
            Err(e) => {
                stages.push(StageTrace {
                    scope: scope_label,
                    algorithm: stage.algorithm.label().into(),
                    iterations: 0,
                    n_evaluations: 0,
                    objective: f64::NAN,
                    grad_norm: f64::NAN,
                    termination: format!("error: {e}"),
                    full_nll: f64::NAN,
                    accepted: false,
                });
            }
        }
    }

    if !best_full_nll.is_finite() {
        return Err(Error::Numerical(format!(
            "every fit stage failed; stage terminations: [{}]",
            stages
                .iter()
                .map(|s| s.termination.clone())
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    let selected = stages
        .iter()
        .enumerate()
        .filter(|(_, s)| s.full_nll.is_finite())
        .min_by(|a, b| a.1.full_nll.partial_cmp(&b.1.full_nll).unwrap())
        .map(|(i, _)| i);

    let (_, grad) = full_obj.value_grad(&best_free);
    let grad_norm = linf(&grad);
    let trace = ConvergenceTrace {
        stages,
        selected_stage: selected,
        converged: grad_norm < plan.optim.grad_tol,
        grad_norm,
    };
    let theta_hat = theta0.with_free(&best_free);
    finalize_fit(
        &theta_hat,
        data,
        &mut full_obj,
        best_full_nll,
        trace,
        plan.seed,
    )
}

/// Observed-information covariance: Hessian of the objective by central
/// differences of the exact gradient, inverted through its Cholesky factor.
fn observed_vcov(obj: &mut dyn DiffObjective, x: &[f64]) -> Option<SquareMat<f64>> {
    let h = hessian(obj, x);
    Cholesky::new(&h).map(|ch| ch.inverse())
}

fn finalize_fit(
    theta_hat: &Theta,
    data: &Dataset,
    full_obj: &mut MarginalObjective,
    full_nll: f64,
    trace: ConvergenceTrace,
    seed: u64,
) -> Result<FitResult> {
    let layout = theta_hat.layout().clone();
    let spec = &layout.spec;
    let free = theta_hat.free();
    let vcov = observed_vcov(full_obj, &free);

    let np = layout.np();
    let se_free: Vec<Option<f64>> = match &vcov {
        Some(v) => (0..np)
            .map(|i| {
                let d = v[(i, i)];
                if d > 0.0 && d.is_finite() {
                    Some(d.sqrt())
                } else {
                    None
                }
            })
            .collect(),
        None => vec![None; np],
    };

    let mut params = Vec::with_capacity(layout.n_slots());
    for (i, slot) in layout.slots.iter().enumerate() {
        let unconstrained = theta_hat.values()[i];
        let se_unc = layout.free_index(i).and_then(|f| se_free[f]);
        let (natural, se) = match slot.role {
            SlotRole::LogDisp { .. } | SlotRole::LogSd { .. } | SlotRole::LogSdShared => {
                let nat = unconstrained.exp();
                (nat, se_unc.map(|s| nat * s))
            }
            _ => (unconstrained, se_unc),
        };
        params.push(ParamEstimate {
            name: slot.name.clone(),
            role: slot.role,
            unconstrained,
            natural,
            se,
            se_available: se.is_some(),
            frozen: slot.frozen.is_some(),
        });
    }

    let sigma = sigma_report(theta_hat, vcov.as_ref());
    let loglik = -full_nll;
    let n_subjects = data.n_subjects();
    Ok(FitResult {
        family: spec.family,
        variant: spec.variant,
        responses: spec.responses.clone(),
        theta: theta_hat.values().to_vec(),
        params,
        vcov: vcov.map(|v| {
            (0..np)
                .map(|i| (0..np).map(|j| v[(i, j)]).collect())
                .collect()
        }),
        loglik,
        aic: aic(loglik, np),
        bic: bic(loglik, np, n_subjects),
        np,
        n_subjects,
        converged: trace.converged,
        trace,
        sigma,
        seed,
    })
}

/// Post-fit inference at a given θ̂ without re-optimizing: observed
/// information, SEs, information criteria and the Σ′ report.
pub fn post_fit(theta_hat: &Theta, data: &Dataset, plan: &FitPlan) -> Result<FitResult> {
    let layout = theta_hat.layout().clone();
    let mut obj = MarginalObjective::new(data, layout, plan.trunc);
    let free = theta_hat.free();
    let (nll, grad) = obj.value_grad(&free);
    if !nll.is_finite() {
        return Err(Error::Numerical(
            "objective is not finite at the supplied estimate".into(),
        ));
    }
    let grad_norm = linf(&grad);
    let trace = ConvergenceTrace {
        stages: Vec::new(),
        selected_stage: None,
        converged: grad_norm < plan.optim.grad_tol,
        grad_norm,
    };
    finalize_fit(theta_hat, data, &mut obj, nll, trace, plan.seed)
}

/// Natural-scale Σ′ report: sd and correlation estimates with delta-method
/// SEs pulled from the matching blocks of the parameter covariance.
pub fn sigma_report(theta: &Theta, vcov: Option<&SquareMat<f64>>) -> SigmaReport {
    let layout = theta.layout();
    let spec = &layout.spec;
    let k = spec.k();
    let values = theta.values();

    let se_of_slot = |slot: usize| -> Option<f64> {
        let f = layout.free_index(slot)?;
        let v = vcov?;
        let d = v[(f, f)];
        if d > 0.0 && d.is_finite() {
            Some(d.sqrt())
        } else {
            None
        }
    };

    let mut sd = Vec::with_capacity(k);
    for r in 0..k {
        let slot = layout
            .slots
            .iter()
            .position(|s| match s.role {
                SlotRole::LogSd { response } => response == r,
                SlotRole::LogSdShared => true,
                _ => false,
            })
            .expect("layout always carries an sd slot");
        sd.push(sd_entry(&spec.responses[r], values[slot], se_of_slot(slot)));
    }

    // ϱ block of the covariance, in RhoRaw index order
    let rho_slots: Vec<usize> = (0..layout.n_slots())
        .filter(|&i| matches!(layout.slots[i].role, SlotRole::RhoRaw { .. }))
        .collect();
    let rho_raw: Vec<f64> = rho_slots.iter().map(|&i| values[i]).collect();
    let rho_vcov: Option<SquareMat<f64>> = vcov.and_then(|v| {
        let frees: Option<Vec<usize>> = rho_slots.iter().map(|&i| layout.free_index(i)).collect();
        frees.map(|frees| SquareMat::from_fn(frees.len(), |a, b| v[(frees[a], frees[b])]))
    });
    let corr = corr_entries(&spec.responses, &rho_raw, rho_vcov.as_ref());
    SigmaReport { sd, corr }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::Family;
    use crate::model::Variant;
    use nalgebra::DMatrix;

    struct Quadratic {
        a: SquareMat<f64>,
        c: Vec<f64>,
    }

    impl DiffObjective for Quadratic {
        fn dim(&self) -> usize {
            self.c.len()
        }
        fn value(&mut self, x: &[f64]) -> f64 {
            let d: Vec<f64> = x.iter().zip(&self.c).map(|(a, b)| a - b).collect();
            let ad = self.a.mul_vec(&d);
            0.5 * dot(&d, &ad)
        }
        fn value_grad(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
            let d: Vec<f64> = x.iter().zip(&self.c).map(|(a, b)| a - b).collect();
            let ad = self.a.mul_vec(&d);
            (0.5 * dot(&d, &ad), ad)
        }
    }

    struct Rosenbrock;

    impl DiffObjective for Rosenbrock {
        fn dim(&self) -> usize {
            2
        }
        fn value(&mut self, x: &[f64]) -> f64 {
            (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
        }
        fn value_grad(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
            let g = vec![
                -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                200.0 * (x[1] - x[0] * x[0]),
            ];
            (self.value(x), g)
        }
    }

    fn quad3() -> Quadratic {
        let mut a = SquareMat::<f64>::identity(3);
        a[(0, 0)] = 4.0;
        a[(0, 1)] = 1.0;
        a[(1, 0)] = 1.0;
        a[(1, 1)] = 3.0;
        Quadratic {
            a,
            c: vec![1.0, -2.0, 0.5],
        }
    }

    #[test]
    fn both_algorithms_solve_convex_quadratic() {
        let opts = OptimOptions {
            grad_tol: 1e-11,
            f_rel_tol: 1e-14,
            ..OptimOptions::default()
        };
        for alg in [Algorithm::Bfgs, Algorithm::Port] {
            let mut q = quad3();
            let out = optimize(&mut q, &[5.0, 5.0, 5.0], None, alg, &opts).unwrap();
            for (xi, ci) in out.x.iter().zip(&q.c) {
                assert!((xi - ci).abs() < 1e-8, "{alg:?}: {:?}", out.x);
            }
        }
    }

    #[test]
    fn bfgs_solves_rosenbrock_from_standard_start() {
        let out = optimize(
            &mut Rosenbrock,
            &[-1.2, 1.0],
            None,
            Algorithm::Bfgs,
            &OptimOptions::default(),
        )
        .unwrap();
        assert!(
            (out.x[0] - 1.0).abs() < 1e-5 && (out.x[1] - 1.0).abs() < 1e-5,
            "{:?}",
            out.x
        );
    }

    #[test]
    fn port_solves_rosenbrock_within_box() {
        let bounds = Bounds {
            lower: vec![-5.0, -5.0],
            upper: vec![5.0, 5.0],
        };
        let out = optimize(
            &mut Rosenbrock,
            &[-1.2, 1.0],
            Some(&bounds),
            Algorithm::Port,
            &OptimOptions {
                max_iters: 2000,
                ..OptimOptions::default()
            },
        )
        .unwrap();
        assert!(
            (out.x[0] - 1.0).abs() < 1e-5 && (out.x[1] - 1.0).abs() < 1e-5,
            "{:?}",
            out.x
        );
    }

    #[test]
    fn active_bound_is_respected() {
        // unconstrained optimum at c = (1, −2, 0.5); box forces x1 ≥ 0
        let bounds = Bounds {
            lower: vec![-10.0, 0.0, -10.0],
            upper: vec![10.0, 10.0, 10.0],
        };
        let mut q = quad3();
        let out = optimize(
            &mut q,
            &[1.0, 1.0, 1.0],
            Some(&bounds),
            Algorithm::Port,
            &OptimOptions::default(),
        )
        .unwrap();
        assert!(out.x[1].abs() < 1e-8, "{:?}", out.x);
        assert!(bounds.contains(&out.x));
        // KKT at the bound: the raw partial points into the infeasible side
        assert!(out.grad[1] > 0.0);
    }

    #[test]
    fn nonfinite_start_is_an_error() {
        struct Bad;
        impl DiffObjective for Bad {
            fn dim(&self) -> usize {
                1
            }
            fn value(&mut self, _x: &[f64]) -> f64 {
                f64::INFINITY
            }
            fn value_grad(&mut self, _x: &[f64]) -> (f64, Vec<f64>) {
                (f64::INFINITY, vec![f64::NAN])
            }
        }
        for alg in [Algorithm::Bfgs, Algorithm::Port] {
            assert!(optimize(&mut Bad, &[0.0], None, alg, &OptimOptions::default()).is_err());
        }
    }

    #[test]
    fn quadratic_vcov_is_exact_inverse() {
        let mut q = quad3();
        let v = observed_vcov(&mut q, &[0.3, 0.3, 0.3]).unwrap();
        // A⁻¹ for the block [[4,1],[1,3]] ⊕ [1]
        let det = 11.0;
        let want = [
            [3.0 / det, -1.0 / det, 0.0],
            [-1.0 / det, 4.0 / det, 0.0],
            [0.0, 0.0, 1.0],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert!((v[(i, j)] - want[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn intercept_only_poisson_initializes_at_log_mean() {
        let n = 40;
        let y = DMatrix::from_fn(n, 1, |i, _| (i % 5) as f64);
        let x = DMatrix::from_element(n, 1, 1.0);
        let data = Dataset::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            y.clone(),
            vec![x],
            vec!["y".into()],
            vec![vec![]],
        )
        .unwrap();
        let spec =
            ModelSpec::new(Family::Poisson, vec!["y".into()], vec![vec![]], Variant::Full)
                .unwrap();
        let theta = initial_values(&data, &spec, None).unwrap();
        let ybar = y.iter().sum::<f64>() / n as f64;
        assert!((theta.values()[0] - ybar.ln()).abs() < 1e-8);
    }

    #[test]
    fn srs_is_seeded_and_sorted() {
        let a = srs_indices(100, 30, 7);
        let b = srs_indices(100, 30, 7);
        let c = srs_indices(100, 30, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a.len(), 30);
    }

    #[test]
    fn plan_validation() {
        let mut plan = FitPlan::default_plan(1);
        assert!(plan.validate().is_ok());
        plan.stages.clear();
        assert!(plan.validate().is_err());
        plan.stages.push(Stage {
            scope: DataScope::Subsample { size: 10 },
            algorithm: Algorithm::Port,
        });
        assert!(plan.validate().is_err());
    }
}
