//! Per-subject joint log-likelihood, inner Newton maximization over the
//! random effects, and the Laplace-approximated marginal negative
//! log-likelihood summed over subjects.
//!
//! For subject i with random intercept vector b,
//!
//! ```text
//! Q(b) = Σ_r log f(y_ir | μ_ir, disp_r) + log N(b; 0, Σ),  μ_ir = exp(x_irᵀβ_r + b_r)
//! ```
//!
//! and the subject's marginal log-likelihood is approximated by
//! `(k/2) ln 2π − ½ ln|−Q″(b̂)| + Q(b̂)` at the inner mode b̂.
//!
//! The gradient of the total objective in θ is exact: the implicit
//! derivative db̂/dθ = (−Q″)⁻¹ ∂∇Q/∂θ is recovered from a dual-mode
//! evaluation of ∇Q at the mode, and a second dual evaluation of the
//! Laplace expression at (b̂ + ε·db̂, θ + ε) carries every term, including
//! the third-derivative contribution of the log-determinant.

use std::sync::Arc;

use rayon::prelude::*;

use crate::covariance::{build_corr, build_cov};
use crate::diff::DiffObjective;
use crate::error::{Error, Result};
use crate::families::{obs_loglik, CmpTruncation, ObsDerivs};
use crate::linalg::{canonical_sum, Cholesky, SquareMat};
use crate::model::{Dataset, NaturalView, SlotRole, Theta, ThetaLayout};
use crate::scalar::{Dual, Scalar};

pub(crate) const LN_2PI: f64 = 1.8378770664093453;

/// Inner Newton controls. The defaults keep the inner error negligible
/// against the outer 1e-6 stopping rule.
#[derive(Debug, Clone, Copy)]
pub struct InnerOptions {
    pub grad_tol: f64,
    pub max_iters: usize,
    pub max_halvings: usize,
}

impl Default for InnerOptions {
    fn default() -> Self {
        InnerOptions {
            grad_tol: 1e-8,
            max_iters: 100,
            max_halvings: 30,
        }
    }
}

/// Σ-derived quantities shared by every subject at one θ.
#[derive(Debug, Clone)]
pub(crate) struct SigmaCtx<S: Scalar> {
    pub inv: SquareMat<S>,
    pub log_det: S,
}

pub(crate) fn sigma_ctx<S: Scalar>(nat: &NaturalView<S>, k: usize) -> Result<SigmaCtx<S>> {
    let omega = build_corr(&nat.rho_raw, k);
    let sigma = build_cov(&omega, &nat.sd)?;
    let ch = Cholesky::new(&sigma).ok_or_else(|| {
        Error::Numerical("random-effect covariance is not positive definite".into())
    })?;
    Ok(SigmaCtx {
        inv: ch.inverse(),
        log_det: ch.log_det(),
    })
}

/// An inner maximization problem: value, gradient and negated Hessian of a
/// concave objective over the random-effect vector.
pub trait InnerProblem {
    fn dim(&self) -> usize;
    /// Returns (Q, ∇Q, −Q″) at b.
    fn eval(&mut self, b: &[f64]) -> Result<(f64, Vec<f64>, SquareMat<f64>)>;
}

/// The joint per-subject objective Q over b at fixed θ.
pub(crate) struct SubjectProblem<'a, S: Scalar> {
    pub data: &'a Dataset,
    pub subject: usize,
    pub family: crate::families::Family,
    pub nat: &'a NaturalView<S>,
    pub sig: &'a SigmaCtx<S>,
    pub trunc: &'a CmpTruncation,
    /// Per-response solved ln λ (CMP warm starts), updated on every eval.
    pub cmp_t: Vec<f64>,
}

impl<'a, S: Scalar> SubjectProblem<'a, S> {
    pub fn new(
        data: &'a Dataset,
        subject: usize,
        family: crate::families::Family,
        nat: &'a NaturalView<S>,
        sig: &'a SigmaCtx<S>,
        trunc: &'a CmpTruncation,
        cmp_warm: Option<&[f64]>,
    ) -> Self {
        let k = data.k();
        let cmp_t = match cmp_warm {
            Some(w) => w.to_vec(),
            None => vec![f64::NAN; k],
        };
        SubjectProblem {
            data,
            subject,
            family,
            nat,
            sig,
            trunc,
            cmp_t,
        }
    }

    pub fn linear_predictor(&self, r: usize, b_r: S) -> S {
        let x = &self.data.x[r];
        let mut eta = b_r;
        for (j, &beta) in self.nat.beta[r].iter().enumerate() {
            eta += beta * S::from_f64(x[(self.subject, j)]);
        }
        eta
    }

    pub fn observation(&mut self, r: usize, b_r: S) -> Result<ObsDerivs<S>> {
        let eta = self.linear_predictor(r, b_r);
        let warm = if self.cmp_t[r].is_finite() {
            Some(self.cmp_t[r])
        } else {
            None
        };
        let disp = if self.nat.disp.is_empty() {
            None
        } else {
            Some(self.nat.disp[r])
        };
        let od = obs_loglik(
            self.family,
            self.data.y[(self.subject, r)],
            self.data.ln_fact[(self.subject, r)],
            eta,
            disp,
            self.trunc,
            warm,
        )?;
        if od.cmp_t.is_finite() {
            self.cmp_t[r] = od.cmp_t;
        }
        Ok(od)
    }

    /// Q and its b-derivatives in the scalar type S.
    pub fn q_full(&mut self, b: &[S]) -> Result<(S, Vec<S>, Vec<S>)> {
        let k = self.data.k();
        let mut q = S::zero();
        let mut u = Vec::with_capacity(k);
        let mut w = Vec::with_capacity(k);
        for r in 0..k {
            let od = self.observation(r, b[r])?;
            q += od.ll;
            u.push(od.u);
            w.push(od.w);
        }
        let inv_b = self.sig.inv.mul_vec(b);
        let mut quad = S::zero();
        let mut grad = Vec::with_capacity(k);
        for r in 0..k {
            quad += b[r] * inv_b[r];
            grad.push(u[r] - inv_b[r]);
        }
        let half = S::from_f64(0.5);
        q -= half * (S::from_f64(k as f64 * LN_2PI) + self.sig.log_det + quad);
        if !q.all_finite() {
            return Err(Error::Numerical("non-finite joint objective".into()));
        }
        Ok((q, grad, w))
    }
}

impl<'a> InnerProblem for SubjectProblem<'a, f64> {
    fn dim(&self) -> usize {
        self.data.k()
    }

    fn eval(&mut self, b: &[f64]) -> Result<(f64, Vec<f64>, SquareMat<f64>)> {
        let (q, grad, w) = self.q_full(b)?;
        let k = b.len();
        let mut h = self.sig.inv.clone();
        for r in 0..k {
            h[(r, r)] += w[r];
        }
        Ok((q, grad, h))
    }
}

/// Mode of the inner problem with the curvature needed by the Laplace
/// approximation.
#[derive(Debug, Clone)]
pub struct InnerState {
    pub b_hat: Vec<f64>,
    pub q_value: f64,
    /// −Q″(b̂), positive definite at success.
    pub neg_hess: SquareMat<f64>,
    pub chol: Cholesky<f64>,
    pub inner_iters: usize,
    pub grad_norm: f64,
}

fn linf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn chol_with_ridge(h: &SquareMat<f64>) -> Option<(Cholesky<f64>, f64)> {
    if let Some(ch) = Cholesky::new(h) {
        return Some((ch, 0.0));
    }
    let mut ridge = 1e-8;
    for _ in 0..40 {
        let mut hr = h.clone();
        for i in 0..h.n() {
            hr[(i, i)] += ridge;
        }
        if let Some(ch) = Cholesky::new(&hr) {
            return Some((ch, ridge));
        }
        ridge *= 10.0;
    }
    None
}

/// Newton-Raphson maximization of Q with step-halving; Q increases
/// monotonically across accepted steps. After reaching the gradient
/// tolerance the mode is polished with up to two extra full steps so the
/// stationarity identity used by the outer gradient holds to roundoff.
pub fn inner_newton(
    problem: &mut dyn InnerProblem,
    b0: &[f64],
    opts: &InnerOptions,
) -> Result<InnerState> {
    let k = problem.dim();
    assert_eq!(b0.len(), k);
    let mut b = b0.to_vec();
    let (mut q, mut g, mut h) = problem.eval(&b)?;
    let mut iters = 0;
    loop {
        let gnorm = linf(&g);
        if gnorm < opts.grad_tol {
            break;
        }
        if iters >= opts.max_iters {
            return Err(Error::Numerical(format!(
                "inner Newton did not converge in {} iterations (grad norm {gnorm:e})",
                opts.max_iters
            )));
        }
        let (chol, _) = chol_with_ridge(&h)
            .ok_or_else(|| Error::Numerical("inner Hessian factorization failed".into()))?;
        let dir = chol.solve(&g);
        let mut alpha = 1.0;
        let mut accepted = false;
        // near the mode Q improvements fall below f64 resolution; a step that
        // holds Q to roundoff while shrinking the gradient still counts
        let q_floor = q - 1e-12 * q.abs().max(1.0);
        for _ in 0..=opts.max_halvings {
            let b_try: Vec<f64> = b.iter().zip(&dir).map(|(bi, di)| bi + alpha * di).collect();
            if let Ok((q2, g2, h2)) = problem.eval(&b_try) {
                if q2.is_finite() && (q2 > q || (q2 >= q_floor && linf(&g2) < gnorm)) {
                    b = b_try;
                    q = q2;
                    g = g2;
                    h = h2;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(Error::Numerical(format!(
                "inner line search failed at gradient norm {gnorm:e}"
            )));
        }
        iters += 1;
    }
    // polish the mode: full steps while the gradient norm still shrinks
    for _ in 0..2 {
        let gnorm = linf(&g);
        if gnorm == 0.0 {
            break;
        }
        let Some(ch) = Cholesky::new(&h) else { break };
        let dir = ch.solve(&g);
        let b_try: Vec<f64> = b.iter().zip(&dir).map(|(bi, di)| bi + di).collect();
        match problem.eval(&b_try) {
            Ok((q2, g2, h2)) if linf(&g2) < gnorm => {
                b = b_try;
                q = q2;
                g = g2;
                h = h2;
            }
            _ => break,
        }
    }
    let grad_norm = linf(&g);
    let chol = Cholesky::new(&h).ok_or_else(|| {
        Error::Numerical("negated inner Hessian is not positive definite at the mode".into())
    })?;
    Ok(InnerState {
        b_hat: b,
        q_value: q,
        neg_hess: h,
        chol,
        inner_iters: iters,
        grad_norm,
    })
}

/// Laplace approximation of one subject's marginal log-likelihood from a
/// converged inner state: (k/2) ln 2π − ½ ln|−Q″(b̂)| + Q(b̂).
pub fn laplace_value(state: &InnerState) -> f64 {
    let k = state.b_hat.len();
    0.5 * k as f64 * LN_2PI - 0.5 * state.chol.log_det() + state.q_value
}

/// Convenience: Q for one subject at b (used by tests and oracles).
pub fn subject_q(
    b: &[f64],
    data: &Dataset,
    subject: usize,
    theta: &Theta,
    trunc: &CmpTruncation,
) -> Result<f64> {
    let family = theta.layout().spec.family;
    let nat = theta.unpack();
    let sig = sigma_ctx(&nat, data.k())?;
    let mut problem = SubjectProblem::new(data, subject, family, &nat, &sig, trunc, None);
    problem.q_full(b).map(|(q, _, _)| q)
}

/// Convenience: one subject's Laplace log-likelihood at θ (cold start).
pub fn laplace_subject_loglik(
    data: &Dataset,
    subject: usize,
    theta: &Theta,
    trunc: &CmpTruncation,
    opts: &InnerOptions,
) -> Result<InnerState> {
    let family = theta.layout().spec.family;
    let nat = theta.unpack();
    let sig = sigma_ctx(&nat, data.k())?;
    let mut problem = SubjectProblem::new(data, subject, family, &nat, &sig, trunc, None);
    let b0 = vec![0.0; data.k()];
    inner_newton(&mut problem, &b0, opts)
}

/// Per-subject persistent warm starts.
#[derive(Debug, Clone)]
struct SubjectWarm {
    b: Vec<f64>,
    cmp_t: Vec<f64>,
}

/// Per-direction dual context shared by all subjects.
struct DirCtx {
    nat: NaturalView<Dual>,
    sig: SigmaCtx<Dual>,
    /// Responses whose β or dispersion this direction touches.
    hot: Vec<bool>,
}

/// The marginal negative log-likelihood over all subjects, with its exact
/// gradient in the free parameter vector.
///
/// Per-subject reductions are collected in index order and summed in a
/// canonical value order, so results are bitwise independent of the rayon
/// thread count and of subject permutations.
pub struct MarginalObjective<'d> {
    data: &'d Dataset,
    template: Theta,
    trunc: CmpTruncation,
    inner: InnerOptions,
    warm: Vec<SubjectWarm>,
    pub n_evals: usize,
    pub n_grad_evals: usize,
}

impl<'d> MarginalObjective<'d> {
    pub fn new(data: &'d Dataset, layout: Arc<ThetaLayout>, trunc: CmpTruncation) -> Self {
        let k = data.k();
        let warm = vec![
            SubjectWarm {
                b: vec![0.0; k],
                cmp_t: vec![f64::NAN; k],
            };
            data.n_subjects()
        ];
        MarginalObjective {
            data,
            template: Theta::zeros(layout),
            trunc,
            inner: InnerOptions::default(),
            warm,
            n_evals: 0,
            n_grad_evals: 0,
        }
    }

    pub fn layout(&self) -> &Arc<ThetaLayout> {
        self.template.layout()
    }

    pub fn theta_with_free(&self, free: &[f64]) -> Theta {
        self.template.with_free(free)
    }

    /// Negative log-likelihood; +∞ when any subject fails (line-search
    /// contract for the outer optimizer).
    pub fn value_at(&mut self, free: &[f64]) -> f64 {
        self.eval(free, false).0
    }

    /// Negative log-likelihood and gradient; (+∞, None) on failure.
    pub fn eval(&mut self, free: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>) {
        self.n_evals += 1;
        let theta = self.template.with_free(free);
        let values = theta.values().to_vec();
        let layout = theta.layout().clone();
        let nat: NaturalView<f64> = layout.unpack_with(|i| values[i]);
        let k = self.data.k();
        let sig = match sigma_ctx(&nat, k) {
            Ok(s) => s,
            Err(_) => return (f64::INFINITY, None),
        };

        // primal pass: inner modes, warm-started per subject
        let data = self.data;
        let trunc = self.trunc;
        let inner_opts = self.inner;
        let family = layout.spec.family;
        let primal: Vec<Result<(f64, InnerState, Vec<f64>)>> = self
            .warm
            .par_iter_mut()
            .enumerate()
            .map(|(i, warm)| {
                let mut problem =
                    SubjectProblem::new(data, i, family, &nat, &sig, &trunc, Some(&warm.cmp_t));
                let state = inner_newton(&mut problem, &warm.b, &inner_opts)?;
                warm.b.copy_from_slice(&state.b_hat);
                warm.cmp_t.copy_from_slice(&problem.cmp_t);
                let ll = laplace_value(&state);
                if !ll.is_finite() {
                    return Err(Error::Numerical("non-finite subject log-likelihood".into()));
                }
                Ok((ll, state, problem.cmp_t))
            })
            .collect();

        let mut logliks = Vec::with_capacity(primal.len());
        let mut states = Vec::with_capacity(primal.len());
        for r in primal {
            match r {
                Ok((ll, st, t)) => {
                    logliks.push(ll);
                    states.push((st, t));
                }
                Err(_) => return (f64::INFINITY, None),
            }
        }
        let value = -canonical_sum(&mut logliks);
        if !value.is_finite() {
            return (f64::INFINITY, None);
        }
        if !want_grad {
            return (value, None);
        }

        self.n_grad_evals += 1;
        let np = layout.np();
        // per-direction θ duals and Σ contexts, shared across subjects
        let mut dirs = Vec::with_capacity(np);
        for d in 0..np {
            let nat_d: NaturalView<Dual> = layout.unpack_with(|slot| Dual {
                v: values[slot],
                d: if layout.free_index(slot) == Some(d) {
                    1.0
                } else {
                    0.0
                },
            });
            let sig_d = match sigma_ctx(&nat_d, k) {
                Ok(s) => s,
                Err(_) => return (f64::INFINITY, None),
            };
            let mut hot = vec![false; k];
            match layout.slots[layout.slot_of_free(d)].role {
                SlotRole::Beta { response, .. } | SlotRole::LogDisp { response } => {
                    hot[response] = true;
                }
                _ => {}
            }
            dirs.push(DirCtx {
                nat: nat_d,
                sig: sig_d,
                hot,
            });
        }

        let per_subject: Vec<Result<Vec<f64>>> = states
            .par_iter()
            .enumerate()
            .map(|(i, (state, cmp_t))| {
                subject_gradient(data, i, family, state, cmp_t, &dirs, &trunc)
            })
            .collect();

        let n = states.len();
        let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(n); np];
        for r in per_subject {
            match r {
                Ok(g) => {
                    for (d, v) in g.into_iter().enumerate() {
                        columns[d].push(v);
                    }
                }
                Err(_) => return (f64::INFINITY, None),
            }
        }
        let grad: Vec<f64> = columns
            .iter_mut()
            .map(|col| -canonical_sum(col))
            .collect();
        if grad.iter().any(|g| !g.is_finite()) {
            return (f64::INFINITY, None);
        }
        (value, Some(grad))
    }
}

/// Exact dθ of one subject's Laplace log-likelihood: dual sweep per
/// direction with the implicit mode derivative.
fn subject_gradient(
    data: &Dataset,
    subject: usize,
    family: crate::families::Family,
    state: &InnerState,
    cmp_t: &[f64],
    dirs: &[DirCtx],
    trunc: &CmpTruncation,
) -> Result<Vec<f64>> {
    let k = data.k();
    let b_hat = &state.b_hat;
    let mut grad = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let mut problem =
            SubjectProblem::new(data, subject, family, &dir.nat, &dir.sig, trunc, Some(cmp_t));
        // dual parts of ∇_b Q at the (constant) mode
        let mut delta = vec![0.0; k];
        let inv_b = {
            let b_const: Vec<Dual> = b_hat.iter().map(|&b| Dual::constant(b)).collect();
            dir.sig.inv.mul_vec(&b_const)
        };
        for r in 0..k {
            let du = if dir.hot[r] {
                problem.observation(r, Dual::constant(b_hat[r]))?.u.d
            } else {
                0.0
            };
            delta[r] = du - inv_b[r].d;
        }
        // implicit mode shift: db̂ = H⁻¹ ∂∇Q/∂θ
        let b_dot = state.chol.solve(&delta);
        // full dual evaluation at (b̂ + ε db̂, θ + ε)
        let b_dual: Vec<Dual> = b_hat
            .iter()
            .zip(&b_dot)
            .map(|(&b, &dot)| Dual::new(b, dot))
            .collect();
        let (q, _, w) = problem.q_full(&b_dual)?;
        let mut h = dir.sig.inv.clone();
        for r in 0..k {
            h[(r, r)] += w[r];
        }
        let ch = Cholesky::new(&h)
            .ok_or_else(|| Error::Numerical("dual inner Hessian factorization failed".into()))?;
        let li = Dual::constant(0.5 * k as f64 * LN_2PI) - Dual::constant(0.5) * ch.log_det() + q;
        if !li.all_finite() {
            return Err(Error::Numerical("non-finite dual sweep".into()));
        }
        grad.push(li.d);
    }
    Ok(grad)
}

impl<'d> DiffObjective for MarginalObjective<'d> {
    fn dim(&self) -> usize {
        self.template.layout().np()
    }

    fn value(&mut self, x: &[f64]) -> f64 {
        self.eval(x, false).0
    }

    fn value_grad(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        match self.eval(x, true) {
            (v, Some(g)) => (v, g),
            (v, None) => {
                let np = self.dim();
                (v, vec![f64::NAN; np])
            }
        }
    }
}

/// One-shot total negative log-likelihood at a packed θ.
pub fn total_nll(theta: &Theta, data: &Dataset, trunc: &CmpTruncation) -> Result<f64> {
    let mut obj = MarginalObjective::new(data, theta.layout().clone(), *trunc);
    let v = obj.value_at(&theta.free());
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical("total objective is not finite".into()))
    }
}
