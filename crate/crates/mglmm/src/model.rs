//! Model definition, dataset representation, and the bijection between the
//! unconstrained optimization vector and natural-scale parameters.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::covariance::n_corr_params;
use crate::error::{Error, Result};
use crate::families::{ln_factorial, Family};

/// Constrained structure variants of the covariance/dispersion layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    FixedVariance,
    CommonVariance,
    FixedDispersion,
    RhoZero,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::FixedVariance => "fixed_variance",
            Variant::CommonVariance => "common_variance",
            Variant::FixedDispersion => "fixed_dispersion",
            Variant::RhoZero => "rho_zero",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full" => Ok(Variant::Full),
            "fixed_variance" => Ok(Variant::FixedVariance),
            "common_variance" => Ok(Variant::CommonVariance),
            "fixed_dispersion" => Ok(Variant::FixedDispersion),
            "rho_zero" => Ok(Variant::RhoZero),
            other => Err(Error::Spec(format!("unknown variant '{other}'"))),
        }
    }
}

/// Dispersion value a variant freezes, on the natural scale.
pub fn fixed_dispersion_value(family: Family) -> Option<f64> {
    match family {
        Family::Poisson => None,
        Family::Nb2 => Some(1.0),
        Family::Cmp => Some(1.5),
    }
}

/// The experiment definition: family, responses, per-response covariates
/// (an intercept column is always prepended and is not listed), and the
/// structure variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub responses: Vec<String>,
    /// Named covariate columns per response, in the order written; the
    /// intercept is implicit as the first design column.
    pub covariates: Vec<Vec<String>>,
    pub variant: Variant,
}

impl ModelSpec {
    pub fn new(
        family: Family,
        responses: Vec<String>,
        covariates: Vec<Vec<String>>,
        variant: Variant,
    ) -> Result<Self> {
        if responses.is_empty() {
            return Err(Error::Spec("response list must not be empty".into()));
        }
        if covariates.len() != responses.len() {
            return Err(Error::Spec(format!(
                "got {} covariate lists for {} responses",
                covariates.len(),
                responses.len()
            )));
        }
        for (i, a) in responses.iter().enumerate() {
            for b in responses.iter().skip(i + 1) {
                if a == b {
                    return Err(Error::Spec(format!("duplicate response '{a}'")));
                }
            }
        }
        if family == Family::Poisson && variant == Variant::FixedDispersion {
            return Err(Error::Spec(
                "fixed_dispersion is not defined for the Poisson family (it has no dispersion parameter)"
                    .into(),
            ));
        }
        Ok(ModelSpec {
            family,
            responses,
            covariates,
            variant,
        })
    }

    pub fn k(&self) -> usize {
        self.responses.len()
    }

    /// Design-matrix column count for response r (intercept included).
    pub fn p(&self, r: usize) -> usize {
        self.covariates[r].len() + 1
    }
}

/// What an unconstrained parameter slot drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotRole {
    Beta { response: usize, col: usize },
    LogDisp { response: usize },
    LogSd { response: usize },
    LogSdShared,
    RhoRaw { index: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub role: SlotRole,
    /// Frozen slots hold this constant and are excluded from the free vector.
    pub frozen: Option<f64>,
}

/// Fixed layout of the packed parameter vector for one (family, variant)
/// combination: slot roles, frozen constants, and the free-vector mapping.
#[derive(Debug, Clone)]
pub struct ThetaLayout {
    pub spec: ModelSpec,
    pub slots: Vec<Slot>,
    free_of_slot: Vec<Option<usize>>,
    slot_of_free: Vec<usize>,
}

impl ThetaLayout {
    pub fn new(spec: &ModelSpec) -> Self {
        let k = spec.k();
        let mut slots = Vec::new();
        for (r, resp) in spec.responses.iter().enumerate() {
            slots.push(Slot {
                name: format!("beta.{resp}.intercept"),
                role: SlotRole::Beta {
                    response: r,
                    col: 0,
                },
                frozen: None,
            });
            for (j, cov) in spec.covariates[r].iter().enumerate() {
                slots.push(Slot {
                    name: format!("beta.{resp}.{cov}"),
                    role: SlotRole::Beta {
                        response: r,
                        col: j + 1,
                    },
                    frozen: None,
                });
            }
        }
        if spec.family.has_dispersion() {
            let frozen = if spec.variant == Variant::FixedDispersion {
                Some(fixed_dispersion_value(spec.family).expect("non-Poisson").ln())
            } else {
                None
            };
            for (r, resp) in spec.responses.iter().enumerate() {
                slots.push(Slot {
                    name: format!("log_disp.{resp}"),
                    role: SlotRole::LogDisp { response: r },
                    frozen,
                });
            }
        }
        match spec.variant {
            Variant::CommonVariance => {
                slots.push(Slot {
                    name: "log_sd.shared".into(),
                    role: SlotRole::LogSdShared,
                    frozen: None,
                });
            }
            _ => {
                let frozen = if spec.variant == Variant::FixedVariance {
                    Some(0.0)
                } else {
                    None
                };
                for (r, resp) in spec.responses.iter().enumerate() {
                    slots.push(Slot {
                        name: format!("log_sd.{resp}"),
                        role: SlotRole::LogSd { response: r },
                        frozen,
                    });
                }
            }
        }
        {
            let frozen = if spec.variant == Variant::RhoZero {
                Some(0.0)
            } else {
                None
            };
            let mut idx = 0;
            for i in 1..k {
                for j in 0..i {
                    slots.push(Slot {
                        name: format!("rho_raw.{}.{}", spec.responses[i], spec.responses[j]),
                        role: SlotRole::RhoRaw { index: idx },
                        frozen,
                    });
                    idx += 1;
                }
            }
        }

        let mut free_of_slot = Vec::with_capacity(slots.len());
        let mut slot_of_free = Vec::new();
        for (i, s) in slots.iter().enumerate() {
            if s.frozen.is_none() {
                free_of_slot.push(Some(slot_of_free.len()));
                slot_of_free.push(i);
            } else {
                free_of_slot.push(None);
            }
        }
        ThetaLayout {
            spec: spec.clone(),
            slots,
            free_of_slot,
            slot_of_free,
        }
    }

    /// Number of free parameters after variant freezing.
    pub fn np(&self) -> usize {
        self.slot_of_free.len()
    }

    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn free_index(&self, slot: usize) -> Option<usize> {
        self.free_of_slot[slot]
    }

    pub fn slot_of_free(&self, free: usize) -> usize {
        self.slot_of_free[free]
    }

    pub fn free_names(&self) -> Vec<String> {
        self.slot_of_free
            .iter()
            .map(|&s| self.slots[s].name.clone())
            .collect()
    }

    /// Natural-scale parameters from per-slot values supplied by `get`
    /// (generic so dual seeds flow through the log transforms).
    pub(crate) fn unpack_with<S: crate::scalar::Scalar>(
        &self,
        get: impl Fn(usize) -> S,
    ) -> NaturalView<S> {
        let spec = &self.spec;
        let k = spec.k();
        let mut beta: Vec<Vec<S>> = (0..k).map(|r| vec![S::zero(); spec.p(r)]).collect();
        let mut disp = if spec.family.has_dispersion() {
            vec![S::zero(); k]
        } else {
            Vec::new()
        };
        let mut sd = vec![S::one(); k];
        let mut rho_raw = vec![S::zero(); n_corr_params(k)];
        for (i, slot) in self.slots.iter().enumerate() {
            let v = get(i);
            match slot.role {
                SlotRole::Beta { response, col } => beta[response][col] = v,
                SlotRole::LogDisp { response } => disp[response] = v.exp(),
                SlotRole::LogSd { response } => sd[response] = v.exp(),
                SlotRole::LogSdShared => {
                    let e = v.exp();
                    for s in sd.iter_mut() {
                        *s = e;
                    }
                }
                SlotRole::RhoRaw { index } => rho_raw[index] = v,
            }
        }
        NaturalView {
            beta,
            disp,
            sd,
            rho_raw,
        }
    }
}

/// Natural-scale parameter bundle (generic over the differentiation scalar).
#[derive(Debug, Clone)]
pub struct NaturalView<S> {
    pub beta: Vec<Vec<S>>,
    /// Per-response dispersion; empty for Poisson.
    pub disp: Vec<S>,
    pub sd: Vec<S>,
    pub rho_raw: Vec<S>,
}

/// Plain natural-scale parameters, e.g. simulation truths.
pub type NaturalParams = NaturalView<f64>;

impl NaturalParams {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let k = spec.k();
        if self.beta.len() != k {
            return Err(Error::Spec("beta must have one block per response".into()));
        }
        for (r, b) in self.beta.iter().enumerate() {
            if b.len() != spec.p(r) {
                return Err(Error::Spec(format!(
                    "beta block for response {} has {} entries, expected {}",
                    spec.responses[r],
                    b.len(),
                    spec.p(r)
                )));
            }
        }
        let want_disp = if spec.family.has_dispersion() { k } else { 0 };
        if self.disp.len() != want_disp {
            return Err(Error::Spec(format!(
                "expected {} dispersion values, got {}",
                want_disp,
                self.disp.len()
            )));
        }
        if self.sd.len() != k || self.rho_raw.len() != n_corr_params(k) {
            return Err(Error::Spec("sd/rho_raw lengths do not match k".into()));
        }
        Ok(())
    }
}

/// Packed unconstrained parameter vector bound to its layout.
#[derive(Debug, Clone)]
pub struct Theta {
    layout: Arc<ThetaLayout>,
    values: Vec<f64>,
}

impl Theta {
    /// All-zero starting point (β = 0, dispersions and sds at 1, ϱ = 0),
    /// with frozen slots at their constants.
    pub fn zeros(layout: Arc<ThetaLayout>) -> Self {
        let values = layout
            .slots
            .iter()
            .map(|s| s.frozen.unwrap_or(0.0))
            .collect();
        Theta { layout, values }
    }

    /// Pack natural-scale parameters. Positivity is required wherever a log
    /// transform applies; frozen slots keep their variant constants.
    pub fn pack(layout: Arc<ThetaLayout>, natural: &NaturalParams) -> Result<Self> {
        natural.validate(&layout.spec)?;
        let mut theta = Theta::zeros(layout.clone());
        for (i, slot) in layout.slots.iter().enumerate() {
            let v = match slot.role {
                SlotRole::Beta { response, col } => natural.beta[response][col],
                SlotRole::LogDisp { response } => {
                    let d = natural.disp[response];
                    if !(d > 0.0 && d.is_finite()) {
                        return Err(Error::Domain(format!(
                            "dispersion for response {} must be positive, got {d}",
                            layout.spec.responses[response]
                        )));
                    }
                    d.ln()
                }
                SlotRole::LogSd { response } => {
                    let s = natural.sd[response];
                    if !(s > 0.0 && s.is_finite()) {
                        return Err(Error::Domain(format!(
                            "sd for response {} must be positive, got {s}",
                            layout.spec.responses[response]
                        )));
                    }
                    s.ln()
                }
                SlotRole::LogSdShared => {
                    let s0 = natural.sd[0];
                    if !(s0 > 0.0 && s0.is_finite()) {
                        return Err(Error::Domain(format!(
                            "shared sd must be positive, got {s0}"
                        )));
                    }
                    for &s in &natural.sd {
                        if (s - s0).abs() > 1e-9 * s0.abs().max(1.0) {
                            return Err(Error::Domain(
                                "common_variance requires all sd entries equal".into(),
                            ));
                        }
                    }
                    s0.ln()
                }
                SlotRole::RhoRaw { index } => natural.rho_raw[index],
            };
            if slot.frozen.is_none() {
                theta.values[i] = v;
            }
        }
        Ok(theta)
    }

    pub fn layout(&self) -> &Arc<ThetaLayout> {
        &self.layout
    }

    pub fn np(&self) -> usize {
        self.layout.np()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Overwrite a slot (frozen slots are left untouched).
    pub fn set_slot(&mut self, slot: usize, v: f64) {
        if self.layout.slots[slot].frozen.is_none() {
            self.values[slot] = v;
        }
    }

    /// The free parameter vector (frozen slots excluded).
    pub fn free(&self) -> Vec<f64> {
        self.layout
            .slot_of_free
            .iter()
            .map(|&s| self.values[s])
            .collect()
    }

    pub fn with_free(&self, free: &[f64]) -> Theta {
        assert_eq!(free.len(), self.layout.np());
        let mut t = self.clone();
        for (f, &s) in free.iter().zip(&self.layout.slot_of_free) {
            t.values[s] = *f;
        }
        t
    }

    /// Natural-scale parameters.
    pub fn unpack(&self) -> NaturalParams {
        self.layout.unpack_with(|i| self.values[i])
    }
}

/// N subjects × k count responses plus per-response design matrices
/// (column-major, intercept first). Immutable after construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub subject_ids: Vec<String>,
    /// N×k counts (validated nonnegative integers, stored as f64).
    pub y: DMatrix<f64>,
    /// Per-response N×p_r design matrices.
    pub x: Vec<DMatrix<f64>>,
    /// ln(y!) matching `y`.
    pub ln_fact: DMatrix<f64>,
    pub response_names: Vec<String>,
    pub covariate_names: Vec<Vec<String>>,
}

/// Relative singular-value cutoff for the design rank check.
pub const RANK_TOLERANCE: f64 = 1e-10;

impl Dataset {
    pub fn new(
        subject_ids: Vec<String>,
        y: DMatrix<f64>,
        x: Vec<DMatrix<f64>>,
        response_names: Vec<String>,
        covariate_names: Vec<Vec<String>>,
    ) -> Result<Self> {
        let n = y.nrows();
        let k = y.ncols();
        if n < 2 {
            return Err(Error::Data(format!("need at least 2 subjects, got {n}")));
        }
        if subject_ids.len() != n || response_names.len() != k || x.len() != k {
            return Err(Error::Data("inconsistent dataset dimensions".into()));
        }
        for i in 0..n {
            for r in 0..k {
                let v = y[(i, r)];
                if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0) {
                    return Err(Error::Data(format!(
                        "response '{}' at row {} is not a nonnegative integer: {v}",
                        response_names[r], i
                    )));
                }
            }
        }
        for (r, xr) in x.iter().enumerate() {
            if xr.nrows() != n {
                return Err(Error::Data(format!(
                    "design matrix for response '{}' has {} rows, expected {n}",
                    response_names[r],
                    xr.nrows()
                )));
            }
            let p = xr.ncols();
            let svals = xr.clone().singular_values();
            let smax = svals.max();
            let rank = svals.iter().filter(|&&s| s > RANK_TOLERANCE * smax).count();
            if rank < p {
                return Err(Error::Data(format!(
                    "design matrix for response '{}' is rank deficient (rank {rank} of {p} columns)",
                    response_names[r]
                )));
            }
        }
        let ln_fact = DMatrix::from_fn(n, k, |i, r| ln_factorial(y[(i, r)] as u64));
        Ok(Dataset {
            subject_ids,
            y,
            x,
            ln_fact,
            response_names,
            covariate_names,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.y.nrows()
    }

    pub fn k(&self) -> usize {
        self.y.ncols()
    }

    /// Row subset in the given index order (indices must be strictly
    /// increasing to preserve the deterministic reduction order).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        let select = |m: &DMatrix<f64>| m.select_rows(indices.iter());
        Dataset {
            subject_ids: indices.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            y: select(&self.y),
            x: self.x.iter().map(select).collect(),
            ln_fact: select(&self.ln_fact),
            response_names: self.response_names.clone(),
            covariate_names: self.covariate_names.clone(),
        }
    }
}

/// Per-parameter row of a fit report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEstimate {
    pub name: String,
    pub role: SlotRole,
    /// Unconstrained-scale estimate (the optimizer's coordinate).
    pub unconstrained: f64,
    /// Natural-scale estimate (exp of log slots, identity otherwise).
    pub natural: f64,
    /// Delta-method SE on the natural scale.
    pub se: Option<f64>,
    pub se_available: bool,
    pub frozen: bool,
}

/// One optimization stage record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTrace {
    pub scope: String,
    pub algorithm: String,
    pub iterations: usize,
    pub n_evaluations: usize,
    /// Final objective (negative log-likelihood) on the stage's data scope.
    pub objective: f64,
    pub grad_norm: f64,
    pub termination: String,
    /// Negative log-likelihood of this stage's output on the full data.
    pub full_nll: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub stages: Vec<StageTrace>,
    /// Index of the stage whose output is reported (max full-data loglik).
    pub selected_stage: Option<usize>,
    pub converged: bool,
    pub grad_norm: f64,
}

/// Maximum-likelihood fit report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub family: Family,
    pub variant: Variant,
    pub responses: Vec<String>,
    /// Full slot vector (frozen slots included) on the unconstrained scale.
    pub theta: Vec<f64>,
    pub params: Vec<ParamEstimate>,
    /// Covariance of the free-parameter estimates (row-major np×np), when
    /// the observed information could be inverted.
    pub vcov: Option<Vec<Vec<f64>>>,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub np: usize,
    pub n_subjects: usize,
    pub converged: bool,
    pub trace: ConvergenceTrace,
    pub sigma: crate::covariance::SigmaReport,
    pub seed: u64,
}

impl FitResult {
    /// Rebuild the packed parameter object for further computation.
    pub fn theta_for(&self, spec: &ModelSpec) -> Result<Theta> {
        let layout = Arc::new(ThetaLayout::new(spec));
        if layout.n_slots() != self.theta.len() {
            return Err(Error::Spec(
                "fit result does not match the given model spec".into(),
            ));
        }
        let mut t = Theta::zeros(layout);
        for (i, &v) in self.theta.iter().enumerate() {
            t.set_slot(i, v);
        }
        Ok(t)
    }

    /// True when at least one parameter has a reported SE (the paper-style
    /// checkmark column).
    pub fn any_se(&self) -> bool {
        self.params.iter().any(|p| p.se_available)
    }
}

/// AIC = −2ℓ + 2·np.
pub fn aic(loglik: f64, np: usize) -> f64 {
    -2.0 * loglik + 2.0 * np as f64
}

/// BIC = −2ℓ + np·ln N.
pub fn bic(loglik: f64, np: usize, n_subjects: usize) -> f64 {
    -2.0 * loglik + np as f64 * (n_subjects as f64).ln()
}

/// Free-parameter count for a spec (after variant freezing).
pub fn count_np(spec: &ModelSpec) -> usize {
    ThetaLayout::new(spec).np()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn table2_spec(family: Family, variant: Variant) -> ModelSpec {
        // three responses, four named covariates each: Σ p_r = 15
        let responses = vec!["y1".into(), "y2".into(), "y3".into()];
        let covs: Vec<Vec<String>> = (0..3)
            .map(|_| (1..=4).map(|j| format!("x{j}")).collect())
            .collect();
        ModelSpec::new(family, responses, covs, variant).unwrap()
    }

    #[test]
    fn np_matches_goodness_of_fit_table_arithmetic() {
        assert_eq!(count_np(&table2_spec(Family::Poisson, Variant::Full)), 21);
        assert_eq!(count_np(&table2_spec(Family::Poisson, Variant::RhoZero)), 18);
        assert_eq!(count_np(&table2_spec(Family::Nb2, Variant::Full)), 24);
        assert_eq!(count_np(&table2_spec(Family::Nb2, Variant::RhoZero)), 21);
        assert_eq!(
            count_np(&table2_spec(Family::Nb2, Variant::CommonVariance)),
            22
        );
        assert_eq!(
            count_np(&table2_spec(Family::Nb2, Variant::FixedDispersion)),
            21
        );
        assert_eq!(
            count_np(&table2_spec(Family::Nb2, Variant::FixedVariance)),
            21
        );
        assert_eq!(count_np(&table2_spec(Family::Cmp, Variant::Full)), 24);
    }

    #[test]
    fn poisson_fixed_dispersion_rejected() {
        let r = ModelSpec::new(
            Family::Poisson,
            vec!["y".into()],
            vec![vec![]],
            Variant::FixedDispersion,
        );
        assert!(r.is_err());
    }

    #[test]
    fn empty_responses_rejected() {
        assert!(ModelSpec::new(Family::Poisson, vec![], vec![], Variant::Full).is_err());
    }

    #[test]
    fn univariate_rho_zero_has_no_rho_slots() {
        let spec = ModelSpec::new(
            Family::Poisson,
            vec!["y".into()],
            vec![vec![]],
            Variant::RhoZero,
        )
        .unwrap();
        let layout = ThetaLayout::new(&spec);
        assert!(layout
            .slots
            .iter()
            .all(|s| !matches!(s.role, SlotRole::RhoRaw { .. })));
        // intercept + one sd
        assert_eq!(layout.np(), 2);
    }

    #[test]
    fn pack_log_transforms() {
        let spec = ModelSpec::new(
            Family::Cmp,
            vec!["y".into()],
            vec![vec![]],
            Variant::Full,
        )
        .unwrap();
        let layout = Arc::new(ThetaLayout::new(&spec));
        let nat = NaturalParams {
            beta: vec![vec![0.3]],
            disp: vec![1.5],
            sd: vec![1.0],
            rho_raw: vec![],
        };
        let theta = Theta::pack(layout, &nat).unwrap();
        // σ = 1 → log_sd = 0; ν = 1.5 → ln 1.5
        let up = theta.unpack();
        assert_eq!(up.sd[0], 1.0);
        assert!((up.disp[0] - 1.5).abs() < 1e-15);
        let sd_slot = theta
            .layout()
            .slots
            .iter()
            .position(|s| matches!(s.role, SlotRole::LogSd { .. }))
            .unwrap();
        assert_eq!(theta.values()[sd_slot], 0.0);
    }

    #[test]
    fn fixed_dispersion_freezes_at_ln_constant() {
        let spec = table2_spec(Family::Cmp, Variant::FixedDispersion);
        let layout = Arc::new(ThetaLayout::new(&spec));
        assert_eq!(layout.np(), 21); // 24 − 3 frozen dispersions
        let theta = Theta::zeros(layout.clone());
        let nat = theta.unpack();
        for d in nat.disp {
            assert!((d - 1.5).abs() < 1e-15);
        }
        // frozen slots ignore set_slot
        let slot = layout
            .slots
            .iter()
            .position(|s| s.frozen.is_some())
            .unwrap();
        let mut t2 = theta.clone();
        t2.set_slot(slot, 99.0);
        assert_eq!(t2.values()[slot], 1.5f64.ln());
    }

    #[test]
    fn pack_rejects_nonpositive_scale_parameters() {
        let spec = ModelSpec::new(Family::Nb2, vec!["y".into()], vec![vec![]], Variant::Full)
            .unwrap();
        let layout = Arc::new(ThetaLayout::new(&spec));
        let mut nat = NaturalParams {
            beta: vec![vec![0.0]],
            disp: vec![-1.0],
            sd: vec![1.0],
            rho_raw: vec![],
        };
        assert!(Theta::pack(layout.clone(), &nat).is_err());
        nat.disp = vec![1.0];
        nat.sd = vec![0.0];
        assert!(Theta::pack(layout, &nat).is_err());
    }

    #[test]
    fn free_vector_round_trip_all_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for family in [Family::Poisson, Family::Nb2, Family::Cmp] {
            for variant in [
                Variant::Full,
                Variant::FixedVariance,
                Variant::CommonVariance,
                Variant::FixedDispersion,
                Variant::RhoZero,
            ] {
                if family == Family::Poisson && variant == Variant::FixedDispersion {
                    continue;
                }
                let spec = table2_spec(family, variant);
                let layout = Arc::new(ThetaLayout::new(&spec));
                let base = Theta::zeros(layout.clone());
                assert_eq!(base.free().len(), layout.np());
                for _ in 0..20 {
                    let v: Vec<f64> = (0..layout.np())
                        .map(|_| rng.random_range(-3.0..3.0))
                        .collect();
                    let theta = base.with_free(&v);
                    assert_eq!(theta.free(), v, "{family:?}/{variant:?}");
                    // pack(unpack(θ)) is the identity on full slot vectors
                    let packed =
                        Theta::pack(layout.clone(), &theta.unpack()).unwrap();
                    for (a, b) in packed.values().iter().zip(theta.values()) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn dataset_rejects_bad_counts_and_rank() {
        let ids = vec!["a".into(), "b".into(), "c".into()];
        let y = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let x_ok = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, 1.0, -0.2, 1.0, 0.9]);
        assert!(Dataset::new(
            ids.clone(),
            y.clone(),
            vec![x_ok.clone()],
            vec!["y".into()],
            vec![vec!["x1".into()]],
        )
        .is_ok());

        let y_bad = DMatrix::from_row_slice(3, 1, &[1.0, 2.5, 3.0]);
        assert!(Dataset::new(
            ids.clone(),
            y_bad,
            vec![x_ok.clone()],
            vec!["y".into()],
            vec![vec!["x1".into()]],
        )
        .is_err());

        // duplicated column ⇒ rank deficient
        let x_bad = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(Dataset::new(
            ids,
            y,
            vec![x_bad],
            vec!["y".into()],
            vec![vec!["x1".into()]],
        )
        .is_err());
    }

    #[test]
    fn subset_preserves_row_alignment() {
        let ids: Vec<String> = (0..5).map(|i| format!("s{i}")).collect();
        let y = DMatrix::from_fn(5, 1, |i, _| i as f64);
        let x = DMatrix::from_fn(5, 2, |i, j| if j == 0 { 1.0 } else { 10.0 * i as f64 });
        let data = Dataset::new(ids, y, vec![x], vec!["y".into()], vec![vec!["x1".into()]])
            .unwrap();
        let sub = data.subset(&[1, 3]);
        assert_eq!(sub.n_subjects(), 2);
        assert_eq!(sub.subject_ids, vec!["s1".to_string(), "s3".to_string()]);
        assert_eq!(sub.y[(0, 0)], 1.0);
        assert_eq!(sub.y[(1, 0)], 3.0);
        assert_eq!(sub.x[0][(1, 1)], 30.0);
    }

    #[test]
    fn aic_bic_identities() {
        assert!((aic(-3551.6, 21) - 7145.2).abs() < 1e-9);
        assert!((bic(-3551.6, 21, 1281) - 7253.4633223398).abs() < 1e-6);
        assert!((aic(-2284.0, 24) - 4616.0).abs() < 1e-9);
        assert!((bic(-2284.0, 24, 1281) - 4739.7295112455).abs() < 1e-6);
    }
}
