//! Stage two: regress fitted parameters on the reported value so the
//! conditional distribution can be evaluated at any count.
//!
//! Location and scale are modelled on a log scale by least squares; the
//! mixture weight uses a fractional logit fitted by IRLS.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::distributions::{BaseFamily, DistributionSpec, FamilyId, ParamSlot};
use crate::error::{Error, Result};
use crate::fitting::FittedTheta;
use crate::numeric::{from_u64, lit, logit, sigmoid, to_f64, Real};
use crate::survey::{Context, ViolenceType, SPECIAL_VALUES};

/// Which covariates enter one parameter's regression (beyond the intercept).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CovariateSet {
    pub use_logy: bool,
    pub use_dummies: bool,
    pub use_context: bool,
}

impl CovariateSet {
    pub const NONE: CovariateSet = CovariateSet::new(false, false, false);
    /// `log1p(ỹ)` and the special-value dummies.
    pub const LOGY_DUMMIES: CovariateSet = CovariateSet::new(true, true, false);

    pub const fn new(use_logy: bool, use_dummies: bool, use_context: bool) -> Self {
        CovariateSet {
            use_logy,
            use_dummies,
            use_context,
        }
    }

    /// All eight combinations, `none` first.
    pub fn all() -> Vec<CovariateSet> {
        (0..8u8)
            .map(|b| CovariateSet::new(b & 1 != 0, b & 2 != 0, b & 4 != 0))
            .collect()
    }

    pub fn label(self) -> String {
        let mut parts = Vec::new();
        if self.use_logy {
            parts.push("y");
        }
        if self.use_dummies {
            parts.push("D");
        }
        if self.use_context {
            parts.push("z");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    /// Names of the design-matrix columns.
    pub fn columns(self, z_names: &[String]) -> Vec<String> {
        let mut cols = vec!["intercept".to_string()];
        if self.use_logy {
            cols.push("log1p_y".into());
        }
        if self.use_dummies {
            cols.extend(SPECIAL_VALUES.iter().map(|v| format!("D_{v}")));
        }
        if self.use_context {
            cols.extend(z_names.iter().cloned());
        }
        cols
    }

    fn covariate_names(self) -> Vec<String> {
        let mut out = Vec::new();
        if self.use_logy {
            out.push("log1p_y".into());
        }
        if self.use_dummies {
            out.push("D".into());
        }
        if self.use_context {
            out.push("z".into());
        }
        out
    }
}

impl fmt::Display for CovariateSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for CovariateSet {
    type Err = Error;

    /// Accepts `none` or `+`/`,`-separated terms from `y`, `D`, `z`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "none" || s.is_empty() {
            return Ok(CovariateSet::NONE);
        }
        let mut cs = CovariateSet::NONE;
        for term in s.split(['+', ',']) {
            match term.trim() {
                "y" | "ỹ" | "log1p_y" => cs.use_logy = true,
                "D" | "D_i" => cs.use_dummies = true,
                "z" => cs.use_context = true,
                other => return Err(Error::Schema(format!("unknown covariate `{other}`"))),
            }
        }
        Ok(cs)
    }
}

/// Context covariate names produced from an event's information context.
pub fn context_z_names() -> Vec<String> {
    vec!["z_bad".to_string()]
}

pub fn context_z<T: Real>(context: Context) -> Vec<T> {
    vec![if context == Context::Bad { T::one() } else { T::zero() }]
}

/// `[1, log1p(ỹ)?, D_v?..., z?...]`.
pub fn design_row<T: Real>(reported: u64, z: Option<&[T]>, cs: CovariateSet) -> Result<Vec<T>> {
    let mut row = vec![T::one()];
    if cs.use_logy {
        row.push(from_u64::<T>(reported).ln_1p());
    }
    if cs.use_dummies {
        row.extend(
            SPECIAL_VALUES
                .iter()
                .map(|&v| if v == reported { T::one() } else { T::zero() }),
        );
    }
    if cs.use_context {
        let z = z.ok_or_else(|| Error::Covariate("context covariates required but missing".into()))?;
        row.extend_from_slice(z);
    }
    Ok(row)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transform {
    /// `log(θ + 1)`
    #[serde(rename = "log1p")]
    LogPlusOne,
    #[serde(rename = "log")]
    Log,
    #[serde(rename = "identity")]
    Identity,
}

impl Transform {
    fn forward<T: Real>(self, v: T) -> Result<T> {
        let out = match self {
            Transform::LogPlusOne => v.ln_1p(),
            Transform::Log => v.ln(),
            Transform::Identity => v,
        };
        if out.is_finite() {
            Ok(out)
        } else {
            Err(Error::ParameterDomain(format!("{self:?} undefined at {v}")))
        }
    }

    fn inverse<T: Real>(self, eta: T) -> T {
        match self {
            Transform::LogPlusOne => eta.exp_m1().max(T::zero()),
            Transform::Log => eta.exp(),
            Transform::Identity => eta,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Linear,
    Logit,
}

/// How the logit-link weight model is estimated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum WeightEstimator {
    /// Quasi-likelihood fractional logit by IRLS.
    #[default]
    FractionalLogit,
    /// Least squares on `logit(clip(w, 0.001, 0.999))`.
    OlsLogit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamModel {
    pub slot: ParamSlot,
    pub transform: Transform,
    pub link: Link,
    pub covariates: CovariateSet,
}

impl ParamModel {
    pub fn for_slot(base: BaseFamily, slot: ParamSlot, covariates: CovariateSet) -> Self {
        let (transform, link) = match (slot, base) {
            (ParamSlot::Location, BaseFamily::Lognormal) => (Transform::Identity, Link::Linear),
            (ParamSlot::Location, _) => (Transform::LogPlusOne, Link::Linear),
            (ParamSlot::Scale, _) => (Transform::Log, Link::Linear),
            (ParamSlot::Weight, _) => (Transform::Identity, Link::Logit),
            (ParamSlot::Shift, _) => (Transform::Identity, Link::Linear),
        };
        ParamModel {
            slot,
            transform,
            link,
            covariates,
        }
    }
}

/// Violence types a model covers; `All` pools every type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViolenceScope {
    Sb,
    Ns,
    Os,
    All,
}

impl ViolenceScope {
    pub fn covers(self, t: ViolenceType) -> bool {
        match self {
            ViolenceScope::All => true,
            ViolenceScope::Sb => t == ViolenceType::Sb,
            ViolenceScope::Ns => t == ViolenceType::Ns,
            ViolenceScope::Os => t == ViolenceType::Os,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ViolenceScope::Sb => "sb",
            ViolenceScope::Ns => "ns",
            ViolenceScope::Os => "os",
            ViolenceScope::All => "all",
        }
    }
}

impl From<ViolenceType> for ViolenceScope {
    fn from(t: ViolenceType) -> Self {
        match t {
            ViolenceType::Sb => ViolenceScope::Sb,
            ViolenceType::Ns => ViolenceScope::Ns,
            ViolenceType::Os => ViolenceScope::Os,
        }
    }
}

impl fmt::Display for ViolenceScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViolenceScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(ViolenceScope::All),
            other => other.parse::<ViolenceType>().map(Into::into),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub family: FamilyId,
    pub violence_type: ViolenceScope,
    pub params: Vec<ParamModel>,
    pub weight_estimator: WeightEstimator,
}

impl ModelSpec {
    /// One covariate set per parameter, in slot order.
    pub fn new(family: FamilyId, violence_type: ViolenceScope, covariates: &[CovariateSet]) -> Result<Self> {
        let slots = family.slots();
        if covariates.len() != slots.len() {
            return Err(Error::Covariate(format!(
                "{family} has {} parameters, got {} covariate sets",
                slots.len(),
                covariates.len()
            )));
        }
        Ok(ModelSpec {
            family,
            violence_type,
            params: slots
                .into_iter()
                .zip(covariates)
                .map(|(slot, &cs)| ParamModel::for_slot(family.base, slot, cs))
                .collect(),
            weight_estimator: WeightEstimator::default(),
        })
    }

    /// The same covariate set for every parameter.
    pub fn uniform(family: FamilyId, violence_type: ViolenceScope, cs: CovariateSet) -> Self {
        Self::new(family, violence_type, &vec![cs; family.n_params()]).expect("matching lengths")
    }

    pub fn uses_context(&self) -> bool {
        self.params.iter().any(|p| p.covariates.use_context)
    }

    pub fn covariate_labels(&self) -> Vec<String> {
        self.params.iter().map(|p| p.covariates.label()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearFit<T> {
    pub coefficients: Vec<T>,
    /// Classical OLS standard errors; NaN when the ridge fallback was used.
    pub std_errors: Vec<T>,
    pub r2: T,
    /// Ridge fallback was used because the design was rank deficient.
    pub regularized: bool,
}

const RIDGE: f64 = 1e-10;

struct Solve<T> {
    beta: Vec<T>,
    regularized: bool,
    /// Diagonal of `(XᵀWX)⁻¹`; absent on the ridge path.
    unscaled_var: Option<Vec<T>>,
}

/// Least-squares solve of `X β ≈ y` with row weights.
fn weighted_lstsq<T: Real>(
    x: &[Vec<T>],
    y: &[T],
    weights: Option<&[T]>,
    names: &[String],
    ridge_fallback: bool,
) -> Result<Solve<T>> {
    let n = x.len();
    let p = x.first().map_or(0, Vec::len);
    if n != y.len() {
        return Err(Error::Domain(format!("{n} design rows for {} responses", y.len())));
    }
    if n < p || n == 0 {
        return Err(Error::InsufficientData { rows: n, cols: p });
    }
    let sw: Vec<T> = match weights {
        Some(w) => w.iter().map(|v| v.sqrt()).collect(),
        None => vec![T::one(); n],
    };
    // Column-major copy of sqrt(W) X and sqrt(W) y.
    let mut a: Vec<Vec<T>> = (0..p).map(|j| (0..n).map(|i| x[i][j] * sw[i]).collect()).collect();
    let mut b: Vec<T> = (0..n).map(|i| y[i] * sw[i]).collect();
    let col_norm = a
        .iter()
        .map(|c| c.iter().fold(T::zero(), |s, v| s + *v * *v).sqrt())
        .fold(T::zero(), T::max);

    let mut diag = vec![T::zero(); p];
    for k in 0..p {
        let norm = (k..n).fold(T::zero(), |s, i| s + a[k][i] * a[k][i]).sqrt();
        if norm == T::zero() {
            diag[k] = T::zero();
            continue;
        }
        let alpha = if a[k][k] > T::zero() { -norm } else { norm };
        let mut v: Vec<T> = a[k][k..].to_vec();
        v[0] = v[0] - alpha;
        let vnorm2 = v.iter().fold(T::zero(), |s, t| s + *t * *t);
        if vnorm2 > T::zero() {
            for col in a.iter_mut().skip(k) {
                let dot = v.iter().zip(&col[k..]).fold(T::zero(), |s, (vi, ci)| s + *vi * *ci);
                let f = lit::<T>(2.0) * dot / vnorm2;
                for (ci, vi) in col[k..].iter_mut().zip(&v) {
                    *ci = *ci - f * *vi;
                }
            }
            let dot = v.iter().zip(&b[k..]).fold(T::zero(), |s, (vi, bi)| s + *vi * *bi);
            let f = lit::<T>(2.0) * dot / vnorm2;
            for (bi, vi) in b[k..].iter_mut().zip(&v) {
                *bi = *bi - f * *vi;
            }
        }
        diag[k] = a[k][k];
    }

    let tol: T = col_norm * lit::<T>(1e-10).max(T::epsilon() * from_u64::<T>(n as u64));
    let deficient: Vec<usize> = (0..p).filter(|&k| diag[k].abs() <= tol).collect();
    if deficient.is_empty() {
        let mut beta = vec![T::zero(); p];
        for k in (0..p).rev() {
            let mut s = b[k];
            for j in k + 1..p {
                s = s - a[j][k] * beta[j];
            }
            beta[k] = s / a[k][k];
        }
        // R⁻¹ column by column; (XᵀWX)⁻¹ = R⁻¹R⁻ᵀ.
        let mut rinv = vec![vec![T::zero(); p]; p];
        for j in 0..p {
            rinv[j][j] = T::one() / a[j][j];
            for i in (0..j).rev() {
                let mut s = T::zero();
                for k in i + 1..=j {
                    s = s + a[k][i] * rinv[k][j];
                }
                rinv[i][j] = -s / a[i][i];
            }
        }
        let unscaled_var = (0..p).map(|i| rinv[i].iter().fold(T::zero(), |s, v| s + *v * *v)).collect();
        return Ok(Solve {
            beta,
            regularized: false,
            unscaled_var: Some(unscaled_var),
        });
    }
    if !ridge_fallback {
        return Err(Error::Singular(deficient.iter().map(|&k| names.get(k).cloned().unwrap_or_else(|| format!("col{k}"))).collect()));
    }

    // (XᵀWX + εI) β = XᵀWy by Cholesky.
    let mut g = vec![vec![T::zero(); p]; p];
    let mut r = vec![T::zero(); p];
    for i in 0..n {
        let wi = sw[i] * sw[i];
        for j in 0..p {
            r[j] = r[j] + wi * x[i][j] * y[i];
            for k in 0..=j {
                g[j][k] = g[j][k] + wi * x[i][j] * x[i][k];
            }
        }
    }
    for (j, row) in g.iter_mut().enumerate() {
        row[j] = row[j] + lit(RIDGE);
    }
    let mut l = vec![vec![T::zero(); p]; p];
    for j in 0..p {
        let mut d = g[j][j];
        for k in 0..j {
            d = d - l[j][k] * l[j][k];
        }
        let d = d.max(lit(RIDGE)).sqrt();
        l[j][j] = d;
        for i in j + 1..p {
            let mut s = g[i][j];
            for k in 0..j {
                s = s - l[i][k] * l[j][k];
            }
            l[i][j] = s / d;
        }
    }
    let mut z = vec![T::zero(); p];
    for i in 0..p {
        let mut s = r[i];
        for k in 0..i {
            s = s - l[i][k] * z[k];
        }
        z[i] = s / l[i][i];
    }
    let mut beta = vec![T::zero(); p];
    for i in (0..p).rev() {
        let mut s = z[i];
        for k in i + 1..p {
            s = s - l[k][i] * beta[k];
        }
        beta[i] = s / l[i][i];
    }
    Ok(Solve {
        beta,
        regularized: true,
        unscaled_var: None,
    })
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + *x * *y)
}

/// Ordinary least squares with a ridge fallback (`ε = 1e-10`) on rank
/// deficiency. `names` label the columns in singularity errors.
pub fn fit_linear<T: Real>(x: &[Vec<T>], y: &[T], names: &[String], ridge_fallback: bool) -> Result<LinearFit<T>> {
    let solve = weighted_lstsq(x, y, None, names, ridge_fallback)?;
    let coefficients = solve.beta;
    let n = from_u64::<T>(y.len() as u64);
    let ybar = y.iter().fold(T::zero(), |s, v| s + *v) / n;
    let ss_tot = y.iter().fold(T::zero(), |s, v| s + (*v - ybar) * (*v - ybar));
    let ss_res = x
        .iter()
        .zip(y)
        .fold(T::zero(), |s, (row, v)| {
            let e = *v - dot(row, &coefficients);
            s + e * e
        });
    let r2 = if ss_tot <= T::epsilon() * (T::one() + ybar * ybar) * n {
        T::zero()
    } else {
        (T::one() - ss_res / ss_tot).max(T::zero()).min(T::one())
    };
    let dof = y.len().saturating_sub(coefficients.len());
    let sigma2 = if dof > 0 { ss_res / from_u64(dof as u64) } else { T::nan() };
    let std_errors = match solve.unscaled_var {
        Some(v) => v.into_iter().map(|d| (d * sigma2).sqrt()).collect(),
        None => vec![T::nan(); coefficients.len()],
    };
    Ok(LinearFit {
        coefficients,
        std_errors,
        r2,
        regularized: solve.regularized,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogitFit<T> {
    pub coefficients: Vec<T>,
    /// Quasi-binomial standard errors (Pearson dispersion).
    pub std_errors: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
    /// Some coefficient hit the `|β| ≤ 20` bound (separation).
    pub bounded: bool,
}

const LOGIT_BOUND: f64 = 20.0;

/// Fractional logit for responses in `[0, 1]`: IRLS with Bernoulli variance,
/// stopping when the largest coefficient change is below `1e-8` or after 100
/// iterations.
pub fn fit_fractional_logit<T: Real>(x: &[Vec<T>], w: &[T], names: &[String]) -> Result<LogitFit<T>> {
    if let Some(bad) = w.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(Error::Domain(format!("fractional response {bad} outside [0,1]")));
    }
    let p = x.first().map_or(0, Vec::len);
    if x.len() < p || x.is_empty() {
        return Err(Error::InsufficientData { rows: x.len(), cols: p });
    }
    let eps: T = lit(1e-10);
    let bound: T = lit(LOGIT_BOUND);
    let mut beta = vec![T::zero(); p];
    let mut bounded = false;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..100 {
        iterations = it + 1;
        let mut z = Vec::with_capacity(x.len());
        let mut weights = Vec::with_capacity(x.len());
        for (row, &wi) in x.iter().zip(w) {
            let eta = dot(row, &beta);
            let mu = sigmoid(eta).max(eps).min(T::one() - eps);
            let var = mu * (T::one() - mu);
            z.push(eta + (wi - mu) / var);
            weights.push(var);
        }
        let next = weighted_lstsq(x, &z, Some(&weights), names, true)?.beta;
        let mut delta = T::zero();
        for (b, nb) in beta.iter_mut().zip(next) {
            let nb = if nb.abs() > bound {
                bounded = true;
                bound.copysign(nb)
            } else {
                nb
            };
            delta = delta.max((nb - *b).abs());
            *b = nb;
        }
        if delta < lit(1e-8) {
            converged = true;
            break;
        }
    }
    let mut weights = Vec::with_capacity(x.len());
    let mut pearson = T::zero();
    let mut z = Vec::with_capacity(x.len());
    for (row, &wi) in x.iter().zip(w) {
        let mu = sigmoid(dot(row, &beta)).max(eps).min(T::one() - eps);
        let var = mu * (T::one() - mu);
        pearson = pearson + (wi - mu) * (wi - mu) / var;
        weights.push(var);
        z.push(T::zero());
    }
    let dof = x.len().saturating_sub(p);
    let phi = if dof > 0 { pearson / from_u64(dof as u64) } else { T::nan() };
    let std_errors = match weighted_lstsq(x, &z, Some(&weights), names, true)?.unscaled_var {
        Some(v) => v.into_iter().map(|d| (d * phi).sqrt()).collect(),
        None => vec![T::nan(); p],
    };
    Ok(LogitFit {
        coefficients: beta,
        std_errors,
        iterations,
        converged,
        bounded,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics<T> {
    pub n: usize,
    /// Per-parameter R²; `None` for the logit-link weight.
    pub r2: Vec<Option<T>>,
    /// Per-parameter coefficient standard errors; empty when unknown (e.g.
    /// published coefficients).
    pub std_errors: Vec<Vec<T>>,
}

/// Fitted stage-two coefficients for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientBundle<T> {
    pub model: ModelSpec,
    pub z_names: Vec<String>,
    /// One coefficient vector per parameter, aligned with
    /// `CovariateSet::columns`.
    pub coefficients: Vec<Vec<T>>,
    pub diagnostics: Diagnostics<T>,
}

/// Fits one coefficient vector per parameter on the fits matching the
/// model's family and violence scope.
pub fn fit_bundle<'a, T: Real, I>(fits: I, model: &ModelSpec) -> Result<CoefficientBundle<T>>
where
    I: IntoIterator<Item = &'a FittedTheta<T>>,
{
    let rows: Vec<&FittedTheta<T>> = fits
        .into_iter()
        .filter(|f| f.family == model.family && model.violence_type.covers(f.violence_type))
        .collect();
    let z_names = context_z_names();
    let mut coefficients = Vec::with_capacity(model.params.len());
    let mut r2 = Vec::with_capacity(model.params.len());
    let mut std_errors = Vec::with_capacity(model.params.len());
    for pm in &model.params {
        let names = pm.covariates.columns(&z_names);
        if rows.len() < names.len() {
            return Err(Error::InsufficientData { rows: rows.len(), cols: names.len() });
        }
        let x = rows
            .iter()
            .map(|f| design_row(f.reported_value, Some(&context_z::<T>(f.context)), pm.covariates))
            .collect::<Result<Vec<_>>>()?;
        let idx = model.family.slot_index(pm.slot).ok_or_else(|| {
            Error::Covariate(format!("{} has no {} parameter", model.family, pm.slot.name()))
        })?;
        let response: Vec<T> = rows
            .iter()
            .map(|f| pm.transform.forward(f.theta[idx]))
            .collect::<Result<_>>()?;
        match pm.link {
            Link::Linear => {
                let fit = fit_linear(&x, &response, &names, true)?;
                coefficients.push(fit.coefficients);
                std_errors.push(fit.std_errors);
                r2.push(Some(fit.r2));
            }
            Link::Logit => match model.weight_estimator {
                WeightEstimator::FractionalLogit => {
                    let fit = fit_fractional_logit(&x, &response, &names)?;
                    if fit.bounded {
                        log::warn!("weight model for {} hit the coefficient bound", model.family);
                    }
                    coefficients.push(fit.coefficients);
                    std_errors.push(fit.std_errors);
                    r2.push(None);
                }
                WeightEstimator::OlsLogit => {
                    let y: Vec<T> = response
                        .iter()
                        .map(|w| logit(w.max(lit(0.001)).min(lit(0.999))))
                        .collect();
                    let fit = fit_linear(&x, &y, &names, true)?;
                    coefficients.push(fit.coefficients);
                    std_errors.push(fit.std_errors);
                    r2.push(None);
                }
            },
        }
    }
    Ok(CoefficientBundle {
        model: model.clone(),
        z_names,
        coefficients,
        diagnostics: Diagnostics {
            n: rows.len(),
            r2,
            std_errors,
        },
    })
}

impl<T: Real> CoefficientBundle<T> {
    pub fn family(&self) -> FamilyId {
        self.model.family
    }

    pub fn violence_type(&self) -> ViolenceScope {
        self.model.violence_type
    }

    /// Coefficient named `name` (e.g. `D_24`) in parameter `slot`.
    pub fn coefficient(&self, slot: ParamSlot, name: &str) -> Option<T> {
        let (i, pm) = self.model.params.iter().enumerate().find(|(_, p)| p.slot == slot)?;
        let cols = pm.covariates.columns(&self.z_names);
        cols.iter().position(|c| c == name).map(|j| self.coefficients[i][j])
    }

    /// Linear predictors (transformed scale) for every parameter.
    pub fn linear_predictors(&self, reported: u64, z: Option<&[T]>) -> Result<Vec<T>> {
        self.model
            .params
            .iter()
            .zip(&self.coefficients)
            .map(|(pm, beta)| design_row(reported, z, pm.covariates).map(|x| dot(&x, beta)))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> CoefficientBundle<U> {
        let conv = |v: T| lit::<U>(to_f64(v));
        CoefficientBundle {
            model: self.model.clone(),
            z_names: self.z_names.clone(),
            coefficients: self.coefficients.iter().map(|c| c.iter().map(|&v| conv(v)).collect()).collect(),
            diagnostics: Diagnostics {
                n: self.diagnostics.n,
                r2: self.diagnostics.r2.iter().map(|r| r.map(conv)).collect(),
                std_errors: self.diagnostics.std_errors.iter().map(|c| c.iter().map(|&v| conv(v)).collect()).collect(),
            },
        }
    }
}

/// Conditional distribution at `reported`, anchored there.
pub fn predict_theta<T: Real>(bundle: &CoefficientBundle<T>, reported: u64, z: Option<&[T]>) -> Result<DistributionSpec<T>> {
    let family = bundle.model.family;
    let etas = bundle.linear_predictors(reported, z)?;
    let theta: Vec<T> = bundle
        .model
        .params
        .iter()
        .zip(etas)
        .map(|(pm, eta)| {
            let v = match pm.link {
                Link::Logit => sigmoid(eta),
                Link::Linear => pm.transform.inverse(eta),
            };
            match pm.slot {
                // Discrete bases need a strictly positive mean.
                ParamSlot::Location if family.base.is_discrete() => v.max(lit(1e-9)),
                ParamSlot::Shift if family.base.is_discrete() => v.round(),
                _ => v,
            }
        })
        .collect();
    DistributionSpec::new(family, theta, Some(reported))
}

/// [`predict_theta`] with the context covariates derived from `context`.
pub fn predict_theta_in_context<T: Real>(
    bundle: &CoefficientBundle<T>,
    reported: u64,
    context: Option<Context>,
) -> Result<DistributionSpec<T>> {
    if bundle.model.uses_context() {
        let ctx = context.ok_or_else(|| Error::Covariate("model uses context but none was given".into()))?;
        if bundle.z_names != context_z_names() {
            return Err(Error::Covariate(format!(
                "bundle expects covariates {:?}; supply them explicitly",
                bundle.z_names
            )));
        }
        predict_theta(bundle, reported, Some(&context_z::<T>(ctx)))
    } else {
        predict_theta(bundle, reported, None)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamFile {
    name: String,
    transform: Transform,
    link: Link,
    covariates: Vec<String>,
    coefficients: IndexMap<String, f64>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    std_errors: IndexMap<String, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DiagnosticsFile {
    n: usize,
    r2: Vec<Option<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleFile {
    family: String,
    mixture: bool,
    shifted: bool,
    violence_type: ViolenceScope,
    parameters: Vec<ParamFile>,
    diagnostics: DiagnosticsFile,
}

fn slot_from_name(s: &str) -> Result<ParamSlot> {
    [ParamSlot::Location, ParamSlot::Scale, ParamSlot::Weight, ParamSlot::Shift]
        .into_iter()
        .find(|p| p.name() == s)
        .ok_or_else(|| Error::Schema(format!("unknown parameter `{s}`")))
}

impl CoefficientBundle<f64> {
    pub fn to_json(&self) -> Result<String> {
        let parameters = self
            .model
            .params
            .iter()
            .zip(&self.coefficients)
            .enumerate()
            .map(|(i, (pm, beta))| {
                let cols = pm.covariates.columns(&self.z_names);
                ParamFile {
                    name: pm.slot.name().into(),
                    transform: pm.transform,
                    link: pm.link,
                    covariates: pm.covariates.covariate_names(),
                    coefficients: cols.iter().cloned().zip(beta.iter().copied()).collect(),
                    std_errors: self
                        .diagnostics
                        .std_errors
                        .get(i)
                        .map(|se| cols.iter().cloned().zip(se.iter().copied()).filter(|(_, v)| v.is_finite()).collect())
                        .unwrap_or_default(),
                }
            })
            .collect();
        let file = BundleFile {
            family: self.model.family.base.name().into(),
            mixture: self.model.family.mixture,
            shifted: self.model.family.shifted,
            violence_type: self.model.violence_type,
            parameters,
            diagnostics: DiagnosticsFile {
                n: self.diagnostics.n,
                r2: self.diagnostics.r2.clone(),
            },
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: BundleFile = serde_json::from_str(text)?;
        let family = FamilyId::new(file.family.parse()?, file.mixture, file.shifted);
        let slots = family.slots();
        if file.parameters.len() != slots.len() {
            return Err(Error::Schema(format!(
                "{family} needs {} parameters, bundle has {}",
                slots.len(),
                file.parameters.len()
            )));
        }
        let mut z_names: Vec<String> = Vec::new();
        let mut params = Vec::new();
        let mut coefficients = Vec::new();
        let mut std_errors = Vec::new();
        for (p, &slot) in file.parameters.iter().zip(&slots) {
            if slot_from_name(&p.name)? != slot {
                return Err(Error::Schema(format!("parameter `{}` out of order; expected `{}`", p.name, slot.name())));
            }
            let cs: CovariateSet = p.covariates.join("+").parse()?;
            let these_z: Vec<String> = p.coefficients.keys().filter(|k| k.starts_with("z_")).cloned().collect();
            if cs.use_context {
                if these_z.is_empty() {
                    return Err(Error::Schema(format!("parameter `{}` uses z but has no z_ coefficients", p.name)));
                }
                if !z_names.is_empty() && z_names != these_z {
                    return Err(Error::Schema("parameters disagree on z covariates".into()));
                }
                z_names = these_z;
            }
            let cols = cs.columns(&z_names);
            let beta = cols
                .iter()
                .map(|c| {
                    p.coefficients
                        .get(c)
                        .copied()
                        .ok_or_else(|| Error::Schema(format!("parameter `{}` missing coefficient `{c}`", p.name)))
                })
                .collect::<Result<Vec<f64>>>()?;
            if let Some(extra) = p.coefficients.keys().find(|k| !cols.contains(k)) {
                return Err(Error::Schema(format!("parameter `{}` has unexpected coefficient `{extra}`", p.name)));
            }
            let expected = ParamModel::for_slot(family.base, slot, cs);
            if (p.transform, p.link) != (expected.transform, expected.link) {
                log::warn!("parameter `{}` uses a non-default transform/link", p.name);
            }
            params.push(ParamModel {
                slot,
                transform: p.transform,
                link: p.link,
                covariates: cs,
            });
            if !p.std_errors.is_empty() {
                std_errors.push(cols.iter().map(|c| p.std_errors.get(c).copied().unwrap_or(f64::NAN)).collect::<Vec<f64>>());
            }
            coefficients.push(beta);
        }
        if z_names.is_empty() {
            z_names = context_z_names();
        }
        if std_errors.len() != coefficients.len() {
            std_errors.clear();
        }
        Ok(CoefficientBundle {
            model: ModelSpec {
                family,
                violence_type: file.violence_type,
                params,
                weight_estimator: WeightEstimator::default(),
            },
            z_names,
            coefficients,
            diagnostics: Diagnostics {
                n: file.diagnostics.n,
                r2: file.diagnostics.r2,
                std_errors,
            },
        })
    }

    pub fn read<R: Read>(mut reader: R) -> Result<Self> {
        let mut s = String::new();
        reader.read_to_string(&mut s)?;
        Self::from_json(&s)
    }

    pub fn write<W: Write>(&self, mut writer: W) -> Result<()> {
        writer.write_all(self.to_json()?.as_bytes())?;
        writer.write_all(b"\n")?;
        Ok(())
    }
}

/// The published state-based reported-value-inflated gumbel coefficients.
pub const SHIPPED_SB_JSON: &str = include_str!("../data/shipped_sb.json");

pub fn shipped_sb() -> CoefficientBundle<f64> {
    CoefficientBundle::from_json(SHIPPED_SB_JSON).expect("shipped bundle parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitting::BadScore;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn design_row_examples() {
        let r = design_row::<f64>(24, None, CovariateSet::LOGY_DUMMIES).unwrap();
        assert_eq!(r.len(), 12);
        assert_eq!(r[0], 1.0);
        assert!((r[1] - 3.218_875_824_868_201).abs() < 1e-12);
        let d24 = 2 + SPECIAL_VALUES.iter().position(|&v| v == 24).unwrap();
        for (j, v) in r.iter().enumerate().skip(2) {
            assert_eq!(*v, if j == d24 { 1.0 } else { 0.0 });
        }
        let r = design_row::<f64>(25, None, CovariateSet::LOGY_DUMMIES).unwrap();
        assert!(r[2..].iter().all(|&v| v == 0.0));
        assert_eq!(design_row::<f64>(0, None, CovariateSet::NONE).unwrap(), vec![1.0]);
        let cz = CovariateSet::new(true, false, true);
        assert!(matches!(design_row::<f64>(3, None, cz), Err(Error::Covariate(_))));
        assert_eq!(design_row::<f64>(0, Some(&[1.0]), cz).unwrap(), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn covariate_labels_roundtrip() {
        for cs in CovariateSet::all() {
            assert_eq!(cs.label().parse::<CovariateSet>().unwrap(), cs);
        }
        assert_eq!("ỹ,D_i,z".parse::<CovariateSet>().unwrap(), CovariateSet::new(true, true, true));
    }

    #[test]
    fn ols_recovers_exact_coefficients() {
        let beta = [1.5, -0.7, 2.25];
        let x: Vec<Vec<f64>> = (0..30).map(|i| {
            let t = i as f64;
            vec![1.0, t.sin(), (t * 0.3).cos() + t / 10.0]
        }).collect();
        let y: Vec<f64> = x.iter().map(|r| dot(r, &beta)).collect();
        let fit = fit_linear(&x, &y, &names(3), false).unwrap();
        for (a, b) in fit.coefficients.iter().zip(beta) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!((fit.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ols_standard_errors_match_simple_regression_formula() {
        let xs: Vec<f64> = (0..12).map(|i| i as f64 * 0.7).collect();
        let noise = [0.3, -0.2, 0.1, 0.5, -0.4, 0.0, 0.2, -0.1, -0.3, 0.4, -0.5, 0.1];
        let y: Vec<f64> = xs.iter().zip(noise).map(|(x, e)| 2.0 - 0.5 * x + e).collect();
        let x: Vec<Vec<f64>> = xs.iter().map(|&v| vec![1.0, v]).collect();
        let fit = fit_linear(&x, &y, &names(2), false).unwrap();
        let n = xs.len() as f64;
        let xbar = xs.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|v| (v - xbar).powi(2)).sum();
        let rss: f64 = x.iter().zip(&y).map(|(r, t)| (t - dot(r, &fit.coefficients)).powi(2)).sum();
        let s2 = rss / (n - 2.0);
        assert!((fit.std_errors[1] - (s2 / sxx).sqrt()).abs() < 1e-12);
        assert!((fit.std_errors[0] - (s2 * (1.0 / n + xbar * xbar / sxx)).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ols_constant_response() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64]).collect();
        let fit = fit_linear(&x, &[3.0; 10], &names(2), false).unwrap();
        assert!((fit.coefficients[0] - 3.0).abs() < 1e-12);
        assert!(fit.coefficients[1].abs() < 1e-12);
        assert_eq!(fit.r2, 0.0);
    }

    #[test]
    fn ols_singular_design() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64, 2.0 * i as f64, 0.0]).collect();
        let y: Vec<f64> = (0..10).map(|i| 1.0 + i as f64).collect();
        let cols: Vec<String> = ["intercept", "a", "b", "D_2"].iter().map(|s| s.to_string()).collect();
        match fit_linear(&x, &y, &cols, false) {
            Err(Error::Singular(c)) => assert_eq!(c, vec!["b".to_string(), "D_2".to_string()]),
            other => panic!("expected singular, got {other:?}"),
        }
        let fit = fit_linear(&x, &y, &cols, true).unwrap();
        assert!(fit.regularized);
        assert!(fit.coefficients[3].abs() < 1e-12);
        let pred: Vec<f64> = x.iter().map(|r| dot(r, &fit.coefficients)).collect();
        for (p, t) in pred.iter().zip(&y) {
            assert!((p - t).abs() < 1e-6);
        }
        assert!(matches!(
            fit_linear(&x[..2], &y[..2], &cols, true),
            Err(Error::InsufficientData { rows: 2, cols: 4 })
        ));
    }

    #[test]
    fn fractional_logit_examples() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![1.0, (i as f64).ln_1p()]).collect();
        let fit = fit_fractional_logit(&x, &[0.5; 20], &names(2)).unwrap();
        assert!(fit.coefficients.iter().all(|c| c.abs() < 1e-10));
        assert!(fit.converged);

        let truth = [-0.4, 0.3];
        let w: Vec<f64> = x.iter().map(|r| sigmoid(dot(r, &truth))).collect();
        let fit = fit_fractional_logit(&x, &w, &names(2)).unwrap();
        for (a, b) in fit.coefficients.iter().zip(truth) {
            assert!((a - b).abs() < 1e-6);
        }

        let w: Vec<f64> = (0..20).map(|i| if i < 10 { 0.0 } else { 1.0 }).collect();
        let fit = fit_fractional_logit(&x, &w, &names(2)).unwrap();
        assert!(fit.coefficients.iter().all(|c| c.abs() <= 20.0 && c.is_finite()));
        assert!(fit.bounded);
        assert!(fit_fractional_logit(&x, &[1.5; 20], &names(2)).is_err());
    }

    fn fits_from_truth(bundle: &CoefficientBundle<f64>, noise: f64, seed: u64) -> Vec<FittedTheta<f64>> {
        let mut rng = crate::rng::stream(seed, 0);
        let mut out = Vec::new();
        for coder in 0..13 {
            for &y in &crate::survey::SURVEYED_LEVELS {
                let etas = bundle.linear_predictors(y, None).unwrap();
                let mu = (etas[0] + noise * rng.sample::<f64, _>(StandardNormal)).exp_m1();
                let beta = (etas[1] + noise * rng.sample::<f64, _>(StandardNormal)).exp();
                let w = sigmoid(etas[2]);
                out.push(FittedTheta {
                    coder_id: format!("c{coder}"),
                    reported_value: y,
                    violence_type: ViolenceType::Sb,
                    context: Context::Good,
                    family: bundle.family(),
                    theta: vec![mu.max(0.0), beta, w],
                    bad: BadScore::worst(),
                });
            }
        }
        out
    }

    #[test]
    fn bundle_recovers_shipped_from_noiseless_fits() {
        let t2 = shipped_sb();
        let fits = fits_from_truth(&t2, 0.0, 1);
        let model = ModelSpec::uniform(t2.family(), ViolenceScope::Sb, CovariateSet::LOGY_DUMMIES);
        let fitted = fit_bundle(&fits, &model).unwrap();
        assert_eq!(fitted.coefficients.iter().map(Vec::len).collect::<Vec<_>>(), vec![12, 12, 12]);
        for (a, b) in fitted.coefficients.iter().flatten().zip(t2.coefficients.iter().flatten()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert_eq!(fitted.diagnostics.n, 13 * 19);
        let r2 = fitted.diagnostics.r2[0].unwrap();
        assert!(r2 > 0.999);
    }

    #[test]
    fn bundle_errors_and_pooling() {
        let model = ModelSpec::uniform(shipped_sb().family(), ViolenceScope::All, CovariateSet::LOGY_DUMMIES);
        assert!(matches!(
            fit_bundle::<f64, _>(&Vec::new(), &model),
            Err(Error::InsufficientData { rows: 0, .. })
        ));
        let t2 = shipped_sb();
        let mut fits = fits_from_truth(&t2, 0.05, 4);
        for (i, f) in fits.iter_mut().enumerate() {
            f.violence_type = ViolenceType::ALL[i % 3];
        }
        let pooled = fit_bundle(&fits, &model).unwrap();
        let mut concat: Vec<FittedTheta<f64>> = Vec::new();
        for t in ViolenceType::ALL {
            concat.extend(fits.iter().filter(|f| f.violence_type == t).cloned());
        }
        let again = fit_bundle(&concat, &model).unwrap();
        for (a, b) in pooled.coefficients.iter().flatten().zip(again.coefficients.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
        let sb_only = ModelSpec { violence_type: ViolenceScope::Sb, ..model };
        assert_eq!(fit_bundle(&fits, &sb_only).unwrap().diagnostics.n, fits.len().div_ceil(3));
    }

    #[test]
    fn predict_theta_shipped_examples() {
        let t2 = shipped_sb();
        let s = predict_theta(&t2, 0, None).unwrap();
        let th = s.theta();
        assert!((th[0] - 0.8076).abs() < 1e-3);
        assert!((th[1] - 0.7356).abs() < 1e-3);
        assert!((th[2] - 0.4763).abs() < 1e-3);
        assert_eq!(s.anchor(), Some(0));

        let s = predict_theta(&t2, 100, None).unwrap();
        assert!((s.mean() - 130.7).abs() < 0.1, "mean {}", s.mean());

        let e24 = t2.linear_predictors(24, None).unwrap();
        let trend = t2.coefficient(ParamSlot::Scale, "intercept").unwrap()
            + t2.coefficient(ParamSlot::Scale, "log1p_y").unwrap() * 24f64.ln_1p();
        assert!((e24[1] - trend - (-1.587)).abs() < 1e-12);
    }

    #[test]
    fn ols_logit_estimator_is_available() {
        let t2 = shipped_sb();
        let fits = fits_from_truth(&t2, 0.0, 2);
        let mut model = ModelSpec::uniform(t2.family(), ViolenceScope::Sb, CovariateSet::LOGY_DUMMIES);
        model.weight_estimator = WeightEstimator::OlsLogit;
        let b = fit_bundle(&fits, &model).unwrap();
        for (a, t) in b.coefficients[2].iter().zip(&t2.coefficients[2]) {
            assert!((a - t).abs() < 1e-6);
        }
    }

    #[test]
    fn bundle_json_roundtrip_and_errors() {
        let t2 = shipped_sb();
        let text = t2.to_json().unwrap();
        assert_eq!(CoefficientBundle::from_json(&text).unwrap(), t2);
        assert!(text.contains("\"D_24\": -1.587"));
        assert!(CoefficientBundle::from_json("{not json").is_err());
        let broken = text.replace("\"D_24\"", "\"D_25\"");
        assert!(matches!(CoefficientBundle::from_json(&broken), Err(Error::Schema(_))));
    }

    proptest! {
        #[test]
        fn predicted_weight_and_scale_valid(y in 0u64..5_000_000) {
            let s = predict_theta(&shipped_sb(), y, None).unwrap();
            prop_assert!(s.theta()[1] > 0.0);
            prop_assert!((0.0..=1.0).contains(&s.theta()[2]));
            prop_assert!(s.theta()[0] >= 0.0);
        }
    }
}
