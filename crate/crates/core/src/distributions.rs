//! Parametric families, their reported-value-inflated mixtures and shifted
//! variants.
//!
//! A mixture places weight `w` on a point mass at the reported value `ỹ` and
//! `1 - w` on the base family. A shift `s` moves the base family only; the
//! point mass always sits at `ỹ`.
//!
//! Parameter vectors are ordered location/rate, scale/dispersion (absent for
//! poisson), mixture weight, shift. Lognormal takes `(meanlog, sdlog)` and the
//! negative binomial takes `(mean, size)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{self, from_u64, lit, Real, EULER_GAMMA};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BaseFamily {
    Gumbel,
    Normal,
    Lognormal,
    Poisson,
    NegBin,
}

impl BaseFamily {
    pub const ALL: [BaseFamily; 5] = [
        BaseFamily::Gumbel,
        BaseFamily::Normal,
        BaseFamily::Lognormal,
        BaseFamily::Poisson,
        BaseFamily::NegBin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaseFamily::Gumbel => "gumbel",
            BaseFamily::Normal => "normal",
            BaseFamily::Lognormal => "lognormal",
            BaseFamily::Poisson => "poisson",
            BaseFamily::NegBin => "negbin",
        }
    }

    pub fn is_discrete(self) -> bool {
        matches!(self, BaseFamily::Poisson | BaseFamily::NegBin)
    }

    pub fn n_base_params(self) -> usize {
        match self {
            BaseFamily::Poisson => 1,
            _ => 2,
        }
    }
}

impl FromStr for BaseFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaseFamily::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Schema(format!("unknown base family `{s}`")))
    }
}

/// Role of one entry in a parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamSlot {
    Location,
    Scale,
    Weight,
    Shift,
}

impl ParamSlot {
    /// Zero-based column in the four-slot export layout (`theta1..theta4`).
    pub fn column(self) -> usize {
        match self {
            ParamSlot::Location => 0,
            ParamSlot::Scale => 1,
            ParamSlot::Weight => 2,
            ParamSlot::Shift => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamSlot::Location => "location",
            ParamSlot::Scale => "scale",
            ParamSlot::Weight => "weight",
            ParamSlot::Shift => "shift",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FamilyId {
    pub base: BaseFamily,
    /// Reported-value inflated.
    pub mixture: bool,
    pub shifted: bool,
}

impl FamilyId {
    pub const fn new(base: BaseFamily, mixture: bool, shifted: bool) -> Self {
        FamilyId {
            base,
            mixture,
            shifted,
        }
    }

    pub const fn plain(base: BaseFamily) -> Self {
        FamilyId::new(base, false, false)
    }

    pub const fn mixture(base: BaseFamily) -> Self {
        FamilyId::new(base, true, false)
    }

    /// All twenty families: five bases × mixture × shifted.
    pub fn all() -> Vec<FamilyId> {
        let mut out = Vec::with_capacity(20);
        for base in BaseFamily::ALL {
            for mixture in [false, true] {
                for shifted in [false, true] {
                    out.push(FamilyId::new(base, mixture, shifted));
                }
            }
        }
        out
    }

    pub fn n_params(self) -> usize {
        self.base.n_base_params() + usize::from(self.mixture) + usize::from(self.shifted)
    }

    pub fn slots(self) -> Vec<ParamSlot> {
        let mut slots = vec![ParamSlot::Location];
        if self.base.n_base_params() == 2 {
            slots.push(ParamSlot::Scale);
        }
        if self.mixture {
            slots.push(ParamSlot::Weight);
        }
        if self.shifted {
            slots.push(ParamSlot::Shift);
        }
        slots
    }

    /// Index of `slot` in this family's parameter vector.
    pub fn slot_index(self, slot: ParamSlot) -> Option<usize> {
        self.slots().iter().position(|&s| s == slot)
    }

    /// Same family without the point-mass component.
    pub fn without_mixture(self) -> FamilyId {
        FamilyId::new(self.base, false, self.shifted)
    }

    pub fn label(self) -> String {
        let mut s = self.base.name().to_string();
        if self.mixture {
            s.push_str("-mix");
        }
        if self.shifted {
            s.push_str("-shift");
        }
        s
    }
}

impl fmt::Display for FamilyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for FamilyId {
    type Err = Error;

    /// Parses labels such as `gumbel`, `gumbel-mix`, `normal-shift`,
    /// `negbin-mix-shift`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split('-');
        let base: BaseFamily = parts.next().unwrap_or_default().parse()?;
        let mut mixture = false;
        let mut shifted = false;
        for p in parts {
            match p {
                "mix" if !mixture => mixture = true,
                "shift" if !shifted => shifted = true,
                _ => return Err(Error::Schema(format!("unknown family label `{s}`"))),
            }
        }
        Ok(FamilyId::new(base, mixture, shifted))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Base<T> {
    Gumbel { mu: T, beta: T },
    Normal { mu: T, sigma: T },
    Lognormal { meanlog: T, sdlog: T },
    Poisson { lambda: T },
    NegBin { mean: T, size: T },
}

impl<T: Real> Base<T> {
    fn is_discrete(&self) -> bool {
        matches!(self, Base::Poisson { .. } | Base::NegBin { .. })
    }

    /// Continuous density, or the pmf at integer `x` for discrete bases.
    fn pdf(&self, x: T) -> T {
        match *self {
            Base::Gumbel { mu, beta } => {
                let z = (x - mu) / beta;
                (-(z + (-z).exp())).exp() / beta
            }
            Base::Normal { mu, sigma } => {
                let z = (x - mu) / sigma;
                (-z * z / lit(2.0)).exp() / (sigma * T::TAU().sqrt())
            }
            Base::Lognormal { meanlog, sdlog } => {
                if x <= T::zero() {
                    return T::zero();
                }
                let z = (x.ln() - meanlog) / sdlog;
                (-z * z / lit(2.0)).exp() / (x * sdlog * T::TAU().sqrt())
            }
            Base::Poisson { .. } | Base::NegBin { .. } => {
                if x < T::zero() || x.fract() != T::zero() {
                    T::zero()
                } else {
                    self.pmf(x)
                }
            }
        }
    }

    /// pmf of a discrete base at nonnegative integer `k`.
    fn pmf(&self, k: T) -> T {
        match *self {
            Base::Poisson { lambda } => {
                (k * lambda.ln() - lambda - numeric::ln_gamma(k + T::one())).exp()
            }
            Base::NegBin { mean, size } => {
                let p = size / (size + mean);
                (numeric::ln_gamma(k + size) - numeric::ln_gamma(size)
                    - numeric::ln_gamma(k + T::one())
                    + size * p.ln()
                    + k * (mean / (size + mean)).ln())
                .exp()
            }
            _ => unreachable!("pmf on continuous base"),
        }
    }

    fn cdf(&self, x: T) -> T {
        match *self {
            Base::Gumbel { mu, beta } => (-(-(x - mu) / beta).exp()).exp(),
            Base::Normal { mu, sigma } => {
                numeric::erfc(-(x - mu) / (sigma * T::SQRT_2())) / lit(2.0)
            }
            Base::Lognormal { meanlog, sdlog } => {
                if x <= T::zero() {
                    T::zero()
                } else {
                    numeric::erfc(-(x.ln() - meanlog) / (sdlog * T::SQRT_2())) / lit(2.0)
                }
            }
            Base::Poisson { lambda } => {
                if x < T::zero() {
                    T::zero()
                } else {
                    numeric::gamma_q(x.floor() + T::one(), lambda)
                }
            }
            Base::NegBin { mean, size } => {
                if x < T::zero() {
                    T::zero()
                } else {
                    numeric::beta_reg(size, x.floor() + T::one(), size / (size + mean))
                }
            }
        }
    }

    /// Survival function `1 - cdf`, accurate in the upper tail.
    fn sf(&self, x: T) -> T {
        match *self {
            Base::Gumbel { mu, beta } => -(-(-(x - mu) / beta).exp()).exp_m1(),
            Base::Normal { mu, sigma } => numeric::erfc((x - mu) / (sigma * T::SQRT_2())) / lit(2.0),
            Base::Lognormal { meanlog, sdlog } => {
                if x <= T::zero() {
                    T::one()
                } else {
                    numeric::erfc((x.ln() - meanlog) / (sdlog * T::SQRT_2())) / lit(2.0)
                }
            }
            Base::Poisson { lambda } => {
                if x < T::zero() {
                    T::one()
                } else {
                    numeric::gamma_p(x.floor() + T::one(), lambda)
                }
            }
            Base::NegBin { mean, size } => {
                if x < T::zero() {
                    T::one()
                } else {
                    numeric::beta_reg(x.floor() + T::one(), size, mean / (size + mean))
                }
            }
        }
    }

    /// Upper partial moment `E[X; X > a]`.
    fn upper_moment(&self, a: T) -> T {
        match *self {
            Base::Normal { mu, sigma } => {
                let d = (a - mu) / sigma;
                let phi = (-d * d / lit(2.0)).exp() / (T::PI() * lit(2.0)).sqrt();
                mu * self.sf(a) + sigma * phi
            }
            Base::Lognormal { meanlog, sdlog } => {
                if a <= T::zero() {
                    return self.mean();
                }
                let d = (a.ln() - meanlog - sdlog * sdlog) / (sdlog * T::SQRT_2());
                self.mean() * numeric::erfc(d) / lit(2.0)
            }
            Base::Gumbel { mu, beta } => {
                // X = mu - beta ln E with E ~ Exp(1); X > a iff E < t.
                let t = (-(a - mu) / beta).exp();
                if t > lit(6.0) {
                    // Complement of the lower part, which is bounded.
                    let below = mu * self.cdf(a) + beta * gumbel_log_moment(t);
                    return self.mean() - below;
                }
                let mut acc = T::zero();
                let mut term = T::one();
                let lt = t.ln();
                for n in 0..200u32 {
                    let n1 = from_u64::<T>(u64::from(n) + 1);
                    let scale = term * t.powi(n as i32 + 1);
                    acc = acc + scale * (T::one() / (n1 * n1) - lt / n1);
                    term = -term / n1;
                    if n > 0 && scale.abs() * (T::one() + lt.abs()) < T::epsilon() * acc.abs() {
                        break;
                    }
                }
                mu * self.sf(a) + beta * acc
            }
            // k pmf(k) = mean pmf'(k - 1), with pmf' the size-augmented law.
            Base::Poisson { lambda } => lambda * self.sf(a - T::one()),
            Base::NegBin { mean, size } => {
                let bumped = Base::NegBin {
                    mean: mean * (size + T::one()) / size,
                    size: size + T::one(),
                };
                mean * bumped.sf(a - T::one())
            }
        }
    }

    /// Mass in `(a, b]`, choosing cdf or sf differences by tail.
    fn interval(&self, a: T, b: T) -> T {
        if b <= a {
            return T::zero();
        }
        let m = if a.is_finite() && self.cdf(a) > lit(0.5) {
            self.sf(a) - self.sf(b)
        } else {
            self.cdf(b) - self.cdf(a)
        };
        m.max(T::zero())
    }

    fn quantile(&self, p: T) -> T {
        match *self {
            Base::Gumbel { mu, beta } => mu - beta * (-p.ln()).ln(),
            Base::Normal { mu, sigma } => mu + sigma * probit(p),
            Base::Lognormal { meanlog, sdlog } => (meanlog + sdlog * probit(p)).exp(),
            Base::Poisson { .. } | Base::NegBin { .. } => self.discrete_quantile(p),
        }
    }

    /// Smallest integer `k >= 0` with `cdf(k) >= p`.
    fn discrete_quantile(&self, p: T) -> T {
        // Compare in the upper tail via the survival function, where the
        // cdf would round to one.
        let q = T::one() - p;
        let below = |k: T| if p > lit(0.5) { self.sf(k) > q } else { self.cdf(k) < p };
        let cap: T = lit(1e15);
        let mut hi = self.mean().ceil().max(T::one());
        while below(hi) {
            hi = hi * lit(2.0);
            if hi > cap {
                return cap;
            }
        }
        if !below(T::zero()) {
            return T::zero();
        }
        let mut lo = T::zero();
        while hi - lo > T::one() {
            let mid = ((lo + hi) / lit(2.0)).floor();
            if !below(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }

    fn mean(&self) -> T {
        match *self {
            Base::Gumbel { mu, beta } => mu + beta * lit(EULER_GAMMA),
            Base::Normal { mu, .. } => mu,
            Base::Lognormal { meanlog, sdlog } => (meanlog + sdlog * sdlog / lit(2.0)).exp(),
            Base::Poisson { lambda } => lambda,
            Base::NegBin { mean, .. } => mean,
        }
    }

    fn variance(&self) -> T {
        match *self {
            Base::Gumbel { beta, .. } => T::PI() * T::PI() * beta * beta / lit(6.0),
            Base::Normal { sigma, .. } => sigma * sigma,
            Base::Lognormal { meanlog, sdlog } => {
                let s2 = sdlog * sdlog;
                s2.exp_m1() * (lit::<T>(2.0) * meanlog + s2).exp()
            }
            Base::Poisson { lambda } => lambda,
            Base::NegBin { mean, size } => mean + mean * mean / size,
        }
    }
}

/// Standard normal quantile.
fn probit<T: Real>(p: T) -> T {
    -T::SQRT_2() * numeric::erfc_inv(lit::<T>(2.0) * p)
}

/// Largest probability strictly below one that `T` represents sensibly.
/// `∫_t^∞ (-ln e) e^{-e} de` for `t >= 6`, by Gauss-Laguerre on the shifted
/// exponential: `e^{-t} ∫_0^∞ -ln(t + u) e^{-u} du`.
fn gumbel_log_moment<T: Real>(t: T) -> T {
    const NODES: [(f64, f64); 8] = [
        (0.170_279_632_305_101, 0.369_188_589_341_638),
        (0.903_701_776_799_380, 0.418_786_780_814_343),
        (2.251_086_629_866_131, 0.175_794_986_637_172),
        (4.266_700_170_287_659, 0.033_343_492_261_216),
        (7.045_905_402_393_466, 0.002_794_536_235_226),
        (10.758_516_010_180_995, 0.000_090_765_087_734),
        (15.740_678_641_278_004, 0.000_000_848_574_672),
        (22.863_131_736_889_264, 0.000_000_001_048_001),
    ];
    let s = NODES
        .iter()
        .fold(T::zero(), |acc, &(x, w)| acc - lit::<T>(w) * (t + lit(x)).ln());
    (-t).exp() * s
}

fn upper_tail<T: Real>() -> T {
    T::one() - lit::<T>(1e-15).max(T::epsilon() * lit(4.0))
}

/// A parametric family with a validated parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionSpec<T> {
    family: FamilyId,
    theta: Vec<T>,
    anchor: Option<u64>,
    base: Base<T>,
}

impl<T: Real> DistributionSpec<T> {
    /// Validates `theta` against `family`. `anchor` is the reported value and
    /// is required for mixtures.
    pub fn new(family: FamilyId, theta: Vec<T>, anchor: Option<u64>) -> Result<Self> {
        if theta.len() != family.n_params() {
            return Err(Error::ParameterDomain(format!(
                "{family} takes {} parameters, got {}",
                family.n_params(),
                theta.len()
            )));
        }
        if let Some(bad) = theta.iter().find(|v| !v.is_finite()) {
            return Err(Error::ParameterDomain(format!("non-finite parameter {bad}")));
        }
        let pos = |name: &str, v: T| {
            if v > T::zero() {
                Ok(v)
            } else {
                Err(Error::ParameterDomain(format!("{name} must be positive, got {v}")))
            }
        };
        let base = match family.base {
            BaseFamily::Gumbel => Base::Gumbel {
                mu: theta[0],
                beta: pos("gumbel scale", theta[1])?,
            },
            BaseFamily::Normal => Base::Normal {
                mu: theta[0],
                sigma: pos("normal sd", theta[1])?,
            },
            BaseFamily::Lognormal => Base::Lognormal {
                meanlog: theta[0],
                sdlog: pos("lognormal sdlog", theta[1])?,
            },
            BaseFamily::Poisson => Base::Poisson {
                lambda: pos("poisson rate", theta[0])?,
            },
            BaseFamily::NegBin => Base::NegBin {
                mean: pos("negbin mean", theta[0])?,
                size: pos("negbin size", theta[1])?,
            },
        };
        let spec = DistributionSpec {
            family,
            theta,
            anchor,
            base,
        };
        if family.mixture {
            let w = spec.weight();
            if !(T::zero()..=T::one()).contains(&w) {
                return Err(Error::ParameterDomain(format!("mixture weight {w} outside [0,1]")));
            }
            if anchor.is_none() {
                return Err(Error::ParameterDomain(
                    "mixture spec requires a reported-value anchor".into(),
                ));
            }
        }
        if family.shifted && family.base.is_discrete() && spec.shift().fract() != T::zero() {
            return Err(Error::ParameterDomain(format!(
                "discrete base {} needs an integer shift, got {}",
                family.base.name(),
                spec.shift()
            )));
        }
        Ok(spec)
    }

    pub fn gumbel(mu: T, beta: T) -> Result<Self> {
        Self::new(FamilyId::plain(BaseFamily::Gumbel), vec![mu, beta], None)
    }

    pub fn normal(mu: T, sigma: T) -> Result<Self> {
        Self::new(FamilyId::plain(BaseFamily::Normal), vec![mu, sigma], None)
    }

    pub fn lognormal(meanlog: T, sdlog: T) -> Result<Self> {
        Self::new(FamilyId::plain(BaseFamily::Lognormal), vec![meanlog, sdlog], None)
    }

    pub fn poisson(lambda: T) -> Result<Self> {
        Self::new(FamilyId::plain(BaseFamily::Poisson), vec![lambda], None)
    }

    pub fn negbin(mean: T, size: T) -> Result<Self> {
        Self::new(FamilyId::plain(BaseFamily::NegBin), vec![mean, size], None)
    }

    pub fn gumbel_mixture(mu: T, beta: T, w: T, reported: u64) -> Result<Self> {
        Self::new(FamilyId::mixture(BaseFamily::Gumbel), vec![mu, beta, w], Some(reported))
    }

    /// Adds a point mass of weight `w` at `reported`.
    pub fn with_mixture(self, w: T, reported: u64) -> Result<Self> {
        if self.family.mixture {
            return Err(Error::ParameterDomain(format!("{} is already a mixture", self.family)));
        }
        let family = FamilyId::new(self.family.base, true, self.family.shifted);
        let mut theta = self.theta;
        let at = family.slot_index(ParamSlot::Weight).expect("mixture slot");
        theta.insert(at, w);
        Self::new(family, theta, Some(reported))
    }

    pub fn with_shift(self, s: T) -> Result<Self> {
        if self.family.shifted {
            return Err(Error::ParameterDomain(format!("{} is already shifted", self.family)));
        }
        let family = FamilyId::new(self.family.base, self.family.mixture, true);
        let mut theta = self.theta;
        theta.push(s);
        Self::new(family, theta, self.anchor)
    }

    pub fn family(&self) -> FamilyId {
        self.family
    }

    pub fn theta(&self) -> &[T] {
        &self.theta
    }

    pub fn anchor(&self) -> Option<u64> {
        self.anchor
    }

    pub fn param(&self, slot: ParamSlot) -> Option<T> {
        self.family.slot_index(slot).map(|i| self.theta[i])
    }

    /// Point-mass weight; zero for non-mixtures.
    pub fn weight(&self) -> T {
        self.param(ParamSlot::Weight).unwrap_or_else(T::zero)
    }

    /// Shift of the base; zero for unshifted families.
    pub fn shift(&self) -> T {
        self.param(ParamSlot::Shift).unwrap_or_else(T::zero)
    }

    fn anchor_value(&self) -> T {
        self.anchor.map(from_u64).unwrap_or_else(T::zero)
    }

    fn has_point(&self) -> bool {
        self.family.mixture
    }

    /// Continuous (or, for discrete bases, pmf) component at `x`, scaled by
    /// `1 - w`. The point mass is not included; see [`Self::point_mass`].
    pub fn density(&self, x: T) -> T {
        (T::one() - self.weight()) * self.base.pdf(x - self.shift())
    }

    /// Mass of the point component at `x`.
    pub fn point_mass(&self, x: T) -> T {
        if self.has_point() && x == self.anchor_value() {
            self.weight()
        } else {
            T::zero()
        }
    }

    pub fn cdf(&self, x: T) -> T {
        let w = self.weight();
        let base = (T::one() - w) * self.base.cdf(x - self.shift());
        if self.has_point() && x >= self.anchor_value() {
            (base + w).min(T::one())
        } else {
            base
        }
    }

    /// Smallest `x` with `cdf(x) >= p`.
    pub fn quantile(&self, p: T) -> Result<T> {
        if !(p > T::zero() && p < T::one()) {
            return Err(Error::Domain(format!("quantile probability {p} outside (0,1)")));
        }
        let s = self.shift();
        if !self.has_point() {
            return Ok(self.base.quantile(p) + s);
        }
        let w = self.weight();
        let y = self.anchor_value();
        if w >= T::one() {
            return Ok(y);
        }
        let rest = T::one() - w;
        // CDF just below the anchor.
        let below = if self.base.is_discrete() {
            rest * self.base.cdf(y - s - T::one())
        } else {
            rest * self.base.cdf(y - s)
        };
        let at = self.cdf(y);
        if p <= below {
            Ok(self.base.quantile((p / rest).min(upper_tail())) + s)
        } else if p <= at {
            Ok(y)
        } else {
            let q = ((p - w) / rest).min(upper_tail());
            Ok(self.base.quantile(q) + s)
        }
    }

    pub fn mean(&self) -> T {
        let w = self.weight();
        w * self.anchor_value() + (T::one() - w) * (self.base.mean() + self.shift())
    }

    pub fn variance(&self) -> T {
        let w = self.weight();
        let bm = self.base.mean() + self.shift();
        let y = self.anchor_value();
        let second = w * y * y + (T::one() - w) * (self.base.variance() + bm * bm);
        let m = self.mean();
        second - m * m
    }

    /// `n` draws: the anchor with probability `w`, otherwise an
    /// inverse-transform draw from the shifted base.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<T> {
        let inv = BaseInverse::new(&self.base);
        let w = self.weight();
        let y = self.anchor_value();
        let s = self.shift();
        (0..n)
            .map(|_| {
                if self.has_point() && uniform::<T, R>(rng) < w {
                    y
                } else {
                    inv.draw(&self.base, uniform(rng)) + s
                }
            })
            .collect()
    }

    /// Restricts the distribution to the nonnegative integers by binning the
    /// base on half-integer boundaries and renormalising the mass lost below
    /// `-0.5`.
    pub fn discretize(&self) -> Result<TruncatedDiscreteView<T>> {
        let w = self.weight();
        let lower = self.base.cdf(lit::<T>(-0.5) - self.shift());
        let normalizer = w + (T::one() - w) * (T::one() - lower);
        if !(to_f64_(normalizer) > 1e-12) {
            return Err(Error::DegenerateTruncation(to_f64_(normalizer)));
        }
        Ok(TruncatedDiscreteView {
            spec: self.clone(),
            normalizer,
            lower,
        })
    }
}

fn to_f64_<T: Real>(x: T) -> f64 {
    numeric::to_f64(x)
}

/// Open-interval uniform draw.
fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return lit(u);
        }
    }
}

/// Inverse-CDF sampler for a base; discrete bases use a cumulative table.
struct BaseInverse<T> {
    table: Vec<T>,
}

impl<T: Real> BaseInverse<T> {
    fn new(base: &Base<T>) -> Self {
        let mut table = Vec::new();
        if base.is_discrete() {
            let top = base.discrete_quantile(upper_tail()).to_usize().unwrap_or(0);
            if top < 50_000_000 {
                table.reserve(top + 1);
                let mut acc = T::zero();
                for k in 0..=top {
                    acc = acc + base.pmf(from_u64(k as u64));
                    table.push(acc);
                }
            }
        }
        BaseInverse { table }
    }

    fn draw(&self, base: &Base<T>, u: T) -> T {
        if base.is_discrete() && !self.table.is_empty() {
            let k = self.table.partition_point(|&c| c < u);
            if k < self.table.len() {
                return from_u64(k as u64);
            }
        }
        base.quantile(u.min(upper_tail()))
    }
}

/// A distribution restricted to the nonnegative integers.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedDiscreteView<T> {
    spec: DistributionSpec<T>,
    normalizer: T,
    /// Base cdf at the truncation boundary `-0.5 - s`.
    lower: T,
}

impl<T: Real> TruncatedDiscreteView<T> {
    pub fn spec(&self) -> &DistributionSpec<T> {
        &self.spec
    }

    /// Total retained mass before renormalisation.
    pub fn normalizer(&self) -> T {
        self.normalizer
    }

    /// Probability of the point component after renormalisation.
    pub fn point_probability(&self) -> T {
        self.spec.weight() / self.normalizer
    }

    /// Unnormalised base mass falling on integers `lo..=hi` (`hi = None` is
    /// unbounded).
    fn base_mass(&self, lo: u64, hi: Option<u64>) -> T {
        let s = self.spec.shift();
        let half = lit::<T>(0.5);
        let a = from_u64::<T>(lo) - half - s;
        match hi {
            Some(h) => {
                if h < lo {
                    return T::zero();
                }
                if self.spec.base.is_discrete() && h == lo {
                    let k = from_u64::<T>(lo) - s;
                    return if k < T::zero() { T::zero() } else { self.spec.base.pmf(k) };
                }
                self.spec.base.interval(a, from_u64::<T>(h) + half - s)
            }
            None => {
                if lo == 0 {
                    T::one() - self.lower
                } else {
                    self.spec.base.sf(a)
                }
            }
        }
    }

    /// Probability of the integer range `lo..=hi` (`hi = None` is unbounded).
    pub fn range_mass(&self, lo: u64, hi: Option<u64>) -> T {
        let w = self.spec.weight();
        let mut m = (T::one() - w) * self.base_mass(lo, hi);
        if let Some(y) = self.spec.anchor.filter(|_| self.spec.has_point()) {
            if y >= lo && hi.map_or(true, |h| y <= h) {
                m = m + w;
            }
        }
        m / self.normalizer
    }

    pub fn pmf(&self, k: u64) -> T {
        self.range_mass(k, Some(k))
    }

    pub fn cdf(&self, k: u64) -> T {
        self.range_mass(0, Some(k))
    }

    /// Integer above which the remaining mass is negligible.
    pub fn support_cutoff(&self) -> u64 {
        let q = self.spec.base.quantile(upper_tail()) + self.spec.shift();
        let q = q.max(T::zero()).ceil().to_u64().unwrap_or(u64::MAX / 2);
        q.max(self.spec.anchor.unwrap_or(0)).saturating_add(1)
    }

    /// Mean by summing the pmf over the support; beyond a million terms the
    /// remaining tail is added in closed form.
    pub fn mean(&self) -> T {
        const MAX_TERMS: u64 = 1_000_000;
        let w = self.spec.weight();
        let s = self.spec.shift();
        let cutoff = self.support_cutoff();
        let n = cutoff.min(self.spec.anchor.unwrap_or(0).saturating_add(MAX_TERMS));
        let mut acc = T::zero();
        for k in 1..=n {
            acc = acc + from_u64::<T>(k) * self.base_mass(k, Some(k));
        }
        if n < cutoff {
            // E[X + s; X + s > boundary] for the bins above n.
            let a = if self.spec.base.is_discrete() {
                from_u64::<T>(n) - s
            } else {
                from_u64::<T>(n) + lit(0.5) - s
            };
            acc = acc + self.spec.base.upper_moment(a) + s * self.spec.base.sf(a);
        }
        let point = if self.spec.has_point() {
            w * self.spec.anchor_value()
        } else {
            T::zero()
        };
        (point + (T::one() - w) * acc) / self.normalizer
    }

    /// Smallest `k` with `cdf(k) >= p`.
    pub fn quantile(&self, p: T) -> Result<u64> {
        if !(p > T::zero() && p < T::one()) {
            return Err(Error::Domain(format!("quantile probability {p} outside (0,1)")));
        }
        let mut lo = 0u64;
        let mut hi = self.support_cutoff();
        if self.cdf(0) >= p {
            return Ok(0);
        }
        while self.cdf(hi) < p {
            hi = hi.saturating_mul(2);
            if hi == u64::MAX {
                return Ok(hi);
            }
        }
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.cdf(mid) >= p {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }

    /// Reusable integer sampler for this view.
    pub fn sampler(&self) -> CountSampler<T> {
        CountSampler {
            view: self.clone(),
            inverse: BaseInverse::new(&self.spec.base),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<u64> {
        let sampler = self.sampler();
        (0..n).map(|_| sampler.draw(rng)).collect()
    }
}

/// Exact inverse-transform sampler over a [`TruncatedDiscreteView`].
pub struct CountSampler<T> {
    view: TruncatedDiscreteView<T>,
    inverse: BaseInverse<T>,
}

impl<T: Real> CountSampler<T> {
    pub fn view(&self) -> &TruncatedDiscreteView<T> {
        &self.view
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let spec = &self.view.spec;
        if spec.has_point() {
            let u: T = uniform(rng);
            if u < self.view.point_probability() {
                return spec.anchor.unwrap_or(0);
            }
        }
        let lower = self.view.lower;
        let v = lower + (T::one() - lower) * uniform::<T, R>(rng);
        let x = self.inverse.draw(&spec.base, v.min(upper_tail())) + spec.shift();
        let k = (x + lit(0.5)).floor();
        if k <= T::zero() {
            0
        } else {
            k.to_u64().unwrap_or(u64::MAX)
        }
    }
}
