//! Stage one: match a parametric family to each coder distribution.
//!
//! Fitness is the binned absolute difference (BAD): the L1 distance between
//! the coder's bin probabilities and the family's mass on the same bins. A
//! genetic algorithm searches the parameter box for the lowest BAD.

use std::cmp::Ordering;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{BaseFamily, DistributionSpec, FamilyId, ParamSlot};
use crate::error::{Error, Result};
use crate::numeric::{from_u64, lit, to_f64, Real};
use crate::rng;
use crate::survey::{CoderDistribution, Context, FatalityBin, ViolenceType};

/// L1 distance between two binned mass vectors; lies in `[0, 2]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct BadScore<T>(T);

impl<T: Real> BadScore<T> {
    /// Worst possible score, also used for failed evaluations.
    pub fn worst() -> Self {
        BadScore(lit(2.0))
    }

    /// Clamps into `[0, 2]`.
    pub fn new(value: T) -> Self {
        BadScore(value.max(T::zero()).min(lit(2.0)))
    }

    pub fn value(self) -> T {
        self.0
    }
}

/// Mass of the integer-restricted spec on each bin.
pub fn bin_mass<T: Real>(spec: &DistributionSpec<T>, bins: &[FatalityBin]) -> Result<Vec<T>> {
    let view = spec.discretize()?;
    Ok(bins.iter().map(|b| view.range_mass(b.lo, b.hi)).collect())
}

pub fn bad_vectors<T: Real>(a: &[T], b: &[T]) -> Result<BadScore<T>> {
    if a.len() != b.len() {
        return Err(Error::BinMismatch(format!("{} bins vs {} bins", a.len(), b.len())));
    }
    let sum = a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y).abs());
    Ok(BadScore(sum.min(lit(2.0))))
}

/// BAD between a spec binned on the coder's bins and the coder's belief.
pub fn bad<T: Real>(spec: &DistributionSpec<T>, coder: &CoderDistribution<T>) -> Result<BadScore<T>> {
    if spec.family().mixture && spec.anchor() != Some(coder.reported_value) {
        return Err(Error::AnchorMismatch {
            spec: spec.anchor(),
            coder: coder.reported_value,
        });
    }
    let mass = bin_mass(spec, &coder.fatality_bins())?;
    bad_vectors(&coder.probabilities(), &mass)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaConfig<T> {
    pub population_size: usize,
    pub generations: usize,
    pub tournament_size: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    /// Per-parameter Gaussian mutation sd; defaults to 5% of each bound width.
    pub mutation_scale: Option<Vec<T>>,
    pub seed: u64,
    /// Per-parameter search box; defaults to [`default_bounds`].
    pub bounds: Option<Vec<(T, T)>>,
    pub elitism: usize,
}

impl<T: Real> Default for GaConfig<T> {
    fn default() -> Self {
        GaConfig {
            population_size: 100,
            generations: 100,
            tournament_size: 4,
            crossover_rate: 0.9,
            mutation_rate: 0.2,
            mutation_scale: None,
            seed: 0,
            bounds: None,
            elitism: 1,
        }
    }
}

impl<T: Real> GaConfig<T> {
    pub fn with_seed(seed: u64) -> Self {
        GaConfig {
            seed,
            ..Self::default()
        }
    }

    fn validate(&self, n_params: usize) -> Result<()> {
        if self.population_size == 0 {
            return Err(Error::EmptyPopulation);
        }
        if self.generations == 0 || self.tournament_size == 0 {
            return Err(Error::Domain("generations and tournament size must be >= 1".into()));
        }
        if let Some(b) = &self.bounds {
            if b.len() != n_params {
                return Err(Error::Domain(format!("{} bounds for {n_params} parameters", b.len())));
            }
            if let Some((lo, hi)) = b.iter().find(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
                return Err(Error::Domain(format!("invalid bound [{lo}, {hi}]")));
            }
        }
        if let Some(s) = &self.mutation_scale {
            if s.len() != n_params {
                return Err(Error::Domain(format!("{} mutation scales for {n_params} parameters", s.len())));
            }
        }
        Ok(())
    }
}

/// Search box anchored on the reported value.
pub fn default_bounds<T: Real>(family: FamilyId, reported: u64) -> Vec<(T, T)> {
    let m: T = from_u64(reported.max(5));
    let twenty = lit::<T>(20.0) * m;
    family
        .slots()
        .into_iter()
        .map(|slot| match (slot, family.base) {
            (ParamSlot::Location, BaseFamily::Lognormal) => (lit(-3.0), twenty.ln()),
            (ParamSlot::Location, BaseFamily::Poisson | BaseFamily::NegBin) => (lit(1e-3), twenty),
            (ParamSlot::Location, _) => (T::zero(), twenty),
            (ParamSlot::Scale, BaseFamily::Lognormal) => (lit(1e-3), lit(3.0)),
            (ParamSlot::Scale, _) => (lit(1e-3), lit::<T>(10.0) * m),
            (ParamSlot::Weight, _) => (T::zero(), T::one()),
            (ParamSlot::Shift, _) => (-m, m),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FittedTheta<T> {
    pub coder_id: String,
    pub reported_value: u64,
    pub violence_type: ViolenceType,
    pub context: Context,
    pub family: FamilyId,
    pub theta: Vec<T>,
    pub bad: BadScore<T>,
}

impl<T: Real> FittedTheta<T> {
    pub fn spec(&self) -> Result<DistributionSpec<T>> {
        DistributionSpec::new(self.family, self.theta.clone(), Some(self.reported_value))
    }

    pub fn param(&self, slot: ParamSlot) -> Option<T> {
        self.family.slot_index(slot).map(|i| self.theta[i])
    }
}

#[derive(Clone, Debug)]
struct Individual<T> {
    genes: Vec<T>,
    fitness: T,
    valid: bool,
}

struct Problem<'a, T> {
    family: FamilyId,
    coder: &'a CoderDistribution<T>,
    bins: Vec<FatalityBin>,
    target: Vec<T>,
    bounds: Vec<(T, T)>,
    scale: Vec<T>,
    weight_at: Option<usize>,
    shift_at: Option<usize>,
}

impl<'a, T: Real> Problem<'a, T> {
    fn snap(&self, genes: &mut [T]) {
        for (g, (lo, hi)) in genes.iter_mut().zip(&self.bounds) {
            *g = g.max(*lo).min(*hi);
        }
        if let (Some(i), true) = (self.shift_at, self.family.base.is_discrete()) {
            genes[i] = genes[i].round();
        }
    }

    fn evaluate(&self, genes: Vec<T>) -> Individual<T> {
        let scored = DistributionSpec::new(self.family, genes.clone(), Some(self.coder.reported_value))
            .and_then(|spec| bin_mass(&spec, &self.bins))
            .and_then(|mass| bad_vectors(&self.target, &mass));
        match scored {
            Ok(b) if b.value().is_finite() => Individual { genes, fitness: b.value(), valid: true },
            _ => Individual { genes, fitness: lit(2.0), valid: false },
        }
    }

    /// Lower BAD first; exact ties prefer invalid last, then a heavier point mass.
    fn compare(&self, a: &Individual<T>, b: &Individual<T>) -> Ordering {
        b.valid
            .cmp(&a.valid)
            .then(a.fitness.partial_cmp(&b.fitness).unwrap_or(Ordering::Equal))
            .then_with(|| match self.weight_at {
                Some(i) => b.genes[i].partial_cmp(&a.genes[i]).unwrap_or(Ordering::Equal),
                None => Ordering::Equal,
            })
    }

    fn random_genes<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let mut g: Vec<T> = self
            .bounds
            .iter()
            .map(|&(lo, hi)| lo + (hi - lo) * lit(rng.random::<f64>()))
            .collect();
        self.snap(&mut g);
        g
    }
}

/// Best individual per generation, for convergence diagnostics.
pub type FitTrace<T> = Vec<T>;

/// Runs the GA for one family against one coder distribution.
pub fn fit_theta<T: Real>(
    family: FamilyId,
    coder: &CoderDistribution<T>,
    cfg: &GaConfig<T>,
) -> Result<FittedTheta<T>> {
    fit_theta_traced(family, coder, cfg).map(|(fit, _)| fit)
}

pub fn fit_theta_traced<T: Real>(
    family: FamilyId,
    coder: &CoderDistribution<T>,
    cfg: &GaConfig<T>,
) -> Result<(FittedTheta<T>, FitTrace<T>)> {
    let n = family.n_params();
    cfg.validate(n)?;
    let bounds = cfg
        .bounds
        .clone()
        .unwrap_or_else(|| default_bounds(family, coder.reported_value));
    let scale = cfg
        .mutation_scale
        .clone()
        .unwrap_or_else(|| bounds.iter().map(|(lo, hi)| (*hi - *lo) * lit(0.05)).collect());
    let problem = Problem {
        family,
        coder,
        bins: coder.fatality_bins(),
        target: coder.probabilities(),
        bounds,
        scale,
        weight_at: family.slot_index(ParamSlot::Weight),
        shift_at: family.slot_index(ParamSlot::Shift),
    };

    let key = rng::stream_key(&[
        family.label().as_bytes(),
        coder.coder_id.as_bytes(),
        coder.violence_type.as_str().as_bytes(),
        coder.context.as_str().as_bytes(),
        &coder.reported_value.to_le_bytes(),
    ]);
    let mut rng = rng::stream(cfg.seed, key);

    let mut pop: Vec<Individual<T>> = (0..cfg.population_size)
        .map(|_| problem.evaluate(problem.random_genes(&mut rng)))
        .collect();
    pop.sort_by(|a, b| problem.compare(a, b));
    let mut trace = Vec::with_capacity(cfg.generations);

    for _ in 0..cfg.generations {
        let elites = cfg.elitism.min(pop.len());
        let mut next: Vec<Individual<T>> =
            pop.iter().take(elites).filter(|i| i.valid).cloned().collect();
        while next.len() < cfg.population_size {
            let a = tournament(&pop, cfg.tournament_size, &problem, &mut rng);
            let b = tournament(&pop, cfg.tournament_size, &problem, &mut rng);
            let mut child = if rng.random::<f64>() < cfg.crossover_rate {
                a.genes
                    .iter()
                    .zip(&b.genes)
                    .map(|(&x, &y)| if rng.random::<bool>() { x } else { y })
                    .collect::<Vec<T>>()
            } else {
                a.genes.clone()
            };
            for (g, &sd) in child.iter_mut().zip(&problem.scale) {
                if rng.random::<f64>() < cfg.mutation_rate {
                    let z: f64 = rng.sample(StandardNormal);
                    *g = *g + sd * lit(z);
                }
            }
            problem.snap(&mut child);
            next.push(problem.evaluate(child));
        }
        next.sort_by(|a, b| problem.compare(a, b));
        pop = next;
        trace.push(pop[0].fitness);
    }

    let best = pop.into_iter().next().ok_or(Error::EmptyPopulation)?;
    let fit = FittedTheta {
        coder_id: coder.coder_id.clone(),
        reported_value: coder.reported_value,
        violence_type: coder.violence_type,
        context: coder.context,
        family,
        theta: best.genes,
        bad: BadScore(best.fitness),
    };
    Ok((fit, trace))
}

fn tournament<'p, T: Real, R: Rng + ?Sized>(
    pop: &'p [Individual<T>],
    k: usize,
    problem: &Problem<'_, T>,
    rng: &mut R,
) -> &'p Individual<T> {
    let mut best = &pop[rng.random_range(0..pop.len())];
    for _ in 1..k {
        let c = &pop[rng.random_range(0..pop.len())];
        if problem.compare(c, best) == Ordering::Less {
            best = c;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitFailure {
    pub coder_id: String,
    pub reported_value: u64,
    pub violence_type: ViolenceType,
    pub context: Context,
    pub family: FamilyId,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct FitReport<T> {
    pub fits: Vec<FittedTheta<T>>,
    pub failures: Vec<FitFailure>,
}

/// Fits every family to every coder distribution. Cells run in parallel on
/// the current rayon pool; each cell owns a keyed random stream, so output is
/// independent of scheduling. Output order is family-major.
pub fn fit_all<T: Real>(
    families: &[FamilyId],
    coders: &[CoderDistribution<T>],
    cfg: &GaConfig<T>,
) -> FitReport<T> {
    let cells: Vec<(FamilyId, &CoderDistribution<T>)> = families
        .iter()
        .flat_map(|&f| coders.iter().map(move |c| (f, c)))
        .collect();
    let results: Vec<_> = cells
        .par_iter()
        .map(|&(family, coder)| (family, coder, fit_theta(family, coder, cfg)))
        .collect();
    let mut report = FitReport {
        fits: Vec::with_capacity(results.len()),
        failures: Vec::new(),
    };
    for (family, coder, result) in results {
        match result {
            Ok(fit) => report.fits.push(fit),
            Err(e) => report.failures.push(FitFailure {
                coder_id: coder.coder_id.clone(),
                reported_value: coder.reported_value,
                violence_type: coder.violence_type,
                context: coder.context,
                family,
                message: e.to_string(),
            }),
        }
    }
    report
}

#[derive(Debug, Serialize, Deserialize)]
struct FitRow {
    coder_id: String,
    violence_type: ViolenceType,
    context: Context,
    reported_value: u64,
    family: String,
    mixture: bool,
    shifted: bool,
    theta1: Option<f64>,
    theta2: Option<f64>,
    theta3: Option<f64>,
    theta4: Option<f64>,
    bad: f64,
}

pub fn write_fits<W: Write>(writer: W, fits: &[FittedTheta<f64>]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    if fits.is_empty() {
        wtr.write_record([
            "coder_id", "violence_type", "context", "reported_value", "family", "mixture", "shifted",
            "theta1", "theta2", "theta3", "theta4", "bad",
        ])?;
    }
    for f in fits {
        let mut slots = [None; 4];
        for (slot, v) in f.family.slots().into_iter().zip(&f.theta) {
            slots[slot.column()] = Some(*v);
        }
        wtr.serialize(FitRow {
            coder_id: f.coder_id.clone(),
            violence_type: f.violence_type,
            context: f.context,
            reported_value: f.reported_value,
            family: f.family.base.name().to_string(),
            mixture: f.family.mixture,
            shifted: f.family.shifted,
            theta1: slots[0],
            theta2: slots[1],
            theta3: slots[2],
            theta4: slots[3],
            bad: to_f64(f.bad.value()),
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_fits<R: Read>(reader: R) -> Result<Vec<FittedTheta<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<FitRow>().enumerate() {
        let row = row?;
        let family = FamilyId::new(row.family.parse()?, row.mixture, row.shifted);
        let slots = [row.theta1, row.theta2, row.theta3, row.theta4];
        let theta = family
            .slots()
            .into_iter()
            .map(|s| {
                slots[s.column()].ok_or_else(|| {
                    Error::Schema(format!("row {}: {family} needs theta{}", i + 1, s.column() + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if !(0.0..=2.0).contains(&row.bad) {
            return Err(Error::Schema(format!("row {}: bad score {} outside [0,2]", i + 1, row.bad)));
        }
        out.push(FittedTheta {
            coder_id: row.coder_id,
            reported_value: row.reported_value,
            violence_type: row.violence_type,
            context: row.context,
            family,
            theta,
            bad: BadScore(row.bad),
        });
    }
    Ok(out)
}
