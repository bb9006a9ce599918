//! Leave-one-coder-out evaluation of stage-two configurations and the
//! resulting ranking tables.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{BaseFamily, FamilyId};
use crate::error::{Error, Result};
use crate::fitting::{bad, BadScore, FittedTheta};
use crate::numeric::{mean, median, Real};
use crate::regression::{fit_bundle, predict_theta_in_context, CoefficientBundle, CovariateSet, ModelSpec, ViolenceScope};
use crate::survey::{CoderDistribution, Context, ViolenceType};

/// BAD of one coder distribution under a bundle fitted without that coder.
#[derive(Clone, Debug, PartialEq)]
pub struct HeldOutScore<T> {
    pub coder_id: String,
    pub violence_type: ViolenceType,
    pub context: Context,
    pub reported_value: u64,
    pub bad: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocoResult<T> {
    pub family: FamilyId,
    pub violence_type: ViolenceScope,
    pub covariates: Vec<CovariateSet>,
    pub mean_bad: T,
    pub median_bad: T,
    /// Sorted by coder, then violence type, context, reported value.
    pub scores: Vec<HeldOutScore<T>>,
}

impl<T: Real> LocoResult<T> {
    fn from_scores(model: &ModelSpec, scores: Vec<HeldOutScore<T>>) -> Self {
        let values: Vec<T> = scores.iter().map(|s| s.bad).collect();
        LocoResult {
            family: model.family,
            violence_type: model.violence_type,
            covariates: model.params.iter().map(|p| p.covariates).collect(),
            mean_bad: mean(&values),
            median_bad: median(&values),
            scores,
        }
    }

    pub fn values(&self) -> Vec<T> {
        self.scores.iter().map(|s| s.bad).collect()
    }
}

fn sort_key<T>(c: &CoderDistribution<T>) -> (&str, ViolenceType, Context, u64) {
    (&c.coder_id, c.violence_type, c.context, c.reported_value)
}

/// Input fits in a canonical order, so bundles do not depend on how the
/// caller happened to arrange them.
fn canonical_fits<'a, T: Real>(fits: &'a [FittedTheta<T>], model: &ModelSpec) -> Vec<&'a FittedTheta<T>> {
    let mut v: Vec<&FittedTheta<T>> = fits
        .iter()
        .filter(|f| f.family == model.family && model.violence_type.covers(f.violence_type))
        .collect();
    v.sort_by(|a, b| {
        (&a.coder_id, a.violence_type, a.context, a.reported_value)
            .cmp(&(&b.coder_id, b.violence_type, b.context, b.reported_value))
    });
    v
}

fn score_against<T: Real>(bundle: &CoefficientBundle<T>, coder: &CoderDistribution<T>) -> HeldOutScore<T> {
    let value = predict_theta_in_context(bundle, coder.reported_value, Some(coder.context))
        .and_then(|spec| bad(&spec, coder))
        .map(BadScore::value)
        .unwrap_or_else(|e| {
            log::debug!("scoring {} at {} failed: {e}", coder.coder_id, coder.reported_value);
            BadScore::<T>::worst().value()
        });
    HeldOutScore {
        coder_id: coder.coder_id.clone(),
        violence_type: coder.violence_type,
        context: coder.context,
        reported_value: coder.reported_value,
        bad: value,
    }
}

fn scored_coders<'a, T: Real>(coders: &'a [CoderDistribution<T>], model: &ModelSpec) -> Vec<&'a CoderDistribution<T>> {
    let mut v: Vec<&CoderDistribution<T>> =
        coders.iter().filter(|c| model.violence_type.covers(c.violence_type)).collect();
    v.sort_by(|a, b| sort_key(a).cmp(&sort_key(b)));
    v
}

/// For each coder: fit the bundle on everyone else's fits, then score that
/// coder's distributions. Folds run in parallel.
pub fn loco<T: Real>(fits: &[FittedTheta<T>], coders: &[CoderDistribution<T>], model: &ModelSpec) -> Result<LocoResult<T>> {
    let scored = scored_coders(coders, model);
    let ids: BTreeSet<&str> = scored.iter().map(|c| c.coder_id.as_str()).collect();
    if ids.len() < 2 {
        return Err(Error::InsufficientCoders(ids.len()));
    }
    let train = canonical_fits(fits, model);
    let folds: Vec<Vec<HeldOutScore<T>>> = ids
        .par_iter()
        .map(|&held| {
            let bundle = fit_bundle(train.iter().copied().filter(|f| f.coder_id != held), model)?;
            Ok(scored
                .iter()
                .filter(|c| c.coder_id == held)
                .map(|c| score_against(&bundle, c))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(LocoResult::from_scores(model, folds.into_iter().flatten().collect()))
}

/// Scores every coder distribution under one bundle fitted on all fits.
pub fn in_sample<T: Real>(fits: &[FittedTheta<T>], coders: &[CoderDistribution<T>], model: &ModelSpec) -> Result<LocoResult<T>> {
    let bundle = fit_bundle(canonical_fits(fits, model), model)?;
    let scores = scored_coders(coders, model).into_iter().map(|c| score_against(&bundle, c)).collect();
    Ok(LocoResult::from_scores(model, scores))
}

/// Candidate covariate sets: `none`, `y`, `D`, `y+D`, and with `z` appended
/// when context is requested.
pub fn covariate_grid(include_context: bool) -> Vec<CovariateSet> {
    CovariateSet::all()
        .into_iter()
        .filter(|c| include_context || !c.use_context)
        .collect()
}

/// Every assignment of a grid covariate set to each of the family's
/// parameters.
pub fn configurations(family: FamilyId, scope: ViolenceScope, grid: &[CovariateSet]) -> Vec<ModelSpec> {
    let n = family.n_params();
    let mut combos: Vec<Vec<CovariateSet>> = vec![Vec::new()];
    for _ in 0..n {
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                grid.iter().map(move |&cs| {
                    let mut v = prefix.clone();
                    v.push(cs);
                    v
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .map(|c| ModelSpec::new(family, scope, &c).expect("one set per parameter"))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankRow<T> {
    pub rank: usize,
    pub family: FamilyId,
    pub violence_type: ViolenceScope,
    pub covariates: Vec<CovariateSet>,
    pub mean_score: T,
    pub median_score: T,
    pub rel_increase_median: T,
}

fn rank_order<T: Real>(a: &LocoResult<T>, b: &LocoResult<T>) -> Ordering {
    a.median_bad
        .partial_cmp(&b.median_bad)
        .unwrap_or(Ordering::Equal)
        .then(a.mean_bad.partial_cmp(&b.mean_bad).unwrap_or(Ordering::Equal))
        .then_with(|| a.family.label().cmp(&b.family.label()))
        .then_with(|| a.violence_type.cmp(&b.violence_type))
        .then_with(|| a.covariates.cmp(&b.covariates))
}

/// Ascending by median BAD, then mean BAD, then family label. The relative
/// increase is each median over the best median of the table.
pub fn rank_configurations<T: Real>(results: &[LocoResult<T>]) -> Vec<RankRow<T>> {
    let mut sorted: Vec<&LocoResult<T>> = results.iter().collect();
    sorted.sort_by(|a, b| rank_order(a, b));
    let best = sorted.first().map(|r| r.median_bad).unwrap_or_else(T::one);
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, r)| RankRow {
            rank: i + 1,
            family: r.family,
            violence_type: r.violence_type,
            covariates: r.covariates.clone(),
            mean_score: r.mean_bad,
            median_score: r.median_bad,
            rel_increase_median: if best > T::zero() {
                r.median_bad / best
            } else if r.median_bad == best {
                T::one()
            } else {
                T::infinity()
            },
        })
        .collect()
}

/// Best configuration of each (family, violence scope), in rank order.
pub fn best_per_family<T: Real>(results: &[LocoResult<T>]) -> Vec<LocoResult<T>> {
    let mut sorted: Vec<&LocoResult<T>> = results.iter().collect();
    sorted.sort_by(|a, b| rank_order(a, b));
    let mut seen = BTreeSet::new();
    sorted
        .into_iter()
        .filter(|r| seen.insert((r.family.label(), r.violence_type)))
        .cloned()
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct RankFileRow {
    rank: usize,
    family: String,
    mixture: bool,
    shifted: bool,
    tov: ViolenceScope,
    ivs_theta1: Option<String>,
    ivs_theta2: Option<String>,
    ivs_theta3: Option<String>,
    ivs_theta4: Option<String>,
    mean_score: f64,
    median_score: f64,
    rel_increase_median: f64,
}

pub fn write_ranking<W: Write>(writer: W, rows: &[RankRow<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        let iv = |i: usize| r.covariates.get(i).map(|c| c.label());
        w.serialize(RankFileRow {
            rank: r.rank,
            family: r.family.base.name().into(),
            mixture: r.family.mixture,
            shifted: r.family.shifted,
            tov: r.violence_type,
            ivs_theta1: iv(0),
            ivs_theta2: iv(1),
            ivs_theta3: iv(2),
            ivs_theta4: iv(3),
            mean_score: r.mean_score,
            median_score: r.median_score,
            rel_increase_median: r.rel_increase_median,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ranking<R: Read>(reader: R) -> Result<Vec<RankRow<f64>>> {
    let mut rows = Vec::new();
    for rec in csv::Reader::from_reader(reader).deserialize() {
        let r: RankFileRow = rec?;
        let family = FamilyId::new(r.family.parse::<BaseFamily>()?, r.mixture, r.shifted);
        let covariates = [r.ivs_theta1, r.ivs_theta2, r.ivs_theta3, r.ivs_theta4]
            .into_iter()
            .take(family.n_params())
            .map(|c| c.ok_or_else(|| Error::Schema("missing covariate column".into()))?.parse())
            .collect::<Result<Vec<CovariateSet>>>()?;
        rows.push(RankRow {
            rank: r.rank,
            family,
            violence_type: r.tov,
            covariates,
            mean_score: r.mean_score,
            median_score: r.median_score,
            rel_increase_median: r.rel_increase_median,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::DistributionSpec;
    use crate::fitting::{bin_mass, fit_all, GaConfig};
    use crate::survey::default_bins;

    fn result(median: f64, mean_bad: f64, family: FamilyId) -> LocoResult<f64> {
        LocoResult {
            family,
            violence_type: ViolenceScope::Sb,
            covariates: vec![CovariateSet::NONE; family.n_params()],
            mean_bad,
            median_bad: median,
            scores: Vec::new(),
        }
    }

    #[test]
    fn ranking_examples() {
        let g = FamilyId::mixture(BaseFamily::Gumbel);
        let rows = rank_configurations(&[result(0.62, 0.7, g), result(0.65, 0.7, g), result(0.73, 0.8, g)]);
        let rel: Vec<f64> = rows.iter().map(|r| (r.rel_increase_median * 100.0).round() / 100.0).collect();
        assert_eq!(rel, vec![1.0, 1.05, 1.18]);
        assert_eq!(rows.iter().map(|r| r.rank).collect::<Vec<_>>(), vec![1, 2, 3]);

        let one = rank_configurations(&[result(0.4, 0.5, g)]);
        assert_eq!((one[0].rank, one[0].rel_increase_median), (1, 1.0));

        let n = FamilyId::mixture(BaseFamily::Normal);
        let tied = rank_configurations(&[result(0.5, 0.6, n), result(0.5, 0.6, g), result(0.5, 0.55, n)]);
        assert_eq!(tied[0].mean_score, 0.55);
        assert_eq!(tied[1].family, g);
    }

    #[test]
    fn configuration_grid_is_cartesian() {
        let g = FamilyId::mixture(BaseFamily::Gumbel);
        let grid = [CovariateSet::NONE, CovariateSet::LOGY_DUMMIES];
        let cfgs = configurations(g, ViolenceScope::Sb, &grid);
        assert_eq!(cfgs.len(), 8);
        let distinct: BTreeSet<Vec<CovariateSet>> = cfgs.iter().map(|m| m.params.iter().map(|p| p.covariates).collect()).collect();
        assert_eq!(distinct.len(), 8);
        assert_eq!(covariate_grid(false).len(), 4);
        assert_eq!(covariate_grid(true).len(), 8);
    }

    fn coder_from(spec: &DistributionSpec<f64>, id: &str, y: u64) -> CoderDistribution<f64> {
        let bins = default_bins(y);
        let mass = bin_mass(spec, &bins).unwrap();
        CoderDistribution {
            coder_id: id.into(),
            violence_type: ViolenceType::Sb,
            context: Context::Good,
            reported_value: y,
            bins: bins.into_iter().zip(mass).collect(),
        }
    }

    fn synthetic_coders(ids: &[&str]) -> Vec<CoderDistribution<f64>> {
        let mut out = Vec::new();
        for id in ids {
            for y in [1u64, 5, 13, 25, 60, 150] {
                let yf = y as f64;
                let spec = DistributionSpec::gumbel_mixture(1.3 * yf + 1.0, 0.3 * yf + 0.5, 0.45, y).unwrap();
                out.push(coder_from(&spec, id, y));
            }
        }
        out
    }

    #[test]
    fn loco_closed_loop_on_identical_coders() {
        let coders = synthetic_coders(&["a", "b"]);
        let g = FamilyId::mixture(BaseFamily::Gumbel);
        let report = fit_all(&[g], &coders, &GaConfig::with_seed(11));
        assert!(report.failures.is_empty());
        let model = ModelSpec::uniform(g, ViolenceScope::Sb, CovariateSet::new(true, false, false));
        let r = loco(&report.fits, &coders, &model).unwrap();
        assert_eq!(r.scores.len(), coders.len());
        assert!(r.median_bad < 0.1, "median {}", r.median_bad);
        assert!(r.scores.iter().all(|s| (0.0..=2.0).contains(&s.bad)));
        assert_eq!(r.median_bad, median(&r.values()));
        assert_eq!(r.mean_bad, mean(&r.values()));

        let mut reversed_fits = report.fits.clone();
        reversed_fits.reverse();
        let mut reversed_coders = coders.clone();
        reversed_coders.reverse();
        assert_eq!(loco(&reversed_fits, &reversed_coders, &model).unwrap(), r);

        let single: Vec<_> = coders.iter().filter(|c| c.coder_id == "a").cloned().collect();
        assert!(matches!(loco(&report.fits, &single, &model), Err(Error::InsufficientCoders(1))));
    }

    #[test]
    fn ranking_csv_roundtrip() {
        let g = FamilyId::new(BaseFamily::Gumbel, true, true);
        let p = FamilyId::plain(BaseFamily::Poisson);
        let rows = rank_configurations(&[result(0.25, 0.5, g), result(0.5, 0.75, p)]);
        let mut buf = Vec::new();
        write_ranking(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "rank,family,mixture,shifted,tov,ivs_theta1,ivs_theta2,ivs_theta3,ivs_theta4,mean_score,median_score,rel_increase_median"
        ));
        assert!(text.contains("2,poisson,false,false,sb,none,,,,0.75,0.5,2.0"));
        assert_eq!(read_ranking(buf.as_slice()).unwrap(), rows);
    }
}
