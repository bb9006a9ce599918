//! Monte Carlo totals over event sets: one draw per event, summed, repeated.

use std::collections::HashMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{CountSampler, DistributionSpec};
use crate::error::{Error, Result};
use crate::numeric::{from_u64, lit, quantile_sorted, Real};
use crate::predictor::{DrawMode, EventRecord, Predictor};
use crate::rng;
use crate::survey::{Context, ViolenceType};

pub const DEFAULT_REPLICATES: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct Summary<T> {
    pub replicates: usize,
    pub reported_sum: u64,
    pub mean: T,
    pub median: T,
    pub p10: T,
    pub p90: T,
    pub min: T,
    pub max: T,
}

impl<T: Real> Summary<T> {
    /// Mean total over the reported sum, minus one.
    pub fn inflation(&self) -> T {
        self.mean / from_u64(self.reported_sum) - T::one()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateResult<T> {
    /// One total per replicate, in replicate order.
    pub totals: Vec<T>,
    pub summary: Summary<T>,
}

enum Source<T> {
    Counts(CountSampler<T>),
    Continuous(DistributionSpec<T>),
}

/// `replicates` totals, each the sum of one draw per event. Replicate `r`
/// uses its own stream keyed by `(seed, r)`.
pub fn aggregate<T: Real>(
    predictor: &Predictor<T>,
    events: &[EventRecord],
    replicates: usize,
    seed: u64,
    mode: DrawMode,
) -> Result<AggregateResult<T>> {
    if events.is_empty() {
        return Err(Error::Domain("no events to aggregate".into()));
    }
    if replicates == 0 {
        return Err(Error::Domain("replicates must be >= 1".into()));
    }
    // Events sharing (ỹ, type, context) share a sampler.
    let mut index: HashMap<(u64, ViolenceType, Option<Context>), usize> = HashMap::new();
    let mut sources: Vec<Source<T>> = Vec::new();
    let mut which = Vec::with_capacity(events.len());
    for e in events {
        let key = (e.reported_value, e.violence_type, e.context);
        let i = match index.get(&key) {
            Some(&i) => i,
            None => {
                let spec = predictor.conditional(e)?;
                sources.push(match mode {
                    DrawMode::Integer => Source::Counts(spec.discretize()?.sampler()),
                    DrawMode::Continuous => Source::Continuous(spec),
                });
                index.insert(key, sources.len() - 1);
                sources.len() - 1
            }
        };
        which.push(i);
    }
    let totals: Vec<T> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, rng::stream_key(&[b"aggregate", &(r as u64).to_le_bytes()]));
            which.iter().fold(T::zero(), |acc, &i| {
                acc + match &sources[i] {
                    Source::Counts(s) => from_u64::<T>(s.draw(&mut rng)),
                    Source::Continuous(spec) => spec.sample(&mut rng, 1)[0],
                }
            })
        })
        .collect();
    let reported_sum = events.iter().map(|e| e.reported_value).sum();
    let summary = summarize(&totals, reported_sum)?;
    Ok(AggregateResult { totals, summary })
}

/// Mean, type-7 median and 10th/90th percentiles, and range of the totals.
pub fn summarize<T: Real>(totals: &[T], reported_sum: u64) -> Result<Summary<T>> {
    if totals.is_empty() {
        return Err(Error::Domain("no totals to summarize".into()));
    }
    let mut sorted = totals.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite totals"));
    let n = from_u64::<T>(sorted.len() as u64);
    Ok(Summary {
        replicates: sorted.len(),
        reported_sum,
        mean: sorted.iter().fold(T::zero(), |s, v| s + *v) / n,
        median: quantile_sorted(&sorted, lit(0.5)),
        p10: quantile_sorted(&sorted, lit(0.1)),
        p90: quantile_sorted(&sorted, lit(0.9)),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
    })
}

pub fn write_totals<W: Write>(writer: W, totals: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["replicate", "total"])?;
    for (i, t) in totals.iter().enumerate() {
        w.write_record([i.to_string(), t.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct TotalRow {
    replicate: usize,
    total: f64,
}

pub fn read_totals<R: Read>(reader: R) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for rec in csv::Reader::from_reader(reader).deserialize() {
        let row: TotalRow = rec?;
        if row.replicate != out.len() {
            return Err(Error::Schema(format!("replicate {} out of sequence", row.replicate)));
        }
        out.push(row.total);
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct SummaryRow {
    replicates: usize,
    reported_sum: u64,
    mean: f64,
    median: f64,
    p10: f64,
    p90: f64,
    min: f64,
    max: f64,
}

pub fn write_summary<W: Write>(writer: W, s: &Summary<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.serialize(SummaryRow {
        replicates: s.replicates,
        reported_sum: s.reported_sum,
        mean: s.mean,
        median: s.median,
        p10: s.p10,
        p90: s.p90,
        min: s.min,
        max: s.max,
    })?;
    w.flush()?;
    Ok(())
}

pub fn read_summary<R: Read>(reader: R) -> Result<Summary<f64>> {
    let row: SummaryRow = csv::Reader::from_reader(reader)
        .deserialize()
        .next()
        .ok_or_else(|| Error::Schema("empty summary file".into()))??;
    Ok(Summary {
        replicates: row.replicates,
        reported_sum: row.reported_sum,
        mean: row.mean,
        median: row.median,
        p10: row.p10,
        p90: row.p90,
        min: row.min,
        max: row.max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{BaseFamily, FamilyId};
    use crate::regression::{CoefficientBundle, CovariateSet, Diagnostics, ModelSpec, ViolenceScope};

    fn sb(id: &str, y: u64) -> EventRecord {
        EventRecord::new(id, y, ViolenceType::Sb)
    }

    /// A bundle whose weight is sigmoid(40), i.e. the point mass is all but
    /// certain.
    fn degenerate() -> Predictor<f64> {
        let model = ModelSpec::uniform(FamilyId::mixture(BaseFamily::Gumbel), ViolenceScope::Sb, CovariateSet::NONE);
        Predictor::from_bundle(CoefficientBundle {
            model,
            z_names: vec!["z_bad".into()],
            coefficients: vec![vec![1.0], vec![0.0], vec![40.0]],
            diagnostics: Diagnostics { n: 0, r2: vec![None; 3], std_errors: Vec::new() },
        })
    }

    #[test]
    fn summarize_examples() {
        let s = summarize::<f64>(&[1.0, 2.0, 3.0, 4.0, 5.0], 7).unwrap();
        assert_eq!((s.median, s.mean), (3.0, 3.0));
        assert!((s.p90 - 4.6).abs() < 1e-12);
        assert!((s.p10 - 1.4).abs() < 1e-12);
        assert_eq!((s.min, s.max, s.reported_sum), (1.0, 5.0, 7));
        let c = summarize(&[4.0; 9], 0).unwrap();
        assert!([c.mean, c.median, c.p10, c.p90, c.min, c.max].iter().all(|v| *v == 4.0));
        assert!(summarize::<f64>(&[], 0).is_err());
        let shuffled = summarize(&[5.0, 1.0, 4.0, 2.0, 3.0], 7).unwrap();
        assert_eq!(shuffled, s);
    }

    #[test]
    fn degenerate_spec_gives_reported_total() {
        let r = aggregate(&degenerate(), &[sb("a", 17)], 500, 1, DrawMode::Integer).unwrap();
        assert!(r.totals.iter().all(|t| *t == 17.0));
        assert_eq!(r.summary.reported_sum, 17);
    }

    #[test]
    fn mean_of_totals_matches_analytic_means() {
        let p = Predictor::<f64>::shipped();
        let events: Vec<_> = [0u64, 1, 3, 7, 13, 24, 60, 150, 400]
            .iter()
            .enumerate()
            .map(|(i, &y)| sb(&format!("e{i}"), y))
            .collect();
        let truth: f64 = events.iter().map(|e| p.conditional(e).unwrap().discretize().unwrap().mean()).sum();
        let r = aggregate(&p, &events, 100_000, 5, DrawMode::Integer).unwrap();
        let n = r.totals.len() as f64;
        let var = r.totals.iter().map(|t| (t - r.summary.mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((r.summary.mean - truth).abs() < 3.0 * (var / n).sqrt(), "{} vs {truth}", r.summary.mean);
        assert_eq!(r.summary.reported_sum, 658);
    }

    #[test]
    fn many_small_events_inflate_more_than_one_large() {
        let p = Predictor::<f64>::shipped();
        let small: Vec<_> = (0..1000).map(|i| sb(&format!("s{i}"), 5)).collect();
        let a = aggregate(&p, &small, 1000, 2, DrawMode::Integer).unwrap();
        let b = aggregate(&p, &[sb("big", 5000)], 1000, 2, DrawMode::Integer).unwrap();
        assert_eq!(a.summary.reported_sum, b.summary.reported_sum);
        assert!(a.summary.inflation() > b.summary.inflation());
    }

    #[test]
    fn variance_grows_linearly_with_event_count() {
        let p = Predictor::<f64>::shipped();
        let var = |k: usize| {
            let ev: Vec<_> = (0..k).map(|i| sb(&format!("v{i}"), 30)).collect();
            let r = aggregate(&p, &ev, 10_000, 8, DrawMode::Integer).unwrap();
            let m = r.summary.mean;
            r.totals.iter().map(|t| (t - m).powi(2)).sum::<f64>() / 9_999.0
        };
        let (v1, v8) = (var(1), var(8));
        assert!((v8 / v1 / 8.0 - 1.0).abs() < 0.1, "{v1} {v8}");
    }

    #[test]
    fn deterministic_and_csv_roundtrip() {
        let p = Predictor::<f64>::shipped();
        let ev = vec![sb("a", 3), sb("b", 40)];
        let r1 = aggregate(&p, &ev, 200, 77, DrawMode::Integer).unwrap();
        assert_eq!(r1, aggregate(&p, &ev, 200, 77, DrawMode::Integer).unwrap());
        assert_eq!(r1.totals.len(), 200);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        assert_eq!(r1, pool.install(|| aggregate(&p, &ev, 200, 77, DrawMode::Integer).unwrap()));
        let mut buf = Vec::new();
        write_totals(&mut buf, &r1.totals).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("replicate,total\n0,"));
        assert_eq!(read_totals(buf.as_slice()).unwrap(), r1.totals);
        let mut buf = Vec::new();
        write_summary(&mut buf, &r1.summary).unwrap();
        assert_eq!(read_summary(buf.as_slice()).unwrap(), r1.summary);
        assert!(aggregate(&p, &[], 10, 1, DrawMode::Integer).is_err());
        let c = aggregate(&p, &ev, 10, 1, DrawMode::Continuous).unwrap();
        assert!(c.totals.iter().any(|t| t.fract() != 0.0));
    }
}
