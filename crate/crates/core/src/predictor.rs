//! Conditional plausible-fatality distributions for individual events.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::DistributionSpec;
use crate::error::{Error, IngestIssue, Result};
use crate::numeric::{from_u64, lit, to_f64, Real};
use crate::regression::{predict_theta_in_context, shipped_sb, CoefficientBundle, ViolenceScope};
use crate::rng;
use crate::survey::{Context, SurveyDesign, ViolenceType};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_id: String,
    pub reported_value: u64,
    pub violence_type: ViolenceType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub country: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<Context>,
}

impl EventRecord {
    pub fn new(event_id: impl Into<String>, reported_value: u64, violence_type: ViolenceType) -> Self {
        EventRecord {
            event_id: event_id.into(),
            reported_value,
            violence_type,
            country: None,
            year: None,
            context: None,
        }
    }
}

/// Conditional spec for `event` under `bundle`, anchored at its reported
/// value.
pub fn conditional<T: Real>(bundle: &CoefficientBundle<T>, event: &EventRecord) -> Result<DistributionSpec<T>> {
    let scope = bundle.violence_type();
    if !scope.covers(event.violence_type) {
        return Err(Error::ViolenceTypeMismatch {
            bundle: scope.to_string(),
            event: event.violence_type.to_string(),
        });
    }
    predict_theta_in_context(bundle, event.reported_value, event.context)
}

/// Whether draws are integer counts from the truncated discrete view or raw
/// continuous mixture draws.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DrawMode {
    #[default]
    Integer,
    Continuous,
}

/// A set of bundles, one per violence scope. Types without their own bundle
/// use the pooled one, else the state-based one (with a warning).
#[derive(Debug)]
pub struct Predictor<T> {
    bundles: Vec<CoefficientBundle<T>>,
    warned: AtomicBool,
}

impl<T: Real> Clone for Predictor<T> {
    fn clone(&self) -> Self {
        Predictor {
            bundles: self.bundles.clone(),
            warned: AtomicBool::new(self.warned.load(Ordering::Relaxed)),
        }
    }
}

impl<T: Real> Predictor<T> {
    pub fn new(bundles: Vec<CoefficientBundle<T>>) -> Result<Self> {
        if bundles.is_empty() {
            return Err(Error::Schema("predictor needs at least one bundle".into()));
        }
        Ok(Predictor {
            bundles,
            warned: AtomicBool::new(false),
        })
    }

    pub fn from_bundle(bundle: CoefficientBundle<T>) -> Self {
        Self::new(vec![bundle]).expect("one bundle")
    }

    /// The published state-based gumbel mixture.
    pub fn shipped() -> Self {
        Self::from_bundle(shipped_sb().cast())
    }

    pub fn bundles(&self) -> &[CoefficientBundle<T>] {
        &self.bundles
    }

    pub fn bundle_for(&self, tov: ViolenceType) -> &CoefficientBundle<T> {
        let exact = ViolenceScope::from(tov);
        if let Some(b) = self.bundles.iter().find(|b| b.violence_type() == exact) {
            return b;
        }
        if let Some(b) = self.bundles.iter().find(|b| b.violence_type() == ViolenceScope::All) {
            return b;
        }
        let fallback = self
            .bundles
            .iter()
            .find(|b| b.violence_type() == ViolenceScope::Sb)
            .unwrap_or(&self.bundles[0]);
        if !self.warned.swap(true, Ordering::Relaxed) {
            log::warn!(
                "no bundle for violence type {tov}; falling back to the {} bundle",
                fallback.violence_type()
            );
        }
        fallback
    }

    /// Like [`conditional`] but picks (or falls back to) the right bundle.
    pub fn conditional(&self, event: &EventRecord) -> Result<DistributionSpec<T>> {
        let bundle = self.bundle_for(event.violence_type);
        predict_theta_in_context(bundle, event.reported_value, event.context)
    }

    pub fn spec_at(&self, reported: u64, tov: ViolenceType) -> Result<DistributionSpec<T>> {
        self.conditional(&EventRecord::new("", reported, tov))
    }

    pub fn density(&self, reported: u64, tov: ViolenceType, x: T) -> Result<T> {
        Ok(self.spec_at(reported, tov)?.density(x))
    }

    pub fn quantile(&self, reported: u64, tov: ViolenceType, p: T) -> Result<T> {
        self.spec_at(reported, tov)?.quantile(p)
    }

    pub fn mean(&self, reported: u64, tov: ViolenceType) -> Result<T> {
        Ok(self.spec_at(reported, tov)?.mean())
    }

    /// Fitted parameter vector at `reported`.
    pub fn theta(&self, reported: u64, tov: ViolenceType) -> Result<Vec<T>> {
        Ok(self.spec_at(reported, tov)?.theta().to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventDraws<T> {
    pub event_id: String,
    pub values: Vec<T>,
}

fn event_stream(seed: u64, event_id: &str) -> rng::StreamRng {
    rng::stream(seed, rng::stream_key(&[b"draws", event_id.as_bytes()]))
}

/// `n` draws per event; each event's stream depends only on
/// `(seed, event_id)`.
pub fn event_draws<T: Real>(
    predictor: &Predictor<T>,
    events: &[EventRecord],
    n: usize,
    seed: u64,
    mode: DrawMode,
) -> Result<Vec<EventDraws<T>>> {
    if n == 0 {
        return Err(Error::Domain("draws per event must be >= 1".into()));
    }
    let specs = events.iter().map(|e| predictor.conditional(e)).collect::<Result<Vec<_>>>()?;
    events
        .par_iter()
        .zip(specs.par_iter())
        .map(|(event, spec)| {
            let mut rng = event_stream(seed, &event.event_id);
            let values = match mode {
                DrawMode::Integer => {
                    let sampler = spec.discretize()?.sampler();
                    (0..n).map(|_| from_u64::<T>(sampler.draw(&mut rng))).collect()
                }
                DrawMode::Continuous => spec.sample(&mut rng, n),
            };
            Ok(EventDraws {
                event_id: event.event_id.clone(),
                values,
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct DrawRow {
    event_id: String,
    draw_index: usize,
    value: f64,
}

/// `event_id,draw_index,value`; integral values print without a decimal
/// point.
pub fn write_draws<W: Write>(writer: W, draws: &[EventDraws<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["event_id", "draw_index", "value"])?;
    for d in draws {
        for (i, v) in d.values.iter().enumerate() {
            w.write_record([d.event_id.as_str(), &i.to_string(), &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Groups rows back by consecutive `event_id`.
pub fn read_draws<R: Read>(reader: R) -> Result<Vec<EventDraws<f64>>> {
    let mut out: Vec<EventDraws<f64>> = Vec::new();
    for rec in csv::Reader::from_reader(reader).deserialize() {
        let row: DrawRow = rec?;
        match out.last_mut() {
            Some(last) if last.event_id == row.event_id && last.values.len() == row.draw_index => last.values.push(row.value),
            _ if row.draw_index == 0 => out.push(EventDraws {
                event_id: row.event_id,
                values: vec![row.value],
            }),
            _ => return Err(Error::Schema(format!("draw index {} out of sequence for {}", row.draw_index, row.event_id))),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow<T> {
    pub reported: u64,
    pub mean_untruncated: T,
    pub mean_truncated: T,
    pub p025: T,
    pub p50: T,
    pub p975: T,
}

impl<T: Real> CurveRow<T> {
    /// `mean / ỹ − 1`, infinite at zero.
    pub fn inflation(&self) -> T {
        self.mean_untruncated / from_u64(self.reported) - T::one()
    }
}

/// Mixture mean and quantiles across a grid of reported values.
pub fn underreporting_curve<T: Real>(predictor: &Predictor<T>, tov: ViolenceType, grid: &[u64]) -> Result<Vec<CurveRow<T>>> {
    if grid.is_empty() {
        return Err(Error::Domain("empty grid".into()));
    }
    grid.par_iter()
        .map(|&y| {
            let spec = predictor.spec_at(y, tov)?;
            Ok(CurveRow {
                reported: y,
                mean_untruncated: spec.mean(),
                mean_truncated: spec.discretize()?.mean(),
                p025: spec.quantile(lit(0.025))?,
                p50: spec.quantile(lit(0.5))?,
                p975: spec.quantile(lit(0.975))?,
            })
        })
        .collect()
}

pub fn write_curve<W: Write>(writer: W, rows: &[CurveRow<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["reported", "mean_untruncated", "mean_truncated", "p025", "p50", "p975"])?;
    for r in rows {
        w.write_record([
            r.reported.to_string(),
            r.mean_untruncated.to_string(),
            r.mean_truncated.to_string(),
            r.p025.to_string(),
            r.p50.to_string(),
            r.p975.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve<R: Read>(reader: R) -> Result<Vec<CurveRow<f64>>> {
    let mut out = Vec::new();
    for rec in csv::Reader::from_reader(reader).records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::Schema("short curve row".into()))?
                .parse()
                .map_err(|e| Error::Schema(format!("curve column {i}: {e}")))
        };
        out.push(CurveRow {
            reported: rec
                .get(0)
                .unwrap_or_default()
                .parse()
                .map_err(|e| Error::Schema(format!("reported: {e}")))?,
            mean_untruncated: f(1)?,
            mean_truncated: f(2)?,
            p025: f(3)?,
            p50: f(4)?,
            p975: f(5)?,
        });
    }
    Ok(out)
}

/// Smallest non-special reported value in `1..=max` whose mixture mean does
/// not exceed it. Special values are skipped because their dummies shift the
/// whole distribution down locally; the scan looks for the trend crossover.
/// Scans a log-spaced grid, then refines between the last two grid points.
pub fn crossover<T: Real>(predictor: &Predictor<T>, tov: ViolenceType, max: u64) -> Result<Option<u64>> {
    let design = SurveyDesign::standard();
    let below = |y: u64| -> Result<bool> { Ok(predictor.mean(y, tov)? <= from_u64(y)) };
    let mut grid: Vec<u64> = (0..=400)
        .map(|i| (to_f64(from_u64::<f64>(max)).ln() * f64::from(i) / 400.0).exp().round() as u64)
        .filter(|y| *y >= 1 && !design.is_special(*y))
        .collect();
    grid.dedup();
    let mut prev = 0u64;
    for &y in &grid {
        if below(y)? {
            // First crossing lies in (prev, y].
            let mut lo = prev;
            let mut hi = y;
            while hi - lo > 1 {
                let mut mid = lo + (hi - lo) / 2;
                while design.is_special(mid) && mid + 1 < hi {
                    mid += 1;
                }
                if design.is_special(mid) {
                    break;
                }
                if below(mid)? {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Ok(Some(hi));
        }
        prev = y;
    }
    Ok(None)
}

/// Integer pmf of the truncated view from 0 up to its 0.9999 quantile.
pub fn density_table<T: Real>(spec: &DistributionSpec<T>) -> Result<Vec<(u64, T)>> {
    let view = spec.discretize()?;
    let top = view.quantile(lit(0.9999))?.max(spec.anchor().unwrap_or(0));
    Ok((0..=top).map(|k| (k, view.pmf(k))).collect())
}

pub fn write_density<W: Write>(writer: W, reported: u64, table: &[(u64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["reported", "count", "pmf"])?;
    for (k, p) in table {
        w.write_record([reported.to_string(), k.to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct EventRow {
    event_id: String,
    reported_value: String,
    violence_type: String,
    #[serde(default)]
    country: Option<String>,
    #[serde(default)]
    year: Option<String>,
    #[serde(default)]
    context: Option<String>,
}

/// Reads `event_id,reported_value,violence_type[,country,year,context]`.
/// Every malformed row is reported at once.
pub fn read_events<R: Read>(reader: R) -> Result<Vec<EventRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut events = Vec::new();
    let mut issues = Vec::new();
    for (i, rec) in rdr.deserialize::<EventRow>().enumerate() {
        let line = i + 2;
        let row = match rec {
            Ok(r) => r,
            Err(e) => {
                issues.push(IngestIssue {
                    rows: vec![line],
                    message: e.to_string(),
                });
                continue;
            }
        };
        let mut problem = |m: String| issues.push(IngestIssue { rows: vec![line], message: m });
        let reported = row.reported_value.parse::<u64>();
        let tov = row.violence_type.parse::<ViolenceType>();
        let year = row.year.as_deref().filter(|s| !s.is_empty()).map(str::parse::<i32>).transpose();
        let context = row.context.as_deref().filter(|s| !s.is_empty()).map(str::parse::<Context>).transpose();
        match (reported, tov, year, context) {
            (Ok(reported_value), Ok(violence_type), Ok(year), Ok(context)) => events.push(EventRecord {
                event_id: row.event_id,
                reported_value,
                violence_type,
                country: row.country.filter(|s| !s.is_empty()),
                year,
                context,
            }),
            (r, t, y, c) => {
                if r.is_err() {
                    problem(format!("reported_value `{}` is not a nonnegative integer", row.reported_value));
                }
                if let Err(e) = t {
                    problem(e.to_string());
                }
                if y.is_err() {
                    problem("year is not an integer".into());
                }
                if let Err(e) = c {
                    problem(e.to_string());
                }
            }
        }
    }
    if issues.is_empty() {
        Ok(events)
    } else {
        Err(Error::Ingest(issues))
    }
}

pub fn write_events<W: Write>(writer: W, events: &[EventRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["event_id", "reported_value", "violence_type", "country", "year", "context"])?;
    for e in events {
        w.write_record([
            e.event_id.clone(),
            e.reported_value.to_string(),
            e.violence_type.to_string(),
            e.country.clone().unwrap_or_default(),
            e.year.map(|y| y.to_string()).unwrap_or_default(),
            e.context.map(|c| c.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survey::SPECIAL_VALUES;

    fn sb(y: u64) -> EventRecord {
        EventRecord::new(format!("e{y}"), y, ViolenceType::Sb)
    }

    #[test]
    fn conditional_examples() {
        let t2 = shipped_sb();
        let s = conditional(&t2, &sb(1)).unwrap();
        let th = s.theta();
        assert!((th[0] - 2.4514).abs() < 1e-3, "{}", th[0]);
        assert!((th[1] - 1.3087).abs() < 1e-3, "{}", th[1]);
        assert!((th[2] - 0.4674).abs() < 1e-3, "{}", th[2]);

        let s = conditional(&t2, &sb(23000)).unwrap();
        assert!((s.mean() / 23000.0 - 1.0).abs() < 0.01);

        let s = conditional(&t2, &sb(0)).unwrap();
        assert_eq!(s.anchor(), Some(0));
        assert!(s.point_mass(0.0) > 0.0);

        let ns = EventRecord::new("x", 3, ViolenceType::Ns);
        assert!(matches!(conditional(&t2, &ns), Err(Error::ViolenceTypeMismatch { .. })));
        assert_eq!(Predictor::shipped().conditional(&ns).unwrap(), conditional(&t2, &sb(3)).unwrap());
    }

    #[test]
    fn draws_cardinality_and_determinism() {
        let p = Predictor::<f64>::shipped();
        let events = vec![sb(0), sb(13), sb(200)];
        let a = event_draws(&p, &events, 1000, 9, DrawMode::Integer).unwrap();
        assert_eq!(a.iter().map(|d| d.values.len()).sum::<usize>(), 3000);
        assert_eq!(a, event_draws(&p, &events, 1000, 9, DrawMode::Integer).unwrap());
        assert_ne!(a, event_draws(&p, &events, 1000, 10, DrawMode::Integer).unwrap());
        // Depends on the event id only, not on its position.
        let solo = event_draws(&p, &events[1..2], 1000, 9, DrawMode::Integer).unwrap();
        assert_eq!(solo[0], a[1]);
        assert!(a.iter().flat_map(|d| &d.values).all(|v| *v >= 0.0 && v.fract() == 0.0));
        let c = event_draws(&p, &events, 10, 9, DrawMode::Continuous).unwrap();
        assert!(c[2].values.iter().any(|v| v.fract() != 0.0));
        assert!(event_draws(&p, &events, 0, 9, DrawMode::Integer).is_err());

        let mut buf = Vec::new();
        write_draws(&mut buf, &a).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("event_id,draw_index,value\ne0,0,"));
        assert_eq!(read_draws(buf.as_slice()).unwrap(), a);
    }

    #[test]
    fn draw_mean_matches_truncated_mean() {
        let p = Predictor::<f64>::shipped();
        for y in [1u64, 24] {
            let d = event_draws(&p, &[sb(y)], 1_000_000, 3, DrawMode::Integer).unwrap();
            let v = &d[0].values;
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            let truth = p.spec_at(y, ViolenceType::Sb).unwrap().discretize().unwrap().mean();
            assert!((m - truth).abs() < 3.0 * (var / n).sqrt(), "{y}: {m} vs {truth}");
        }
    }

    #[test]
    fn curve_anchors() {
        let p = Predictor::<f64>::shipped();
        let rows = underreporting_curve(&p, ViolenceType::Sb, &[1, 100]).unwrap();
        let i1 = rows[0].inflation();
        let i100 = rows[1].inflation();
        assert!((1.0..=1.4).contains(&i1), "{i1}");
        assert!((i100 - 0.31).abs() <= 0.02, "{i100}");
        for r in &rows {
            assert!(r.p025 <= r.p50 && r.p50 <= r.p975);
            assert!(r.p50 <= r.mean_untruncated);
        }
        assert!(underreporting_curve(&p, ViolenceType::Sb, &[]).is_err());

        let mut buf = Vec::new();
        write_curve(&mut buf, &rows).unwrap();
        assert_eq!(read_curve(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn special_values_dip() {
        let p = Predictor::<f64>::shipped();
        for v in [13u64, 20, 24, 40, 101, 200] {
            let m = |y| p.mean(y, ViolenceType::Sb).unwrap();
            assert!(m(v) < (m(v - 1) * m(v + 1)).sqrt(), "no dip at {v}");
        }
    }

    #[test]
    fn mean_monotone_away_from_specials() {
        let p = Predictor::<f64>::shipped();
        let skip = |y: u64| SPECIAL_VALUES.iter().any(|&v| y + 1 >= v && y <= v + 1);
        let mut prev: Option<f64> = None;
        for y in (0..3000u64).filter(|&y| !skip(y)) {
            let m = p.mean(y, ViolenceType::Sb).unwrap();
            if let Some(pm) = prev {
                assert!(m > pm, "not increasing at {y}");
            }
            prev = Some(m);
        }
    }

    #[test]
    fn crossover_lands_near_23000() {
        let p = Predictor::<f64>::shipped();
        let c = crossover(&p, ViolenceType::Sb, 1_000_000).unwrap().unwrap();
        assert!((20_000..=26_000).contains(&c), "{c}");
        assert!(p.mean(c, ViolenceType::Sb).unwrap() <= c as f64);
        assert!(p.mean(c - 1, ViolenceType::Sb).unwrap() > (c - 1) as f64);
        assert_eq!(crossover(&p, ViolenceType::Sb, 1000).unwrap(), None);
    }

    #[test]
    fn density_tables() {
        let p = Predictor::<f64>::shipped();
        let s13 = p.spec_at(13, ViolenceType::Sb).unwrap();
        let t = density_table(&s13).unwrap();
        let mode = t.iter().max_by(|a, b| a.1.partial_cmp(&b.1).unwrap()).unwrap().0;
        assert_eq!(mode, 13);
        assert!(t.iter().map(|r| r.1).sum::<f64>() > 0.9999 - 1e-9);

        // Mass strictly below the reported value, relative to its size.
        let below = |y: u64| {
            let v = p.spec_at(y, ViolenceType::Sb).unwrap().discretize().unwrap();
            v.range_mass(0, Some(y - 1))
        };
        assert!(below(24) > below(32));
    }

    #[test]
    fn events_csv() {
        let text = "event_id,reported_value,violence_type,country,year,context\n\
                    a,3,sb,Syria,2014,bad\nb,0,ns,,,\n";
        let ev = read_events(text.as_bytes()).unwrap();
        assert_eq!(ev.len(), 2);
        assert_eq!(ev[0].country.as_deref(), Some("Syria"));
        assert_eq!(ev[0].context, Some(Context::Bad));
        assert_eq!(ev[1].year, None);
        let mut buf = Vec::new();
        write_events(&mut buf, &ev).unwrap();
        assert_eq!(read_events(buf.as_slice()).unwrap(), ev);

        let minimal = "event_id,reported_value,violence_type\nx,12,os\n";
        assert_eq!(read_events(minimal.as_bytes()).unwrap()[0], EventRecord::new("x", 12, ViolenceType::Os));

        let bad = "event_id,reported_value,violence_type\nx,-1,sb\ny,2,war\n";
        match read_events(bad.as_bytes()) {
            Err(Error::Ingest(issues)) => {
                assert_eq!(issues.len(), 2);
                assert_eq!(issues[0].rows, vec![2]);
                assert_eq!(issues[1].rows, vec![3]);
            }
            other => panic!("{other:?}"),
        }
        assert!(read_events("event_id,reported_value,violence_type\n".as_bytes()).unwrap().is_empty());
    }
}
