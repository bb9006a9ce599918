//! Elicited coder distributions and the survey design they come from.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IngestIssue, Result};
use crate::numeric::{lit, Real};

/// Reported values the survey asked about.
pub const SURVEYED_LEVELS: [u64; 19] = [
    0, 1, 2, 3, 13, 20, 24, 40, 47, 100, 101, 200, 201, 1000, 1001, 2000, 2001, 10_000, 100_000,
];

/// Reported values that carry their own dummy covariate.
pub const SPECIAL_VALUES: [u64; 10] = [2, 3, 13, 20, 24, 40, 101, 200, 1001, 2000];

/// Likert labels and the probability interval each one stands for.
pub const LIKERT_SCALE: [(&str, f64, f64); 5] = [
    ("Extremely likely", 0.90, 1.00),
    ("Somewhat likely", 0.60, 0.90),
    ("Neither likely nor unlikely", 0.40, 0.60),
    ("Somewhat unlikely", 0.10, 0.40),
    ("Extremely unlikely", 0.00, 0.10),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViolenceType {
    Sb,
    Ns,
    Os,
}

impl ViolenceType {
    pub const ALL: [ViolenceType; 3] = [ViolenceType::Sb, ViolenceType::Ns, ViolenceType::Os];

    pub fn as_str(self) -> &'static str {
        match self {
            ViolenceType::Sb => "sb",
            ViolenceType::Ns => "ns",
            ViolenceType::Os => "os",
        }
    }
}

impl fmt::Display for ViolenceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViolenceType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sb" => Ok(ViolenceType::Sb),
            "ns" => Ok(ViolenceType::Ns),
            "os" => Ok(ViolenceType::Os),
            other => Err(Error::Schema(format!("unknown violence type `{other}`"))),
        }
    }
}

/// Information context of an event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Context {
    Good,
    Bad,
}

impl Context {
    pub fn as_str(self) -> &'static str {
        match self {
            Context::Good => "good",
            Context::Bad => "bad",
        }
    }
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Context {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "good" => Ok(Context::Good),
            "bad" => Ok(Context::Bad),
            other => Err(Error::Schema(format!("unknown context `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurveyDesign {
    pub surveyed_levels: Vec<u64>,
    pub special_values: Vec<u64>,
    pub likert: Vec<(String, f64, f64)>,
}

impl SurveyDesign {
    pub fn standard() -> Self {
        SurveyDesign {
            surveyed_levels: SURVEYED_LEVELS.to_vec(),
            special_values: SPECIAL_VALUES.to_vec(),
            likert: LIKERT_SCALE.iter().map(|&(l, a, b)| (l.to_string(), a, b)).collect(),
        }
    }

    pub fn is_special(&self, y: u64) -> bool {
        self.special_values.contains(&y)
    }
}

impl Default for SurveyDesign {
    fn default() -> Self {
        Self::standard()
    }
}

/// Inclusive integer range; `hi = None` is unbounded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FatalityBin {
    pub lo: u64,
    pub hi: Option<u64>,
}

impl FatalityBin {
    pub const fn new(lo: u64, hi: u64) -> Self {
        FatalityBin { lo, hi: Some(hi) }
    }

    pub const fn singleton(k: u64) -> Self {
        FatalityBin { lo: k, hi: Some(k) }
    }

    pub const fn open(lo: u64) -> Self {
        FatalityBin { lo, hi: None }
    }

    pub fn contains(&self, k: u64) -> bool {
        k >= self.lo && self.hi.map_or(true, |h| k <= h)
    }

    pub fn is_singleton(&self, k: u64) -> bool {
        self.lo == k && self.hi == Some(k)
    }
}

impl fmt::Display for FatalityBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.hi {
            Some(h) if h == self.lo => write!(f, "{{{}}}", self.lo),
            Some(h) => write!(f, "[{},{}]", self.lo, h),
            None => write!(f, "[{},inf)", self.lo),
        }
    }
}

/// Checks that bins are ordered, disjoint, cover `[0, inf)` and contain the
/// singleton `{reported}`.
pub fn validate_bins(bins: &[FatalityBin], reported: u64) -> std::result::Result<(), String> {
    let first = bins.first().ok_or("no bins")?;
    if first.lo != 0 {
        return Err(format!("gap in coverage: [0,{}] missing", first.lo - 1));
    }
    for pair in bins.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let Some(ah) = a.hi else {
            return Err(format!("bins {a} and {b} overlap"));
        };
        if b.lo <= ah {
            return Err(format!("bins {a} and {b} overlap"));
        }
        if b.lo > ah + 1 {
            return Err(format!("gap in coverage: [{},{}] missing", ah + 1, b.lo - 1));
        }
    }
    for b in bins {
        if let Some(h) = b.hi {
            if h < b.lo {
                return Err(format!("bin [{},{}] is empty", b.lo, h));
            }
        }
    }
    if let Some(last) = bins.last().and_then(|b| b.hi) {
        return Err(format!("gap in coverage: [{},inf) missing", last + 1));
    }
    if !bins.iter().any(|b| b.is_singleton(reported)) {
        return Err(format!("missing singleton bin {{{reported}}}"));
    }
    Ok(())
}

/// One coder's binned belief about the true count given a reported value.
#[derive(Clone, Debug, PartialEq)]
pub struct CoderDistribution<T> {
    pub coder_id: String,
    pub violence_type: ViolenceType,
    pub context: Context,
    pub reported_value: u64,
    pub bins: Vec<(FatalityBin, T)>,
}

impl<T: Real> CoderDistribution<T> {
    pub fn fatality_bins(&self) -> Vec<FatalityBin> {
        self.bins.iter().map(|(b, _)| *b).collect()
    }

    pub fn probabilities(&self) -> Vec<T> {
        self.bins.iter().map(|(_, p)| *p).collect()
    }

    pub fn total(&self) -> T {
        self.bins.iter().fold(T::zero(), |acc, (_, p)| acc + *p)
    }

    pub fn normalized(self) -> Result<Self> {
        normalize(self)
    }
}

/// Divides every bin weight by the total weight.
pub fn normalize<T: Real>(raw: CoderDistribution<T>) -> Result<CoderDistribution<T>> {
    if let Some((bin, w)) = raw.bins.iter().find(|(_, w)| !(*w >= T::zero()) || !w.is_finite()) {
        return Err(Error::Schema(format!("bin {bin} has invalid weight {w}")));
    }
    let total = raw.total();
    if !(total > T::zero()) {
        return Err(Error::EmptyBelief);
    }
    let bins = raw.bins.into_iter().map(|(b, w)| (b, w / total)).collect();
    Ok(CoderDistribution { bins, ..raw })
}

/// Midpoint of the probability interval behind a Likert label.
pub fn likert_to_weight<T: Real>(label: &str) -> Result<T> {
    let wanted = label.trim();
    LIKERT_SCALE
        .iter()
        .find(|(l, _, _)| l.eq_ignore_ascii_case(wanted))
        .map(|&(_, lo, hi)| lit((lo + hi) / 2.0))
        .ok_or_else(|| Error::Schema(format!("unknown response label `{wanted}`")))
}

/// Bin layout used when a survey row set does not carry explicit bins.
///
/// `ỹ = 13` reproduces the published layout; other levels follow a geometric
/// rule around the reported value.
pub fn default_bins(reported: u64) -> Vec<FatalityBin> {
    let y = reported;
    if y == 13 {
        return vec![
            FatalityBin::singleton(0),
            FatalityBin::new(1, 3),
            FatalityBin::new(4, 12),
            FatalityBin::singleton(13),
            FatalityBin::new(14, 24),
            FatalityBin::new(25, 50),
            FatalityBin::open(51),
        ];
    }
    if y == 0 {
        return vec![
            FatalityBin::singleton(0),
            FatalityBin::new(1, 3),
            FatalityBin::new(4, 12),
            FatalityBin::open(13),
        ];
    }
    let quarter = y.div_ceil(4);
    let below = [(1, quarter), (quarter + 1, y - 1)];
    let above = [(y + 1, 2 * y - 2), (2 * y - 1, 4 * y - 2)];

    let mut bins = vec![FatalityBin::singleton(0)];
    let mut next = 1u64;
    for (lo, hi) in below {
        let lo = lo.max(next);
        let hi = hi.min(y - 1);
        if lo <= hi {
            bins.push(FatalityBin::new(lo, hi));
            next = hi + 1;
        }
    }
    bins.push(FatalityBin::singleton(y));
    next = y + 1;
    for (lo, hi) in above {
        let lo = lo.max(next);
        if lo <= hi {
            bins.push(FatalityBin::new(lo, hi));
            next = hi + 1;
        }
    }
    bins.push(FatalityBin::open(next.max(4 * y - 1)));
    bins
}

#[derive(Debug, Deserialize)]
struct SurveyRow {
    coder_id: String,
    violence_type: String,
    context: String,
    reported_value: String,
    bin_lo: String,
    bin_hi: String,
    weight: String,
}

#[derive(Debug, Serialize)]
struct SurveyRowOut<'a> {
    coder_id: &'a str,
    violence_type: &'a str,
    context: &'a str,
    reported_value: u64,
    bin_lo: u64,
    bin_hi: String,
    weight: f64,
}

type GroupKey = (String, ViolenceType, Context, u64);

/// Reads a survey CSV file. See [`read_survey`].
pub fn ingest_survey(path: impl AsRef<Path>) -> Result<Vec<CoderDistribution<f64>>> {
    let file = std::fs::File::open(path.as_ref())?;
    read_survey(file)
}

/// Parses survey rows into normalised coder distributions, one per
/// `(coder, violence type, context, reported value)` group, in order of first
/// appearance. All validation failures are collected and reported together.
pub fn read_survey<R: Read>(reader: R) -> Result<Vec<CoderDistribution<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        log::warn!("survey file is empty");
        return Ok(Vec::new());
    }

    let mut issues = Vec::new();
    let mut groups: IndexMap<GroupKey, Vec<(usize, FatalityBin, f64)>> = IndexMap::new();
    for (i, rec) in rdr.deserialize::<SurveyRow>().enumerate() {
        let row = i + 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                issues.push(IngestIssue { rows: vec![row], message: e.to_string() });
                continue;
            }
        };
        match parse_row(&rec) {
            Ok((key, bin, w)) => groups.entry(key).or_default().push((row, bin, w)),
            Err(message) => issues.push(IngestIssue { rows: vec![row], message }),
        }
    }

    let mut out = Vec::with_capacity(groups.len());
    for ((coder_id, violence_type, context, reported_value), mut rows) in groups {
        rows.sort_by_key(|(_, b, _)| (b.lo, b.hi.unwrap_or(u64::MAX)));
        let row_ids: Vec<usize> = rows.iter().map(|(r, _, _)| *r).collect();
        let bins: Vec<FatalityBin> = rows.iter().map(|(_, b, _)| *b).collect();
        let label = format!("coder {coder_id} {violence_type}/{context} reported {reported_value}");
        if let Err(msg) = validate_bins(&bins, reported_value) {
            issues.push(IngestIssue { rows: row_ids, message: format!("{label}: {msg}") });
            continue;
        }
        let raw = CoderDistribution {
            coder_id,
            violence_type,
            context,
            reported_value,
            bins: rows.into_iter().map(|(_, b, w)| (b, w)).collect(),
        };
        match normalize(raw) {
            Ok(d) => out.push(d),
            Err(e) => issues.push(IngestIssue { rows: row_ids, message: format!("{label}: {e}") }),
        }
    }
    if !issues.is_empty() {
        return Err(Error::Ingest(issues));
    }
    if out.is_empty() {
        log::warn!("survey file has no data rows");
    }
    Ok(out)
}

fn parse_row(rec: &SurveyRow) -> std::result::Result<(GroupKey, FatalityBin, f64), String> {
    let tov: ViolenceType = rec.violence_type.parse().map_err(|e: Error| e.to_string())?;
    let ctx: Context = rec.context.parse().map_err(|e: Error| e.to_string())?;
    let int = |name: &str, s: &str| {
        s.parse::<u64>()
            .map_err(|_| format!("{name} `{s}` is not a nonnegative integer"))
    };
    let y = int("reported_value", &rec.reported_value)?;
    let lo = int("bin_lo", &rec.bin_lo)?;
    let hi = if rec.bin_hi.is_empty() {
        None
    } else {
        Some(int("bin_hi", &rec.bin_hi)?)
    };
    if hi.is_some_and(|h| h < lo) {
        return Err(format!("bin_hi {} below bin_lo {lo}", rec.bin_hi));
    }
    let weight = match rec.weight.parse::<f64>() {
        Ok(w) if w >= 0.0 && w.is_finite() => w,
        Ok(w) => return Err(format!("weight {w} must be a finite value >= 0")),
        Err(_) => likert_to_weight::<f64>(&rec.weight).map_err(|e| e.to_string())?,
    };
    Ok(((rec.coder_id.clone(), tov, ctx, y), FatalityBin { lo, hi }, weight))
}

/// Writes coder distributions in the survey CSV layout.
pub fn write_survey<W: Write>(writer: W, coders: &[CoderDistribution<f64>]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for c in coders {
        for (bin, w) in &c.bins {
            wtr.serialize(SurveyRowOut {
                coder_id: &c.coder_id,
                violence_type: c.violence_type.as_str(),
                context: c.context.as_str(),
                reported_value: c.reported_value,
                bin_lo: bin.lo,
                bin_hi: bin.hi.map(|h| h.to_string()).unwrap_or_default(),
                weight: *w,
            })?;
        }
    }
    if coders.is_empty() {
        wtr.write_record([
            "coder_id",
            "violence_type",
            "context",
            "reported_value",
            "bin_lo",
            "bin_hi",
            "weight",
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
