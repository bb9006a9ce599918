use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter domain: {0}")]
    ParameterDomain(String),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("degenerate truncation: retained mass {0:e} is not above 1e-12")]
    DegenerateTruncation(f64),

    #[error("empty belief: all bin weights are zero")]
    EmptyBelief,

    #[error("schema: {0}")]
    Schema(String),

    #[error("survey ingestion failed:\n{}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("\n"))]
    Ingest(Vec<IngestIssue>),

    #[error("bin mismatch: {0}")]
    BinMismatch(String),

    #[error("anchor mismatch: spec anchored at {spec:?}, coder reported {coder}")]
    AnchorMismatch { spec: Option<u64>, coder: u64 },

    #[error("empty population")]
    EmptyPopulation,

    #[error("covariate: {0}")]
    Covariate(String),

    #[error("design matrix is rank deficient; collinear columns: {}", .0.join(", "))]
    Singular(Vec<String>),

    #[error("insufficient data: {rows} rows for {cols} coefficients")]
    InsufficientData { rows: usize, cols: usize },

    #[error("insufficient coders: need at least 2, found {0}")]
    InsufficientCoders(usize),

    #[error("violence type mismatch: bundle is {bundle}, event is {event}")]
    ViolenceTypeMismatch { bundle: String, event: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One validation failure found while ingesting a survey file; `rows` are
/// 1-based data row numbers (the header is row 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestIssue {
    pub rows: Vec<usize>,
    pub message: String,
}

impl std::fmt::Display for IngestIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let rows: Vec<String> = self.rows.iter().map(|r| r.to_string()).collect();
        write!(f, "rows [{}]: {}", rows.join(","), self.message)
    }
}
