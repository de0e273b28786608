use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A numeric or structural argument violates a documented precondition.
    InvalidArgument(String),
    /// An index, code or phase lies outside its valid range.
    OutOfRange(String),
    UnknownPreset(String),
    /// The delay chain no longer covers one clock period.
    SpanTooShort { span_ps: f64, clock_period_ps: f64 },
    /// Bin widths cannot be estimated from a phase-locked histogram.
    PhaseLockedHistogram,
    /// No detected coincidences at this operating point (zero QBER denominator).
    UnusableOperatingPoint(String),
    Unsorted(String),
    /// Malformed input file.
    Schema { line: usize, msg: String },
    Io { path: String, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, err: impl fmt::Display) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            msg: err.to_string(),
        }
    }

    /// True for errors that come from the model domain rather than from usage or IO.
    pub fn is_domain_error(&self) -> bool {
        matches!(
            self,
            Error::SpanTooShort { .. }
                | Error::PhaseLockedHistogram
                | Error::UnusableOperatingPoint(_)
        )
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::OutOfRange(msg) => write!(f, "out of range: {msg}"),
            Error::UnknownPreset(name) => write!(
                f,
                "unknown preset '{name}' (expected one of TDC1_RAW, TDC1_OPT, TDC2_RAW, TDC2_OPT)"
            ),
            Error::SpanTooShort {
                span_ps,
                clock_period_ps,
            } => write!(
                f,
                "delay chain spans {span_ps} ps, shorter than the clock period {clock_period_ps} ps"
            ),
            Error::PhaseLockedHistogram => write!(
                f,
                "bin widths cannot be estimated from a phase-locked histogram (only a subset of bins is probed)"
            ),
            Error::UnusableOperatingPoint(msg) => write!(f, "unusable operating point: {msg}"),
            Error::Unsorted(msg) => write!(f, "unsorted input: {msg}"),
            Error::Schema { line, msg } => write!(f, "line {line}: {msg}"),
            Error::Io { path, msg } => write!(f, "{path}: {msg}"),
        }
    }
}

impl std::error::Error for Error {}
