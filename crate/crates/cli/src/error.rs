use pairpose::contact::ContactError;
use pairpose::data::DataError;
use pairpose::diffusion::DiffusionError;
use pairpose::metrics::MetricsError;
use pairpose::pipeline::PipelineError;

/// Failure class, mapped to the process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Validation,
    Numerical,
}

impl Kind {
    pub fn code(self) -> i32 {
        match self {
            Kind::Usage => 1,
            Kind::Validation => 2,
            Kind::Numerical => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Validation => "validation",
            Kind::Numerical => "numerical",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub reason: String,
}

impl CliError {
    pub fn usage(reason: impl Into<String>) -> Self {
        Self { kind: Kind::Usage, reason: reason.into() }
    }

    pub fn validation(reason: impl Into<String>) -> Self {
        Self { kind: Kind::Validation, reason: reason.into() }
    }

    pub fn numerical(reason: impl Into<String>) -> Self {
        Self { kind: Kind::Numerical, reason: reason.into() }
    }

    /// `error kind=<kind> code=<n> reason="<one line>"`.
    pub fn line(&self) -> String {
        let reason = self.reason.replace(['\n', '\r'], " ").replace('"', "'");
        format!("error kind={} code={} reason=\"{reason}\"", self.kind.name(), self.kind.code())
    }
}

fn classify(e: &PipelineError) -> Kind {
    match e {
        PipelineError::Diffusion(DiffusionError::Guidance(_))
        | PipelineError::Metrics(MetricsError::Eigen)
        | PipelineError::NonFinite(_) => Kind::Numerical,
        _ => Kind::Validation,
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        Self { kind: classify(&e), reason: e.to_string() }
    }
}

macro_rules! via_pipeline {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                PipelineError::from(e).into()
            }
        }
    )*};
}

via_pipeline!(
    pairpose::config::ConfigError,
    DataError,
    DiffusionError,
    ContactError,
    MetricsError,
    pairpose::autodiff::AutodiffError,
    pairpose::body::BodyError,
    pairpose::guidance::GuidanceError,
    std::io::Error
);

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::validation(format!("malformed JSON: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
