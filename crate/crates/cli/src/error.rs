//! Command errors and their exit codes.

use serde::Serialize;

use subtype_core::characterization::CharacterizationError;
use subtype_core::cohort::CohortError;
use subtype_core::lcmm::LcmmError;
use subtype_core::robustness::RobustnessError;
use subtype_core::selection::SelectionError;
use subtype_core::synthetic::GeneratorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    /// Bad arguments, missing inputs or mismatched files.
    Usage,
    /// Input data failing validation, or output that cannot be written.
    Data,
    /// Optimisation or estimation failure.
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Data,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Numerical,
            message: message.into(),
        }
    }

    pub fn context(mut self, what: &str) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    /// Single-line JSON record written to stderr.
    pub fn to_json_line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: &'a CliError,
            exit_code: i32,
        }
        serde_json::to_string(&Line {
            error: self,
            exit_code: self.exit_code(),
        })
        .expect("error record serialises")
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<CohortError> for CliError {
    fn from(e: CohortError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<GeneratorError> for CliError {
    fn from(e: GeneratorError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<LcmmError> for CliError {
    fn from(e: LcmmError) -> Self {
        let message = e.to_string();
        match e {
            LcmmError::Config(_) => CliError::usage(message),
            LcmmError::MissingCovariate { .. } | LcmmError::Link { .. } => CliError::data(message),
            LcmmError::NotPositiveDefinite(_) | LcmmError::NonFinite(_) | LcmmError::AllStartsFailed(_) => {
                CliError::numerical(message)
            }
        }
    }
}

impl From<SelectionError> for CliError {
    fn from(e: SelectionError) -> Self {
        match e {
            SelectionError::EmptyRange | SelectionError::ZeroClasses => CliError::usage(e.to_string()),
            SelectionError::NoneConverged(_) => CliError::numerical(e.to_string()),
            SelectionError::Fit(inner) => inner.into(),
            SelectionError::Io { .. } => CliError::data(e.to_string()),
        }
    }
}

impl From<RobustnessError> for CliError {
    fn from(e: RobustnessError) -> Self {
        match e {
            RobustnessError::InvalidFraction(_) => CliError::usage(e.to_string()),
            RobustnessError::Fit(inner) => inner.into(),
            RobustnessError::Cohort(inner) => inner.into(),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<CharacterizationError> for CliError {
    fn from(e: CharacterizationError) -> Self {
        let message = e.to_string();
        match e {
            CharacterizationError::UnknownVariable(_) => CliError::usage(message),
            CharacterizationError::Input(_) | CharacterizationError::NoContrast(_) => CliError::data(message),
            CharacterizationError::RankDeficient(_)
            | CharacterizationError::Boundary(_)
            | CharacterizationError::NotConverged(_)
            | CharacterizationError::Numerical(_) => CliError::numerical(message),
        }
    }
}
