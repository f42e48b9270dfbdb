use dept_core::DeptError;

/// A failed command, classified by the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Numeric(_) => 4,
        }
    }

    pub fn into_inner(self) -> anyhow::Error {
        match self {
            Self::Config(e) | Self::Data(e) | Self::Numeric(e) => e,
        }
    }

    pub fn context(self, msg: impl std::fmt::Display + Send + Sync + 'static) -> Self {
        match self {
            Self::Config(e) => Self::Config(e.context(msg)),
            Self::Data(e) => Self::Data(e.context(msg)),
            Self::Numeric(e) => Self::Numeric(e.context(msg)),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self {
            Self::Config(_) => "config error",
            Self::Data(_) => "data error",
            Self::Numeric(_) => "numeric failure",
        };
        let inner = match self {
            Self::Config(e) | Self::Data(e) | Self::Numeric(e) => e,
        };
        write!(f, "{kind}: {inner:#}")
    }
}

impl From<DeptError> for CliError {
    fn from(e: DeptError) -> Self {
        match e {
            DeptError::NonFinite(_) => Self::Numeric(e.into()),
            DeptError::InvalidArgument(_) | DeptError::InconsistentInputs(_) => Self::Config(e.into()),
            _ => Self::Data(e.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Data(e.into())
    }
}
