use std::fmt;

/// Process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Failure = 1,
    Timeout = 2,
    InvalidStart = 3,
    ConfigError = 4,
    IntegrityError = 5,
}

impl ExitStatus {
    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration, flags or input parameters.
    Config,
    /// A stored artifact is corrupt, has the wrong version, or fails its hash.
    Integrity,
    /// Anything else: I/O, numerical failures.
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Config, message: message.into() }
    }

    pub fn integrity(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Integrity, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Runtime, message: message.into() }
    }

    /// Prefixes the message, keeping the kind.
    pub fn context(self, what: impl fmt::Display) -> Self {
        Self { kind: self.kind, message: format!("{what}: {}", self.message) }
    }

    pub fn exit_status(&self) -> ExitStatus {
        match self.kind {
            ErrorKind::Config => ExitStatus::ConfigError,
            ErrorKind::Integrity => ExitStatus::IntegrityError,
            ErrorKind::Runtime => ExitStatus::Failure,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<tubeplan::Error> for CliError {
    fn from(e: tubeplan::Error) -> Self {
        use tubeplan::Error as E;
        let kind = match &e {
            E::CorruptFile { .. } | E::Version { .. } => ErrorKind::Integrity,
            E::Dimension(_) | E::InvalidArgument(_) | E::Unstable(_) | E::NotPsd | E::UnknownAnchor(_) => ErrorKind::Config,
            _ => ErrorKind::Runtime,
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
