use std::fmt;
use std::path::Path;

/// Error classes and their exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Config,
    Data,
    Numeric,
}

impl Kind {
    pub fn code(self) -> i32 {
        match self {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Numeric => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Kind::Config => "config",
            Kind::Data => "data",
            Kind::Numeric => "numeric",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self {
            kind: Kind::Config,
            message: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self {
            kind: Kind::Data,
            message: msg.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::data(format!("{}: {e}", path.display()))
    }
}

/// `error[<code> <kind>]: <text>` on one line.
impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "error[{} {}]: {text}", self.kind.code(), self.kind.name())
    }
}

impl From<ibrobust::Error> for CliError {
    fn from(e: ibrobust::Error) -> Self {
        use ibrobust::Error as E;
        let kind = match &e {
            E::InvalidArgument(_) => Kind::Config,
            E::BadMagic { .. }
            | E::Truncated { .. }
            | E::CountMismatch { .. }
            | E::Data(_)
            | E::Checkpoint(_)
            | E::Io { .. }
            | E::Json(_) => Kind::Data,
            _ => Kind::Numeric,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::data(e.to_string())
    }
}
