use std::fmt;
use std::path::Path;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Config = 1,
    Data = 2,
    Numerical = 3,
    Convergence = 4,
}

impl Exit {
    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            exit: Exit::Config,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            exit: Exit::Data,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        let exit = if e.kind() == std::io::ErrorKind::NotFound {
            Exit::Config
        } else {
            Exit::Data
        };
        Self {
            exit,
            message: format!("{}: {e}", path.display()),
        }
    }

    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<illdeath::Error> for CliError {
    fn from(e: illdeath::Error) -> Self {
        use illdeath::Error as E;
        let exit = match e {
            E::Parse { .. } | E::RegionOutOfRange { .. } | E::SelfLoop { .. } | E::Data(_) => {
                Exit::Data
            }
            E::InvalidArgument(_) => Exit::Config,
            E::NonFinite(_)
            | E::NotPositiveDefinite(_)
            | E::Quadrature(_)
            | E::Sampler(_)
            | E::NoConvergence(_) => Exit::Numerical,
        };
        Self {
            exit,
            message: e.to_string(),
        }
    }
}
