use std::fmt;

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub msg: String,
}

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_VERSION: i32 = 4;

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            kind: "usage",
            msg: msg.into(),
        }
    }

    pub fn io(path: &std::path::Path, e: impl fmt::Display) -> Self {
        Self {
            code: EXIT_IO,
            kind: "io",
            msg: format!("{}: {e}", path.display()),
        }
    }

    /// A checkpoint that loads but does not fit this build.
    pub fn incompatible(path: &std::path::Path, e: impl fmt::Display) -> Self {
        Self {
            code: EXIT_VERSION,
            kind: "version",
            msg: format!("incompatible checkpoint {}: {e}", path.display()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.kind, self.msg)
    }
}

impl From<s2st::Error> for CliError {
    fn from(e: s2st::Error) -> Self {
        use s2st::Error as E;
        let (code, kind) = match &e {
            E::Io { .. } | E::Parse { .. } | E::Format { .. } => (EXIT_IO, "io"),
            E::Numeric(_) => (EXIT_NUMERIC, "numeric"),
            E::VersionMismatch { .. } => (EXIT_VERSION, "version"),
            E::Config(_) => (EXIT_USAGE, "config"),
            _ => (EXIT_USAGE, "input"),
        };
        Self {
            code,
            kind,
            msg: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
