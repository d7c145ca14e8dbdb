use std::fmt;

/// Crate-wide error type. Variants map 1:1 onto CLI exit codes so the binary
/// can translate any failure into a stable, scriptable status.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad invocation: unknown flag, missing argument, contradictory options.
    #[error("usage: {0}")]
    Usage(String),

    /// Malformed input data: JSONL records, checkpoints, templates, configs.
    #[error("data: {0}")]
    Data(String),

    /// Transport or remote-backend failure: sockets, HTTP, framing.
    #[error("backend: {0}")]
    Backend(String),

    /// Numeric breakdown: non-finite loss, empty reduction, singular scale.
    #[error("numeric: {0}")]
    Numeric(String),
}

impl Error {
    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Data(_) => 2,
            Error::Backend(_) => 3,
            Error::Numeric(_) => 4,
        }
    }

    /// Short machine-readable class tag, used in the stderr error line.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Usage(_) => "usage",
            Error::Data(_) => "data-format",
            Error::Backend(_) => "backend-transport",
            Error::Numeric(_) => "numeric",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// One-line machine-readable rendering: `error class=<class> msg="..."`.
pub struct ErrorLine<'a>(pub &'a Error);

impl fmt::Display for ErrorLine<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.0.to_string();
        // Keep the line single-line and quote-safe.
        let msg = msg.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
        write!(f, "error class={} msg=\"{}\"", self.0.class(), msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(Error::Usage(String::new()).exit_code(), 1);
        assert_eq!(Error::Data(String::new()).exit_code(), 2);
        assert_eq!(Error::Backend(String::new()).exit_code(), 3);
        assert_eq!(Error::Numeric(String::new()).exit_code(), 4);
    }

    #[test]
    fn error_line_is_single_line_and_quoted() {
        let e = Error::Data("bad \"field\"\nsecond line".into());
        let line = ErrorLine(&e).to_string();
        assert!(!line.contains('\n'));
        assert_eq!(
            line,
            "error class=data-format msg=\"data: bad \\\"field\\\" second line\""
        );
    }
}
