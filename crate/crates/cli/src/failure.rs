use std::fmt;

use cdcl_core::Error;

/// A problem with the command line, a config file or a run directory.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Maps a failure to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return EXIT_CONFIG;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Numerical(_)) => EXIT_NUMERICAL,
        Some(
            Error::Config(_)
            | Error::Schedule { .. }
            | Error::Architecture(_)
            | Error::Comparison(_)
            | Error::Mapping(_)
            | Error::Alternation(_)
            | Error::Switch { .. }
            | Error::Json(_),
        ) => EXIT_CONFIG,
        _ => EXIT_DATA,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes() {
        assert_eq!(exit_code(&ConfigError("x".into()).into()), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Numerical("nan".into()).into()), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::Format("bad".into()).into()), EXIT_DATA);
        assert_eq!(exit_code(&Error::Architecture("w".into()).into()), EXIT_CONFIG);
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(exit_code(&anyhow::Error::from(io).context("reading")), EXIT_DATA);
    }
}
