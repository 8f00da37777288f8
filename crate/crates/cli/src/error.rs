use thiserror::Error;

/// Failures surfaced to the command line, each mapped to an exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numerical(_) => "numerical",
            CliError::Io(_) => "io",
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

impl From<coheragg::Error> for CliError {
    fn from(e: coheragg::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else if e.is_data() {
            CliError::Data(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_errors_map_to_exit_codes() {
        let singular: CliError = coheragg::Error::Singular(vec![1]).into();
        assert_eq!(singular.exit_code(), 4);
        let short: CliError = coheragg::Error::TooShort { needed: 10, available: 3 }.into();
        assert_eq!(short.exit_code(), 3);
        let bad: CliError = coheragg::Error::InvalidAggregate("x".into()).into();
        assert_eq!(bad.exit_code(), 2);
    }

    #[test]
    fn json_line_is_single_line() {
        let e = CliError::Data("bad\nrow".into());
        let line = e.to_json_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"], "data");
        assert_eq!(v["message"], "bad\nrow");
    }
}
