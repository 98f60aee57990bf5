use serde::Serialize;

/// Exit status for bad input: unreadable files, invalid config, malformed
/// manifests, geometry mismatches.
pub const EXIT_INPUT: i32 = 2;
/// Exit status when a verification check ran and failed.
pub const EXIT_CHECK: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Check(_) => EXIT_CHECK,
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: &'a str,
            message: String,
        }
        #[derive(Serialize)]
        struct Wrapper<'a> {
            error: Body<'a>,
        }
        let kind = match self {
            CliError::Input(_) => "input",
            CliError::Check(_) => "check",
        };
        serde_json::to_string(&Wrapper { error: Body { kind, message: self.to_string() } }).expect("error serializes")
    }
}

impl From<csvd_core::Error> for CliError {
    fn from(e: csvd_core::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
