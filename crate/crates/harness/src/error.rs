use std::fmt;

/// Command failure, mapped onto the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or config file: exit 2.
    Config(String),
    /// A check ran and did not meet its threshold: exit 1.
    Threshold(String),
    /// Anything else that stopped the command: exit 1.
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Threshold(_) | Failure::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Threshold(m) => write!(f, "check failed: {m}"),
            Failure::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

impl From<sdt_core::Error> for Failure {
    fn from(e: sdt_core::Error) -> Self {
        match e {
            sdt_core::Error::Config(m) => Failure::Config(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}
