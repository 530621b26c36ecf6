use std::fmt;
use std::process::ExitCode;

/// Command failure, mapped to an exit code and one line on stderr.
#[derive(Debug)]
pub enum Failure {
    /// Bad or incomplete configuration; exit 3.
    Config(String),
    /// Anything that went wrong while running the pipeline; exit 1.
    Pipeline(String),
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Failure::Config(_) => ExitCode::from(3),
            Failure::Pipeline(_) => ExitCode::from(1),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            Failure::Config(m) => ("config", m),
            Failure::Pipeline(m) => ("pipeline", m),
        };
        // Keep the message on one line for log scrapers.
        write!(f, "error[{kind}]: {}", msg.replace('\n', "; "))
    }
}

impl From<pkdistill_core::Error> for Failure {
    fn from(e: pkdistill_core::Error) -> Self {
        Failure::Pipeline(e.to_string())
    }
}

pub trait OrPipeline<T> {
    fn or_pipeline(self, what: &str) -> Result<T, Failure>;
}

impl<T, E: fmt::Display> OrPipeline<T> for Result<T, E> {
    fn or_pipeline(self, what: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure::Pipeline(format!("{what}: {e}")))
    }
}
