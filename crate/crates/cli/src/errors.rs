//! One error type with stable machine-parsable codes. Every failure exits
//! nonzero and prints exactly one `error: <code>: <message>` line.

use fskd_core::config::ConfigError;
use fskd_core::pipeline::PipelineError;
use fskd_core::synth::DataError;
use fskd_core::tps::TpsError;

#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            exit_code: 1,
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: "args.usage",
            message: message.into(),
            exit_code: 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let code = match &e {
            ConfigError::UnknownKey { .. } => "config.unknown-key",
            ConfigError::BadValue { .. } | ConfigError::BadLine { .. } => "config.bad-value",
            ConfigError::Invalid(_) => "config.invalid",
        };
        Self::new(code, e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::new("data", e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Checkpoint(_) => "checkpoint",
            PipelineError::NonFiniteLoss { .. } => "train.non-finite",
            _ => "pipeline",
        };
        Self::new(code, e.to_string())
    }
}

impl From<TpsError> for CliError {
    fn from(e: TpsError) -> Self {
        Self::new("warp.solve", e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e.to_string())
    }
}

impl From<fskd_core::io::IoError> for CliError {
    fn from(e: fskd_core::io::IoError) -> Self {
        Self::new("io.image", e.to_string())
    }
}
