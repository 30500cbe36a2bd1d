//! Scenario runner and report exporter for the meter mesh simulator.

pub mod report;
pub mod runner;
pub mod scenario;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("scenario does not parse: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("no bundled scenario or file named `{0}`")]
    UnknownScenario(String),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Attack(#[from] meterguard::attacks::AttackError),
    #[error(transparent)]
    Net(#[from] meterguard::simnet::NetError),
    #[error("cannot write {path}: {reason}")]
    Io { path: String, reason: String },
}

impl RunError {
    /// Process exit code: configuration and input problems are 2.
    pub fn exit_code(&self) -> i32 {
        2
    }
}
