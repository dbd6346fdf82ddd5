use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("upstream artifact: {0}")]
    Upstream(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 2,
            Self::Upstream(_) => 3,
            Self::Runtime(_) => 4,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Runtime(e.to_string())
            }
        })*
    };
}

runtime_from!(
    intent_core::traj::TrajError,
    intent_core::embed::EmbedError,
    intent_core::hac::HacError,
    intent_core::metrics::MetricError,
    intent_core::granularity::GranularityError,
    intent_core::aggregate::AggregateError,
    intent_core::train::TrainError,
    intent_core::envs::EnvError,
    csv::Error,
    std::io::Error
);
