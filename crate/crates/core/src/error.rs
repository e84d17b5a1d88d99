use std::fmt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage a failure is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Sample,
    Transmit,
    Sync,
    Sift,
    Decoy,
    Reconcile,
    Amplify,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Sample => "sample",
            Stage::Transmit => "transmit",
            Stage::Sync => "sync",
            Stage::Sift => "sift",
            Stage::Decoy => "decoy",
            Stage::Reconcile => "reconcile",
            Stage::Amplify => "amplify",
            Stage::Output => "output",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no lock: folded histogram contrast {contrast:.2} below threshold")]
    NoLock { contrast: f64 },

    #[error("data integrity: {0}")]
    Integrity(String),

    #[error("reconciliation failed after {passes} passes ({residual} residual parity mismatches)")]
    ReconciliationFailed { passes: usize, residual: usize },

    #[error("malformed {what} at byte offset {offset}: {reason}")]
    Malformed {
        what: &'static str,
        offset: u64,
        reason: String,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// Stage the error was tagged with, if any.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

/// Tags errors of a fallible stage with the stage they came from.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T, E: Into<Error>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| match e.into() {
            tagged @ Error::Stage { .. } => tagged,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        })
    }
}
