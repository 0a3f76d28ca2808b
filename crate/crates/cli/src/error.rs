use thiserror::Error;

use imoco_core::Error as CoreError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: CoreError,
    },
    #[error("[{stage}] missing input {path}; run the {needs} stage first")]
    MissingInput { stage: &'static str, path: String, needs: &'static str },
    #[error("[{stage}] objective increased from {initial:e} to {last:e} (outputs written)")]
    Objective { stage: &'static str, initial: f64, last: f64 },
}

impl CliError {
    /// Process exit code: 2 config, 3 data format or io, 4 solver.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingInput { .. } => 3,
            CliError::Objective { .. } => 4,
            CliError::Stage { source, .. } => match source {
                CoreError::InvalidParameter(_) => 2,
                CoreError::Format(_) | CoreError::Io(_) | CoreError::Shape(_) | CoreError::Degenerate(_) => 3,
                CoreError::Solver(_) => 4,
            },
        }
    }
}

/// Tags core errors with the stage that produced them.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T> StageExt<T> for imoco_core::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Stage { stage, source })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        let tag = |e| CliError::Stage { stage: "imoco", source: e };
        assert_eq!(tag(CoreError::Format("x".into())).exit_code(), 3);
        assert_eq!(tag(CoreError::Solver("x".into())).exit_code(), 4);
        assert_eq!(tag(CoreError::InvalidParameter("x".into())).exit_code(), 2);
        let e = CliError::Objective { stage: "imoco", initial: 1.0, last: 2.0 };
        assert_eq!(e.exit_code(), 4);
        assert!(e.to_string().starts_with("[imoco]"));
    }
}
