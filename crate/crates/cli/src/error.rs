use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("self-check failed: {}", .0.join(", "))]
    Check(Vec<String>),
    #[error(transparent)]
    Core(#[from] esbm::Error),
}

impl CliError {
    pub fn input(path: &Path, e: std::io::Error) -> Self {
        CliError::Usage(format!("{}: {e}", path.display()))
    }

    /// 1 check failure, 2 bad usage or input, 3 numerical failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Check(_) => 1,
            CliError::Core(e) => core_code(e),
        }
    }
}

fn core_code(e: &esbm::Error) -> u8 {
    use esbm::Error as E;
    match e {
        E::Rollout { source, .. } => core_code(source),
        E::NonFinite { .. }
        | E::NonFiniteGradient(_)
        | E::NonFiniteForce { .. }
        | E::NonFiniteBias { .. }
        | E::NonFiniteLoss { .. }
        | E::Degenerate(_)
        | E::EmptyCluster(_)
        | E::Singular => 3,
        _ => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes() {
        let nested = esbm::Error::Rollout {
            index: 3,
            source: Box::new(esbm::Error::NonFiniteForce { step: 1 }),
        };
        assert_eq!(CliError::from(nested).exit_code(), 3);
        assert_eq!(CliError::from(esbm::Error::Config("k".into())).exit_code(), 2);
        assert_eq!(CliError::Check(vec!["gradcheck".into()]).exit_code(), 1);
    }
}
