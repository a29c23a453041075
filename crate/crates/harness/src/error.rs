use std::path::Path;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error("run {run} (seed {seed}): {source}")]
    Run {
        run: usize,
        seed: u64,
        #[source]
        source: spider3p::Error,
    },

    #[error(transparent)]
    Core(#[from] spider3p::Error),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0} diagnostic check(s) failed")]
    Diagnostics(usize),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 for configuration problems, 3 for numerical failures, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        fn core(e: &spider3p::Error) -> i32 {
            match e {
                spider3p::Error::Io(_) => 4,
                e if e.is_numerical() => 3,
                _ => 2,
            }
        }
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Run { source, .. } => core(source),
            HarnessError::Core(e) => core(e),
            HarnessError::Io { .. } => 4,
            HarnessError::Diagnostics(_) => 3,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(HarnessError::Config("x".into()).exit_code(), 2);
        assert_eq!(HarnessError::Diagnostics(1).exit_code(), 3);
        let nonfinite = spider3p::Error::NonFinite {
            t: 1,
            k: 2,
            detail: String::new(),
        };
        assert_eq!(HarnessError::Run { run: 1, seed: 2, source: nonfinite }.exit_code(), 3);
        assert_eq!(HarnessError::Core(spider3p::Error::Dataset("bad".into())).exit_code(), 2);
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(HarnessError::Core(spider3p::Error::Io(io)).exit_code(), 4);
    }
}
