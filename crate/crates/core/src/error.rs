use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Where in the coding order a decode failure happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Position {
    pub level: usize,
    pub step: usize,
    pub channel: usize,
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const CH: [char; 3] = ['R', 'G', 'B'];
        write!(
            f,
            "level {} step {} channel {}",
            self.level,
            self.step,
            CH.get(self.channel).copied().unwrap_or('?')
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("model hash mismatch: container expects {expected:016x}, weights are {found:016x}")]
    HashMismatch { expected: u64, found: u64 },
    #[error("corrupt stream at {position}: {detail}")]
    Corrupt { position: Position, detail: String },
    #[error("corrupt data: {0}")]
    Integrity(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training error: {0}")]
    Training(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format(_) => 2,
            Error::HashMismatch { .. } => 3,
            Error::Corrupt { .. } | Error::Integrity(_) => 4,
            Error::Config(_) | Error::Training(_) | Error::Io(_) => 1,
        }
    }
}
