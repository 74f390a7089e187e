//! Crate-wide error type.

use std::fmt;
use std::io;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// I/O failure, with the path that was being touched when it happened.
    Io { path: PathBuf, source: io::Error },
    /// Malformed or unsupported WAV input.
    Wav(String),
    /// Malformed feature or checkpoint file.
    Format(String),
    /// Invalid DSP arguments (window sizes, frequency ranges, ...).
    Signal(String),
    /// Recipe configuration problems. Maps to exit code 2 in the CLI.
    Config(String),
    /// Corpus layout problems (missing WAVs, duplicate ids, bad splits).
    Corpus(String),
    /// Training aborted (NaN loss, non-finite gradient, missing features).
    Train(String),
    /// Evaluation failures (missing references, scorer protocol errors).
    Eval(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Exit code the CLI should terminate with for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "{}: {}", path.display(), source),
            Error::Wav(msg) => write!(f, "wav: {msg}"),
            Error::Format(msg) => write!(f, "file format: {msg}"),
            Error::Signal(msg) => write!(f, "signal: {msg}"),
            Error::Config(msg) => write!(f, "config: {msg}"),
            Error::Corpus(msg) => write!(f, "corpus: {msg}"),
            Error::Train(msg) => write!(f, "training: {msg}"),
            Error::Eval(msg) => write!(f, "evaluation: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
