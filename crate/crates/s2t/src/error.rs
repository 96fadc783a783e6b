use std::fmt;

/// Problems reading or writing one of the binary or text file formats.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a {expected} file (bad magic)")]
    BadMagic { expected: &'static str },
    #[error("unexpected end of file while reading {0}")]
    Truncated(&'static str),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Core(#[from] s2t_core::Error),
}

/// Bad flags or arguments; mapped to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// 1 for usage errors, 3 for numeric divergence, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(s2t_core::Error::Divergence { .. }) = cause.downcast_ref::<s2t_core::Error>() {
            return 3;
        }
        if let Some(FormatError::Core(s2t_core::Error::Divergence { .. })) =
            cause.downcast_ref::<FormatError>()
        {
            return 3;
        }
    }
    2
}
