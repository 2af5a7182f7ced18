use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("mesh has no faces")]
    EmptyMesh,
    #[error("{path}: not a {expected} file")]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("{path}: format version {found}, this build reads {supported}")]
    VersionMismatch { path: PathBuf, found: u32, supported: u32 },
    #[error("{path}: checksum mismatch or truncated file")]
    ChecksumMismatch { path: PathBuf },
    #[error("{path}: {msg}")]
    Malformed { path: PathBuf, msg: String },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("png: {0}")]
    Png(String),
    #[error("dataset missing: {0}")]
    DatasetMissing(String),
    #[error("checkpoint does not fit: {0}")]
    CheckpointMismatch(String),
    #[error("non-finite loss at step {step} ({detail}); state dumped to {dump}")]
    NonFiniteLoss { step: usize, detail: String, dump: PathBuf },
    #[error("supervision firewall: {0}")]
    Firewall(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Core(#[from] rigforge_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }
}
