use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A failure inside the numerical core, tagged with the stage it came from.
    #[error("[{module}] {source}")]
    Core {
        module: &'static str,
        #[source]
        source: fmuda_core::Error,
    },

    #[error("[io] {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("[{module}] {}: byte {offset}: {reason}", path.display())]
    Format { module: &'static str, path: PathBuf, offset: u64, reason: String },

    #[error("[config] {}: {message}", path.display())]
    Config { path: PathBuf, message: String },

    #[error("[{module}] {message}")]
    Invalid { module: &'static str, message: String },
}

impl Error {
    pub fn module(&self) -> &'static str {
        match self {
            Error::Core { module, .. } | Error::Format { module, .. } | Error::Invalid { module, .. } => module,
            Error::Io { .. } => "io",
            Error::Config { .. } => "config",
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn invalid(module: &'static str, message: impl Into<String>) -> Self {
        Error::Invalid { module, message: message.into() }
    }
}

/// Attaches the originating module to core errors.
pub trait Tag<T> {
    fn tag(self, module: &'static str) -> Result<T>;
}

impl<T> Tag<T> for fmuda_core::Result<T> {
    fn tag(self, module: &'static str) -> Result<T> {
        self.map_err(|source| Error::Core { module, source })
    }
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
