//! Reading and writing the directory layouts shared by caches, archives and
//! channel repositories, either on the local filesystem or over HTTP GET.

use std::fmt;
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine;
use thiserror::Error;

use crate::carc::{CarcError, Tree};
use crate::fsutil;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("{location}: {detail}")]
    Unreachable { location: String, detail: String },
    #[error("{0} is read-only")]
    ReadOnly(String),
    #[error("unsupported URL {0:?}")]
    UnsupportedUrl(String),
    #[error(transparent)]
    Carc(#[from] CarcError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// A directory layout root: a local directory or an HTTP base URL.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Location {
    Dir(PathBuf),
    Http(String),
}

impl Location {
    /// `http(s)://` URLs are remote; `file://` URLs and bare paths are local.
    pub fn parse(s: &str) -> Self {
        if s.starts_with("http://") || s.starts_with("https://") {
            Location::Http(s.trim_end_matches('/').to_string())
        } else if let Some(p) = s.strip_prefix("file://") {
            Location::Dir(PathBuf::from(p))
        } else {
            Location::Dir(PathBuf::from(s))
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        match self {
            Location::Dir(p) => Some(p),
            Location::Http(_) => None,
        }
    }

    /// Fetches `rel`; `Ok(None)` when the location does not have it.
    pub fn get(&self, rel: &str) -> Result<Option<Vec<u8>>, TransportError> {
        match self {
            Location::Dir(root) => {
                if !root.is_dir() {
                    return Err(TransportError::Unreachable {
                        location: root.display().to_string(),
                        detail: "no such directory".into(),
                    });
                }
                let path = root.join(rel);
                match fs::read(&path) {
                    Ok(b) => Ok(Some(b)),
                    Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
                    Err(e) => Err(TransportError::Io { path, source: e }),
                }
            }
            Location::Http(base) => http_get(&format!("{base}/{rel}")),
        }
    }

    /// Writes `rel` atomically. Only local directories are writable.
    pub fn put(&self, rel: &str, data: &[u8]) -> Result<(), TransportError> {
        match self {
            Location::Dir(root) => {
                let path = root.join(rel);
                fsutil::write_atomic(&path, data).map_err(|source| TransportError::Io { path, source })
            }
            Location::Http(base) => Err(TransportError::ReadOnly(base.clone())),
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Dir(p) => write!(f, "{}", p.display()),
            Location::Http(u) => f.write_str(u),
        }
    }
}

fn http_get(url: &str) -> Result<Option<Vec<u8>>, TransportError> {
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_secs(30))
        .build();
    match agent.get(url).call() {
        Ok(resp) => {
            let mut body = Vec::new();
            resp.into_reader()
                .read_to_end(&mut body)
                .map_err(|e| TransportError::Unreachable {
                    location: url.to_string(),
                    detail: e.to_string(),
                })?;
            Ok(Some(body))
        }
        Err(ureq::Error::Status(404 | 410, _)) => Ok(None),
        Err(e) => Err(TransportError::Unreachable {
            location: url.to_string(),
            detail: e.to_string(),
        }),
    }
}

/// Fetches source content from its upstream URL.
///
/// * `file://PATH`: the file tree at PATH
/// * `http(s)://…`: the response body as a single file
/// * `data:;base64,…`: the decoded bytes as a single file
///
/// Returns `Ok(None)` when the upstream no longer has the content.
pub fn fetch_upstream(url: &str) -> Result<Option<Tree>, TransportError> {
    if let Some(path) = url.strip_prefix("file://") {
        let path = Path::new(path);
        if fs::symlink_metadata(path).is_err() {
            return Ok(None);
        }
        return Ok(Some(Tree::from_path(path)?));
    }
    if url.starts_with("http://") || url.starts_with("https://") {
        return Ok(http_get(url)?.map(Tree::file));
    }
    if let Some(payload) = url.strip_prefix("data:") {
        let (meta, data) = payload
            .split_once(',')
            .ok_or_else(|| TransportError::UnsupportedUrl(url.to_string()))?;
        if !meta.ends_with(";base64") {
            return Err(TransportError::UnsupportedUrl(url.to_string()));
        }
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(data)
            .map_err(|_| TransportError::UnsupportedUrl(url.to_string()))?;
        return Ok(Some(Tree::file(bytes)));
    }
    Err(TransportError::UnsupportedUrl(url.to_string()))
}

/// A `data:` URL carrying `bytes`.
pub fn data_url(bytes: &[u8]) -> String {
    format!(
        "data:;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    )
}
