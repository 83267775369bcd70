//! Content-addressed source archive and the fetch path that falls back to
//! it when an upstream URL stops serving the expected content.
//!
//! Archive layout:
//!
//! ```text
//! carc/<64-hex>      canonical archive bytes, named by their SHA-256
//! origins/<64-hex>   known origin URLs, one per line, sorted, deduplicated
//! ```

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::carc::{CarcError, Tree};
use crate::derivation::SourceRef;
use crate::fsutil;
use crate::hash::ContentHash;
use crate::store::{Content, NewItem, Store, StoreError, StorePath};
use crate::transport::{self, Location, TransportError};

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("cannot write to archive: {0}")]
    ArchiveWriteError(#[source] TransportError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("archived content for {expected} hashes to {actual}")]
    Corrupt {
        expected: ContentHash,
        actual: ContentHash,
    },
    #[error(transparent)]
    Carc(#[from] CarcError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leg {
    Upstream,
    Archive,
}

impl fmt::Display for Leg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Leg::Upstream => "upstream",
            Leg::Archive => "archive",
        })
    }
}

/// Why one leg of a source fetch failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LegFailure {
    HashMismatch {
        leg: Leg,
        expected: ContentHash,
        actual: ContentHash,
    },
    Unavailable {
        leg: Leg,
        detail: String,
    },
}

impl fmt::Display for LegFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LegFailure::HashMismatch { leg, expected, actual } => {
                write!(f, "{leg}: hash mismatch, expected {expected}, got {actual}")
            }
            LegFailure::Unavailable { leg, detail } => write!(f, "{leg}: {detail}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("{leg} served {actual} for source {label}, expected {expected}")]
    HashMismatch {
        label: String,
        leg: Leg,
        expected: ContentHash,
        actual: ContentHash,
    },
    #[error("source {label} unavailable: {}", legs.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    SourceUnavailable { label: String, legs: Vec<LegFailure> },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone)]
pub struct Archive {
    location: Location,
    auto_ingest: bool,
}

impl Archive {
    pub fn new(location: Location) -> Self {
        Self {
            location,
            auto_ingest: true,
        }
    }

    /// Opens (creating if needed) a local archive directory.
    pub fn open_dir(path: impl Into<std::path::PathBuf>) -> Result<Self, ArchiveError> {
        let path = path.into();
        for sub in ["carc", "origins"] {
            let dir = path.join(sub);
            std::fs::create_dir_all(&dir).map_err(|source| {
                ArchiveError::ArchiveWriteError(TransportError::Io { path: dir, source })
            })?;
        }
        Ok(Self::new(Location::Dir(path)))
    }

    /// Disables recording upstream fetches into this archive.
    pub fn without_auto_ingest(mut self) -> Self {
        self.auto_ingest = false;
        self
    }

    pub fn location(&self) -> &Location {
        &self.location
    }

    /// Stores the canonical archive of `tree` under its hash and records
    /// `origin`. Idempotent.
    pub fn ingest(&self, tree: &Tree, origin: Option<&str>) -> Result<ContentHash, ArchiveError> {
        let bytes = tree.encode();
        let hash = ContentHash::of(&bytes);
        let dir = self
            .location
            .dir()
            .ok_or_else(|| ArchiveError::ArchiveWriteError(TransportError::ReadOnly(self.location.to_string())))?;
        let lock_path = dir.join("locks").join(format!("{hash}.lock"));
        let _guard = fsutil::lock_file(&lock_path).map_err(|source| {
            ArchiveError::ArchiveWriteError(TransportError::Io { path: lock_path.clone(), source })
        })?;
        let rel = format!("carc/{hash}");
        let present = matches!(self.location.get(&rel)?, Some(b) if ContentHash::of(&b) == hash);
        if !present {
            self.location.put(&rel, &bytes).map_err(ArchiveError::ArchiveWriteError)?;
        }
        let mut origins: BTreeSet<String> = self.origins(&hash)?.into_iter().collect();
        let before = origins.len();
        if let Some(o) = origin {
            origins.insert(o.to_string());
        }
        if origins.len() != before || !present {
            let text: String = origins.iter().map(|o| format!("{o}\n")).collect();
            self.location
                .put(&format!("origins/{hash}"), text.as_bytes())
                .map_err(ArchiveError::ArchiveWriteError)?;
        }
        Ok(hash)
    }

    /// Verified canonical archive bytes for `hash`, if archived.
    pub fn lookup(&self, hash: &ContentHash) -> Result<Option<Vec<u8>>, ArchiveError> {
        match self.location.get(&format!("carc/{hash}"))? {
            None => Ok(None),
            Some(bytes) => {
                let actual = ContentHash::of(&bytes);
                if actual != *hash {
                    return Err(ArchiveError::Corrupt {
                        expected: *hash,
                        actual,
                    });
                }
                Ok(Some(bytes))
            }
        }
    }

    pub fn origins(&self, hash: &ContentHash) -> Result<Vec<String>, ArchiveError> {
        Ok(match self.location.get(&format!("origins/{hash}"))? {
            None => Vec::new(),
            Some(b) => String::from_utf8_lossy(&b)
                .lines()
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
        })
    }
}

/// Makes the content named by `source` available in `store`.
///
/// An item already present and intact is reused as is. Otherwise the
/// upstream URL is tried first, then the archive by content hash; whatever
/// either returns must hash to `source.expected_hash`. Upstream successes
/// are ingested into the archive.
pub fn fetch_source(
    source: &SourceRef,
    store: &Store,
    archive: Option<&Archive>,
) -> Result<StorePath, FetchError> {
    let path = source.store_path()?;
    if store.contains(&path) && store.verify_item(&path).is_ok() {
        return Ok(path);
    }
    let expected = source.expected_hash;
    let mut legs = Vec::new();

    if source.url.starts_with("archive://") {
        legs.push(LegFailure::Unavailable {
            leg: Leg::Upstream,
            detail: "archive-only reference".into(),
        });
    } else {
        match transport::fetch_upstream(&source.url) {
            Ok(Some(tree)) => {
                let actual = tree.hash();
                if actual == expected {
                    let path = register(store, &tree, source)?;
                    if let Some(archive) = archive.filter(|a| a.auto_ingest && a.location.dir().is_some()) {
                        if let Err(e) = archive.ingest(&tree, Some(&source.url)) {
                            log::warn!("could not ingest {} into the archive: {e}", source.label);
                        }
                    }
                    return Ok(path);
                }
                legs.push(LegFailure::HashMismatch {
                    leg: Leg::Upstream,
                    expected,
                    actual,
                });
            }
            Ok(None) => legs.push(LegFailure::Unavailable {
                leg: Leg::Upstream,
                detail: format!("{} is gone", source.url),
            }),
            Err(e) => legs.push(LegFailure::Unavailable {
                leg: Leg::Upstream,
                detail: e.to_string(),
            }),
        }
    }

    match archive {
        None => {
            if let [LegFailure::HashMismatch { leg, expected, actual }] = legs.as_slice() {
                return Err(FetchError::HashMismatch {
                    label: source.label.clone(),
                    leg: *leg,
                    expected: *expected,
                    actual: *actual,
                });
            }
        }
        Some(archive) => match archive.lookup(&expected) {
            Ok(Some(bytes)) => match Tree::decode(&bytes) {
                Ok(tree) => {
                    log::info!("fetched {} from the archive at {}", source.label, archive.location);
                    return register(store, &tree, source);
                }
                Err(e) => legs.push(LegFailure::Unavailable {
                    leg: Leg::Archive,
                    detail: e.to_string(),
                }),
            },
            Ok(None) => legs.push(LegFailure::Unavailable {
                leg: Leg::Archive,
                detail: format!("{expected} not archived"),
            }),
            Err(ArchiveError::Corrupt { expected, actual }) => legs.push(LegFailure::HashMismatch {
                leg: Leg::Archive,
                expected,
                actual,
            }),
            Err(e) => legs.push(LegFailure::Unavailable {
                leg: Leg::Archive,
                detail: e.to_string(),
            }),
        },
    }
    Err(FetchError::SourceUnavailable {
        label: source.label.clone(),
        legs,
    })
}

fn register(store: &Store, tree: &Tree, source: &SourceRef) -> Result<StorePath, FetchError> {
    let meta = NewItem {
        source: Some(source.url.clone()),
        ..NewItem::fixed()
    };
    Ok(store.add_content(Content::Tree(tree), &source.label, meta)?.path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    struct Env {
        _tmp: tempfile::TempDir,
        store: Store,
        archive: Archive,
        upstream: std::path::PathBuf,
    }

    fn env() -> Env {
        let tmp = tempfile::tempdir().unwrap();
        let store = Store::open(tmp.path().join("store")).unwrap();
        let archive = Archive::open_dir(tmp.path().join("archive")).unwrap();
        let upstream = tmp.path().join("upstream");
        fs::create_dir(&upstream).unwrap();
        Env {
            _tmp: tmp,
            store,
            archive,
            upstream,
        }
    }

    fn source_for(e: &Env, name: &str, contents: &str) -> SourceRef {
        let file = e.upstream.join(name);
        fs::write(&file, contents).unwrap();
        SourceRef {
            url: format!("file://{}", file.display()),
            expected_hash: Tree::file(contents).hash(),
            label: name.replace('.', "-"),
        }
    }

    #[test]
    fn ingest_is_idempotent_and_merges_origins() {
        let e = env();
        let t = Tree::file("src");
        let h1 = e.archive.ingest(&t, Some("http://b/x")).unwrap();
        let h2 = e.archive.ingest(&t, Some("http://a/x")).unwrap();
        let h3 = e.archive.ingest(&t, Some("http://a/x")).unwrap();
        assert!(h1 == h2 && h2 == h3);
        assert_eq!(h1, t.hash());
        assert_eq!(e.archive.origins(&h1).unwrap(), vec!["http://a/x", "http://b/x"]);
        let stored = fs::read_dir(e.archive.location().dir().unwrap().join("carc")).unwrap().count();
        assert_eq!(stored, 1);
        assert_eq!(e.archive.lookup(&h1).unwrap().unwrap(), t.encode());
    }

    #[test]
    fn upstream_first_then_archive() {
        let e = env();
        let src = source_for(&e, "hello.c", "int main;");
        let p1 = fetch_source(&src, &e.store, Some(&e.archive)).unwrap();
        assert!(e.archive.lookup(&src.expected_hash).unwrap().is_some(), "auto-ingested");
        assert_eq!(e.store.require_record(&p1).unwrap().source.as_deref(), Some(src.url.as_str()));

        fs::remove_file(e.upstream.join("hello.c")).unwrap();
        let fresh = Store::open(e._tmp.path().join("fresh")).unwrap();
        let p2 = fetch_source(&src, &fresh, Some(&e.archive)).unwrap();
        assert_eq!(p1, p2);
        assert!(fresh.verify_item(&p2).is_ok());
    }

    #[test]
    fn altered_upstream_and_empty_archive() {
        let e = env();
        let mut src = source_for(&e, "a.txt", "good");
        src.expected_hash = Tree::file("expected").hash();
        match fetch_source(&src, &e.store, Some(&e.archive)) {
            Err(FetchError::SourceUnavailable { legs, .. }) => {
                assert!(matches!(legs[0], LegFailure::HashMismatch { leg: Leg::Upstream, .. }));
                assert!(matches!(legs[1], LegFailure::Unavailable { leg: Leg::Archive, .. }));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            fetch_source(&src, &e.store, None),
            Err(FetchError::HashMismatch { leg: Leg::Upstream, .. })
        ));
    }

    #[test]
    fn corrupt_archive_entry_is_rejected() {
        let e = env();
        let t = Tree::file("payload");
        let h = e.archive.ingest(&t, None).unwrap();
        let file = e.archive.location().dir().unwrap().join("carc").join(h.to_hex());
        let mut bytes = fs::read(&file).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x20;
        fs::write(&file, bytes).unwrap();
        let src = SourceRef {
            url: "archive://payload".into(),
            expected_hash: h,
            label: "payload".into(),
        };
        match fetch_source(&src, &e.store, Some(&e.archive)) {
            Err(FetchError::SourceUnavailable { legs, .. }) => {
                assert!(matches!(legs[1], LegFailure::HashMismatch { leg: Leg::Archive, .. }))
            }
            other => panic!("{other:?}"),
        }
    }
}
