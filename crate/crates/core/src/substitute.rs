//! Binary substitutes: publishing built items to a cache, fetching them back
//! with verification, and challenging providers against each other.
//!
//! Cache layout:
//!
//! ```text
//! info/<digest_prefix>   sorted `key: value` lines (see SubstituteInfo)
//! carc/<digest_prefix>   canonical archive bytes of the item
//! ```

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::carc::{self, CarcError};
use crate::derivation::{BuildError, Builder};
use crate::hash::ContentHash;
use crate::store::{ItemKind, NewItem, Store, StoreError, StorePath, Verification};
use crate::transport::{Location, TransportError};

#[derive(Debug, Error)]
pub enum SubstituteError {
    #[error("{path} does not verify against its record; refusing to publish")]
    CorruptItem { path: StorePath },
    #[error("cannot write cache: {0}")]
    CacheWriteError(#[source] TransportError),
    #[error("no cache provides {0}")]
    NotFound(StorePath),
    #[error("every cache serving {path} sent corrupt data")]
    AllProvidersCorrupt { path: StorePath },
    #[error("malformed info for {path}: {detail}")]
    BadInfo { path: String, detail: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Carc(#[from] CarcError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubstituteInfo {
    pub store_path: StorePath,
    pub output_hash: ContentHash,
    pub archive_size: u64,
    pub references: Vec<StorePath>,
    pub deriver: Option<ContentHash>,
}

impl SubstituteInfo {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(d) = &self.deriver {
            out.push_str(&format!("deriver: {d}\n"));
        }
        out.push_str(&format!("outputhash: {}\n", self.output_hash));
        let refs: Vec<String> = self.references.iter().map(StorePath::name).collect();
        if refs.is_empty() {
            out.push_str("references:\n");
        } else {
            out.push_str(&format!("references: {}\n", refs.join(" ")));
        }
        out.push_str(&format!("size: {}\n", self.archive_size));
        out.push_str(&format!("storepath: {}\n", self.store_path));
        out
    }

    pub fn from_text(text: &str) -> Result<Self, SubstituteError> {
        let bad = |detail: &str| SubstituteError::BadInfo {
            path: text.lines().find_map(|l| l.strip_prefix("storepath: ")).unwrap_or("?").to_string(),
            detail: detail.to_string(),
        };
        let mut fields = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line.split_once(':').ok_or_else(|| bad("malformed line"))?;
            if !matches!(k, "deriver" | "outputhash" | "references" | "size" | "storepath") {
                return Err(bad(&format!("unknown key {k}")));
            }
            if fields.insert(k, v.trim_start()).is_some() {
                return Err(bad(&format!("duplicate key {k}")));
            }
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(&format!("missing {k}")));
        let mut references = Vec::new();
        for r in get("references")?.split_whitespace() {
            references.push(r.parse().map_err(|_| bad("bad reference"))?);
        }
        Ok(Self {
            store_path: get("storepath")?.parse().map_err(|_| bad("bad storepath"))?,
            output_hash: get("outputhash")?.parse().map_err(|_| bad("bad outputhash"))?,
            archive_size: get("size")?.parse().map_err(|_| bad("bad size"))?,
            references,
            deriver: fields
                .get("deriver")
                .map(|d| d.parse().map_err(|_| bad("bad deriver")))
                .transpose()?,
        })
    }
}

fn info_key(path: &StorePath) -> String {
    format!("info/{}", path.digest_prefix())
}

fn carc_key(path: &StorePath) -> String {
    format!("carc/{}", path.digest_prefix())
}

/// Writes an item's info and canonical archive to a local cache directory.
pub fn publish(store: &Store, item: &StorePath, cache: &Location) -> Result<SubstituteInfo, SubstituteError> {
    if cache.dir().is_none() {
        return Err(SubstituteError::CacheWriteError(TransportError::ReadOnly(cache.to_string())));
    }
    let record = store.require_record(item)?;
    if !store.verify_item(item).is_ok() {
        return Err(SubstituteError::CorruptItem { path: item.clone() });
    }
    let bytes = store.archive(item)?;
    if ContentHash::of(&bytes) != record.output_hash {
        return Err(SubstituteError::CorruptItem { path: item.clone() });
    }
    let info = SubstituteInfo {
        store_path: item.clone(),
        output_hash: record.output_hash,
        archive_size: bytes.len() as u64,
        references: record.references,
        deriver: record.deriver,
    };
    cache
        .put(&carc_key(item), &bytes)
        .map_err(SubstituteError::CacheWriteError)?;
    cache
        .put(&info_key(item), info.to_text().as_bytes())
        .map_err(SubstituteError::CacheWriteError)?;
    Ok(info)
}

/// Publishes every item in the closure of `item`.
pub fn publish_closure(store: &Store, item: &StorePath, cache: &Location) -> Result<Vec<SubstituteInfo>, SubstituteError> {
    store
        .closure(item)?
        .iter()
        .map(|p| publish(store, p, cache))
        .collect()
}

/// Reads a cache's info for `path`, if it has one.
pub fn query(cache: &Location, path: &StorePath) -> Result<Option<SubstituteInfo>, SubstituteError> {
    match cache.get(&info_key(path)) {
        Ok(Some(bytes)) => {
            let info = SubstituteInfo::from_text(&String::from_utf8_lossy(&bytes))?;
            if info.store_path != *path {
                return Ok(None);
            }
            Ok(Some(info))
        }
        Ok(None) => Ok(None),
        Err(e) => Err(SubstituteError::BadInfo {
            path: path.name(),
            detail: e.to_string(),
        }),
    }
}

/// The result of a successful substitution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fetched {
    pub path: StorePath,
    /// Caches skipped along the way, with the reason.
    pub warnings: Vec<String>,
}

/// Installs `path` from the first cache that serves it intact.
///
/// Downloaded archives are re-hashed before anything touches the store; a
/// cache whose bytes do not match its own info is skipped with a warning.
/// References are substituted first so the installed closure is complete.
pub fn fetch_substitute(path: &StorePath, caches: &[Location], store: &Store) -> Result<Fetched, SubstituteError> {
    let mut warnings = Vec::new();
    if store.contains(path) && store.verify_item(path).is_ok() {
        return Ok(Fetched {
            path: path.clone(),
            warnings,
        });
    }
    let mut held = false;
    for cache in caches {
        let info = match query(cache, path) {
            Ok(Some(info)) => info,
            Ok(None) => continue,
            Err(e) => {
                warnings.push(format!("cache {cache}: {e}"));
                continue;
            }
        };
        held = true;
        let bytes = match cache.get(&carc_key(path)) {
            Ok(Some(b)) => b,
            Ok(None) => {
                warnings.push(format!("cache {cache} has info but no archive for {path}"));
                continue;
            }
            Err(e) => {
                warnings.push(format!("cache {cache}: {e}"));
                continue;
            }
        };
        let actual = ContentHash::of(&bytes);
        if actual != info.output_hash {
            let w = format!(
                "cache {cache} served corrupt data for {path}: expected {}, got {actual}",
                info.output_hash
            );
            log::warn!("{w}");
            warnings.push(w);
            continue;
        }
        for r in &info.references {
            if r != path && !store.contains(r) {
                let sub = fetch_substitute(r, caches, store)?;
                warnings.extend(sub.warnings);
            }
        }
        let scratch = store.scratch_dir()?;
        let staged = scratch.path().join("item");
        carc::unpack(&bytes, &staged)?;
        let kind = if info.deriver.is_some() { ItemKind::Derived } else { ItemKind::Fixed };
        store.register_staged(
            &staged,
            path,
            NewItem {
                kind,
                references: info.references.clone(),
                deriver: info.deriver,
                source: None,
                description: None,
            },
        )?;
        return Ok(Fetched {
            path: path.clone(),
            warnings,
        });
    }
    if held {
        Err(SubstituteError::AllProvidersCorrupt { path: path.clone() })
    } else {
        Err(SubstituteError::NotFound(path.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Agree,
    /// Each distinct hash with the providers that reported it.
    Disagree(Vec<(ContentHash, Vec<String>)>),
    Unknown,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Agree => "agree",
            Verdict::Disagree(_) => "disagree",
            Verdict::Unknown => "unknown",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChallengeEntry {
    pub path: StorePath,
    /// Hash of the item in the local store, recomputed from disk.
    pub local: Option<ContentHash>,
    /// Hash of a fresh rebuild in a scratch store, when requested.
    pub rebuild: Option<ContentHash>,
    /// Each cache's advertised hash; `None` when it has no answer.
    pub providers: Vec<(String, Option<ContentHash>)>,
    pub notes: Vec<String>,
    pub verdict: Verdict,
}

impl ChallengeEntry {
    fn observations(&self) -> Vec<(String, ContentHash)> {
        let mut out = Vec::new();
        if let Some(h) = self.local {
            out.push(("local".to_string(), h));
        }
        if let Some(h) = self.rebuild {
            out.push(("rebuild".to_string(), h));
        }
        for (p, h) in &self.providers {
            if let Some(h) = h {
                out.push((p.clone(), *h));
            }
        }
        out
    }

    fn decide(&mut self) {
        let obs = self.observations();
        let mut by_hash: BTreeMap<ContentHash, Vec<String>> = BTreeMap::new();
        for (who, h) in &obs {
            by_hash.entry(*h).or_default().push(who.clone());
        }
        self.verdict = if obs.len() < 2 {
            Verdict::Unknown
        } else if by_hash.len() == 1 {
            Verdict::Agree
        } else {
            Verdict::Disagree(by_hash.into_iter().collect())
        };
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChallengeReport {
    pub entries: Vec<ChallengeEntry>,
}

impl ChallengeReport {
    pub fn has_disagreement(&self) -> bool {
        self.entries
            .iter()
            .any(|e| matches!(e.verdict, Verdict::Disagree(_)))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let show = |h: &Option<ContentHash>| h.map_or_else(|| "unavailable".to_string(), |h| h.to_hex());
        for e in &self.entries {
            out.push_str(&format!("{}\n", e.path));
            if e.local.is_some() {
                out.push_str(&format!("  local: {}\n", show(&e.local)));
            }
            if e.rebuild.is_some() {
                out.push_str(&format!("  rebuild: {}\n", show(&e.rebuild)));
            }
            for (p, h) in &e.providers {
                out.push_str(&format!("  {p}: {}\n", show(h)));
            }
            for n in &e.notes {
                out.push_str(&format!("  note: {n}\n"));
            }
            out.push_str(&format!("  verdict: {}\n", e.verdict));
            if let Verdict::Disagree(groups) = &e.verdict {
                for (h, who) in groups {
                    out.push_str(&format!("    {h} {}\n", who.join(" ")));
                }
            }
        }
        out
    }
}

/// Compares what each provider says about `paths`. Nothing is installed in
/// the main store; rebuilds happen in scratch stores.
pub fn challenge(
    paths: &[StorePath],
    caches: &[Location],
    store: &Store,
    rebuild: Option<&Builder<'_>>,
) -> ChallengeReport {
    let mut entries = Vec::new();
    for path in paths {
        let mut entry = ChallengeEntry {
            path: path.clone(),
            local: None,
            rebuild: None,
            providers: Vec::new(),
            notes: Vec::new(),
            verdict: Verdict::Unknown,
        };
        match store.verify_item(path) {
            Verification::Ok(h) => entry.local = Some(h),
            Verification::Mismatch { actual, expected } => {
                entry.local = actual;
                entry.notes.push(format!("local item does not match its record ({expected})"));
            }
            Verification::Missing => {}
        }
        for cache in caches {
            let hash = match query(cache, path) {
                Ok(info) => info.map(|i| {
                    // Prefer what the cache actually serves over what it claims.
                    match cache.get(&carc_key(path)) {
                        Ok(Some(bytes)) => ContentHash::of(&bytes),
                        _ => i.output_hash,
                    }
                }),
                Err(e) => {
                    entry.notes.push(format!("{cache}: {e}"));
                    None
                }
            };
            entry.providers.push((cache.to_string(), hash));
        }
        if let Some(builder) = rebuild {
            match store.derivation_for(path) {
                Ok(Some(drv)) => match builder.isolated_build(&drv) {
                    Ok(h) => entry.rebuild = Some(h),
                    Err(e) => entry.notes.push(format!("rebuild failed: {e}")),
                },
                Ok(None) => entry.notes.push("no derivation known for rebuild".into()),
                Err(e) => entry.notes.push(format!("derivation lookup failed: {e}")),
            }
        }
        entry.decide();
        entries.push(entry);
    }
    ChallengeReport { entries }
}

impl From<SubstituteError> for BuildError {
    fn from(e: SubstituteError) -> Self {
        BuildError::Substitute(Box::new(e))
    }
}
