//! The content-addressed store.
//!
//! Layout under the store root:
//!
//! ```text
//! items/<digest_prefix>-<label>   item trees (file, directory or symlink)
//! db/<digest_prefix>-<label>      one record per item, sorted `key: value` lines
//! drv/<hash>.drv                  canonical derivation texts
//! locks/                          per-item advisory lock files
//! tmp/                            build scratch space and staging
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::carc::{self, CarcError, Tree};
use crate::fsutil::{self, LockGuard};
use crate::hash::{ContentHash, DIGEST_PREFIX_LEN};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid store path label {0:?}")]
    InvalidLabel(String),
    #[error("invalid store path name {0:?}")]
    InvalidStorePath(String),
    #[error("store corruption at {path}: recorded {expected}, found {actual}")]
    StoreCorruption {
        path: StorePath,
        expected: ContentHash,
        actual: String,
    },
    #[error("{path} is already registered with hash {existing}, refusing {new}")]
    HashConflict {
        path: StorePath,
        existing: ContentHash,
        new: ContentHash,
    },
    #[error("{from} references {missing}, which is not in the store")]
    DanglingReference { from: StorePath, missing: StorePath },
    #[error("{0} is not registered in the store")]
    NotRegistered(StorePath),
    #[error("reference cycle detected among {0:?}")]
    ReferenceCycle(Vec<StorePath>),
    #[error("invalid record for {path}: {detail}")]
    InvalidRecord { path: String, detail: String },
    #[error(transparent)]
    Carc(#[from] CarcError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn validate_label(label: &str) -> Result<(), StoreError> {
    let ok = !label.is_empty()
        && label
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'+' | b'-'))
        && label != "."
        && label != "..";
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidLabel(label.to_string()))
    }
}

/// The name of a store item, `<digest_prefix>-<label>`.
///
/// Store paths are independent of the store root: the same item has the
/// same `StorePath` in every store, and [`Store::item_path`] locates it on
/// disk.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StorePath {
    // Field order matters for the derived Ord: it must match byte order
    // of the rendered name, which holds because the prefix is fixed-width.
    digest_prefix: String,
    label: String,
}

impl StorePath {
    pub fn new(hash: &ContentHash, label: &str) -> Result<Self, StoreError> {
        validate_label(label)?;
        Ok(Self {
            digest_prefix: hash.digest_prefix(),
            label: label.to_string(),
        })
    }

    pub fn digest_prefix(&self) -> &str {
        &self.digest_prefix
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn name(&self) -> String {
        format!("{}-{}", self.digest_prefix, self.label)
    }

    /// Whether `hash` could have produced this path's prefix.
    pub fn matches_hash(&self, hash: &ContentHash) -> bool {
        hash.to_hex().starts_with(&self.digest_prefix)
    }
}

impl FromStr for StorePath {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || StoreError::InvalidStorePath(s.to_string());
        if s.len() < DIGEST_PREFIX_LEN + 2 || !s.is_char_boundary(DIGEST_PREFIX_LEN) {
            return Err(bad());
        }
        let (prefix, rest) = s.split_at(DIGEST_PREFIX_LEN);
        if !prefix.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(bad());
        }
        let label = rest.strip_prefix('-').ok_or_else(bad)?;
        validate_label(label).map_err(|_| bad())?;
        Ok(Self {
            digest_prefix: prefix.to_string(),
            label: label.to_string(),
        })
    }
}

impl fmt::Display for StorePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.digest_prefix, self.label)
    }
}

impl fmt::Debug for StorePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StorePath({self})")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ItemKind {
    /// Output of a derivation.
    Derived,
    /// Content-addressed item such as a fetched source.
    Fixed,
    /// Explicitly registered trust root.
    Seed,
}

impl ItemKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ItemKind::Derived => "derived",
            ItemKind::Fixed => "fixed",
            ItemKind::Seed => "seed",
        }
    }
}

impl FromStr for ItemKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "derived" => Ok(ItemKind::Derived),
            "fixed" => Ok(ItemKind::Fixed),
            "seed" => Ok(ItemKind::Seed),
            other => Err(format!("unknown item kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreItemRecord {
    pub path: StorePath,
    pub output_hash: ContentHash,
    /// Byte length of the item's canonical archive.
    pub size: u64,
    /// Sorted, deduplicated, never containing `path` itself.
    pub references: Vec<StorePath>,
    pub kind: ItemKind,
    pub deriver: Option<ContentHash>,
    /// Origin URL of a fixed item fetched and verified against a source reference.
    pub source: Option<String>,
    pub description: Option<String>,
}

impl StoreItemRecord {
    pub fn to_text(&self) -> String {
        let mut fields = BTreeMap::new();
        if let Some(d) = &self.deriver {
            fields.insert("deriver", d.to_hex());
        }
        if let Some(d) = &self.description {
            fields.insert("description", d.clone());
        }
        fields.insert("kind", self.kind.as_str().to_string());
        fields.insert("outputhash", self.output_hash.to_hex());
        fields.insert("path", self.path.name());
        fields.insert(
            "references",
            self.references
                .iter()
                .map(StorePath::name)
                .collect::<Vec<_>>()
                .join(" "),
        );
        fields.insert("size", self.size.to_string());
        if let Some(s) = &self.source {
            fields.insert("source", s.clone());
        }
        fields
            .into_iter()
            .map(|(k, v)| if v.is_empty() { format!("{k}:\n") } else { format!("{k}: {v}\n") })
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self, StoreError> {
        let bad = |detail: String| StoreError::InvalidRecord {
            path: text.lines().find_map(|l| l.strip_prefix("path: ")).unwrap_or("?").to_string(),
            detail,
        };
        let mut fields = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| bad(format!("malformed line {line:?}")))?;
            let v = v.strip_prefix(' ').unwrap_or(v);
            if fields.insert(k, v).is_some() {
                return Err(bad(format!("duplicate key {k}")));
            }
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("missing key {k}")));
        let hash = |v: &str| v.parse::<ContentHash>().map_err(|e| bad(e.to_string()));
        let mut references = Vec::new();
        for r in get("references")?.split_whitespace() {
            references.push(r.parse::<StorePath>().map_err(|e| bad(e.to_string()))?);
        }
        Ok(Self {
            path: get("path")?.parse().map_err(|e: StoreError| bad(e.to_string()))?,
            output_hash: hash(get("outputhash")?)?,
            size: get("size")?.parse().map_err(|_| bad("bad size".into()))?,
            references,
            kind: get("kind")?.parse().map_err(bad)?,
            deriver: fields.get("deriver").map(|v| hash(v)).transpose()?,
            source: fields.get("source").map(|s| s.to_string()),
            description: fields.get("description").map(|s| s.to_string()),
        })
    }
}

/// Outcome of [`Store::verify_item`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verification {
    Ok(ContentHash),
    /// `actual` is `None` when the on-disk tree could not be read at all.
    Mismatch {
        expected: ContentHash,
        actual: Option<ContentHash>,
    },
    Missing,
}

impl Verification {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verification::Ok(_))
    }
}

/// Content accepted by [`Store::add_fixed`].
#[derive(Debug, Clone, Copy)]
pub enum Content<'a> {
    /// A single regular, non-executable file.
    Bytes(&'a [u8]),
    Tree(&'a Tree),
    /// An existing file tree on disk, copied into the store.
    Path(&'a Path),
}

impl Content<'_> {
    fn to_tree(self) -> Result<Tree, StoreError> {
        Ok(match self {
            Content::Bytes(b) => Tree::file(b),
            Content::Tree(t) => t.clone(),
            Content::Path(p) => Tree::from_path(p)?,
        })
    }
}

/// Metadata for a new registration.
#[derive(Debug, Clone)]
pub struct NewItem {
    pub kind: ItemKind,
    pub references: Vec<StorePath>,
    pub deriver: Option<ContentHash>,
    pub source: Option<String>,
    pub description: Option<String>,
}

impl NewItem {
    pub fn fixed() -> Self {
        Self {
            kind: ItemKind::Fixed,
            references: Vec::new(),
            deriver: None,
            source: None,
            description: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    /// Opens the store at `root`, creating its layout if needed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for sub in ["items", "db", "drv", "locks", "tmp"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let root = root.canonicalize().map_err(io_err(&root))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn items_dir(&self) -> PathBuf {
        self.root.join("items")
    }

    pub fn item_path(&self, path: &StorePath) -> PathBuf {
        self.root.join("items").join(path.name())
    }

    fn record_path(&self, path: &StorePath) -> PathBuf {
        self.root.join("db").join(path.name())
    }

    pub(crate) fn drv_dir(&self) -> PathBuf {
        self.root.join("drv")
    }

    /// A fresh scratch directory inside the store, removed on drop.
    pub fn scratch_dir(&self) -> Result<tempfile::TempDir, StoreError> {
        let tmp = self.root.join("tmp");
        tempfile::Builder::new()
            .prefix("scratch-")
            .tempdir_in(&tmp)
            .map_err(io_err(&tmp))
    }

    pub fn lock(&self, name: &str) -> Result<LockGuard, StoreError> {
        let path = self.root.join("locks").join(format!("{name}.lock"));
        fsutil::lock_file(&path).map_err(io_err(&path))
    }

    pub fn contains(&self, path: &StorePath) -> bool {
        self.record_path(path).is_file()
    }

    pub fn record(&self, path: &StorePath) -> Result<Option<StoreItemRecord>, StoreError> {
        let file = self.record_path(path);
        match fs::read_to_string(&file) {
            Ok(text) => StoreItemRecord::from_text(&text).map(Some),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(StoreError::Io { path: file, source: e }),
        }
    }

    pub fn require_record(&self, path: &StorePath) -> Result<StoreItemRecord, StoreError> {
        self.record(path)?
            .ok_or_else(|| StoreError::NotRegistered(path.clone()))
    }

    /// All registered items, sorted by name.
    pub fn list(&self) -> Result<Vec<StorePath>, StoreError> {
        let db = self.root.join("db");
        let mut out = Vec::new();
        for entry in fs::read_dir(&db).map_err(io_err(&db))? {
            let entry = entry.map_err(io_err(&db))?;
            if let Some(name) = entry.file_name().to_str() {
                if let Ok(p) = name.parse::<StorePath>() {
                    out.push(p);
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Adds content under the digest of its canonical archive.
    pub fn add_fixed(&self, content: Content<'_>, label: &str) -> Result<StorePath, StoreError> {
        self.add_content(content, label, NewItem::fixed())
            .map(|r| r.path)
    }

    pub(crate) fn add_content(
        &self,
        content: Content<'_>,
        label: &str,
        meta: NewItem,
    ) -> Result<StoreItemRecord, StoreError> {
        validate_label(label)?;
        let tree = content.to_tree()?;
        let hash = tree.hash();
        let path = StorePath::new(&hash, label)?;
        if let Some(existing) = self.record(&path)? {
            if existing.output_hash == hash && self.verify_item(&path).is_ok() {
                return Ok(existing);
            }
        }
        let scratch = self.scratch_dir()?;
        let staged = scratch.path().join("item");
        tree.materialize(&staged)?;
        self.register_staged(&staged, &path, meta)
    }

    /// Moves a staged tree into the store and writes its record.
    ///
    /// Registration holds the item's lock. If the item is already present,
    /// the staged copy must hash identically and is discarded.
    pub fn register_staged(
        &self,
        staged: &Path,
        path: &StorePath,
        meta: NewItem,
    ) -> Result<StoreItemRecord, StoreError> {
        let (hash, size) = carc::hash_path(staged)?;
        let _guard = self.lock(&path.name())?;
        if let Some(existing) = self.record(path)? {
            match self.verify_item(path) {
                Verification::Ok(_) => {}
                Verification::Mismatch { expected, actual } => {
                    return Err(StoreError::StoreCorruption {
                        path: path.clone(),
                        expected,
                        actual: actual.map_or_else(|| "unreadable item".into(), |h| h.to_hex()),
                    })
                }
                Verification::Missing => unreachable!("record exists"),
            }
            if existing.output_hash != hash {
                return Err(StoreError::HashConflict {
                    path: path.clone(),
                    existing: existing.output_hash,
                    new: hash,
                });
            }
            fsutil::remove_any(staged).map_err(io_err(staged))?;
            return Ok(existing);
        }
        let dest = self.item_path(path);
        // Leftover from an interrupted registration.
        fsutil::remove_any(&dest).map_err(io_err(&dest))?;
        fs::rename(staged, &dest).map_err(io_err(&dest))?;
        let mut references: Vec<StorePath> = meta
            .references
            .into_iter()
            .filter(|r| r != path)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        references.sort();
        let record = StoreItemRecord {
            path: path.clone(),
            output_hash: hash,
            size,
            references,
            kind: meta.kind,
            deriver: match meta.kind {
                ItemKind::Derived => meta.deriver,
                _ => None,
            },
            source: meta.source,
            description: meta.description,
        };
        let file = self.record_path(path);
        fsutil::write_atomic(&file, record.to_text().as_bytes()).map_err(io_err(&file))?;
        log::debug!("registered {path} ({})", record.kind.as_str());
        Ok(record)
    }

    /// Rewrites an existing record's metadata. The item tree is untouched.
    pub(crate) fn update_record(&self, record: &StoreItemRecord) -> Result<(), StoreError> {
        let _guard = self.lock(&record.path.name())?;
        let file = self.record_path(&record.path);
        fsutil::write_atomic(&file, record.to_text().as_bytes()).map_err(io_err(&file))
    }

    /// Recomputes the canonical archive hash of an item and compares it to
    /// its record. Never modifies the store.
    pub fn verify_item(&self, path: &StorePath) -> Verification {
        let record = match self.record(path) {
            Ok(Some(r)) => r,
            _ => return Verification::Missing,
        };
        match carc::hash_path(&self.item_path(path)) {
            Ok((actual, _)) if actual == record.output_hash => Verification::Ok(actual),
            Ok((actual, _)) => Verification::Mismatch {
                expected: record.output_hash,
                actual: Some(actual),
            },
            Err(_) => Verification::Mismatch {
                expected: record.output_hash,
                actual: None,
            },
        }
    }

    /// Canonical archive bytes of a registered item.
    pub fn archive(&self, path: &StorePath) -> Result<Vec<u8>, StoreError> {
        Ok(carc::archive_path(&self.item_path(path))?)
    }

    /// The reference closure of `path`, dependencies before dependents.
    pub fn closure(&self, path: &StorePath) -> Result<Vec<StorePath>, StoreError> {
        self.closure_of(std::slice::from_ref(path))
    }

    /// The union of the closures of `roots`.
    ///
    /// Ordering is topological with every item after all items it
    /// references; ties are broken by name, so the result only depends on
    /// the reference graph.
    pub fn closure_of(&self, roots: &[StorePath]) -> Result<Vec<StorePath>, StoreError> {
        let mut refs: BTreeMap<StorePath, Vec<StorePath>> = BTreeMap::new();
        let mut stack: Vec<StorePath> = roots.to_vec();
        for r in roots {
            self.require_record(r)?;
        }
        while let Some(p) = stack.pop() {
            if refs.contains_key(&p) {
                continue;
            }
            let record = self.require_record(&p)?;
            for r in &record.references {
                if !self.contains(r) {
                    return Err(StoreError::DanglingReference {
                        from: p.clone(),
                        missing: r.clone(),
                    });
                }
                stack.push(r.clone());
            }
            refs.insert(p, record.references);
        }

        let mut pending: BTreeMap<&StorePath, usize> =
            refs.iter().map(|(p, rs)| (p, rs.len())).collect();
        let mut referrers: BTreeMap<&StorePath, Vec<&StorePath>> = BTreeMap::new();
        for (p, rs) in &refs {
            for r in rs {
                referrers.entry(r).or_default().push(p);
            }
        }
        let mut ready: BTreeSet<&StorePath> =
            pending.iter().filter(|(_, &n)| n == 0).map(|(p, _)| *p).collect();
        let mut out = Vec::with_capacity(refs.len());
        while let Some(p) = ready.pop_first() {
            out.push(p.clone());
            for q in referrers.get(p).into_iter().flatten() {
                let n = pending.get_mut(q).expect("referrer is in the closure");
                *n -= 1;
                if *n == 0 {
                    ready.insert(q);
                }
            }
        }
        if out.len() != refs.len() {
            let stuck = pending
                .into_iter()
                .filter(|(_, n)| *n > 0)
                .map(|(p, _)| p.clone())
                .collect();
            return Err(StoreError::ReferenceCycle(stuck));
        }
        Ok(out)
    }

    /// Copies a verified item and its record from another store.
    pub fn import_from(&self, other: &Store, path: &StorePath) -> Result<StoreItemRecord, StoreError> {
        if let Some(existing) = self.record(path)? {
            if self.verify_item(path).is_ok() {
                return Ok(existing);
            }
        }
        let record = other.require_record(path)?;
        if let Verification::Mismatch { expected, actual } = other.verify_item(path) {
            return Err(StoreError::StoreCorruption {
                path: path.clone(),
                expected,
                actual: actual.map_or_else(|| "unreadable item".into(), |h| h.to_hex()),
            });
        }
        let scratch = self.scratch_dir()?;
        let staged = scratch.path().join("item");
        Tree::from_path(&other.item_path(path))?.materialize(&staged)?;
        self.register_staged(
            &staged,
            path,
            NewItem {
                kind: record.kind,
                references: record.references,
                deriver: record.deriver,
                source: record.source,
                description: record.description,
            },
        )
    }

    /// Imports the whole closure of `roots` from another store.
    pub fn import_closure(&self, other: &Store, roots: &[StorePath]) -> Result<(), StoreError> {
        for p in other.closure_of(roots)? {
            self.import_from(other, &p)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (tempfile::TempDir, Store) {
        let tmp = tempfile::tempdir().unwrap();
        let s = Store::open(tmp.path().join("store")).unwrap();
        (tmp, s)
    }

    #[test]
    fn store_path_parse_and_order() {
        let h = ContentHash::of(b"x");
        let p = StorePath::new(&h, "hello-1.0").unwrap();
        assert_eq!(p.name().len(), 32 + 1 + 9);
        assert_eq!(p.name().parse::<StorePath>().unwrap(), p);
        assert!(p.matches_hash(&h));
        for bad in ["", "abc-x", &format!("{}x", h.digest_prefix()), &format!("{}-a/b", h.digest_prefix())] {
            assert!(bad.parse::<StorePath>().is_err(), "{bad}");
        }
        for bad in ["", "a/b", "a b", "a\0", ".", "é"] {
            assert!(StorePath::new(&h, bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn record_text_round_trip() {
        let h = ContentHash::of(b"x");
        let rec = StoreItemRecord {
            path: StorePath::new(&h, "a-1").unwrap(),
            output_hash: h,
            size: 10,
            references: vec![StorePath::new(&ContentHash::of(b"y"), "b-1").unwrap()],
            kind: ItemKind::Derived,
            deriver: Some(ContentHash::of(b"d")),
            source: None,
            description: None,
        };
        let text = rec.to_text();
        let keys: Vec<_> = text.lines().map(|l| l.split(':').next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(StoreItemRecord::from_text(&text).unwrap(), rec);
    }

    #[test]
    fn add_fixed_is_idempotent_and_content_addressed() {
        let (_t, s) = store();
        let a = s.add_fixed(Content::Bytes(b"hello"), "greeting-1.0").unwrap();
        let b = s.add_fixed(Content::Bytes(b"hello"), "greeting-1.0").unwrap();
        let c = s.add_fixed(Content::Bytes(b"hellO"), "greeting-1.0").unwrap();
        assert_eq!(a, b);
        assert_ne!(a.digest_prefix(), c.digest_prefix());
        assert_eq!(fs::read(s.item_path(&a)).unwrap(), b"hello");
        let rec = s.require_record(&a).unwrap();
        assert_eq!(rec.kind, ItemKind::Fixed);
        assert_eq!(rec.deriver, None);
        assert_eq!(s.list().unwrap().len(), 2);
    }

    #[test]
    fn add_fixed_rejects_bad_label() {
        let (_t, s) = store();
        assert!(matches!(
            s.add_fixed(Content::Bytes(b"x"), "no/slash"),
            Err(StoreError::InvalidLabel(_))
        ));
    }

    #[test]
    fn add_fixed_detects_corrupted_existing_item() {
        let (_t, s) = store();
        let p = s.add_fixed(Content::Bytes(b"hello"), "g").unwrap();
        fs::write(s.item_path(&p), b"jello").unwrap();
        assert!(matches!(
            s.add_fixed(Content::Bytes(b"hello"), "g"),
            Err(StoreError::StoreCorruption { .. })
        ));
    }

    #[test]
    fn verify_reports() {
        let (_t, s) = store();
        let p = s.add_fixed(Content::Bytes(b"hello"), "g").unwrap();
        assert!(s.verify_item(&p).is_ok());
        let mut bytes = fs::read(s.item_path(&p)).unwrap();
        bytes[0] ^= 1;
        fs::write(s.item_path(&p), &bytes).unwrap();
        match s.verify_item(&p) {
            Verification::Mismatch { expected, actual } => {
                assert_eq!(expected, Tree::file("hello").hash());
                assert_eq!(actual, Some(Tree::file(bytes).hash()));
            }
            other => panic!("{other:?}"),
        }
        let never = StorePath::new(&ContentHash::of(b"q"), "q").unwrap();
        assert_eq!(s.verify_item(&never), Verification::Missing);
    }

    fn add_with_refs(s: &Store, name: &str, refs: &[&StorePath]) -> StorePath {
        let scratch = s.scratch_dir().unwrap();
        let staged = scratch.path().join("x");
        fs::write(&staged, name).unwrap();
        let (h, _) = carc::hash_path(&staged).unwrap();
        let p = StorePath::new(&h, name).unwrap();
        let mut meta = NewItem::fixed();
        meta.references = refs.iter().map(|r| (*r).clone()).collect();
        s.register_staged(&staged, &p, meta).unwrap();
        p
    }

    #[test]
    fn closure_shapes() {
        let (_t, s) = store();
        let lone = add_with_refs(&s, "lone", &[]);
        assert_eq!(s.closure(&lone).unwrap(), vec![lone.clone()]);

        let c = add_with_refs(&s, "c", &[]);
        let b = add_with_refs(&s, "b", &[&c]);
        let a = add_with_refs(&s, "a", &[&b]);
        assert_eq!(s.closure(&a).unwrap(), vec![c.clone(), b.clone(), a.clone()]);

        let d = add_with_refs(&s, "d", &[]);
        let l = add_with_refs(&s, "l", &[&d]);
        let r = add_with_refs(&s, "r", &[&d]);
        let top = add_with_refs(&s, "top", &[&l, &r]);
        let cl = s.closure(&top).unwrap();
        assert_eq!(cl.len(), 4);
        assert_eq!(cl.iter().filter(|p| **p == d).count(), 1);
        assert_eq!(cl[0], d);
        assert_eq!(cl[3], top);
    }

    #[test]
    fn closure_dangling() {
        let (_t, s) = store();
        let ghost = StorePath::new(&ContentHash::of(b"ghost"), "ghost").unwrap();
        let a = add_with_refs(&s, "a", &[&ghost]);
        assert!(matches!(s.closure(&a), Err(StoreError::DanglingReference { .. })));
    }

    #[test]
    fn concurrent_registration_of_same_content() {
        let (_t, s) = store();
        let paths: Vec<_> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..8)
                .map(|_| scope.spawn(|| s.add_fixed(Content::Bytes(b"same"), "same").unwrap()))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert!(paths.windows(2).all(|w| w[0] == w[1]));
        assert!(s.verify_item(&paths[0]).is_ok());
    }
}
