//! Package definitions, revision chains and channel repositories.
//!
//! Repository layout:
//!
//! ```text
//! revisions/<64-hex>   canonical revision text
//! objects/<64-hex>     canonical package definition text
//! HEAD                 current revision id
//! url                  optional origin URL reported by `describe`
//! ```

pub mod pin;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use pin::{describe_pin, parse_pin, ChannelPin, PinFile, DEFAULT_CHANNEL};

use crate::carc::Tree;
use crate::derivation::{BuildStep, SourceRef};
use crate::fsutil;
use crate::hash::ContentHash;
use crate::sexpr::{self, quote, Sexp, SyntaxError};
use crate::store::validate_label;
use crate::transport::{self, Location, TransportError};

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("package {0} defined more than once")]
    DuplicatePackage(String),
    #[error("invalid package definition: {0}")]
    InvalidPackage(String),
    #[error("unknown parent revision {0}")]
    UnknownParent(ContentHash),
    #[error("unknown revision {0}")]
    UnknownRevision(ContentHash),
    #[error("channel repository has no head revision")]
    NoHead,
    #[error("cannot reach channel {remote}: {detail}")]
    UnreachableRemote { remote: String, detail: String },
    #[error("corrupt revision {id}: {detail}")]
    CorruptRevision { id: ContentHash, detail: String },
    #[error("pin file: {0}")]
    Syntax(#[from] SyntaxError),
    #[error("pin file line {line}: commit {value:?} is not a 64-hex revision id")]
    BadCommit { line: usize, value: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ChannelError + '_ {
    move |source| ChannelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where a package's source comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PackageSource {
    Url(SourceRef),
    /// Literal source text carried in the definition itself.
    Inline(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackageDef {
    pub name: String,
    pub version: String,
    pub synopsis: String,
    pub source: Option<PackageSource>,
    /// Dependency specs, `name` or `name@version`, in declaration order.
    pub deps: Vec<String>,
    /// Step templates. `@{source}` and `@{<dep name>}` expand to store names.
    pub steps: Vec<BuildStep>,
}

pub type PackageSet = BTreeMap<String, PackageDef>;

impl PackageDef {
    pub fn new(name: impl Into<String>, version: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            version: version.into(),
            synopsis: String::new(),
            source: None,
            deps: Vec::new(),
            steps: Vec::new(),
        }
    }

    pub fn synopsis(mut self, s: impl Into<String>) -> Self {
        self.synopsis = s.into();
        self
    }

    pub fn inline_source(mut self, text: impl Into<String>) -> Self {
        self.source = Some(PackageSource::Inline(text.into()));
        self
    }

    pub fn url_source(mut self, source: SourceRef) -> Self {
        self.source = Some(PackageSource::Url(source));
        self
    }

    pub fn dep(mut self, spec: impl Into<String>) -> Self {
        self.deps.push(spec.into());
        self
    }

    pub fn step(mut self, step: BuildStep) -> Self {
        self.steps.push(step);
        self
    }

    /// `name@version`
    pub fn key(&self) -> String {
        format!("{}@{}", self.name, self.version)
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.name, self.version)
    }

    /// The fetchable source reference, with inline text lowered to a
    /// `data:` URL.
    pub fn source_ref(&self) -> Option<SourceRef> {
        match &self.source {
            None => None,
            Some(PackageSource::Url(s)) => Some(s.clone()),
            Some(PackageSource::Inline(text)) => Some(SourceRef {
                url: transport::data_url(text.as_bytes()),
                expected_hash: Tree::file(text.as_bytes()).hash(),
                label: format!("{}-source", self.label()),
            }),
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |d: String| Err(ChannelError::InvalidPackage(format!("{}: {d}", self.key())));
        if self.name.is_empty() || self.version.is_empty() {
            return bad("empty name or version".into());
        }
        if self.name.contains('@') {
            return bad("name must not contain '@'".into());
        }
        if let Err(e) = validate_label(&self.label()) {
            return bad(e.to_string());
        }
        for d in &self.deps {
            let (name, version) = match d.rsplit_once('@') {
                Some((n, v)) => (n, Some(v)),
                None => (d.as_str(), None),
            };
            if name.is_empty() || version == Some("") {
                return bad(format!("bad dependency spec {d:?}"));
            }
        }
        if let Some(PackageSource::Url(s)) = &self.source {
            if let Err(e) = validate_label(&s.label) {
                return bad(e.to_string());
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let source = match &self.source {
            None => "(source)".to_string(),
            Some(PackageSource::Url(s)) => format!(
                "(source (url {} {} {}))",
                quote(&s.url),
                s.expected_hash,
                quote(&s.label)
            ),
            Some(PackageSource::Inline(t)) => format!("(source (inline {}))", quote(t)),
        };
        let parts = [
            format!("(name {})", quote(&self.name)),
            format!("(version {})", quote(&self.version)),
            format!("(synopsis {})", quote(&self.synopsis)),
            source,
            sexpr::list("deps", self.deps.iter().map(|d| quote(d))),
            sexpr::list("steps", self.steps.iter().map(BuildStep::render)),
        ];
        sexpr::list("package", parts)
    }

    pub fn hash(&self) -> ContentHash {
        ContentHash::of(self.to_text().as_bytes())
    }

    pub fn parse(text: &str) -> Result<Self, ChannelError> {
        let top = sexpr::parse_one(text)?;
        let fields = top.form("package")?;
        let [name, version, synopsis, source, deps, steps] = fields else {
            return Err(sexpr::error(top.pos(), "expected 6 package fields").into());
        };
        let mut def = PackageDef::new(name.string_field("name")?, version.string_field("version")?)
            .synopsis(synopsis.string_field("synopsis")?);
        def.source = match source.form("source")? {
            [] => None,
            [s] => Some(parse_source(s)?),
            _ => return Err(sexpr::error(source.pos(), "expected at most one source").into()),
        };
        for d in deps.form("deps")? {
            let s = d
                .as_str()
                .ok_or_else(|| sexpr::error(d.pos(), "dependency specs are strings"))?;
            def.deps.push(s.to_string());
        }
        for s in steps.form("steps")? {
            def.steps.push(BuildStep::parse(s)?);
        }
        def.validate()?;
        Ok(def)
    }
}

fn parse_source(s: &Sexp) -> Result<PackageSource, SyntaxError> {
    if let Ok(args) = s.form("inline") {
        return match args {
            [Sexp::Str(t, _)] => Ok(PackageSource::Inline(t.clone())),
            _ => Err(sexpr::error(s.pos(), "expected (inline \"TEXT\")")),
        };
    }
    match s.form("url")? {
        [Sexp::Str(url, _), hash, Sexp::Str(label, _)] => {
            let expected_hash = hash
                .as_symbol()
                .and_then(|h| h.parse().ok())
                .ok_or_else(|| sexpr::error(hash.pos(), "expected a 64-hex hash"))?;
            Ok(PackageSource::Url(SourceRef {
                url: url.clone(),
                expected_hash,
                label: label.clone(),
            }))
        }
        _ => Err(sexpr::error(s.pos(), "expected (url \"URL\" HASH \"LABEL\")")),
    }
}

/// Collects definitions into a set, rejecting duplicate `name@version`.
pub fn package_set(defs: impl IntoIterator<Item = PackageDef>) -> Result<PackageSet, ChannelError> {
    let mut set = PackageSet::new();
    for d in defs {
        d.validate()?;
        let key = d.key();
        if set.insert(key.clone(), d).is_some() {
            return Err(ChannelError::DuplicatePackage(key));
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelRevision {
    pub id: ContentHash,
    pub parent: Option<ContentHash>,
    pub message: String,
    /// `name@version` to package definition hash.
    pub tree: BTreeMap<String, ContentHash>,
}

impl ChannelRevision {
    pub fn new(parent: Option<ContentHash>, message: &str, tree: BTreeMap<String, ContentHash>) -> Self {
        let text = render_revision(parent.as_ref(), message, &tree);
        Self {
            id: ContentHash::of(text.as_bytes()),
            parent,
            message: message.to_string(),
            tree,
        }
    }

    pub fn to_text(&self) -> String {
        render_revision(self.parent.as_ref(), &self.message, &self.tree)
    }

    /// Parses revision text; the id is the hash of `text` itself, which
    /// must already be canonical.
    pub fn parse(text: &str) -> Result<Self, SyntaxError> {
        let top = sexpr::parse_one(text)?;
        let fields = top.form("revision")?;
        let [parent, message, tree] = fields else {
            return Err(sexpr::error(top.pos(), "expected 3 revision fields"));
        };
        let parent = match parent.form("parent")? {
            [Sexp::Symbol(s, _)] if s == "nil" => None,
            [h @ Sexp::Symbol(s, _)] => Some(
                s.parse()
                    .map_err(|_| sexpr::error(h.pos(), "expected nil or a 64-hex id"))?,
            ),
            _ => return Err(sexpr::error(parent.pos(), "expected (parent nil|ID)")),
        };
        let mut entries = BTreeMap::new();
        for e in tree.form("tree")? {
            match e.as_list() {
                Some([Sexp::Str(k, _), Sexp::Symbol(h, hp)]) => {
                    let h = h
                        .parse()
                        .map_err(|_| sexpr::error(*hp, "expected a 64-hex hash"))?;
                    if entries.insert(k.clone(), h).is_some() {
                        return Err(sexpr::error(e.pos(), format!("duplicate tree entry {k}")));
                    }
                }
                _ => return Err(sexpr::error(e.pos(), "expected (\"name@version\" HASH)")),
            }
        }
        let rev = Self::new(parent, message.string_field("message")?, entries);
        if rev.to_text() != text {
            return Err(sexpr::error(top.pos(), "revision text is not canonical"));
        }
        Ok(rev)
    }
}

fn render_revision(parent: Option<&ContentHash>, message: &str, tree: &BTreeMap<String, ContentHash>) -> String {
    sexpr::list(
        "revision",
        [
            format!("(parent {})", parent.map_or_else(|| "nil".to_string(), |p| p.to_hex())),
            format!("(message {})", quote(message)),
            sexpr::list("tree", tree.iter().map(|(k, h)| format!("({} {h})", quote(k)))),
        ],
    )
}

/// A local channel repository.
#[derive(Debug, Clone)]
pub struct Repo {
    root: PathBuf,
}

impl Repo {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ChannelError> {
        let root = root.into();
        for sub in ["revisions", "objects"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn lock(&self) -> Result<fsutil::LockGuard, ChannelError> {
        let p = self.root.join("lock");
        fsutil::lock_file(&p).map_err(io_err(&p))
    }

    fn write(&self, rel: &str, data: &[u8]) -> Result<(), ChannelError> {
        let p = self.root.join(rel);
        fsutil::write_atomic(&p, data).map_err(io_err(&p))
    }

    fn read(&self, rel: &str) -> Result<Option<Vec<u8>>, ChannelError> {
        let p = self.root.join(rel);
        match fs::read(&p) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&p)(e)),
        }
    }

    pub fn head(&self) -> Result<Option<ContentHash>, ChannelError> {
        match self.read("HEAD")? {
            None => Ok(None),
            Some(b) => {
                let text = String::from_utf8_lossy(&b);
                let id = text.trim().parse().map_err(|_| ChannelError::CorruptRevision {
                    id: ContentHash::of(&b),
                    detail: "HEAD does not hold a revision id".into(),
                })?;
                Ok(Some(id))
            }
        }
    }

    pub fn require_head(&self) -> Result<ContentHash, ChannelError> {
        self.head()?.ok_or(ChannelError::NoHead)
    }

    /// The URL this repository reports as its origin. Defaults to a
    /// `file://` URL of the repository itself.
    pub fn url(&self) -> Result<String, ChannelError> {
        Ok(match self.read("url")? {
            Some(b) => String::from_utf8_lossy(&b).trim().to_string(),
            None => format!("file://{}", self.root.display()),
        })
    }

    pub fn set_url(&self, url: &str) -> Result<(), ChannelError> {
        self.write("url", format!("{url}\n").as_bytes())
    }

    pub fn has_revision(&self, id: &ContentHash) -> bool {
        self.root.join("revisions").join(id.to_hex()).is_file()
    }

    /// Records a new revision holding exactly `defs` and moves HEAD to it.
    /// Existing revisions and objects are never rewritten.
    pub fn commit(
        &self,
        defs: impl IntoIterator<Item = PackageDef>,
        parent: Option<ContentHash>,
        message: &str,
    ) -> Result<ChannelRevision, ChannelError> {
        let set = package_set(defs)?;
        let _guard = self.lock()?;
        if let Some(p) = parent {
            if !self.has_revision(&p) {
                return Err(ChannelError::UnknownParent(p));
            }
        }
        let mut tree = BTreeMap::new();
        for (key, def) in &set {
            let text = def.to_text();
            let h = ContentHash::of(text.as_bytes());
            let rel = format!("objects/{h}");
            if self.read(&rel)?.is_none() {
                self.write(&rel, text.as_bytes())?;
            }
            tree.insert(key.clone(), h);
        }
        let rev = ChannelRevision::new(parent, message, tree);
        let rel = format!("revisions/{}", rev.id);
        if self.read(&rel)?.is_none() {
            self.write(&rel, rev.to_text().as_bytes())?;
        }
        self.write("HEAD", format!("{}\n", rev.id).as_bytes())?;
        Ok(rev)
    }

    /// Reads and re-verifies a stored revision.
    pub fn revision(&self, id: &ContentHash) -> Result<ChannelRevision, ChannelError> {
        let bytes = self
            .read(&format!("revisions/{id}"))?
            .ok_or(ChannelError::UnknownRevision(*id))?;
        verify_revision(id, &bytes)
    }

    /// The package set recorded at revision `id`.
    pub fn checkout(&self, id: &ContentHash) -> Result<PackageSet, ChannelError> {
        let rev = self.revision(id)?;
        let mut set = PackageSet::new();
        for (key, h) in &rev.tree {
            let bytes = self.read(&format!("objects/{h}"))?.ok_or_else(|| ChannelError::CorruptRevision {
                id: *id,
                detail: format!("missing object for {key}"),
            })?;
            set.insert(key.clone(), verify_object(id, key, h, &bytes)?);
        }
        Ok(set)
    }

    /// Revisions from `id` back to the root.
    pub fn history(&self, id: &ContentHash) -> Result<Vec<ChannelRevision>, ChannelError> {
        let mut out = Vec::new();
        let mut next = Some(*id);
        while let Some(h) = next {
            let rev = self.revision(&h)?;
            next = rev.parent;
            out.push(rev);
        }
        Ok(out)
    }

    /// Fetches every revision reachable from the remote head and moves the
    /// local head to it. Returns the new head.
    pub fn pull(&self, remote: &Location) -> Result<ContentHash, ChannelError> {
        let unreachable = |detail: String| ChannelError::UnreachableRemote {
            remote: remote.to_string(),
            detail,
        };
        let head_bytes = get(remote, "HEAD")?.ok_or_else(|| unreachable("no HEAD".into()))?;
        let head: ContentHash = String::from_utf8_lossy(&head_bytes)
            .trim()
            .parse()
            .map_err(|_| unreachable("HEAD does not hold a revision id".into()))?;
        let _guard = self.lock()?;
        self.fetch_chain(remote, head)?;
        self.write("HEAD", format!("{head}\n").as_bytes())?;
        Ok(head)
    }

    /// Fetches revision `id` and its ancestry without touching HEAD.
    pub fn fetch_revision(&self, remote: &Location, id: &ContentHash) -> Result<(), ChannelError> {
        let _guard = self.lock()?;
        self.fetch_chain(remote, *id)
    }

    fn fetch_chain(&self, remote: &Location, id: ContentHash) -> Result<(), ChannelError> {
        let mut staged: Vec<(String, Vec<u8>)> = Vec::new();
        let mut next = Some(id);
        let mut seen = BTreeSet::new();
        while let Some(h) = next {
            if self.has_revision(&h) {
                break;
            }
            if !seen.insert(h) {
                return Err(ChannelError::CorruptRevision {
                    id: h,
                    detail: "parent chain loops".into(),
                });
            }
            let bytes = get(remote, &format!("revisions/{h}"))?.ok_or(ChannelError::UnknownRevision(h))?;
            let rev = verify_revision(&h, &bytes)?;
            for (key, oh) in &rev.tree {
                let rel = format!("objects/{oh}");
                if self.read(&rel)?.is_some() {
                    continue;
                }
                let obj = get(remote, &rel)?.ok_or_else(|| ChannelError::CorruptRevision {
                    id: h,
                    detail: format!("remote lacks object for {key}"),
                })?;
                verify_object(&h, key, oh, &obj)?;
                staged.push((rel, obj));
            }
            staged.push((format!("revisions/{h}"), bytes));
            next = rev.parent;
        }
        // Objects before the revisions that name them, oldest revision first.
        for (rel, data) in staged.iter().rev().filter(|(r, _)| r.starts_with("objects/")) {
            self.write(rel, data)?;
        }
        for (rel, data) in staged.iter().rev().filter(|(r, _)| r.starts_with("revisions/")) {
            self.write(rel, data)?;
        }
        Ok(())
    }
}

fn get(remote: &Location, rel: &str) -> Result<Option<Vec<u8>>, ChannelError> {
    remote.get(rel).map_err(|e| match e {
        TransportError::Io { path, source } => ChannelError::UnreachableRemote {
            remote: remote.to_string(),
            detail: format!("{}: {source}", path.display()),
        },
        other => ChannelError::UnreachableRemote {
            remote: remote.to_string(),
            detail: other.to_string(),
        },
    })
}

fn verify_revision(id: &ContentHash, bytes: &[u8]) -> Result<ChannelRevision, ChannelError> {
    let actual = ContentHash::of(bytes);
    let corrupt = |detail: String| ChannelError::CorruptRevision { id: *id, detail };
    if actual != *id {
        return Err(corrupt(format!("content hashes to {actual}")));
    }
    let text = std::str::from_utf8(bytes).map_err(|_| corrupt("not UTF-8".into()))?;
    ChannelRevision::parse(text).map_err(|e| corrupt(e.to_string()))
}

fn verify_object(id: &ContentHash, key: &str, hash: &ContentHash, bytes: &[u8]) -> Result<PackageDef, ChannelError> {
    let corrupt = |detail: String| ChannelError::CorruptRevision {
        id: *id,
        detail: format!("{key}: {detail}"),
    };
    let actual = ContentHash::of(bytes);
    if actual != *hash {
        return Err(corrupt(format!("definition hashes to {actual}, expected {hash}")));
    }
    let text = std::str::from_utf8(bytes).map_err(|_| corrupt("not UTF-8".into()))?;
    let def = PackageDef::parse(text).map_err(|e| corrupt(e.to_string()))?;
    if def.key() != key || def.to_text() != text {
        return Err(corrupt("definition does not match its tree entry".into()));
    }
    Ok(def)
}

/// Runs `action` against the union of the pinned revisions' package sets,
/// fetching missing revisions from the pinned URLs into `repo`. The
/// repository head is neither consulted nor moved.
pub fn time_machine<T, E: From<ChannelError>>(
    pin: &PinFile,
    repo: &Repo,
    action: impl FnOnce(&PackageSet) -> Result<T, E>,
) -> Result<T, E> {
    let mut union = PackageSet::new();
    for ch in &pin.channels {
        if !repo.has_revision(&ch.commit) {
            if let Err(e) = repo.fetch_revision(&Location::parse(&ch.url), &ch.commit) {
                log::warn!("cannot fetch {} from {}: {e}", ch.commit, ch.url);
                return Err(ChannelError::UnknownRevision(ch.commit).into());
            }
        }
        for (key, def) in repo.checkout(&ch.commit)? {
            if union.insert(key.clone(), def).is_some() {
                return Err(ChannelError::DuplicatePackage(key).into());
            }
        }
    }
    action(&union)
}
