//! Derivations: build recipes treated as pure functions of their inputs.
//!
//! A derivation's identity is the SHA-256 of its canonical text, and its
//! output lands at a store path named after that hash. Because an input is
//! referenced by its derivation hash, a change anywhere in the dependency
//! graph changes every derivation above it.

mod build;

pub use build::{BuildError, BuildOptions, Builder, RebuildReport};

use std::collections::BTreeMap;
use std::fs;
use std::io;

use thiserror::Error;

use crate::fsutil;
use crate::hash::ContentHash;
use crate::sexpr::{self, quote, Sexp, SyntaxError};
use crate::store::{io_err, validate_label, Store, StoreError, StorePath};

pub const SYSTEM: &str = "generic";

#[derive(Debug, Error)]
pub enum DerivationError {
    #[error("derivation invariant violated: {0}")]
    InvariantViolation(String),
    #[error("derivation syntax error at {0}")]
    Syntax(#[from] SyntaxError),
    #[error("unknown derivation {0}")]
    Unknown(ContentHash),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn violation(detail: impl Into<String>) -> DerivationError {
    DerivationError::InvariantViolation(detail.into())
}

/// A fixed-output source: content fetched from `url` and accepted only if
/// its canonical archive hashes to `expected_hash`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SourceRef {
    pub url: String,
    pub expected_hash: ContentHash,
    pub label: String,
}

impl SourceRef {
    /// Where the verified content lives in any store.
    pub fn store_path(&self) -> Result<StorePath, StoreError> {
        StorePath::new(&self.expected_hash, &self.label)
    }

    fn render(&self) -> String {
        format!(
            "(source {} {} {})",
            quote(&self.url),
            self.expected_hash,
            quote(&self.label)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct InputRef {
    pub derivation_hash: ContentHash,
    pub label: String,
}

/// One step of the closed build language.
///
/// Output-relative paths name locations inside the build output. Store
/// paths (`copy` sources and `exec` programs) are `<store-item-name>` or
/// `<store-item-name>/<relative path>` and must lie inside the build's
/// input closure or a registered seed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum BuildStep {
    Write { path: String, contents: String },
    Mkdir { path: String },
    Copy { src: String, dst: String },
    Concat { dst: String, srcs: Vec<String> },
    Substitute { path: String, pattern: String, replacement: String },
    SetExec { path: String },
    Exec { program: String, args: Vec<String> },
}

impl BuildStep {
    pub fn keyword(&self) -> &'static str {
        match self {
            BuildStep::Write { .. } => "write",
            BuildStep::Mkdir { .. } => "mkdir",
            BuildStep::Copy { .. } => "copy",
            BuildStep::Concat { .. } => "concat",
            BuildStep::Substitute { .. } => "substitute",
            BuildStep::SetExec { .. } => "set-exec",
            BuildStep::Exec { .. } => "exec",
        }
    }

    /// Every string argument, in serialization order.
    pub fn strings(&self) -> Vec<&String> {
        match self {
            BuildStep::Write { path, contents } => vec![path, contents],
            BuildStep::Mkdir { path } | BuildStep::SetExec { path } => vec![path],
            BuildStep::Copy { src, dst } => vec![src, dst],
            BuildStep::Concat { dst, srcs } => std::iter::once(dst).chain(srcs).collect(),
            BuildStep::Substitute {
                path,
                pattern,
                replacement,
            } => vec![path, pattern, replacement],
            BuildStep::Exec { program, args } => std::iter::once(program).chain(args).collect(),
        }
    }

    /// Applies `f` to every string argument.
    pub fn map_strings(&self, mut f: impl FnMut(&str) -> String) -> BuildStep {
        match self {
            BuildStep::Write { path, contents } => BuildStep::Write {
                path: f(path),
                contents: f(contents),
            },
            BuildStep::Mkdir { path } => BuildStep::Mkdir { path: f(path) },
            BuildStep::Copy { src, dst } => BuildStep::Copy {
                src: f(src),
                dst: f(dst),
            },
            BuildStep::Concat { dst, srcs } => BuildStep::Concat {
                dst: f(dst),
                srcs: srcs.iter().map(|s| f(s)).collect(),
            },
            BuildStep::Substitute {
                path,
                pattern,
                replacement,
            } => BuildStep::Substitute {
                path: f(path),
                pattern: f(pattern),
                replacement: f(replacement),
            },
            BuildStep::SetExec { path } => BuildStep::SetExec { path: f(path) },
            BuildStep::Exec { program, args } => BuildStep::Exec {
                program: f(program),
                args: args.iter().map(|s| f(s)).collect(),
            },
        }
    }

    pub fn render(&self) -> String {
        sexpr::list(self.keyword(), self.strings().into_iter().map(|s| quote(s)))
    }

    pub fn parse(form: &Sexp) -> Result<Self, SyntaxError> {
        let items = form
            .as_list()
            .ok_or_else(|| sexpr::error(form.pos(), "expected a step form"))?;
        let (head, rest) = match items.split_first() {
            Some((Sexp::Symbol(h, _), rest)) => (h.as_str(), rest),
            _ => return Err(sexpr::error(form.pos(), "expected a step keyword")),
        };
        let mut args = Vec::with_capacity(rest.len());
        for a in rest {
            args.push(
                a.as_str()
                    .ok_or_else(|| sexpr::error(a.pos(), "step arguments must be strings"))?
                    .to_string(),
            );
        }
        let arity = |n: usize| {
            if args.len() == n {
                Ok(())
            } else {
                Err(sexpr::error(form.pos(), format!("({head} …) takes {n} arguments")))
            }
        };
        let at_least = |n: usize| {
            if args.len() >= n {
                Ok(())
            } else {
                Err(sexpr::error(form.pos(), format!("({head} …) takes at least {n} arguments")))
            }
        };
        let mut it = args.clone().into_iter();
        let mut next = || it.next().unwrap();
        Ok(match head {
            "write" => {
                arity(2)?;
                BuildStep::Write { path: next(), contents: next() }
            }
            "mkdir" => {
                arity(1)?;
                BuildStep::Mkdir { path: next() }
            }
            "copy" => {
                arity(2)?;
                BuildStep::Copy { src: next(), dst: next() }
            }
            "concat" => {
                at_least(1)?;
                BuildStep::Concat { dst: args[0].clone(), srcs: args[1..].to_vec() }
            }
            "substitute" => {
                arity(3)?;
                BuildStep::Substitute { path: next(), pattern: next(), replacement: next() }
            }
            "set-exec" => {
                arity(1)?;
                BuildStep::SetExec { path: next() }
            }
            "exec" => {
                at_least(1)?;
                BuildStep::Exec { program: args[0].clone(), args: args[1..].to_vec() }
            }
            other => return Err(sexpr::error(form.pos(), format!("unknown step `{other}`"))),
        })
    }
}

/// Checks an output-relative path: nonempty components, no `.` or `..`.
pub fn validate_relative(path: &str) -> Result<(), String> {
    if path.is_empty() || path.split('/').any(|c| c.is_empty() || c == "." || c == ".." || c.contains('\0')) {
        return Err(format!("invalid relative path {path:?}"));
    }
    Ok(())
}

/// Splits a store reference `<item>[/<rest>]` into the item and the rest.
pub fn split_store_ref(reference: &str) -> Result<(StorePath, Option<&str>), String> {
    let (item, rest) = match reference.split_once('/') {
        Some((item, rest)) => (item, Some(rest)),
        None => (reference, None),
    };
    let item = item
        .parse::<StorePath>()
        .map_err(|_| format!("{reference:?} does not start with a store item name"))?;
    if let Some(rest) = rest {
        validate_relative(rest)?;
    }
    Ok((item, rest))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Derivation {
    pub name: String,
    pub version: String,
    pub system: String,
    /// Sorted by `expected_hash`.
    pub sources: Vec<SourceRef>,
    /// Sorted by `derivation_hash`.
    pub inputs: Vec<InputRef>,
    pub steps: Vec<BuildStep>,
    pub env: BTreeMap<String, String>,
}

impl Derivation {
    pub fn new(name: impl Into<String>, version: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            version: version.into(),
            system: SYSTEM.to_string(),
            sources: Vec::new(),
            inputs: Vec::new(),
            steps: Vec::new(),
            env: BTreeMap::new(),
        }
    }

    pub fn with_source(mut self, source: SourceRef) -> Self {
        self.sources.push(source);
        self.sources.sort_by_key(|s| s.expected_hash);
        self
    }

    pub fn with_input(mut self, input: InputRef) -> Self {
        self.inputs.push(input);
        self.inputs.sort_by_key(|i| i.derivation_hash);
        self
    }

    pub fn with_step(mut self, step: BuildStep) -> Self {
        self.steps.push(step);
        self
    }

    pub fn with_env(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.env.insert(key.into(), value.into());
        self
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.name, self.version)
    }

    pub fn validate(&self) -> Result<(), DerivationError> {
        if self.name.is_empty() || self.version.is_empty() {
            return Err(violation("name and version must be nonempty"));
        }
        validate_label(&self.label()).map_err(|e| violation(e.to_string()))?;
        if self.system != SYSTEM {
            return Err(violation(format!("unsupported system {:?}", self.system)));
        }
        if !self.sources.windows(2).all(|w| w[0].expected_hash < w[1].expected_hash) {
            return Err(violation("sources must be sorted by hash and unique"));
        }
        for s in &self.sources {
            validate_label(&s.label).map_err(|e| violation(e.to_string()))?;
        }
        if !self.inputs.windows(2).all(|w| w[0].derivation_hash < w[1].derivation_hash) {
            return Err(violation("inputs must be sorted by hash and unique"));
        }
        for (i, step) in self.steps.iter().enumerate() {
            let check = match step {
                BuildStep::Write { path, .. }
                | BuildStep::Mkdir { path }
                | BuildStep::SetExec { path }
                | BuildStep::Substitute { path, .. } => validate_relative(path),
                BuildStep::Copy { src, dst } => {
                    split_store_ref(src).map(|_| ()).and_then(|_| validate_relative(dst))
                }
                BuildStep::Concat { dst, srcs } => std::iter::once(dst)
                    .chain(srcs)
                    .try_for_each(|p| validate_relative(p)),
                BuildStep::Exec { program, .. } => split_store_ref(program).map(|_| ()),
            };
            check.map_err(|e| violation(format!("step {i}: {e}")))?;
            if let BuildStep::Substitute { pattern, .. } = step {
                if pattern.is_empty() {
                    return Err(violation(format!("step {i}: empty substitution pattern")));
                }
            }
        }
        Ok(())
    }

    /// The canonical text whose SHA-256 is the derivation hash.
    pub fn canonical_serialize(&self) -> Result<String, DerivationError> {
        self.validate()?;
        let fields = [
            format!("(name {})", quote(&self.name)),
            format!("(version {})", quote(&self.version)),
            format!("(system {})", quote(&self.system)),
            sexpr::list("sources", self.sources.iter().map(SourceRef::render)),
            sexpr::list(
                "inputs",
                self.inputs
                    .iter()
                    .map(|i| format!("(input {} {})", i.derivation_hash, quote(&i.label))),
            ),
            sexpr::list("steps", self.steps.iter().map(BuildStep::render)),
            sexpr::list(
                "env",
                self.env.iter().map(|(k, v)| format!("({} {})", quote(k), quote(v))),
            ),
        ];
        Ok(sexpr::list("derivation", fields))
    }

    pub fn hash(&self) -> Result<ContentHash, DerivationError> {
        Ok(ContentHash::of(self.canonical_serialize()?.as_bytes()))
    }

    /// The derivation hash and the store path its output is registered at.
    pub fn derivation_hash(&self) -> Result<(ContentHash, StorePath), DerivationError> {
        let hash = self.hash()?;
        let path = StorePath::new(&hash, &self.label())?;
        Ok((hash, path))
    }

    pub fn output_path(&self) -> Result<StorePath, DerivationError> {
        Ok(self.derivation_hash()?.1)
    }

    /// Parses derivation text. Whitespace and comments are free; the
    /// fields, their order and the sorting invariants are not.
    pub fn parse(text: &str) -> Result<Self, DerivationError> {
        let top = sexpr::parse_one(text)?;
        let fields = top.form("derivation")?;
        let [name, version, system, sources, inputs, steps, env] = fields else {
            return Err(sexpr::error(top.pos(), "expected 7 derivation fields").into());
        };
        let hash_atom = |s: &Sexp| -> Result<ContentHash, SyntaxError> {
            s.as_symbol()
                .and_then(|h| h.parse().ok())
                .ok_or_else(|| sexpr::error(s.pos(), "expected a 64-hex hash"))
        };
        let string = |s: &Sexp| -> Result<String, SyntaxError> {
            s.as_str()
                .map(str::to_string)
                .ok_or_else(|| sexpr::error(s.pos(), "expected a string"))
        };
        let mut drv = Derivation {
            name: name.string_field("name")?.to_string(),
            version: version.string_field("version")?.to_string(),
            system: system.string_field("system")?.to_string(),
            sources: Vec::new(),
            inputs: Vec::new(),
            steps: Vec::new(),
            env: BTreeMap::new(),
        };
        for s in sources.form("sources")? {
            match s.form("source")? {
                [url, hash, label] => drv.sources.push(SourceRef {
                    url: string(url)?,
                    expected_hash: hash_atom(hash)?,
                    label: string(label)?,
                }),
                _ => return Err(sexpr::error(s.pos(), "expected (source URL HASH LABEL)").into()),
            }
        }
        for i in inputs.form("inputs")? {
            match i.form("input")? {
                [hash, label] => drv.inputs.push(InputRef {
                    derivation_hash: hash_atom(hash)?,
                    label: string(label)?,
                }),
                _ => return Err(sexpr::error(i.pos(), "expected (input HASH LABEL)").into()),
            }
        }
        for s in steps.form("steps")? {
            drv.steps.push(BuildStep::parse(s)?);
        }
        for e in env.form("env")? {
            match e.as_list() {
                Some([k, v]) => {
                    let k = string(k)?;
                    if let Some(last) = drv.env.keys().next_back() {
                        if *last >= k {
                            return Err(violation("env keys must be sorted and unique"));
                        }
                    }
                    drv.env.insert(k, string(v)?);
                }
                _ => return Err(sexpr::error(e.pos(), "expected (\"KEY\" \"VALUE\")").into()),
            }
        }
        drv.validate()?;
        Ok(drv)
    }
}

impl Store {
    /// Records a derivation's canonical text in the store.
    pub fn put_derivation(&self, drv: &Derivation) -> Result<ContentHash, DerivationError> {
        let text = drv.canonical_serialize()?;
        let hash = ContentHash::of(text.as_bytes());
        let file = self.drv_dir().join(format!("{hash}.drv"));
        if !file.exists() {
            fsutil::write_atomic(&file, text.as_bytes()).map_err(io_err(&file))?;
        }
        Ok(hash)
    }

    pub fn get_derivation(&self, hash: &ContentHash) -> Result<Option<Derivation>, DerivationError> {
        let file = self.drv_dir().join(format!("{hash}.drv"));
        let text = match fs::read_to_string(&file) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(StoreError::Io { path: file, source: e }.into()),
        };
        let drv = Derivation::parse(&text)?;
        if drv.hash()? != *hash {
            return Err(violation(format!("stored derivation {hash} does not hash to its name")));
        }
        Ok(Some(drv))
    }

    pub fn require_derivation(&self, hash: &ContentHash) -> Result<Derivation, DerivationError> {
        self.get_derivation(hash)?
            .ok_or(DerivationError::Unknown(*hash))
    }

    /// Finds the stored derivation whose output is `path`.
    pub fn derivation_for(&self, path: &StorePath) -> Result<Option<Derivation>, DerivationError> {
        if let Some(rec) = self.record(path)? {
            if let Some(d) = rec.deriver {
                return self.get_derivation(&d);
            }
        }
        let dir = self.drv_dir();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            let name = entry.file_name();
            let Some(hex) = name.to_str().and_then(|n| n.strip_suffix(".drv")) else {
                continue;
            };
            if hex.starts_with(path.digest_prefix()) {
                if let Ok(h) = hex.parse::<ContentHash>() {
                    if let Some(d) = self.get_derivation(&h)? {
                        if d.output_path()? == *path {
                            return Ok(Some(d));
                        }
                    }
                }
            }
        }
        Ok(None)
    }

    /// Every derivation reachable from `root` through inputs, dependencies
    /// first, each exactly once.
    pub fn derivation_graph(&self, root: &Derivation) -> Result<Vec<(ContentHash, Derivation)>, DerivationError> {
        let mut order = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        fn visit(
            store: &Store,
            hash: ContentHash,
            drv: Derivation,
            seen: &mut std::collections::BTreeSet<ContentHash>,
            order: &mut Vec<(ContentHash, Derivation)>,
        ) -> Result<(), DerivationError> {
            if !seen.insert(hash) {
                return Ok(());
            }
            for input in &drv.inputs {
                let dep = store.require_derivation(&input.derivation_hash)?;
                visit(store, input.derivation_hash, dep, seen, order)?;
            }
            order.push((hash, drv));
            Ok(())
        }
        visit(self, root.hash()?, root.clone(), &mut seen, &mut order)?;
        Ok(order)
    }
}
