//! Manifests, package resolution, lowering package definitions to
//! derivations, dependency rewriting, and profiles.

mod profile;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

pub use profile::{build_profile, rollback, Generation, Profile, ProfileError, Provenance};

use crate::channel::{PackageDef, PackageSet};
use crate::derivation::{Derivation, DerivationError, InputRef};
use crate::hash::ContentHash;
use crate::sexpr::{self, Pos, Sexp, SyntaxError};
use crate::store::Store;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest: {0}")]
    Syntax(#[from] SyntaxError),
    #[error("{pos}: unsupported form: {detail}; only (specifications->manifest '(\"spec\" …)) is accepted, full Scheme is out of scope")]
    UnsupportedForm { pos: Pos, detail: String },
    #[error("spec {0} listed more than once")]
    DuplicateSpec(String),
    #[error("spec {0:?} has an empty package name")]
    EmptyName(String),
    #[error("spec {0:?} has an empty version")]
    EmptyVersion(String),
    #[error("unknown package {0}")]
    UnknownPackage(String),
    #[error("no version of {0} matches")]
    UnknownVersion(String),
    #[error("dependency cycle: {}", .0.join(" -> "))]
    DependencyCycle(Vec<String>),
    #[error("replacement cycle: {}", .0.join(" -> "))]
    ReplacementCycle(Vec<String>),
    #[error("{package}: {detail}")]
    InvalidTemplate { package: String, detail: String },
    #[error(transparent)]
    Derivation(#[from] DerivationError),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Spec {
    pub name: String,
    pub version: Option<String>,
}

impl Spec {
    pub fn new(name: &str, version: Option<&str>) -> Self {
        Self {
            name: name.to_string(),
            version: version.map(str::to_string),
        }
    }

    pub fn matches(&self, def: &PackageDef) -> bool {
        def.name == self.name && self.version.as_ref().is_none_or(|v| *v == def.version)
    }
}

impl fmt::Display for Spec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.version {
            Some(v) => write!(f, "{}@{v}", self.name),
            None => f.write_str(&self.name),
        }
    }
}

impl std::str::FromStr for Spec {
    type Err = ManifestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_spec(s)
    }
}

/// `name` or `name@version`, split on the last `@`.
pub fn parse_spec(s: &str) -> Result<Spec, ManifestError> {
    let (name, version) = match s.rsplit_once('@') {
        Some((n, v)) => (n, Some(v)),
        None => (s, None),
    };
    if name.is_empty() {
        return Err(ManifestError::EmptyName(s.to_string()));
    }
    if version == Some("") {
        return Err(ManifestError::EmptyVersion(s.to_string()));
    }
    Ok(Spec::new(name, version))
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub specs: Vec<Spec>,
}

pub fn parse_manifest(text: &str) -> Result<Manifest, ManifestError> {
    let forms = sexpr::parse_all(text)?;
    let top = match forms.as_slice() {
        [] => return Err(sexpr::error(Pos { line: 1, col: 1 }, "empty manifest").into()),
        [one] => one,
        [_, extra, ..] => {
            return Err(ManifestError::UnsupportedForm {
                pos: extra.pos(),
                detail: format!("extra top-level {}", extra.describe()),
            })
        }
    };
    let unsupported = |s: &Sexp, what: &str| ManifestError::UnsupportedForm {
        pos: s.pos(),
        detail: format!("{what}, found {}", s.describe()),
    };
    let args = top
        .form("specifications->manifest")
        .map_err(|_| unsupported(top, "expected (specifications->manifest …)"))?;
    let [arg] = args else {
        return Err(unsupported(top, "specifications->manifest takes one quoted list"));
    };
    let Sexp::Quote(inner, _) = arg else {
        return Err(unsupported(arg, "expected a quoted list '(…)"));
    };
    let items = inner
        .as_list()
        .ok_or_else(|| unsupported(inner, "expected a quoted list '(…)"))?;
    let mut seen = BTreeSet::new();
    let mut specs = Vec::new();
    for item in items {
        let s = item
            .as_str()
            .ok_or_else(|| unsupported(item, "expected a spec string"))?;
        let spec = parse_spec(s)?;
        if !seen.insert(spec.to_string()) {
            return Err(ManifestError::DuplicateSpec(spec.to_string()));
        }
        specs.push(spec);
    }
    Ok(Manifest { specs })
}

fn is_numeric(c: &str) -> bool {
    !c.is_empty() && c.bytes().all(|b| b.is_ascii_digit())
}

fn compare_component(a: &str, b: &str) -> Ordering {
    match (is_numeric(a), is_numeric(b)) {
        (true, true) => {
            let (ta, tb) = (a.trim_start_matches('0'), b.trim_start_matches('0'));
            ta.len()
                .cmp(&tb.len())
                .then_with(|| ta.cmp(tb))
                .then_with(|| a.cmp(b))
        }
        (true, false) => Ordering::Less,
        (false, true) => Ordering::Greater,
        (false, false) => a.as_bytes().cmp(b.as_bytes()),
    }
}

/// Total order on version strings. Components split on `.` compare
/// numerically when both are all digits, bytewise when neither is, and a
/// numeric component sorts before a non-numeric one. Equal numbers written
/// differently ("01", "1") fall back to bytes. A proper prefix sorts first.
pub fn compare_versions(a: &str, b: &str) -> Ordering {
    let mut ia = a.split('.');
    let mut ib = b.split('.');
    loop {
        match (ia.next(), ib.next()) {
            (None, None) => return Ordering::Equal,
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(x), Some(y)) => match compare_component(x, y) {
                Ordering::Equal => {}
                o => return o,
            },
        }
    }
}

/// The definition `spec` selects: the exact version if constrained,
/// otherwise the highest.
pub fn resolve_spec<'a>(spec: &Spec, pkgs: &'a PackageSet) -> Result<&'a PackageDef, ManifestError> {
    let mut candidates = pkgs.values().filter(|d| d.name == spec.name).peekable();
    if candidates.peek().is_none() {
        return Err(ManifestError::UnknownPackage(spec.to_string()));
    }
    match &spec.version {
        Some(v) => candidates
            .find(|d| d.version == *v)
            .ok_or_else(|| ManifestError::UnknownVersion(spec.to_string())),
        None => Ok(candidates
            .max_by(|a, b| compare_versions(&a.version, &b.version))
            .expect("nonempty")),
    }
}

pub fn resolve(m: &Manifest, pkgs: &PackageSet) -> Result<Vec<PackageDef>, ManifestError> {
    m.specs
        .iter()
        .map(|s| resolve_spec(s, pkgs).cloned())
        .collect()
}

/// Lowers package definitions to derivations, memoising shared
/// dependencies.
pub struct Instantiator<'a> {
    pkgs: &'a PackageSet,
    done: BTreeMap<String, Derivation>,
    stack: Vec<(String, String)>,
}

impl<'a> Instantiator<'a> {
    pub fn new(pkgs: &'a PackageSet) -> Self {
        Self {
            pkgs,
            done: BTreeMap::new(),
            stack: Vec::new(),
        }
    }

    pub fn instantiate(&mut self, def: &PackageDef) -> Result<Derivation, ManifestError> {
        let key = def.key();
        if let Some(d) = self.done.get(&key) {
            return Ok(d.clone());
        }
        if let Some(i) = self.stack.iter().position(|(k, _)| *k == key) {
            let mut names: Vec<String> = self.stack[i..].iter().map(|(_, n)| n.clone()).collect();
            names.push(def.name.clone());
            return Err(ManifestError::DependencyCycle(names));
        }
        self.stack.push((key.clone(), def.name.clone()));
        let result = self.lower(def);
        self.stack.pop();
        let drv = result?;
        self.done.insert(key, drv.clone());
        Ok(drv)
    }

    fn lower(&mut self, def: &PackageDef) -> Result<Derivation, ManifestError> {
        let template_err = |detail: String| ManifestError::InvalidTemplate {
            package: def.key(),
            detail,
        };
        let mut drv = Derivation::new(&def.name, &def.version);
        let mut names: BTreeMap<String, String> = BTreeMap::new();
        if let Some(src) = def.source_ref() {
            names.insert("source".into(), src.store_path().map_err(DerivationError::from)?.name());
            drv = drv.with_source(src);
        }
        for dep_spec in &def.deps {
            let spec = parse_spec(dep_spec)?;
            let dep_def = resolve_spec(&spec, self.pkgs)?.clone();
            let dep = self.instantiate(&dep_def)?;
            let (hash, out) = dep.derivation_hash()?;
            if names.insert(spec.name.clone(), out.name()).is_some() {
                return Err(template_err(format!("dependency name {} is ambiguous", spec.name)));
            }
            drv = drv.with_input(InputRef {
                derivation_hash: hash,
                label: dep.label(),
            });
        }
        for step in &def.steps {
            let mut failure = None;
            let expanded = step.map_strings(|s| match expand(s, &names) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    String::new()
                }
            });
            if let Some(e) = failure {
                return Err(template_err(e));
            }
            drv = drv.with_step(expanded);
        }
        drv.validate()?;
        Ok(drv)
    }

    /// Every derivation lowered so far, keyed by `name@version`.
    pub fn derivations(&self) -> &BTreeMap<String, Derivation> {
        &self.done
    }
}

fn expand(s: &str, names: &BTreeMap<String, String>) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find("@{") {
        out.push_str(&rest[..i]);
        let after = &rest[i + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| format!("unterminated placeholder in {s:?}"))?;
        let key = &after[..end];
        let value = names
            .get(key)
            .ok_or_else(|| format!("placeholder @{{{key}}} names neither the source nor a dependency"))?;
        out.push_str(value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn instantiate(def: &PackageDef, pkgs: &PackageSet) -> Result<Derivation, ManifestError> {
    Instantiator::new(pkgs).instantiate(def)
}

/// Lowers `defs` and records every resulting derivation in `store`.
/// Returns the derivations for `defs`, in order.
pub fn lower(store: &Store, defs: &[PackageDef], pkgs: &PackageSet) -> Result<Vec<Derivation>, ManifestError> {
    let mut inst = Instantiator::new(pkgs);
    let roots = defs
        .iter()
        .map(|d| inst.instantiate(d))
        .collect::<Result<Vec<_>, _>>()?;
    for d in inst.derivations().values() {
        store.put_derivation(d)?;
    }
    Ok(roots)
}

/// Redirects dependencies on the names in `replacements` throughout the
/// graph reachable from `root`. Definitions outside that graph are left as
/// they are; `pkgs` itself is not modified.
pub fn rewrite_inputs(
    root: &Spec,
    replacements: &BTreeMap<String, Spec>,
    pkgs: &PackageSet,
) -> Result<PackageSet, ManifestError> {
    for target in replacements.values() {
        resolve_spec(target, pkgs)?;
    }
    for start in replacements.keys() {
        let mut path = vec![start.clone()];
        let mut cur = start;
        while let Some(next) = replacements.get(cur).map(|s| &s.name).filter(|n| *n != cur) {
            if path.contains(next) {
                path.push(next.clone());
                return Err(ManifestError::ReplacementCycle(path));
            }
            path.push(next.clone());
            cur = next;
        }
    }
    let mut out = pkgs.clone();
    let root_key = resolve_spec(root, pkgs)?.key();
    let mut rw = Rewriter {
        replacements,
        out: &mut out,
        visited: BTreeSet::new(),
        stack: Vec::new(),
    };
    rw.visit(&root_key, false)?;
    Ok(out)
}

struct Rewriter<'a> {
    replacements: &'a BTreeMap<String, Spec>,
    out: &'a mut PackageSet,
    visited: BTreeSet<String>,
    /// Keys on the current path, each with whether it was reached through
    /// a rewritten edge.
    stack: Vec<(String, bool)>,
}

impl Rewriter<'_> {
    fn visit(&mut self, key: &str, via_rewrite: bool) -> Result<(), ManifestError> {
        if let Some(i) = self.stack.iter().position(|(k, _)| k == key) {
            let mut names: Vec<String> = self.stack[i..].iter().map(|(k, _)| k.clone()).collect();
            names.push(key.to_string());
            let rewritten = via_rewrite || self.stack[i + 1..].iter().any(|(_, r)| *r);
            return Err(if rewritten {
                ManifestError::ReplacementCycle(names)
            } else {
                ManifestError::DependencyCycle(names)
            });
        }
        if !self.visited.insert(key.to_string()) {
            return Ok(());
        }
        self.stack.push((key.to_string(), via_rewrite));
        let mut def = self.out[key].clone();
        let mut edges = Vec::new();
        let mut renames = BTreeMap::new();
        for dep in def.deps.iter_mut() {
            let spec = parse_spec(dep)?;
            let changed = self.replacements.contains_key(&spec.name);
            let rewritten = match self.replacements.get(&spec.name) {
                Some(target) => {
                    *dep = target.to_string();
                    if target.name != spec.name {
                        renames.insert(spec.name.clone(), target.name.clone());
                    }
                    target.clone()
                }
                None => spec,
            };
            let target_key = resolve_spec(&rewritten, self.out)?.key();
            edges.push((target_key, changed));
        }
        // Placeholders follow their dependency to its replacement.
        if !renames.is_empty() {
            def.steps = def
                .steps
                .iter()
                .map(|step| step.map_strings(|s| rename_placeholders(s, &renames)))
                .collect();
        }
        self.out.insert(key.to_string(), def);
        for (k, changed) in edges {
            self.visit(&k, changed)?;
        }
        self.stack.pop();
        Ok(())
    }
}

/// Replaces `@{old}` with `@{new}` for each entry of `renames`, in one pass.
fn rename_placeholders(s: &str, renames: &BTreeMap<String, String>) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find("@{") {
        out.push_str(&rest[..i]);
        let after = &rest[i + 2..];
        match after.find('}') {
            Some(j) => {
                let name = &after[..j];
                out.push_str("@{");
                out.push_str(renames.get(name).map_or(name, String::as_str));
                out.push('}');
                rest = &after[j + 1..];
            }
            None => {
                out.push_str(&rest[i..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// Derivation hashes of every package in `pkgs`, keyed by `name@version`.
pub fn derivation_hashes(pkgs: &PackageSet) -> Result<BTreeMap<String, ContentHash>, ManifestError> {
    let mut inst = Instantiator::new(pkgs);
    let mut out = BTreeMap::new();
    for (key, def) in pkgs {
        out.insert(key.clone(), inst.instantiate(def)?.hash()?);
    }
    Ok(out)
}
