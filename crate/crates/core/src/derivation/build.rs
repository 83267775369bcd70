use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Component, Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;

use thiserror::Error;

use super::{split_store_ref, BuildStep, Derivation, DerivationError};
use crate::archive::{self, Archive, FetchError};
use crate::carc::{self, Tree};
use crate::hash::{ContentHash, DIGEST_PREFIX_LEN};
use crate::store::{ItemKind, NewItem, Store, StoreError, StorePath};
use crate::substitute::{self, SubstituteError};
use crate::transport::Location;

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("{drv}: step {index} failed: {detail}")]
    StepFailure {
        drv: String,
        index: usize,
        detail: String,
    },
    #[error(transparent)]
    MissingSource(#[from] FetchError),
    #[error("{drv}: step {index} uses {reference}, which is outside the input closure and not a registered seed")]
    EscapedClosure {
        drv: String,
        index: usize,
        reference: String,
    },
    #[error("output collision at {path}: registered {existing}, rebuilt {new}")]
    OutputCollision {
        path: StorePath,
        existing: ContentHash,
        new: ContentHash,
    },
    #[error("input derivation {0} is not known to the store")]
    MissingInput(ContentHash),
    #[error("check needs at least 2 rounds, got {0}")]
    InvalidRounds(usize),
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<BuildError>,
    },
    #[error(transparent)]
    Derivation(DerivationError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Substitute(Box<SubstituteError>),
}

impl From<DerivationError> for BuildError {
    fn from(e: DerivationError) -> Self {
        match e {
            DerivationError::Unknown(h) => BuildError::MissingInput(h),
            DerivationError::Store(s) => BuildError::Store(s),
            other => BuildError::Derivation(other),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub use_substitutes: bool,
    pub archive_fallback: bool,
    /// Upper bound on derivations built concurrently.
    pub jobs: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            use_substitutes: true,
            archive_fallback: true,
            jobs: std::thread::available_parallelism().map_or(1, |n| n.get().min(4)),
        }
    }
}

/// Result of building one derivation several times in isolation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RebuildReport {
    pub derivation: ContentHash,
    pub output: StorePath,
    pub hashes: Vec<ContentHash>,
}

impl RebuildReport {
    pub fn is_deterministic(&self) -> bool {
        self.hashes.windows(2).all(|w| w[0] == w[1])
    }

    pub fn distinct(&self) -> BTreeSet<ContentHash> {
        self.hashes.iter().copied().collect()
    }

    pub fn render(&self) -> String {
        let mut out = format!("{}\n", self.output);
        for (i, h) in self.hashes.iter().enumerate() {
            out.push_str(&format!("  round {}: {h}\n", i + 1));
        }
        out.push_str(if self.is_deterministic() {
            "  verdict: deterministic\n"
        } else {
            "  verdict: nondeterministic\n"
        });
        out
    }
}

/// Realises derivations in a store.
pub struct Builder<'a> {
    store: &'a Store,
    options: BuildOptions,
    caches: Vec<Location>,
    archive: Option<Archive>,
    warnings: Mutex<Vec<String>>,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a Store) -> Self {
        Self {
            store,
            options: BuildOptions::default(),
            caches: Vec::new(),
            archive: None,
            warnings: Mutex::new(Vec::new()),
        }
    }

    pub fn with_options(mut self, options: BuildOptions) -> Self {
        self.options = options;
        self
    }

    pub fn with_caches(mut self, caches: Vec<Location>) -> Self {
        self.caches = caches;
        self
    }

    pub fn with_archive(mut self, archive: Option<Archive>) -> Self {
        self.archive = archive;
        self
    }

    pub fn store(&self) -> &Store {
        self.store
    }

    pub fn options(&self) -> &BuildOptions {
        &self.options
    }

    /// Warnings accumulated so far (skipped caches, fallbacks).
    pub fn warnings(&self) -> Vec<String> {
        self.warnings.lock().unwrap().clone()
    }

    fn warn(&self, w: String) {
        log::warn!("{w}");
        self.warnings.lock().unwrap().push(w);
    }

    /// Builds `drv`, ensuring all of its inputs first.
    ///
    /// Input derivations must already be recorded in the store (see
    /// [`Store::put_derivation`]).
    pub fn build(&self, drv: &Derivation) -> Result<StorePath, BuildError> {
        Ok(self.build_all(std::slice::from_ref(drv))?.remove(0))
    }

    /// Builds several derivations, sharing common inputs. Independent
    /// derivations build concurrently, up to `jobs` at a time.
    pub fn build_all(&self, drvs: &[Derivation]) -> Result<Vec<StorePath>, BuildError> {
        let mut graph: BTreeMap<ContentHash, Derivation> = BTreeMap::new();
        for drv in drvs {
            self.store.put_derivation(drv)?;
            for (h, d) in self.store.derivation_graph(drv)? {
                graph.insert(h, d);
            }
        }
        let needed = self.plan(drvs, &graph)?;
        let mut remaining: BTreeMap<ContentHash, BTreeSet<ContentHash>> = graph
            .iter()
            .filter(|(h, _)| needed.contains(*h))
            .map(|(h, d)| {
                let deps = d
                    .inputs
                    .iter()
                    .map(|i| i.derivation_hash)
                    .filter(|i| needed.contains(i))
                    .collect();
                (*h, deps)
            })
            .collect();
        while !remaining.is_empty() {
            let wave: Vec<ContentHash> = remaining
                .iter()
                .filter(|(_, deps)| deps.is_empty())
                .map(|(h, _)| *h)
                .collect();
            assert!(!wave.is_empty(), "derivation graph is acyclic by construction");
            self.run_wave(&wave, &graph)?;
            for h in &wave {
                remaining.remove(h);
            }
            for deps in remaining.values_mut() {
                for h in &wave {
                    deps.remove(h);
                }
            }
        }
        drvs.iter()
            .map(|d| Ok(d.output_path()?))
            .collect()
    }

    /// The derivations that must be realised to produce `drvs`. Inputs of
    /// an output that is already present, or that a cache advertises, are
    /// left out; they are only needed if that output has to be built.
    fn plan(&self, drvs: &[Derivation], graph: &BTreeMap<ContentHash, Derivation>) -> Result<BTreeSet<ContentHash>, BuildError> {
        let mut needed = BTreeSet::new();
        let mut todo: Vec<ContentHash> = drvs.iter().map(|d| d.hash()).collect::<Result<_, _>>()?;
        while let Some(h) = todo.pop() {
            if !needed.insert(h) {
                continue;
            }
            let drv = &graph[&h];
            let out = drv.output_path()?;
            if self.store.contains(&out) || self.advertised(&out) {
                continue;
            }
            todo.extend(drv.inputs.iter().map(|i| i.derivation_hash));
        }
        Ok(needed)
    }

    fn advertised(&self, path: &StorePath) -> bool {
        self.options.use_substitutes
            && self
                .caches
                .iter()
                .any(|c| matches!(substitute::query(c, path), Ok(Some(_))))
    }

    fn run_wave(&self, wave: &[ContentHash], graph: &BTreeMap<ContentHash, Derivation>) -> Result<(), BuildError> {
        let workers = self.options.jobs.clamp(1, wave.len());
        if workers == 1 {
            for h in wave {
                self.realise(h, &graph[h])?;
            }
            return Ok(());
        }
        let queue = Mutex::new(wave.to_vec());
        let first_error: Mutex<Option<BuildError>> = Mutex::new(None);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if first_error.lock().unwrap().is_some() {
                        return;
                    }
                    let Some(h) = queue.lock().unwrap().pop() else {
                        return;
                    };
                    if let Err(e) = self.realise(&h, &graph[&h]) {
                        first_error.lock().unwrap().get_or_insert(e);
                    }
                });
            }
        });
        match first_error.into_inner().unwrap() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn realise(&self, hash: &ContentHash, drv: &Derivation) -> Result<StorePath, BuildError> {
        let out = drv.output_path()?;
        if self.store.contains(&out) {
            if self.store.verify_item(&out).is_ok() {
                return Ok(out);
            }
            let record = self.store.require_record(&out)?;
            return Err(StoreError::StoreCorruption {
                path: out,
                expected: record.output_hash,
                actual: "does not verify".into(),
            }
            .into());
        }
        if self.options.use_substitutes && !self.caches.is_empty() {
            match substitute::fetch_substitute(&out, &self.caches, self.store) {
                Ok(fetched) => {
                    for w in fetched.warnings {
                        self.warn(w);
                    }
                    return Ok(out);
                }
                Err(SubstituteError::NotFound(_)) => {}
                Err(e) => self.warn(format!("substitution of {out} failed ({e}); building from source")),
            }
            // Inputs were skipped when planning on the substitute.
            let mut inputs = Vec::new();
            for i in &drv.inputs {
                let dep = self.store.require_derivation(&i.derivation_hash)?;
                if !self.store.contains(&dep.output_path()?) {
                    inputs.push(dep);
                }
            }
            if !inputs.is_empty() {
                self.build_all(&inputs)?;
            }
        }
        self.build_one(hash, drv)
    }

    fn build_one(&self, hash: &ContentHash, drv: &Derivation) -> Result<StorePath, BuildError> {
        let out_path = drv.output_path()?;
        let label = drv.label();
        let archive = self.archive.as_ref().filter(|_| self.options.archive_fallback);

        let mut roots = Vec::new();
        for source in &drv.sources {
            roots.push(archive::fetch_source(source, self.store, archive)?);
        }
        let mut input_outputs = Vec::new();
        for input in &drv.inputs {
            let dep = self.store.require_derivation(&input.derivation_hash)?;
            let p = dep.output_path()?;
            if !self.store.contains(&p) {
                return Err(BuildError::MissingInput(input.derivation_hash));
            }
            input_outputs.push(p.clone());
            roots.push(p);
        }
        let mut visible: BTreeSet<StorePath> = self.store.closure_of(&roots)?.into_iter().collect();
        for (index, step) in drv.steps.iter().enumerate() {
            let reference = match step {
                BuildStep::Copy { src, .. } => src,
                BuildStep::Exec { program, .. } => program,
                _ => continue,
            };
            let (item, _) = split_store_ref(reference).map_err(|e| BuildError::StepFailure {
                drv: label.clone(),
                index,
                detail: e,
            })?;
            if visible.contains(&item) {
                continue;
            }
            match self.store.record(&item)? {
                Some(r) if r.kind == ItemKind::Seed => visible.extend(self.store.closure(&item)?),
                _ => {
                    return Err(BuildError::EscapedClosure {
                        drv: label,
                        index,
                        reference: reference.clone(),
                    })
                }
            }
        }

        let scratch = self.store.scratch_dir()?;
        let out_dir = scratch.path().join("out");
        let home = scratch.path().join("homeless");
        fs::create_dir(&out_dir).map_err(crate::store::io_err(&out_dir))?;
        fs::create_dir(&home).map_err(crate::store::io_err(&home))?;
        let path_var = input_outputs
            .iter()
            .map(|p| self.store.item_path(p).join("bin"))
            .filter(|b| b.is_dir())
            .map(|b| b.display().to_string())
            .collect::<Vec<_>>()
            .join(":");
        let ctx = StepContext {
            store: self.store,
            scratch: scratch.path(),
            out: &out_dir,
            home: &home,
            path_var,
            env: &drv.env,
        };
        for (index, step) in drv.steps.iter().enumerate() {
            ctx.run(step).map_err(|detail| BuildError::StepFailure {
                drv: label.clone(),
                index,
                detail,
            })?;
        }

        let bytes = carc::archive_path(&out_dir).map_err(StoreError::from)?;
        let references = scan_references(&bytes, &visible);
        let meta = NewItem {
            kind: ItemKind::Derived,
            references,
            deriver: Some(*hash),
            source: None,
            description: None,
        };
        match self.store.register_staged(&out_dir, &out_path, meta) {
            Ok(_) => Ok(out_path),
            Err(StoreError::HashConflict { path, existing, new }) => {
                Err(BuildError::OutputCollision { path, existing, new })
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Builds `drv` in a throwaway store seeded with whatever of its graph
    /// the main store already holds, returning the output hash. The main
    /// store is only read.
    pub fn isolated_build(&self, drv: &Derivation) -> Result<ContentHash, BuildError> {
        let scratch = self.store.scratch_dir()?;
        let sandbox = Store::open(scratch.path().join("store"))?;
        let root_hash = drv.hash()?;
        for (h, d) in self.store.derivation_graph(drv)? {
            sandbox.put_derivation(&d)?;
            let mut wanted = Vec::new();
            if h != root_hash {
                wanted.push(d.output_path()?);
            }
            for s in &d.sources {
                wanted.push(s.store_path()?);
            }
            for step in &d.steps {
                if let BuildStep::Copy { src: r, .. } | BuildStep::Exec { program: r, .. } = step {
                    if let Ok((item, _)) = split_store_ref(r) {
                        if matches!(self.store.record(&item)?, Some(rec) if rec.kind == ItemKind::Seed) {
                            wanted.push(item);
                        }
                    }
                }
            }
            for p in wanted {
                if self.store.contains(&p) && self.store.verify_item(&p).is_ok() {
                    sandbox.import_closure(self.store, &[p])?;
                }
            }
        }
        let sub = Builder {
            store: &sandbox,
            options: BuildOptions {
                use_substitutes: false,
                ..self.options.clone()
            },
            caches: Vec::new(),
            archive: self.archive.clone(),
            warnings: Mutex::new(Vec::new()),
        };
        let out = sub.build(drv)?;
        for w in sub.warnings() {
            self.warn(w);
        }
        Ok(sandbox.require_record(&out)?.output_hash)
    }

    /// Builds `drv` `rounds` times, each in a fresh scratch store, and
    /// compares the output hashes. Inputs are realised in the main store
    /// first; the derivation's own output never enters it.
    pub fn check_rebuild(&self, drv: &Derivation, rounds: usize) -> Result<RebuildReport, BuildError> {
        if rounds < 2 {
            return Err(BuildError::InvalidRounds(rounds));
        }
        let (hash, output) = drv.derivation_hash()?;
        self.store.put_derivation(drv)?;
        let inputs = drv
            .inputs
            .iter()
            .map(|i| self.store.require_derivation(&i.derivation_hash))
            .collect::<Result<Vec<_>, _>>()?;
        if !inputs.is_empty() {
            self.build_all(&inputs)?;
        }
        let mut hashes = Vec::with_capacity(rounds);
        for round in 0..rounds {
            let h = self.isolated_build(drv).map_err(|e| BuildError::Round {
                round: round + 1,
                source: Box::new(e),
            })?;
            hashes.push(h);
        }
        Ok(RebuildReport {
            derivation: hash,
            output,
            hashes,
        })
    }
}

/// Items of `candidates` whose digest prefix occurs anywhere in `bytes`.
fn scan_references(bytes: &[u8], candidates: &BTreeSet<StorePath>) -> Vec<StorePath> {
    let by_prefix: BTreeMap<&[u8], Vec<&StorePath>> =
        candidates.iter().fold(BTreeMap::new(), |mut m, p| {
            m.entry(p.digest_prefix().as_bytes()).or_insert_with(Vec::new).push(p);
            m
        });
    let mut found = HashSet::new();
    if bytes.len() >= DIGEST_PREFIX_LEN {
        for window in bytes.windows(DIGEST_PREFIX_LEN) {
            if let Some(ps) = by_prefix.get(window) {
                found.extend(ps.iter().copied());
            }
        }
    }
    let mut out: Vec<StorePath> = found.into_iter().cloned().collect();
    out.sort();
    out
}

struct StepContext<'a> {
    store: &'a Store,
    scratch: &'a Path,
    out: &'a Path,
    home: &'a Path,
    path_var: String,
    env: &'a BTreeMap<String, String>,
}

impl StepContext<'_> {
    /// Resolves an output-relative path, refusing to traverse symlinks.
    fn out_path(&self, rel: &str) -> Result<PathBuf, String> {
        let mut p = self.out.to_path_buf();
        for comp in Path::new(rel).components() {
            match comp {
                Component::Normal(c) => {
                    if fs::symlink_metadata(&p).is_ok_and(|m| m.file_type().is_symlink()) {
                        return Err(format!("{rel}: path traverses a symlink"));
                    }
                    p.push(c);
                }
                _ => return Err(format!("{rel}: not a plain relative path")),
            }
        }
        Ok(p)
    }

    fn store_ref(&self, reference: &str) -> Result<PathBuf, String> {
        let (item, rest) = split_store_ref(reference)?;
        let mut p = self.store.item_path(&item);
        if let Some(rest) = rest {
            p.push(rest);
        }
        Ok(p)
    }

    fn run(&self, step: &BuildStep) -> Result<(), String> {
        let ctx = |e: std::io::Error| e.to_string();
        match step {
            BuildStep::Write { path, contents } => {
                let p = self.out_path(path)?;
                ensure_parent(&p)?;
                fsutil_write(&p, contents.as_bytes(), false)
            }
            BuildStep::Mkdir { path } => fs::create_dir_all(self.out_path(path)?).map_err(ctx),
            BuildStep::Copy { src, dst } => {
                let from = self.store_ref(src)?;
                let to = self.out_path(dst)?;
                if fs::symlink_metadata(&to).is_ok() {
                    return Err(format!("copy destination {dst} already exists"));
                }
                ensure_parent(&to)?;
                let tree = Tree::from_path(&from).map_err(|e| e.to_string())?;
                tree.materialize(&to).map_err(|e| e.to_string())
            }
            BuildStep::Concat { dst, srcs } => {
                let mut data = Vec::new();
                for s in srcs {
                    data.extend(fs::read(self.out_path(s)?).map_err(|e| format!("{s}: {e}"))?);
                }
                let p = self.out_path(dst)?;
                ensure_parent(&p)?;
                fsutil_write(&p, &data, false)
            }
            BuildStep::Substitute {
                path,
                pattern,
                replacement,
            } => {
                let p = self.out_path(path)?;
                let data = fs::read(&p).map_err(|e| format!("{path}: {e}"))?;
                let exec = fs::metadata(&p).map_err(ctx)?.permissions().mode() & 0o100 != 0;
                let replaced = replace_all(&data, pattern.as_bytes(), replacement.as_bytes());
                fsutil_write(&p, &replaced, exec)
            }
            BuildStep::SetExec { path } => {
                let p = self.out_path(path)?;
                let meta = fs::symlink_metadata(&p).map_err(|e| format!("{path}: {e}"))?;
                if !meta.is_file() {
                    return Err(format!("{path} is not a regular file"));
                }
                fs::set_permissions(&p, fs::Permissions::from_mode(0o755)).map_err(ctx)
            }
            BuildStep::Exec { program, args } => {
                let prog = self.store_ref(program)?;
                let mut cmd = Command::new(&prog);
                cmd.args(args)
                    .env_clear()
                    .envs(self.env)
                    .env("PATH", &self.path_var)
                    .env("SOURCE_DATE_EPOCH", "1")
                    .env("TZ", "UTC")
                    .env("LC_ALL", "C")
                    .env("HOME", self.home)
                    .current_dir(self.scratch)
                    .stdin(Stdio::null());
                let output = cmd.output().map_err(|e| format!("{program}: {e}"))?;
                if !output.status.success() {
                    let stderr = String::from_utf8_lossy(&output.stderr);
                    let tail: String = stderr.lines().rev().take(5).collect::<Vec<_>>().into_iter().rev().collect::<Vec<_>>().join("\n");
                    return Err(format!("{program} exited with {}: {tail}", output.status));
                }
                Ok(())
            }
        }
    }
}

fn ensure_parent(p: &Path) -> Result<(), String> {
    match p.parent() {
        Some(d) => fs::create_dir_all(d).map_err(|e| e.to_string()),
        None => Ok(()),
    }
}

fn fsutil_write(p: &Path, data: &[u8], exec: bool) -> Result<(), String> {
    if fs::symlink_metadata(p).is_ok_and(|m| m.file_type().is_symlink()) {
        return Err(format!("{} is a symlink", p.display()));
    }
    fs::write(p, data).map_err(|e| e.to_string())?;
    let mode = if exec { 0o755 } else { 0o644 };
    fs::set_permissions(p, fs::Permissions::from_mode(mode)).map_err(|e| e.to_string())
}

fn replace_all(data: &[u8], pattern: &[u8], replacement: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len());
    let mut i = 0;
    while i < data.len() {
        if data[i..].starts_with(pattern) {
            out.extend_from_slice(replacement);
            i += pattern.len();
        } else {
            out.push(data[i]);
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derivation::InputRef;
    use crate::store::Content;

    fn store() -> (tempfile::TempDir, Store) {
        let tmp = tempfile::tempdir().unwrap();
        let s = Store::open(tmp.path().join("store")).unwrap();
        (tmp, s)
    }

    fn hello() -> Derivation {
        Derivation::new("hello", "1.0").with_step(BuildStep::Write {
            path: "hello.txt".into(),
            contents: "hello".into(),
        })
    }

    #[test]
    fn replace_all_cases() {
        assert_eq!(replace_all(b"aXbXX", b"X", b"yy"), b"ayybyyyy");
        assert_eq!(replace_all(b"aaa", b"aa", b"b"), b"ba");
        assert_eq!(replace_all(b"", b"a", b"b"), b"");
    }

    #[test]
    fn write_step_output_matches_oracle() {
        let (_t, s) = store();
        let out = Builder::new(&s).build(&hello()).unwrap();
        let rec = s.require_record(&out).unwrap();
        // Oracle hash of the tree {hello.txt: "hello"} from tests/oracle/oracle.py.
        assert_eq!(
            rec.output_hash.to_hex(),
            "46f5930f2129696b55450351fb78f451bf38834abd6bea54f124f944ce7f884f"
        );
        assert_eq!(rec.kind, ItemKind::Derived);
        assert_eq!(rec.deriver, Some(hello().hash().unwrap()));
        assert!(s.verify_item(&out).is_ok());
    }

    #[test]
    fn deterministic_across_store_roots() {
        let (_t1, s1) = store();
        let (_t2, s2) = store();
        let a = Builder::new(&s1).build(&hello()).unwrap();
        let b = Builder::new(&s2).build(&hello()).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            s1.require_record(&a).unwrap().output_hash,
            s2.require_record(&b).unwrap().output_hash
        );
    }

    #[test]
    fn every_step_kind() {
        let (_t, s) = store();
        let dep = Derivation::new("dep", "1").with_step(BuildStep::Write {
            path: "share/data".into(),
            contents: "DATA".into(),
        });
        let dep_out = Builder::new(&s).build(&dep).unwrap();
        let drv = Derivation::new("all", "1")
            .with_input(InputRef {
                derivation_hash: dep.hash().unwrap(),
                label: "dep".into(),
            })
            .with_step(BuildStep::Mkdir { path: "bin".into() })
            .with_step(BuildStep::Copy {
                src: format!("{dep_out}/share/data"),
                dst: "copied".into(),
            })
            .with_step(BuildStep::Write { path: "a".into(), contents: "x-".into() })
            .with_step(BuildStep::Concat {
                dst: "joined".into(),
                srcs: vec!["a".into(), "copied".into()],
            })
            .with_step(BuildStep::Substitute {
                path: "joined".into(),
                pattern: "DATA".into(),
                replacement: format!("{dep_out}"),
            })
            .with_step(BuildStep::Write { path: "bin/run".into(), contents: "#!/bin/sh\n".into() })
            .with_step(BuildStep::SetExec { path: "bin/run".into() });
        let out = Builder::new(&s).build(&drv).unwrap();
        let tree = Tree::from_path(&s.item_path(&out)).unwrap();
        let expected = Tree::dir([
            ("a", Tree::file("x-")),
            ("bin", Tree::dir([("run", Tree::executable("#!/bin/sh\n"))])),
            ("copied", Tree::file("DATA")),
            ("joined", Tree::file(format!("x-{dep_out}"))),
        ]);
        assert_eq!(tree, expected);
        assert_eq!(s.require_record(&out).unwrap().references, vec![dep_out.clone()]);
        assert_eq!(s.closure(&out).unwrap(), vec![dep_out, out]);
    }

    #[test]
    fn exec_runs_with_scrubbed_environment() {
        let (_t, s) = store();
        let tool = Tree::dir([(
            "bin",
            Tree::dir([(
                "envdump",
                Tree::executable("#!/bin/sh\n/bin/mkdir -p out\n/usr/bin/env | LC_ALL=C /usr/bin/sort > out/env\npwd > out/cwd\n"),
            )]),
        )]);
        let seed = crate::bootstrap::register_seed(&s, Content::Tree(&tool), "envdump-1", "env dumper").unwrap();
        let drv = Derivation::new("env", "1")
            .with_env("GREETING", "hi")
            .with_step(BuildStep::Exec {
                program: format!("{}/bin/envdump", seed.path),
                args: vec![],
            });
        std::env::set_var("MICROFOLD_LEAK_CHECK", "1");
        let out = Builder::new(&s).build(&drv).unwrap();
        let env = fs::read_to_string(s.item_path(&out).join("env")).unwrap();
        let keys: Vec<&str> = env.lines().map(|l| l.split('=').next().unwrap()).filter(|k| *k != "PWD" && *k != "SHLVL" && *k != "_").collect();
        assert_eq!(keys, ["GREETING", "HOME", "LC_ALL", "PATH", "SOURCE_DATE_EPOCH", "TZ"]);
        assert!(env.contains("TZ=UTC\n") && env.contains("SOURCE_DATE_EPOCH=1\n") && env.contains("LC_ALL=C\n"));
        assert!(env.contains("/homeless\n"));
        assert!(!env.contains("MICROFOLD_LEAK_CHECK"));
    }

    #[test]
    fn escaped_closure_is_rejected() {
        let (_t, s) = store();
        let opaque = s
            .add_fixed(Content::Tree(&Tree::dir([("t", Tree::executable("#!/bin/sh\n"))])), "tool")
            .unwrap();
        let drv = Derivation::new("esc", "1").with_step(BuildStep::Exec {
            program: format!("{opaque}/t"),
            args: vec![],
        });
        assert!(matches!(
            Builder::new(&s).build(&drv),
            Err(BuildError::EscapedClosure { index: 0, .. })
        ));
        let copy = Derivation::new("esc", "2").with_step(BuildStep::Copy {
            src: format!("{opaque}/t"),
            dst: "t".into(),
        });
        assert!(matches!(Builder::new(&s).build(&copy), Err(BuildError::EscapedClosure { .. })));
    }

    #[test]
    fn step_failures_are_indexed() {
        let (_t, s) = store();
        let drv = Derivation::new("bad", "1")
            .with_step(BuildStep::Mkdir { path: "d".into() })
            .with_step(BuildStep::SetExec { path: "missing".into() });
        match Builder::new(&s).build(&drv) {
            Err(BuildError::StepFailure { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_input_derivation() {
        let (_t, s) = store();
        let drv = hello().with_input(InputRef {
            derivation_hash: ContentHash::of(b"nope"),
            label: "ghost".into(),
        });
        assert!(matches!(Builder::new(&s).build(&drv), Err(BuildError::MissingInput(_))));
    }

    #[test]
    fn output_collision_on_tampered_record() {
        let (_t, s) = store();
        let out = Builder::new(&s).build(&hello()).unwrap();
        // Replace the item with different content and re-record it, then
        // rebuild: the fresh output must not silently match.
        let mut rec = s.require_record(&out).unwrap();
        fs::write(s.item_path(&out).join("hello.txt"), "HELLO").unwrap();
        rec.output_hash = carc::hash_path(&s.item_path(&out)).unwrap().0;
        s.update_record(&rec).unwrap();
        let scratch = s.scratch_dir().unwrap();
        let staged = scratch.path().join("o");
        Tree::dir([("hello.txt", Tree::file("hello"))]).materialize(&staged).unwrap();
        assert!(matches!(
            s.register_staged(&staged, &out, NewItem::fixed()),
            Err(StoreError::HashConflict { .. })
        ));
    }

    #[test]
    fn check_rebuild_rounds() {
        let (_t, s) = store();
        let b = Builder::new(&s);
        let r = b.check_rebuild(&hello(), 3).unwrap();
        assert_eq!(r.hashes.len(), 3);
        assert!(r.is_deterministic());
        assert!(!s.contains(&r.output), "check must not register the output");
        assert!(matches!(b.check_rebuild(&hello(), 1), Err(BuildError::InvalidRounds(1))));
    }

    #[test]
    fn parallel_jobs_build_shared_inputs_once() {
        let (_t, s) = store();
        let base = Derivation::new("base", "1").with_step(BuildStep::Write { path: "b".into(), contents: "b".into() });
        s.put_derivation(&base).unwrap();
        let leaves: Vec<Derivation> = (0..6)
            .map(|i| {
                Derivation::new(format!("leaf{i}"), "1")
                    .with_input(InputRef { derivation_hash: base.hash().unwrap(), label: "base".into() })
                    .with_step(BuildStep::Write { path: "x".into(), contents: i.to_string() })
            })
            .collect();
        let b = Builder::new(&s).with_options(BuildOptions { jobs: 4, ..Default::default() });
        let outs = b.build_all(&leaves).unwrap();
        assert_eq!(outs.len(), 6);
        assert_eq!(s.list().unwrap().len(), 7);
    }
}
