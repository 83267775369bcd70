//! A small package channel for tests: one bootstrap seed, a toolchain
//! built from it, a libc, a BLAS diamond and a few applications.
//!
//! The seed's tools only use `/bin/sh` builtins, since builds see no PATH
//! beyond their inputs.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use microfold::bootstrap::{self, SeedRecord};
use microfold::carc::Tree;
use microfold::channel::{ChannelRevision, PackageDef, Repo};
use microfold::derivation::{BuildStep, Derivation, SourceRef};
use microfold::store::{Content, Store, StoreError, StorePath};

pub mod carc_cases;

pub const SEED_LABEL: &str = "bootstrap-tools-0";

const CC: &str = r#"#!/bin/sh
# cc SRC DST: wrap SRC into a runnable program at DST
src=$1
dst=$2
{
  printf '#!/bin/sh\n# built by bootstrap cc\n'
  while IFS= read -r line || [ -n "$line" ]; do
    printf 'echo %s\n' "$line"
  done < "$src"
} > "$dst"
"#;

const AR: &str = r#"#!/bin/sh
# ar DST SRC...: concatenate sources into a library image
dst=$1
shift
: > "$dst"
for f in "$@"; do
  printf '[%s]\n' "${f##*/}" >> "$dst"
  while IFS= read -r line || [ -n "$line" ]; do
    printf '%s\n' "$line" >> "$dst"
  done < "$f"
done
"#;

const NOISE: &str = r#"#!/bin/sh
# noise DST: write something different on every run
printf '%s %s\n' "$$" "$(/bin/date +%s%N 2>/dev/null)" > "$1"
"#;

/// The seed: `bin/cc`, `bin/ar` and `bin/noise`.
pub fn seed_tree() -> Tree {
    Tree::dir([(
        "bin",
        Tree::dir([
            ("ar", Tree::executable(AR)),
            ("cc", Tree::executable(CC)),
            ("noise", Tree::executable(NOISE)),
        ]),
    )])
}

pub fn seed_path() -> StorePath {
    StorePath::new(&seed_tree().hash(), SEED_LABEL).expect("valid label")
}

pub fn install_seed(store: &Store) -> Result<SeedRecord, StoreError> {
    bootstrap::register_seed(
        store,
        Content::Tree(&seed_tree()),
        SEED_LABEL,
        "shell-script compiler, archiver and a nondeterministic tool",
    )
}

/// Where package sources come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourceMode {
    /// Carried inside the package definitions.
    Inline,
    /// Files under this directory, fetched through `file://` URLs.
    Upstream(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Release {
    /// First revision.
    R1,
    /// Later revision: newer python and hello.
    R2,
}

struct Spec {
    name: &'static str,
    version: &'static str,
    synopsis: &'static str,
    deps: &'static [&'static str],
    kind: Kind,
}

#[derive(Clone, Copy)]
enum Kind {
    Toolchain,
    Library,
    Program,
}

fn specs(release: Release) -> Vec<Spec> {
    let (python, hello) = match release {
        Release::R1 => ("3.9", "2.10"),
        Release::R2 => ("3.10", "2.12"),
    };
    vec![
        Spec { name: "toolchain", version: "1.0", synopsis: "compiler driver from the seed", deps: &[], kind: Kind::Toolchain },
        Spec { name: "libc", version: "2.31", synopsis: "C library", deps: &["toolchain"], kind: Kind::Library },
        Spec { name: "openblas", version: "0.3.13", synopsis: "BLAS implementation", deps: &["toolchain", "libc"], kind: Kind::Library },
        Spec { name: "blis", version: "0.8.1", synopsis: "alternative BLAS", deps: &["toolchain", "libc"], kind: Kind::Library },
        Spec { name: "lapack", version: "3.9.0", synopsis: "linear algebra", deps: &["toolchain", "openblas"], kind: Kind::Library },
        Spec { name: "python", version: python, synopsis: "interpreter", deps: &["toolchain", "libc"], kind: Kind::Program },
        Spec { name: "python-numpy", version: "1.20.2", synopsis: "arrays", deps: &["toolchain", "python", "openblas"], kind: Kind::Library },
        Spec { name: "python-scipy", version: "1.6.0", synopsis: "scientific library", deps: &["toolchain", "python", "python-numpy", "lapack"], kind: Kind::Library },
        Spec { name: "hello", version: hello, synopsis: "greeter", deps: &["toolchain", "libc"], kind: Kind::Program },
    ]
}

fn source_text(name: &str, version: &str) -> String {
    format!("{name} {version}\nsource for {name}\n")
}

fn source_label(name: &str, version: &str) -> String {
    format!("{name}-{version}-source")
}

/// Writes the upstream source files for `release` into `dir`.
pub fn write_upstream(dir: &Path, release: Release) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    for s in specs(release) {
        if !matches!(s.kind, Kind::Toolchain) {
            fs::write(dir.join(format!("{}-{}.txt", s.name, s.version)), source_text(s.name, s.version))?;
        }
    }
    Ok(())
}

fn str_step(f: fn(String, String) -> BuildStep, a: &str, b: &str) -> BuildStep {
    f(a.to_string(), b.to_string())
}

fn copy(src: &str, dst: &str) -> BuildStep {
    str_step(|src, dst| BuildStep::Copy { src, dst }, src, dst)
}

fn write(path: &str, contents: &str) -> BuildStep {
    str_step(|path, contents| BuildStep::Write { path, contents }, path, contents)
}

fn exec(program: &str, args: &[&str]) -> BuildStep {
    BuildStep::Exec {
        program: program.to_string(),
        args: args.iter().map(|a| a.to_string()).collect(),
    }
}

fn define(s: &Spec, mode: &SourceMode) -> PackageDef {
    let mut def = PackageDef::new(s.name, s.version).synopsis(s.synopsis);
    for d in s.deps {
        def = def.dep(*d);
    }
    if let Kind::Toolchain = s.kind {
        let seed = seed_path();
        return def
            .step(BuildStep::Mkdir { path: "bin".into() })
            .step(copy(&format!("{seed}/bin/cc"), "bin/cc"))
            .step(copy(&format!("{seed}/bin/ar"), "bin/ar"))
            .step(write("share/toolchain/VERSION", "1.0\n"));
    }
    let text = source_text(s.name, s.version);
    def = match mode {
        SourceMode::Inline => def.inline_source(text),
        SourceMode::Upstream(dir) => def.url_source(SourceRef {
            url: format!("file://{}", dir.join(format!("{}-{}.txt", s.name, s.version)).display()),
            expected_hash: Tree::file(text.as_bytes()).hash(),
            label: source_label(s.name, s.version),
        }),
    };
    let share = format!("share/{}", s.name);
    let src = format!("{share}/source");
    def = def.step(copy("@{source}", &src));
    let deps_file: String = s
        .deps
        .iter()
        .filter(|d| **d != "toolchain")
        .map(|d| format!("@{{{d}}}\n"))
        .collect();
    if !deps_file.is_empty() {
        def = def.step(write(&format!("{share}/deps"), &deps_file));
    }
    match s.kind {
        Kind::Library => {
            let lib = format!("lib/lib{}.so", s.name.trim_start_matches("python-"));
            def.step(BuildStep::Mkdir { path: "lib".into() })
                .step(exec("@{toolchain}/bin/ar", &[&format!("out/{lib}"), &format!("out/{src}")]))
        }
        Kind::Program => {
            let bin = format!("bin/{}", s.name);
            def.step(BuildStep::Mkdir { path: "bin".into() })
                .step(exec("@{toolchain}/bin/cc", &[&format!("out/{src}"), &format!("out/{bin}")]))
                .step(BuildStep::SetExec { path: bin })
        }
        Kind::Toolchain => unreachable!(),
    }
}

/// Package definitions of `release`.
pub fn packages(release: Release, mode: &SourceMode) -> Vec<PackageDef> {
    specs(release).iter().map(|s| define(s, mode)).collect()
}

/// Names of every fixture package.
pub fn package_names() -> Vec<&'static str> {
    specs(Release::R1).iter().map(|s| s.name).collect()
}

/// Direct dependencies by name, for brute-force graph checks.
pub fn dependency_graph() -> BTreeMap<&'static str, Vec<&'static str>> {
    specs(Release::R1).iter().map(|s| (s.name, s.deps.to_vec())).collect()
}

/// A channel repository holding R1 then R2, with HEAD at R2.
pub fn make_channel(repo_dir: &Path, url: &str, mode: &SourceMode) -> Result<(Repo, ChannelRevision, ChannelRevision), microfold::channel::ChannelError> {
    let repo = Repo::open(repo_dir)?;
    repo.set_url(url)?;
    let r1 = repo.commit(packages(Release::R1, mode), None, "initial package set")?;
    let r2 = repo.commit(packages(Release::R2, mode), Some(r1.id), "update python and hello")?;
    Ok((repo, r1, r2))
}

/// A manifest of the three scientific-python packages.
pub const MANIFEST: &str = "(specifications->manifest\n '(\"python\" \"python-scipy\" \"python-numpy\"))\n";

/// A derivation whose output differs on every build.
pub fn nondeterministic() -> Derivation {
    Derivation::new("noisy", "1.0").with_step(exec(&format!("{}/bin/noise", seed_path()), &["out/stamp"]))
}
