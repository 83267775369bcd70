//! Profiles: union trees of built packages, recorded as numbered
//! generations with the pin and manifest that produced them.
//!
//! ```text
//! <profile>/current                     active generation number
//! <profile>/generations/<n>/tree        symlink to the union store item
//! <profile>/generations/<n>/channels.scm
//! <profile>/generations/<n>/manifest.scm
//! <profile>/generations/<n>/hashes.txt  "<drv hash> <label>" lines, sorted
//! <profile>/generations/<n>/created     wall-clock time, display only
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::os::unix::ffi::OsStrExt;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::carc::Tree;
use crate::derivation::{BuildError, Builder, Derivation, DerivationError};
use crate::fsutil;
use crate::hash::ContentHash;
use crate::store::{Content, ItemKind, NewItem, Store, StoreError, StorePath};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profile collision at {path}: provided by both {first} and {second}")]
    ProfileCollision {
        path: String,
        first: StorePath,
        second: StorePath,
    },
    #[error("unknown generation {0}")]
    UnknownGeneration(u64),
    #[error("profile has no generations")]
    NoGeneration,
    #[error("corrupt profile: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl From<DerivationError> for ProfileError {
    fn from(e: DerivationError) -> Self {
        ProfileError::Build(e.into())
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ProfileError + '_ {
    move |source| ProfileError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// What a generation was made from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    pub channels: String,
    pub manifest: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub number: u64,
    pub tree: StorePath,
    pub provenance: Provenance,
    /// `<derivation hash> <label>` lines, sorted.
    pub hashes: Vec<String>,
    /// Seconds since the epoch; display only.
    pub created_at: u64,
}

impl Generation {
    /// Labels of the member packages, in sorted order.
    pub fn roots(&self) -> Vec<&str> {
        let mut labels: Vec<&str> = self
            .hashes
            .iter()
            .filter_map(|l| l.split_once(' ').map(|(_, label)| label))
            .collect();
        labels.sort_unstable();
        labels
    }
}

#[derive(Debug, Clone)]
pub struct Profile {
    root: PathBuf,
}

impl Profile {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ProfileError> {
        let root = root.into();
        let g = root.join("generations");
        fs::create_dir_all(&g).map_err(io_err(&g))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn gen_dir(&self, n: u64) -> PathBuf {
        self.root.join("generations").join(n.to_string())
    }

    fn lock(&self) -> Result<fsutil::LockGuard, ProfileError> {
        let p = self.root.join("lock");
        fsutil::lock_file(&p).map_err(io_err(&p))
    }

    /// Generation numbers, ascending.
    pub fn generations(&self) -> Result<Vec<u64>, ProfileError> {
        let dir = self.root.join("generations");
        let mut out = Vec::new();
        for e in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let e = e.map_err(io_err(&dir))?;
            if let Some(n) = e.file_name().to_str().and_then(|s| s.parse().ok()) {
                out.push(n);
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn current(&self) -> Result<Option<u64>, ProfileError> {
        let p = self.root.join("current");
        match fs::read_to_string(&p) {
            Ok(s) => s
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| ProfileError::Corrupt(format!("{} does not hold a number", p.display()))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&p)(e)),
        }
    }

    pub fn generation(&self, n: u64) -> Result<Generation, ProfileError> {
        let dir = self.gen_dir(n);
        if !dir.is_dir() {
            return Err(ProfileError::UnknownGeneration(n));
        }
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(io_err(&p))
        };
        let link = dir.join("tree");
        let target = fs::read_link(&link).map_err(io_err(&link))?;
        let tree = target
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| ProfileError::Corrupt(format!("{} is not a store item link", link.display())))?;
        Ok(Generation {
            number: n,
            tree,
            provenance: Provenance {
                channels: read("channels.scm")?,
                manifest: read("manifest.scm")?,
            },
            hashes: read("hashes.txt")?.lines().map(str::to_string).collect(),
            created_at: read("created")?.trim().parse().unwrap_or(0),
        })
    }

    pub fn current_generation(&self) -> Result<Generation, ProfileError> {
        let n = self.current()?.ok_or(ProfileError::NoGeneration)?;
        self.generation(n)
    }
}

enum Node {
    Dir(BTreeMap<Vec<u8>, Node>),
    Leaf {
        provider: StorePath,
        rel: String,
        hash: ContentHash,
    },
}

fn merge(
    into: &mut BTreeMap<Vec<u8>, Node>,
    provider: &StorePath,
    dir: &Path,
    rel: &str,
) -> Result<(), ProfileError> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .collect::<Result<_, _>>()
        .map_err(io_err(dir))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let name = e.file_name();
        let name_str = name.to_string_lossy();
        let child_rel = if rel.is_empty() {
            name_str.to_string()
        } else {
            format!("{rel}/{name_str}")
        };
        let path = e.path();
        let is_dir = fs::symlink_metadata(&path).map_err(io_err(&path))?.is_dir();
        let collision = |existing: &Node| match existing {
            Node::Leaf { provider: first, .. } => ProfileError::ProfileCollision {
                path: child_rel.clone(),
                first: first.clone(),
                second: provider.clone(),
            },
            Node::Dir(_) => ProfileError::ProfileCollision {
                path: child_rel.clone(),
                first: provider.clone(),
                second: provider.clone(),
            },
        };
        let key = name.as_bytes().to_vec();
        if is_dir {
            match into.entry(key).or_insert_with(|| Node::Dir(BTreeMap::new())) {
                Node::Dir(sub) => merge(sub, provider, &path, &child_rel)?,
                leaf => return Err(collision(leaf)),
            }
        } else {
            let hash = Tree::from_path(&path).map_err(StoreError::from)?.hash();
            match into.get(&key) {
                None => {
                    into.insert(
                        key,
                        Node::Leaf {
                            provider: provider.clone(),
                            rel: child_rel,
                            hash,
                        },
                    );
                }
                Some(Node::Leaf { hash: h, .. }) if *h == hash => {}
                Some(Node::Leaf { provider: first, .. }) => {
                    return Err(ProfileError::ProfileCollision {
                        path: child_rel,
                        first: first.clone(),
                        second: provider.clone(),
                    })
                }
                Some(Node::Dir(_)) => {
                    // A directory from an earlier member; find who owns it.
                    let first = first_provider(&into[&key]).unwrap_or_else(|| provider.clone());
                    return Err(ProfileError::ProfileCollision {
                        path: child_rel,
                        first,
                        second: provider.clone(),
                    });
                }
            }
        }
    }
    Ok(())
}

fn first_provider(node: &Node) -> Option<StorePath> {
    match node {
        Node::Leaf { provider, .. } => Some(provider.clone()),
        Node::Dir(m) => m.values().find_map(first_provider),
    }
}

/// Union entries become symlinks relative to the store's `items`
/// directory, so the union hashes the same in every store.
fn to_tree(node: &Node, depth: usize) -> Tree {
    match node {
        Node::Dir(m) => Tree::Directory(m.iter().map(|(k, v)| (k.clone(), to_tree(v, depth + 1))).collect()),
        Node::Leaf { provider, rel, .. } => Tree::symlink(format!("{}{provider}/{rel}", "../".repeat(depth))),
    }
}

/// Registers the union of `members`' outputs as a store item.
pub fn union_tree(store: &Store, members: &[StorePath]) -> Result<StorePath, ProfileError> {
    let mut root = BTreeMap::new();
    for m in members {
        merge(&mut root, m, &store.item_path(m), "")?;
    }
    let tree = to_tree(&Node::Dir(root), 0);
    let meta = NewItem {
        kind: ItemKind::Fixed,
        references: members.to_vec(),
        ..NewItem::fixed()
    };
    Ok(store.add_content(Content::Tree(&tree), "profile", meta)?.path)
}

/// Builds `drvs`, unions their outputs and appends a new generation,
/// which becomes the active one.
pub fn build_profile(
    builder: &Builder<'_>,
    drvs: &[Derivation],
    profile: &Profile,
    provenance: Provenance,
) -> Result<Generation, ProfileError> {
    let store = builder.store();
    let members = builder.build_all(drvs)?;
    let tree = union_tree(store, &members)?;
    let mut hashes: Vec<String> = drvs
        .iter()
        .map(|d| Ok(format!("{} {}", d.hash()?, d.label())))
        .collect::<Result<_, DerivationError>>()?;
    hashes.sort();
    hashes.dedup();

    let _guard = profile.lock()?;
    let number = profile.generations()?.last().map_or(1, |n| n + 1);
    let dir = profile.gen_dir(number);
    let staging = profile.root.join(format!(".staging-{number}"));
    fsutil::remove_any(&staging).map_err(io_err(&staging))?;
    fs::create_dir_all(&staging).map_err(io_err(&staging))?;
    let created_at = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let files = [
        ("channels.scm", provenance.channels.clone()),
        ("manifest.scm", provenance.manifest.clone()),
        ("hashes.txt", hashes.iter().map(|l| format!("{l}\n")).collect()),
        ("created", format!("{created_at}\n")),
    ];
    for (name, text) in files {
        let p = staging.join(name);
        fs::write(&p, text).map_err(io_err(&p))?;
    }
    let link = staging.join("tree");
    std::os::unix::fs::symlink(store.item_path(&tree), &link).map_err(io_err(&link))?;
    fs::rename(&staging, &dir).map_err(io_err(&dir))?;
    let current = profile.root.join("current");
    fsutil::write_atomic(&current, format!("{number}\n").as_bytes()).map_err(io_err(&current))?;
    Ok(Generation {
        number,
        tree,
        provenance,
        hashes,
        created_at,
    })
}

/// Makes generation `to` the active one. Nothing else changes.
pub fn rollback(profile: &Profile, to: u64) -> Result<Generation, ProfileError> {
    let _guard = profile.lock()?;
    let generation = profile.generation(to)?;
    if profile.current()? != Some(to) {
        let current = profile.root.join("current");
        fsutil::write_atomic(&current, format!("{to}\n").as_bytes()).map_err(io_err(&current))?;
    }
    Ok(generation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derivation::BuildStep;

    fn pkg(name: &str, files: &[(&str, &str)]) -> Derivation {
        let mut d = Derivation::new(name, "1");
        for (p, c) in files {
            d = d.with_step(BuildStep::Write {
                path: (*p).into(),
                contents: (*c).into(),
            });
        }
        d
    }

    fn setup() -> (tempfile::TempDir, Store, Profile) {
        let tmp = tempfile::tempdir().unwrap();
        let store = Store::open(tmp.path().join("store")).unwrap();
        let profile = Profile::open(tmp.path().join("profile")).unwrap();
        (tmp, store, profile)
    }

    #[test]
    fn union_and_generations() {
        let (_t, store, profile) = setup();
        let b = Builder::new(&store);
        let x = pkg("x", &[("bin/x", "X"), ("share/doc/README", "same")]);
        let y = pkg("y", &[("bin/y", "Y"), ("share/doc/README", "same")]);
        let g1 = build_profile(&b, &[x.clone(), y.clone()], &profile, Provenance::default()).unwrap();
        assert_eq!(g1.number, 1);
        let root = store.item_path(&g1.tree);
        assert_eq!(fs::read_to_string(root.join("bin/x")).unwrap(), "X");
        assert_eq!(fs::read_to_string(root.join("bin/y")).unwrap(), "Y");
        assert_eq!(fs::read_to_string(root.join("share/doc/README")).unwrap(), "same");
        assert!(fs::read_link(root.join("bin/x")).unwrap().starts_with("../../"));
        assert_eq!(store.require_record(&g1.tree).unwrap().references.len(), 2);
        assert_eq!(g1.roots(), ["x-1", "y-1"]);

        let g2 = build_profile(&b, &[x], &profile, Provenance::default()).unwrap();
        assert_eq!(g2.number, 2);
        assert_eq!(profile.current().unwrap(), Some(2));
        let back = rollback(&profile, 1).unwrap();
        assert_eq!(back.tree, g1.tree);
        assert_eq!(profile.current().unwrap(), Some(1));
        assert_eq!(profile.generations().unwrap(), vec![1, 2]);
        rollback(&profile, 1).unwrap();
        assert_eq!(profile.current().unwrap(), Some(1));
        assert!(matches!(rollback(&profile, 99), Err(ProfileError::UnknownGeneration(99))));
    }

    #[test]
    fn union_hash_is_store_independent() {
        let (_t1, s1, p1) = setup();
        let (_t2, s2, p2) = setup();
        let drvs = [pkg("x", &[("bin/x", "X")]), pkg("y", &[("lib/y", "Y")])];
        let g1 = build_profile(&Builder::new(&s1), &drvs, &p1, Provenance::default()).unwrap();
        let g2 = build_profile(&Builder::new(&s2), &drvs, &p2, Provenance::default()).unwrap();
        assert_eq!(g1.tree, g2.tree);
        assert_eq!(
            s1.require_record(&g1.tree).unwrap().output_hash,
            s2.require_record(&g2.tree).unwrap().output_hash
        );
    }

    #[test]
    fn collision_names_both_providers() {
        let (_t, store, profile) = setup();
        let b = Builder::new(&store);
        let x = pkg("x", &[("bin/tool", "one")]);
        let y = pkg("y", &[("bin/tool", "two")]);
        match build_profile(&b, &[x.clone(), y.clone()], &profile, Provenance::default()) {
            Err(ProfileError::ProfileCollision { path, first, second }) => {
                assert_eq!(path, "bin/tool");
                assert_eq!(first, x.output_path().unwrap());
                assert_eq!(second, y.output_path().unwrap());
            }
            other => panic!("{other:?}"),
        }
        assert!(profile.generations().unwrap().is_empty());
        let z = pkg("z", &[("bin", "a file where x has a directory")]);
        assert!(matches!(
            build_profile(&b, &[x, z], &profile, Provenance::default()),
            Err(ProfileError::ProfileCollision { .. })
        ));
    }
}
