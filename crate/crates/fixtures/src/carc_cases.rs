//! Canonical-archive test material: frozen golden vectors and random
//! tree generators with the mutations the hash must or must not notice.

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::Path;
use std::time::{Duration, SystemTime};

use microfold::carc::Tree;
use proptest::prelude::*;

// Frozen output of crates/core/tests/oracle/oracle.py: (name, tree, CARC bytes as hex, sha256).
pub fn golden() -> Vec<(&'static str, Tree, &'static str, &'static str)> {
    vec![
        (
            "empty_dir",
            Tree::empty_dir(),
            "63617263310a640a300a",
            "d14b30112c2b03819ebc5e95f5fbfe4daccb22e14a39414eff8aa6c036e3034f",
        ),
        (
            "dir_one_file",
            Tree::dir([("a", Tree::file("hi"))]),
            "63617263310a640a310a310a61660a320a6869",
            "16ac0bca0cea6c8af69bfebc2c48a668cab680b1ec8e642d4421ea27e1fb8361",
        ),
        (
            "single_file_hello",
            Tree::file("hello"),
            "63617263310a660a350a68656c6c6f",
            "8416ffe8d618b0d4f8663d2aa2372a68568eb66cade85a674d25fbb41f8c804b",
        ),
        (
            "single_exec_file",
            Tree::executable("#!/bin/sh\n"),
            "63617263310a780a31300a23212f62696e2f73680a",
            "4f9d3c87d6e5de1f436f31a2e23d2ca9f808bce0ab1a5f8388731daa8d5d8958",
        ),
        (
            "root_symlink",
            Tree::symlink("target/path"),
            "63617263310a6c0a31310a7461726765742f70617468",
            "e756723468c74b1aac049d3269027bf06ba493ab1554ad1c5ba14386dd131c6d",
        ),
        (
            "empty_file",
            Tree::file(""),
            "63617263310a660a300a",
            "491d80025db4eef69497feeb6a034da3adf78c118f0247a795c810e0dc13200c",
        ),
        (
            "sorted_names",
            Tree::dir([
                ("b", Tree::file("2")),
                ("a", Tree::file("1")),
                ("B", Tree::file("0")),
                ("a.txt", Tree::file("3")),
            ]),
            "63617263310a640a340a310a42660a310a30310a61660a310a31350a612e747874660a310a33310a62660a310a32",
            "261849b2aa5804f35fd2e2778637311d6ce099d1ecc971bac34145c7c07851cc",
        ),
        (
            "nested",
            Tree::dir([
                ("sub", Tree::dir([("x", Tree::executable("1"))])),
                ("link", Tree::symlink("sub/x")),
            ]),
            "63617263310a640a320a340a6c696e6b6c0a350a7375622f78330a737562640a310a310a78780a310a31",
            "65cac3767bea98775edb19a10cf3bf50553f1d1aac5f29f55c62642ba02925e5",
        ),
        (
            "empty_subdir_multiline",
            Tree::dir([("empty", Tree::empty_dir()), ("lines", Tree::file("line1\nline2\n"))]),
            "63617263310a640a320a350a656d707479640a300a350a6c696e6573660a31320a6c696e65310a6c696e65320a",
            "eb8cce49a8a73817d4f13beb8fc07990816e1caccc1cbc024e2b004fab792c08",
        ),
        (
            "utf8_name_binary",
            Tree::dir([("é", Tree::file(vec![0u8, 1, 2, 3, 0xff]))]),
            "63617263310a640a310a320ac3a9660a350a00010203ff",
            "bcc7d47d03feb745aa2a634a676eef407160f77a4ccfb5e21696f5e2fbf73621",
        ),
    ]
}

fn name() -> impl Strategy<Value = Vec<u8>> {
    "[A-Za-z0-9._-]{1,6}"
        .prop_filter("not . or ..", |s| s != "." && s != "..")
        .prop_map(String::into_bytes)
}

fn leaf() -> impl Strategy<Value = Tree> {
    prop_oneof![
        4 => (prop::collection::vec(any::<u8>(), 0..24), any::<bool>())
            .prop_map(|(c, x)| if x { Tree::executable(c) } else { Tree::file(c) }),
        1 => "[a-z/]{1,10}".prop_map(Tree::symlink),
    ]
}

pub fn tree() -> impl Strategy<Value = Tree> {
    let dir = leaf().prop_recursive(3, 24, 5, |inner| {
        prop::collection::btree_map(name(), inner, 0..5).prop_map(Tree::Directory)
    });
    prop::collection::btree_map(name(), dir, 0..5).prop_map(Tree::Directory)
}

/// Writes `tree` creating entries in reverse name order and stamping each
/// with a time derived from `seed`.
pub fn materialize_shuffled(tree: &Tree, dest: &Path, seed: u64) {
    let stamp = SystemTime::UNIX_EPOCH + Duration::from_secs(1_000_000 + seed % 1_000_000);
    match tree {
        Tree::File { contents, executable } => {
            fs::write(dest, contents).unwrap();
            let mode = if *executable { 0o700 } else { 0o600 };
            fs::set_permissions(dest, fs::Permissions::from_mode(mode)).unwrap();
            fs::File::options().write(true).open(dest).unwrap().set_modified(stamp).unwrap();
        }
        Tree::Symlink { target } => {
            use std::os::unix::ffi::OsStrExt;
            std::os::unix::fs::symlink(std::ffi::OsStr::from_bytes(target), dest).unwrap();
        }
        Tree::Directory(entries) => {
            fs::create_dir(dest).unwrap();
            for (i, (name, child)) in entries.iter().rev().enumerate() {
                use std::os::unix::ffi::OsStrExt;
                let p = dest.join(std::ffi::OsStr::from_bytes(name));
                materialize_shuffled(child, &p, seed.wrapping_mul(31).wrapping_add(i as u64));
            }
            fs::File::open(dest).unwrap().set_modified(stamp).unwrap();
        }
    }
}

/// Changes the hash must notice.
#[derive(Debug, Clone, Copy)]
pub enum Mutation {
    Content,
    Rename,
    ExecBit,
}

/// Applies `m` to the `pick`-th applicable node; returns false when the
/// tree has no such node.
pub fn mutate(tree: &mut Tree, m: Mutation, pick: usize) -> bool {
    fn targets(t: &Tree, m: Mutation, path: &mut Vec<Vec<u8>>, out: &mut Vec<Vec<Vec<u8>>>) {
        if let Tree::Directory(entries) = t {
            for (name, child) in entries {
                path.push(name.clone());
                let ok = matches!(
                    (m, child),
                    (Mutation::Rename, _)
                        | (Mutation::Content, Tree::File { .. } | Tree::Symlink { .. })
                        | (Mutation::ExecBit, Tree::File { .. })
                );
                if ok {
                    out.push(path.clone());
                }
                targets(child, m, path, out);
                path.pop();
            }
        }
    }
    let mut all = Vec::new();
    targets(tree, m, &mut Vec::new(), &mut all);
    if all.is_empty() {
        return false;
    }
    let path = &all[pick % all.len()];
    let (last, parents) = path.split_last().unwrap();
    let mut dir = tree;
    for p in parents {
        let Tree::Directory(e) = dir else { unreachable!() };
        dir = e.get_mut(p).unwrap();
    }
    let Tree::Directory(entries) = dir else { unreachable!() };
    match m {
        Mutation::Rename => {
            let node = entries.remove(last).unwrap();
            let mut new = last.clone();
            loop {
                new.push(b'z');
                if !entries.contains_key(&new) {
                    break;
                }
            }
            entries.insert(new, node);
        }
        Mutation::Content => match entries.get_mut(last).unwrap() {
            Tree::File { contents, .. } => contents.push(b'!'),
            Tree::Symlink { target } => target.push(b'!'),
            Tree::Directory(_) => unreachable!(),
        },
        Mutation::ExecBit => match entries.get_mut(last).unwrap() {
            Tree::File { executable, .. } => *executable = !*executable,
            _ => unreachable!(),
        },
    }
    true
}
