//! Canonical archive ("CARC") serialization of file trees.
//!
//! ```text
//! archive := "carc1\n" node
//! node    := ("f\n" | "x\n") size "\n" bytes
//!          | "l\n" size "\n" target
//!          | "d\n" count "\n" entry*
//! entry   := name-length "\n" name node
//! ```
//!
//! Entries are sorted by raw name bytes. Timestamps, ownership and every
//! permission bit except the owner-executable bit are not represented, so
//! the encoding of a tree depends only on its names, contents, executable
//! bits and symlink targets.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::os::unix::ffi::{OsStrExt, OsStringExt};
use std::os::unix::fs::{symlink, PermissionsExt};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::hash::{ContentHash, HashingWriter};

pub const MAGIC: &[u8] = b"carc1\n";

#[derive(Debug, Error)]
pub enum CarcError {
    #[error("unsupported file type at {0}")]
    UnsupportedNode(PathBuf),
    #[error("invalid entry name {0:?}")]
    InvalidName(String),
    #[error("malformed archive at byte {offset}: {detail}")]
    Malformed { offset: usize, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CarcError + '_ {
    move |source| CarcError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// An in-memory file tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tree {
    File { contents: Vec<u8>, executable: bool },
    Symlink { target: Vec<u8> },
    Directory(BTreeMap<Vec<u8>, Tree>),
}

pub fn validate_name(name: &[u8]) -> Result<(), CarcError> {
    if name.is_empty() || name == b"." || name == b".." || name.iter().any(|&b| b == b'/' || b == 0) {
        return Err(CarcError::InvalidName(String::from_utf8_lossy(name).into_owned()));
    }
    Ok(())
}

impl Tree {
    pub fn file(contents: impl Into<Vec<u8>>) -> Self {
        Tree::File {
            contents: contents.into(),
            executable: false,
        }
    }

    pub fn executable(contents: impl Into<Vec<u8>>) -> Self {
        Tree::File {
            contents: contents.into(),
            executable: true,
        }
    }

    pub fn symlink(target: impl Into<Vec<u8>>) -> Self {
        Tree::Symlink { target: target.into() }
    }

    pub fn empty_dir() -> Self {
        Tree::Directory(BTreeMap::new())
    }

    /// Builds a directory from `(name, subtree)` pairs.
    pub fn dir<N: AsRef<[u8]>>(entries: impl IntoIterator<Item = (N, Tree)>) -> Self {
        Tree::Directory(
            entries
                .into_iter()
                .map(|(n, t)| (n.as_ref().to_vec(), t))
                .collect(),
        )
    }

    /// Reads a tree from disk without following symlinks.
    pub fn from_path(path: &Path) -> Result<Self, CarcError> {
        let meta = fs::symlink_metadata(path).map_err(io_err(path))?;
        let ft = meta.file_type();
        if ft.is_symlink() {
            let target = fs::read_link(path).map_err(io_err(path))?;
            Ok(Tree::Symlink {
                target: target.into_os_string().into_vec(),
            })
        } else if ft.is_file() {
            let contents = fs::read(path).map_err(io_err(path))?;
            Ok(Tree::File {
                contents,
                executable: meta.permissions().mode() & 0o100 != 0,
            })
        } else if ft.is_dir() {
            let mut entries = BTreeMap::new();
            for entry in fs::read_dir(path).map_err(io_err(path))? {
                let entry = entry.map_err(io_err(path))?;
                let name = entry.file_name().into_vec();
                validate_name(&name)?;
                entries.insert(name, Tree::from_path(&entry.path())?);
            }
            Ok(Tree::Directory(entries))
        } else {
            Err(CarcError::UnsupportedNode(path.to_path_buf()))
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        self.encode_node(&mut out);
        out
    }

    fn encode_node(&self, out: &mut Vec<u8>) {
        match self {
            Tree::File { contents, executable } => {
                out.extend_from_slice(if *executable { b"x\n" } else { b"f\n" });
                write_sized(out, contents);
            }
            Tree::Symlink { target } => {
                out.extend_from_slice(b"l\n");
                write_sized(out, target);
            }
            Tree::Directory(entries) => {
                out.extend_from_slice(format!("d\n{}\n", entries.len()).as_bytes());
                for (name, child) in entries {
                    write_sized(out, name);
                    child.encode_node(out);
                }
            }
        }
    }

    pub fn hash(&self) -> ContentHash {
        ContentHash::of(&self.encode())
    }

    /// Writes the tree at `dest`, which must not exist yet.
    pub fn materialize(&self, dest: &Path) -> Result<(), CarcError> {
        match self {
            Tree::File { contents, executable } => {
                fs::write(dest, contents).map_err(io_err(dest))?;
                let mode = if *executable { 0o755 } else { 0o644 };
                fs::set_permissions(dest, fs::Permissions::from_mode(mode)).map_err(io_err(dest))
            }
            Tree::Symlink { target } => {
                symlink(std::ffi::OsStr::from_bytes(target), dest).map_err(io_err(dest))
            }
            Tree::Directory(entries) => {
                fs::create_dir(dest).map_err(io_err(dest))?;
                for (name, child) in entries {
                    validate_name(name)?;
                    child.materialize(&dest.join(std::ffi::OsStr::from_bytes(name)))?;
                }
                Ok(())
            }
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CarcError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if !bytes.starts_with(MAGIC) {
            return Err(cur.malformed("missing carc1 header"));
        }
        cur.pos = MAGIC.len();
        let tree = cur.node()?;
        if cur.pos != bytes.len() {
            return Err(cur.malformed("trailing bytes after root node"));
        }
        Ok(tree)
    }
}

fn write_sized(out: &mut Vec<u8>, data: &[u8]) {
    out.extend_from_slice(format!("{}\n", data.len()).as_bytes());
    out.extend_from_slice(data);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn malformed(&self, detail: &str) -> CarcError {
        CarcError::Malformed {
            offset: self.pos,
            detail: detail.to_string(),
        }
    }

    fn tag(&mut self) -> Result<u8, CarcError> {
        match self.bytes.get(self.pos..self.pos + 2) {
            Some([t, b'\n']) => {
                self.pos += 2;
                Ok(*t)
            }
            _ => Err(self.malformed("expected node tag")),
        }
    }

    fn number(&mut self) -> Result<usize, CarcError> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.malformed("unterminated number"))?;
        let digits = &rest[..end];
        // Canonical decimal: no sign, no leading zeros.
        if digits.is_empty()
            || !digits.iter().all(u8::is_ascii_digit)
            || (digits.len() > 1 && digits[0] == b'0')
        {
            return Err(self.malformed("invalid decimal"));
        }
        let n = std::str::from_utf8(digits)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.malformed("number out of range"))?;
        self.pos += end + 1;
        Ok(n)
    }

    fn take(&mut self, n: usize) -> Result<&[u8], CarcError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.malformed("truncated payload")),
        }
    }

    fn node(&mut self) -> Result<Tree, CarcError> {
        match self.tag()? {
            t @ (b'f' | b'x') => {
                let n = self.number()?;
                Ok(Tree::File {
                    contents: self.take(n)?.to_vec(),
                    executable: t == b'x',
                })
            }
            b'l' => {
                let n = self.number()?;
                Ok(Tree::Symlink {
                    target: self.take(n)?.to_vec(),
                })
            }
            b'd' => {
                let count = self.number()?;
                let mut entries = BTreeMap::new();
                let mut last: Option<Vec<u8>> = None;
                for _ in 0..count {
                    let n = self.number()?;
                    let name = self.take(n)?.to_vec();
                    validate_name(&name)?;
                    if last.as_ref().is_some_and(|l| *l >= name) {
                        return Err(self.malformed("entries not strictly sorted"));
                    }
                    last = Some(name.clone());
                    let child = self.node()?;
                    entries.insert(name, child);
                }
                Ok(Tree::Directory(entries))
            }
            _ => {
                self.pos -= 2;
                Err(self.malformed("unknown node tag"))
            }
        }
    }
}

/// Streams the canonical archive of the tree at `path` into `out`.
pub fn write_path<W: Write>(path: &Path, out: &mut W) -> Result<(), CarcError> {
    out.write_all(MAGIC).map_err(io_err(path))?;
    write_path_node(path, out)
}

fn write_path_node<W: Write>(path: &Path, out: &mut W) -> Result<(), CarcError> {
    let meta = fs::symlink_metadata(path).map_err(io_err(path))?;
    let ft = meta.file_type();
    if ft.is_symlink() {
        let target = fs::read_link(path).map_err(io_err(path))?;
        let target = target.as_os_str().as_bytes();
        write!(out, "l\n{}\n", target.len()).map_err(io_err(path))?;
        out.write_all(target).map_err(io_err(path))
    } else if ft.is_file() {
        let tag = if meta.permissions().mode() & 0o100 != 0 { 'x' } else { 'f' };
        let mut file = fs::File::open(path).map_err(io_err(path))?;
        let len = meta.len();
        write!(out, "{tag}\n{len}\n").map_err(io_err(path))?;
        let copied = io::copy(&mut (&mut file).take(len), out).map_err(io_err(path))?;
        if copied != len {
            return Err(CarcError::Io {
                path: path.to_path_buf(),
                source: io::Error::new(io::ErrorKind::UnexpectedEof, "file shrank while archiving"),
            });
        }
        Ok(())
    } else if ft.is_dir() {
        let mut names = Vec::new();
        for entry in fs::read_dir(path).map_err(io_err(path))? {
            let name = entry.map_err(io_err(path))?.file_name().into_vec();
            validate_name(&name)?;
            names.push(name);
        }
        names.sort();
        write!(out, "d\n{}\n", names.len()).map_err(io_err(path))?;
        for name in names {
            writeln!(out, "{}", name.len()).map_err(io_err(path))?;
            out.write_all(&name).map_err(io_err(path))?;
            write_path_node(&path.join(std::ffi::OsStr::from_bytes(&name)), out)?;
        }
        Ok(())
    } else {
        Err(CarcError::UnsupportedNode(path.to_path_buf()))
    }
}

/// Canonical archive bytes of the tree at `path`.
pub fn archive_path(path: &Path) -> Result<Vec<u8>, CarcError> {
    let mut out = Vec::new();
    write_path(path, &mut out)?;
    Ok(out)
}

/// Hash and byte length of the canonical archive of the tree at `path`.
pub fn hash_path(path: &Path) -> Result<(ContentHash, u64), CarcError> {
    let mut w = HashingWriter::new();
    write_path(path, &mut w)?;
    Ok(w.finish())
}

/// Decodes `bytes` and writes the resulting tree at `dest`.
pub fn unpack(bytes: &[u8], dest: &Path) -> Result<Tree, CarcError> {
    let tree = Tree::decode(bytes)?;
    tree.materialize(dest)?;
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_examples() {
        assert_eq!(Tree::empty_dir().encode(), b"carc1\nd\n0\n");
        assert_eq!(
            Tree::dir([("a", Tree::file("hi"))]).encode(),
            b"carc1\nd\n1\n1\naf\n2\nhi"
        );
    }

    #[test]
    fn disk_and_memory_agree() {
        let tmp = tempfile::tempdir().unwrap();
        let tree = Tree::dir([
            ("bin", Tree::dir([("tool", Tree::executable("#!/bin/sh\n"))])),
            ("link", Tree::symlink("bin/tool")),
            ("z", Tree::file("zz")),
            ("empty", Tree::empty_dir()),
        ]);
        let root = tmp.path().join("t");
        tree.materialize(&root).unwrap();
        assert_eq!(archive_path(&root).unwrap(), tree.encode());
        assert_eq!(Tree::from_path(&root).unwrap(), tree);
        assert_eq!(hash_path(&root).unwrap().0, tree.hash());
    }

    #[test]
    fn rejects_bad_names() {
        for bad in [&b""[..], b".", b"..", b"a/b", b"a\0"] {
            assert!(validate_name(bad).is_err());
        }
        let mut entries = BTreeMap::new();
        entries.insert(b"..".to_vec(), Tree::file("x"));
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            Tree::Directory(entries).materialize(&tmp.path().join("d")),
            Err(CarcError::InvalidName(_))
        ));
    }

    #[test]
    fn unsupported_nodes() {
        use std::os::unix::net::UnixListener;
        let tmp = tempfile::tempdir().unwrap();
        let sock = tmp.path().join("sock");
        let _l = UnixListener::bind(&sock).unwrap();
        assert!(matches!(archive_path(tmp.path()), Err(CarcError::UnsupportedNode(_))));
    }

    #[test]
    fn decode_rejects_noncanonical() {
        let cases: &[&[u8]] = &[
            b"",
            b"carc2\nd\n0\n",
            b"carc1\nd\n00\n",
            b"carc1\nf\n3\nab",
            b"carc1\nf\n1\nab",
            b"carc1\nq\n0\n",
            b"carc1\nd\n2\n1\nbf\n0\n1\naf\n0\n",
            b"carc1\nd\n2\n1\naf\n0\n1\naf\n0\n",
            b"carc1\nd\n1\n1\n/f\n0\n",
        ];
        for c in cases {
            assert!(Tree::decode(c).is_err(), "{:?} accepted", String::from_utf8_lossy(c));
        }
    }
}
