//! Trust roots and the provenance audit.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::derivation::{split_store_ref, BuildStep, Derivation, DerivationError};
use crate::hash::ContentHash;
use crate::store::{Content, ItemKind, NewItem, Store, StoreError, StorePath};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Derivation(DerivationError),
}

impl From<DerivationError> for AuditError {
    fn from(e: DerivationError) -> Self {
        match e {
            DerivationError::Store(s) => AuditError::Store(s),
            other => AuditError::Derivation(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SeedRecord {
    pub path: StorePath,
    /// Byte length of the seed's canonical archive.
    pub size: u64,
    pub description: String,
}

/// Registers `content` as a seed. Re-registering the same bytes under the
/// same label returns the existing seed.
pub fn register_seed(
    store: &Store,
    content: Content<'_>,
    label: &str,
    description: &str,
) -> Result<SeedRecord, StoreError> {
    let meta = NewItem {
        kind: ItemKind::Seed,
        description: Some(description.to_string()),
        ..NewItem::fixed()
    };
    let mut record = store.add_content(content, label, meta)?;
    if record.kind != ItemKind::Seed {
        // Same bytes were added earlier as a plain item; promote it.
        record.kind = ItemKind::Seed;
        record.deriver = None;
        record.description = Some(description.to_string());
        store.update_record(&record)?;
    }
    Ok(SeedRecord {
        path: record.path,
        size: record.size,
        description: record.description.unwrap_or_default(),
    })
}

/// All registered seeds, sorted by path.
pub fn seeds(store: &Store) -> Result<Vec<SeedRecord>, StoreError> {
    let mut out = Vec::new();
    for p in store.list()? {
        let r = store.require_record(&p)?;
        if r.kind == ItemKind::Seed {
            out.push(SeedRecord {
                path: r.path,
                size: r.size,
                description: r.description.unwrap_or_default(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Trusted,
    Opaque,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditReport {
    pub root: String,
    /// Offending item and reason, sorted by item.
    pub offending: BTreeMap<StorePath, String>,
    pub seeds: Vec<SeedRecord>,
    pub total_seed_bytes: u64,
    /// Distinct leaves reached, keyed by kind name.
    pub leaves: BTreeMap<&'static str, usize>,
    pub derived: usize,
}

impl AuditReport {
    pub fn verdict(&self) -> Verdict {
        if self.offending.is_empty() {
            Verdict::Trusted
        } else {
            Verdict::Opaque
        }
    }

    pub fn is_trusted(&self) -> bool {
        self.verdict() == Verdict::Trusted
    }

    /// `key: value` lines in key order, then one `opaque <path> <reason>`
    /// line per offending item.
    pub fn to_text(&self) -> String {
        let mut lines: Vec<(String, String)> = vec![
            ("derived".into(), self.derived.to_string()),
            ("root".into(), self.root.clone()),
            ("total-seed-bytes".into(), self.total_seed_bytes.to_string()),
            (
                "verdict".into(),
                match self.verdict() {
                    Verdict::Trusted => "trusted".into(),
                    Verdict::Opaque => "opaque".into(),
                },
            ),
        ];
        for (kind, n) in &self.leaves {
            lines.push((format!("leaves-{kind}"), n.to_string()));
        }
        for s in &self.seeds {
            lines.push(("seed".into(), format!("{} {}", s.path, s.size)));
        }
        lines.sort();
        let mut out: String = lines.iter().map(|(k, v)| format!("{k}: {v}\n")).collect();
        for (p, reason) in &self.offending {
            out.push_str(&format!("opaque {p} {reason}\n"));
        }
        out
    }
}

struct Audit<'a> {
    store: &'a Store,
    items: BTreeSet<StorePath>,
    drvs: BTreeSet<ContentHash>,
    offending: BTreeMap<StorePath, String>,
    seeds: BTreeSet<SeedRecord>,
    fixed: BTreeSet<StorePath>,
    derived: usize,
}

impl Audit<'_> {
    fn offend(&mut self, p: StorePath, reason: &str) {
        self.offending.entry(p).or_insert_with(|| reason.to_string());
    }

    fn item(&mut self, p: &StorePath, from: Option<&StorePath>) -> Result<(), AuditError> {
        if !self.items.insert(p.clone()) {
            return Ok(());
        }
        let Some(rec) = self.store.record(p)? else {
            return Err(match from {
                Some(f) => StoreError::DanglingReference {
                    from: f.clone(),
                    missing: p.clone(),
                },
                None => StoreError::NotRegistered(p.clone()),
            }
            .into());
        };
        match rec.kind {
            ItemKind::Seed => {
                self.seeds.insert(SeedRecord {
                    path: rec.path.clone(),
                    size: rec.size,
                    description: rec.description.clone().unwrap_or_default(),
                });
            }
            ItemKind::Fixed => {
                self.fixed.insert(p.clone());
                if rec.source.is_none() {
                    self.offend(p.clone(), "fixed-item-without-source-provenance");
                }
            }
            ItemKind::Derived => {
                self.derived += 1;
                match rec.deriver.map(|d| self.store.get_derivation(&d)).transpose()? {
                    Some(Some(drv)) => self.derivation(&drv)?,
                    _ => self.offend(p.clone(), "derived-item-without-derivation"),
                }
            }
        }
        for r in &rec.references {
            self.item(r, Some(p))?;
        }
        Ok(())
    }

    fn derivation(&mut self, drv: &Derivation) -> Result<(), AuditError> {
        if !self.drvs.insert(drv.hash()?) {
            return Ok(());
        }
        let mut closure_roots = Vec::new();
        for s in &drv.sources {
            let sp = s.store_path()?;
            if self.store.contains(&sp) {
                self.item(&sp, None)?;
                closure_roots.push(sp);
            } else {
                // Not fetched yet; the declared hash will be checked on fetch.
                self.fixed.insert(sp);
            }
        }
        for input in &drv.inputs {
            let dep = self.store.require_derivation(&input.derivation_hash)?;
            let out = dep.output_path()?;
            if self.store.contains(&out) {
                self.item(&out, None)?;
                closure_roots.push(out);
            } else {
                self.derived += 1;
                self.derivation(&dep)?;
            }
        }
        let closure: BTreeSet<StorePath> = self.store.closure_of(&closure_roots)?.into_iter().collect();
        for step in &drv.steps {
            let (BuildStep::Exec { program: r, .. } | BuildStep::Copy { src: r, .. }) = step else {
                continue;
            };
            let Ok((tool, _)) = split_store_ref(r) else {
                continue;
            };
            if closure.contains(&tool) {
                continue;
            }
            match self.store.record(&tool)? {
                Some(rec) if rec.kind == ItemKind::Seed => self.item(&tool, None)?,
                _ => {
                    let reason = match step {
                        BuildStep::Exec { .. } => "exec-tool-outside-audited-closure",
                        _ => "copied-item-outside-audited-closure",
                    };
                    self.offend(tool, reason);
                }
            }
        }
        Ok(())
    }

    fn finish(self, root: String) -> AuditReport {
        let mut leaves = BTreeMap::new();
        leaves.insert("fixed", self.fixed.len());
        leaves.insert("seed", self.seeds.len());
        let seeds: Vec<SeedRecord> = self.seeds.into_iter().collect();
        AuditReport {
            root,
            offending: self.offending,
            total_seed_bytes: seeds.iter().map(|s| s.size).sum(),
            seeds,
            leaves,
            derived: self.derived,
        }
    }
}

fn new_audit(store: &Store) -> Audit<'_> {
    Audit {
        store,
        items: BTreeSet::new(),
        drvs: BTreeSet::new(),
        offending: BTreeMap::new(),
        seeds: BTreeSet::new(),
        fixed: BTreeSet::new(),
        derived: 0,
    }
}

/// Audits a registered store item and everything it was made from.
pub fn audit_trust(root: &StorePath, store: &Store) -> Result<AuditReport, AuditError> {
    let mut a = new_audit(store);
    a.item(root, None)?;
    Ok(a.finish(root.to_string()))
}

/// Audits a derivation, built or not. Its input derivations must be
/// recorded in the store.
pub fn audit_derivation(drv: &Derivation, store: &Store) -> Result<AuditReport, AuditError> {
    let out = drv.output_path()?;
    if store.contains(&out) {
        return audit_trust(&out, store);
    }
    let mut a = new_audit(store);
    a.derived += 1;
    a.derivation(drv)?;
    Ok(a.finish(out.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::carc::Tree;
    use crate::derivation::{BuildStep, Builder, InputRef};

    fn store() -> (tempfile::TempDir, Store) {
        let tmp = tempfile::tempdir().unwrap();
        let s = Store::open(tmp.path().join("s")).unwrap();
        (tmp, s)
    }

    fn tool_tree(body: &str) -> Tree {
        Tree::dir([("bin", Tree::dir([("tool", Tree::executable(format!("#!/bin/sh\n{body}\n")))]))])
    }

    #[test]
    fn seed_registration() {
        let (_t, s) = store();
        let tree = Tree::file(vec![b'x'; 1024]);
        let a = register_seed(&s, Content::Tree(&tree), "blob-1", "a kibibyte").unwrap();
        assert_eq!(a.size, tree.encode().len() as u64);
        let b = register_seed(&s, Content::Tree(&tree), "blob-1", "a kibibyte").unwrap();
        assert_eq!(a, b);
        assert_eq!(seeds(&s).unwrap(), vec![a.clone()]);
        assert!(matches!(
            register_seed(&s, Content::Bytes(b"x"), "bad/label", ""),
            Err(StoreError::InvalidLabel(_))
        ));
    }

    #[test]
    fn pure_build_is_trusted_with_no_seeds() {
        let (_t, s) = store();
        let drv = Derivation::new("pure", "1").with_step(BuildStep::Write {
            path: "f".into(),
            contents: "x".into(),
        });
        let before = audit_derivation(&drv, &s).unwrap();
        assert!(before.is_trusted());
        let out = Builder::new(&s).build(&drv).unwrap();
        let r = audit_trust(&out, &s).unwrap();
        assert!(r.is_trusted());
        assert_eq!(r.total_seed_bytes, 0);
        assert!(r.to_text().contains("verdict: trusted\n"));
    }

    #[test]
    fn seed_tool_trusted_and_opaque_tool_flagged() {
        let (_t, s) = store();
        let seed = register_seed(&s, Content::Tree(&tool_tree("mkdir out; echo ok > out/r")), "tools-1", "t").unwrap();
        let a = Derivation::new("a", "1").with_step(BuildStep::Exec {
            program: format!("{}/bin/tool", seed.path),
            args: vec![],
        });
        let a_out = Builder::new(&s).build(&a).unwrap();
        let b = Derivation::new("b", "1")
            .with_input(InputRef {
                derivation_hash: a.hash().unwrap(),
                label: "a".into(),
            })
            .with_step(BuildStep::Copy {
                src: format!("{a_out}/r"),
                dst: "r".into(),
            });
        let b_out = Builder::new(&s).build(&b).unwrap();
        let r = audit_trust(&b_out, &s).unwrap();
        assert!(r.is_trusted(), "{}", r.to_text());
        assert_eq!(r.seeds.len(), 1);
        assert_eq!(r.total_seed_bytes, seed.size);

        // A tool added without any provenance.
        let opaque = s.add_fixed(Content::Tree(&tool_tree("mkdir out; echo bad > out/r")), "tool-1").unwrap();
        let drv = Derivation::new("c", "1").with_step(BuildStep::Exec {
            program: format!("{opaque}/bin/tool"),
            args: vec![],
        });
        let r = audit_derivation(&drv, &s).unwrap();
        assert_eq!(r.verdict(), Verdict::Opaque);
        assert_eq!(r.offending.keys().collect::<Vec<_>>(), vec![&opaque]);
        assert!(r
            .to_text()
            .contains(&format!("opaque {opaque} exec-tool-outside-audited-closure\n")));
    }

    #[test]
    fn dangling_reference_is_an_error() {
        let (_t, s) = store();
        let ghost: StorePath = format!("{}-ghost-1", "ab".repeat(16)).parse().unwrap();
        let scratch = s.scratch_dir().unwrap();
        let staged = scratch.path().join("x");
        Tree::file("x").materialize(&staged).unwrap();
        let p = StorePath::new(&Tree::file("x").hash(), "x-1").unwrap();
        s.register_staged(
            &staged,
            &p,
            NewItem {
                references: vec![ghost],
                source: Some("data:".into()),
                ..NewItem::fixed()
            },
        )
        .unwrap();
        assert!(matches!(
            audit_trust(&p, &s),
            Err(AuditError::Store(StoreError::DanglingReference { .. }))
        ));
    }
}
