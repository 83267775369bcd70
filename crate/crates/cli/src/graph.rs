//! Text and DOT renderings of a derivation graph.

use std::collections::BTreeSet;

use microfold::derivation::Derivation;
use microfold::hash::ContentHash;

fn node_name(hash: &ContentHash, drv: &Derivation) -> String {
    format!("{}\n{}", drv.label(), &hash.to_hex()[..12])
}

fn edges(nodes: &[(ContentHash, Derivation)]) -> BTreeSet<(String, String)> {
    let by_hash: std::collections::BTreeMap<&ContentHash, &Derivation> = nodes.iter().map(|(h, d)| (h, d)).collect();
    let mut out = BTreeSet::new();
    for (h, d) in nodes {
        for i in &d.inputs {
            if let Some(dep) = by_hash.get(&i.derivation_hash) {
                out.insert((node_name(h, d), node_name(&i.derivation_hash, dep)));
            }
        }
    }
    out
}

fn quote(s: &str) -> String {
    let mut out = String::from("\"");
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

pub fn dot(nodes: &[(ContentHash, Derivation)]) -> String {
    let names: BTreeSet<String> = nodes.iter().map(|(h, d)| node_name(h, d)).collect();
    let mut out = String::from("digraph microfold {\n");
    for n in &names {
        out.push_str(&format!("  {};\n", quote(n)));
    }
    for (a, b) in edges(nodes) {
        out.push_str(&format!("  {} -> {};\n", quote(&a), quote(&b)));
    }
    out.push_str("}\n");
    out
}

/// One line per node, `<derivation hash> <label>`, each followed by its
/// direct inputs.
pub fn text(nodes: &[(ContentHash, Derivation)]) -> String {
    let mut sorted: Vec<&(ContentHash, Derivation)> = nodes.iter().collect();
    sorted.sort_by_key(|(h, d)| (d.label(), *h));
    let mut out = String::new();
    for (h, d) in sorted {
        out.push_str(&format!("{h} {}\n", d.label()));
        let mut deps: Vec<(String, String)> = d
            .inputs
            .iter()
            .map(|i| (i.label.clone(), i.derivation_hash.to_hex()))
            .collect();
        deps.sort();
        for (label, hash) in deps {
            out.push_str(&format!("  -> {hash} {label}\n"));
        }
    }
    out
}
