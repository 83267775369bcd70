use std::collections::BTreeMap;

use super::{ChannelError, Repo};
use crate::hash::ContentHash;
use crate::sexpr::{self, quote, Sexp};

pub const DEFAULT_CHANNEL: &str = "microfold";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelPin {
    pub name: String,
    pub url: String,
    pub commit: ContentHash,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PinFile {
    pub channels: Vec<ChannelPin>,
}

impl PinFile {
    pub fn single(url: &str, commit: ContentHash) -> Self {
        Self {
            channels: vec![ChannelPin {
                name: DEFAULT_CHANNEL.to_string(),
                url: url.to_string(),
                commit,
            }],
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::from("(channels");
        for c in &self.channels {
            out.push_str(&format!(
                "\n (channel\n  (name {})\n  (url {})\n  (commit {}))",
                quote(&c.name),
                quote(&c.url),
                quote(&c.commit.to_hex())
            ));
        }
        out.push_str(")\n");
        out
    }
}

/// The pin file for `repo`'s current head.
pub fn describe_pin(repo: &Repo) -> Result<PinFile, ChannelError> {
    let head = repo.require_head()?;
    Ok(PinFile::single(&repo.url()?, head))
}

pub fn parse_pin(text: &str) -> Result<PinFile, ChannelError> {
    let forms = sexpr::parse_all(text)?;
    let top = match forms.as_slice() {
        [] => return Err(sexpr::error(sexpr::Pos { line: 1, col: 1 }, "empty pin file").into()),
        [one] => one,
        [_, extra, ..] => return Err(sexpr::error(extra.pos(), "expected a single (channels …) form").into()),
    };
    let entries = top.form("channels")?;
    if entries.is_empty() {
        return Err(sexpr::error(top.pos(), "at least one channel is required").into());
    }
    let mut channels = Vec::new();
    for e in entries {
        let mut fields: BTreeMap<&str, (&str, sexpr::Pos)> = BTreeMap::new();
        for f in e.form("channel")? {
            let (key, value) = match f.as_list() {
                Some([Sexp::Symbol(k, _), Sexp::Str(v, _)]) => (k.as_str(), v.as_str()),
                _ => return Err(sexpr::error(f.pos(), "expected (KEY \"VALUE\")").into()),
            };
            if !matches!(key, "name" | "url" | "commit") {
                return Err(sexpr::error(f.pos(), format!("unknown channel field `{key}`")).into());
            }
            if fields.insert(key, (value, f.pos())).is_some() {
                return Err(sexpr::error(f.pos(), format!("duplicate channel field `{key}`")).into());
            }
        }
        let need = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| sexpr::error(e.pos(), format!("channel lacks ({k} …)")))
        };
        let (name, _) = need("name")?;
        let (url, _) = need("url")?;
        let (commit, pos) = need("commit")?;
        let commit = commit.parse().map_err(|_| ChannelError::BadCommit {
            line: pos.line,
            value: commit.to_string(),
        })?;
        channels.push(ChannelPin {
            name: name.to_string(),
            url: url.to_string(),
            commit,
        });
    }
    Ok(PinFile { channels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_and_round_trip() {
        let h = ContentHash::of(b"rev");
        let pin = PinFile::single("https://example.org/channel", h);
        let text = pin.render();
        assert!(text.contains(&format!("(commit \"{h}\")")));
        assert!(text.contains("(url \"https://example.org/channel\")"));
        assert_eq!(parse_pin(&text).unwrap(), pin);
    }

    #[test]
    fn minimal_and_invalid() {
        let h = "a".repeat(64);
        let ok = format!("(channels (channel (name \"x\") (url \"u\") (commit \"{h}\")))");
        assert_eq!(parse_pin(&ok).unwrap().channels.len(), 1);
        let sha1 = "7b9c4417d54009efd9140860ce07dec97120676f";
        let short = format!("(channels\n (channel (name \"x\") (url \"u\")\n  (commit \"{sha1}\")))");
        assert!(matches!(parse_pin(&short), Err(ChannelError::BadCommit { line: 3, .. })));
        assert!(matches!(parse_pin(""), Err(ChannelError::Syntax(_))));
        assert!(matches!(parse_pin("; only a comment\n"), Err(ChannelError::Syntax(_))));
        assert!(matches!(parse_pin("(channels)"), Err(ChannelError::Syntax(_))));
        let extra = format!("(channels (channel (name \"x\") (url \"u\") (commit \"{h}\") (branch \"m\")))");
        assert!(matches!(parse_pin(&extra), Err(ChannelError::Syntax(_))));
        let missing = "(channels (channel (name \"x\") (url \"u\")))";
        assert!(matches!(parse_pin(missing), Err(ChannelError::Syntax(_))));
    }
}
