//! Experiment config files: `key = value` lines, `#` comments and
//! `[section]` headers. Sections may repeat; each occurrence is kept.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Section {
    pub name: String,
    pub fields: BTreeMap<String, String>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }
}

/// Parsed config. Lines before the first header land in a section named `""`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub sections: Vec<Section>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections = vec![Section::default()];
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |why: &str| Error::Config(format!("line {}: {why}: `{raw}`", no + 1));
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| bad("unterminated section header"))?.trim();
                if name.is_empty() {
                    return Err(bad("empty section name"));
                }
                sections.push(Section {
                    name: name.to_string(),
                    fields: BTreeMap::new(),
                });
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected `key = value`"))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(bad("empty key"));
            }
            let current = sections.last_mut().expect("never empty");
            if current.fields.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(bad("duplicate key"));
            }
        }
        if sections[0].fields.is_empty() {
            sections.remove(0);
        }
        Ok(Self { sections })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every section with this name, in file order.
    pub fn all<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Section> + 'a {
        self.sections.iter().filter(move |s| s.name == name)
    }

    /// The single section with this name, if any; repeats are an error.
    pub fn one<'a>(&'a self, name: &'a str) -> Result<Option<&'a Section>> {
        let mut it = self.all(name);
        let first = it.next();
        if it.next().is_some() {
            return Err(Error::Config(format!("section [{name}] may appear only once")));
        }
        Ok(first)
    }
}

/// Typed lookup with a default.
pub fn field_or<T: std::str::FromStr>(section: Option<&Section>, key: &str, default: T) -> Result<T> {
    match section.and_then(|s| s.get(key)) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_repeat_and_comments_strip() {
        let c = ConfigFile::parse(
            "seed = 3 # global\n\n[attack]\nattack = fgsm\neps = 0.02\n# whole-line comment\n[attack]\nattack=cw\nlr = 0.5\n",
        )
        .unwrap();
        assert_eq!(c.sections.len(), 3);
        assert_eq!(c.sections[0].get("seed"), Some("3"));
        let attacks: Vec<_> = c.all("attack").collect();
        assert_eq!(attacks.len(), 2);
        assert_eq!(attacks[1].get("lr"), Some("0.5"));
        assert!(c.one("attack").is_err());
        assert_eq!(field_or(c.one("").unwrap(), "seed", 0u64).unwrap(), 3);
        assert_eq!(field_or(c.one("missing").unwrap(), "seed", 7u64).unwrap(), 7);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        for text in ["[open\n", "novalue\n", "[ ]\n", " = 3\n", "a = 1\na = 2\n"] {
            assert!(matches!(ConfigFile::parse(text), Err(Error::Config(_))), "{text:?}");
        }
    }
}
