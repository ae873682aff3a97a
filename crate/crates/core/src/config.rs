//! INI configuration helpers shared by the proxy and the B2BUA.

use std::path::Path;
use std::str::FromStr;

use ini::Ini;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("[{section}] {key}: invalid value {value:?}")]
    Invalid {
        section: String,
        key: String,
        value: String,
    },
    #[error("[{section}] {key} is required")]
    Missing { section: String, key: String },
    #[error("{0}")]
    Conflict(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parsed INI document with typed getters.
pub struct IniDoc(Ini);

impl IniDoc {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ini::load_from_str(text)
            .map(Self)
            .map_err(|e| ConfigError::Syntax(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.0.section(Some(section)).and_then(|s| s.get(key)).map(str::trim)
    }

    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, ConfigError> {
        match self.raw(section, key) {
            None | Some("") => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| ConfigError::Invalid {
                section: section.into(),
                key: key.into(),
                value: v.into(),
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T, ConfigError> {
        Ok(self.get(section, key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, section: &str, key: &str) -> Result<T, ConfigError> {
        self.get(section, key)?.ok_or_else(|| ConfigError::Missing {
            section: section.into(),
            key: key.into(),
        })
    }

    /// Keys of a section starting with `prefix`, with the prefix removed.
    pub fn with_prefix<'a>(&'a self, section: &str, prefix: &'a str) -> Vec<(String, String)> {
        self.0
            .section(Some(section))
            .map(|s| {
                s.iter()
                    .filter_map(|(k, v)| {
                        k.strip_prefix(prefix)
                            .map(|rest| (rest.to_string(), v.trim().to_string()))
                    })
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Resolves `path` against the directory holding the config file.
pub fn relative_to(base: Option<&Path>, path: &str) -> std::path::PathBuf {
    let p = Path::new(path);
    match base.and_then(Path::parent) {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn typed_lookup() {
        let doc =
            IniDoc::parse("[server]\nbind = 127.0.0.1:5060\nt1_ms = x\n[dialplan]\nno_answer.2002 = 5\n").unwrap();
        let bind: std::net::SocketAddr = doc.require("server", "bind").unwrap();
        assert_eq!(bind.port(), 5060);
        assert!(doc.get::<u64>("server", "t1_ms").is_err());
        assert_eq!(doc.get_or("server", "absent", 7u32).unwrap(), 7);
        assert_eq!(
            doc.with_prefix("dialplan", "no_answer."),
            vec![("2002".into(), "5".into())]
        );
    }
}
