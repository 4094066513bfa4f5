//! Flat `key = value` configuration files.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored. Unknown
//! keys are rejected by the typed loaders.

use std::str::FromStr;

use crate::error::{Error, Result};

/// Splits a config text into `(key, value, line_number)` triples.
pub fn key_values(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::ConfigSyntax {
                line,
                message: format!("expected `key = value`, got {content:?}"),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(Error::ConfigSyntax {
                line,
                message: "empty key or value".into(),
            });
        }
        out.push((key.to_string(), value.to_string(), line));
    }
    Ok(out)
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| Error::ConfigSyntax {
        line,
        message: format!("cannot parse {value:?} for {key}"),
    })
}

/// Types that can be overridden field by field from a key-value file.
pub trait KeyValueConfig: Sized {
    /// Applies one entry; returns `Ok(false)` for an unknown key.
    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<bool>;

    /// Checks cross-field invariants after all entries are applied.
    fn check(&self) -> Result<()>;

    /// Renders every field as `key = value` lines.
    fn render(&self) -> String;

    fn apply_text(mut self, text: &str) -> Result<Self> {
        for (key, value, line) in key_values(text)? {
            if !self.set(&key, &value, line)? {
                return Err(Error::ConfigSyntax {
                    line,
                    message: format!("unknown key {key:?}"),
                });
            }
        }
        self.check()?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let kv = key_values("# header\n\na = 1\n b=two # trailing\n").unwrap();
        assert_eq!(
            kv,
            vec![
                ("a".to_string(), "1".to_string(), 3),
                ("b".to_string(), "two".to_string(), 4)
            ]
        );
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(
            key_values("novalue\n"),
            Err(Error::ConfigSyntax { line: 1, .. })
        ));
        assert!(matches!(key_values("a =\n"), Err(Error::ConfigSyntax { line: 1, .. })));
    }
}
