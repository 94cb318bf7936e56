//! Flat `key=value` text records: one pair per line, `#` starts a comment line.

use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

/// Pairs in file order. Keys may repeat.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ParseError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ParseError { line: i + 1, msg: format!("expected key=value, got {line:?}") })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ParseError { line: i + 1, msg: "empty key".into() });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Last value wins for repeated keys.
pub fn parse_map(text: &str) -> Result<BTreeMap<String, String>, ParseError> {
    Ok(parse_pairs(text)?.into_iter().collect())
}
