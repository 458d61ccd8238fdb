use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One caption record: a JSON object per line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Caption {
    pub image_id: u64,
    pub caption_id: u64,
    pub tokens: Vec<u32>,
}

pub fn parse_captions(text: &str) -> Result<Vec<Caption>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let c: Caption = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("captions line {}: {e}", n + 1)))?;
        if c.tokens.is_empty() {
            return Err(Error::Format(format!("captions line {}: no tokens", n + 1)));
        }
        out.push(c);
    }
    Ok(out)
}

pub fn load_captions(path: &Path) -> Result<Vec<Caption>> {
    parse_captions(&fs::read_to_string(path)?)
}

pub fn write_captions(captions: &[Caption], path: &Path) -> Result<()> {
    let mut text = String::new();
    for c in captions {
        text.push_str(&serde_json::to_string(c)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let caps = vec![
            Caption { image_id: 1, caption_id: 10, tokens: vec![2, 3, 4] },
            Caption { image_id: 2, caption_id: 11, tokens: vec![5] },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_captions(&caps, &path).unwrap();
        assert_eq!(load_captions(&path).unwrap(), caps);
        assert!(parse_captions("{\"image_id\": 1}\n").is_err());
        assert!(parse_captions("{\"image_id\":1,\"caption_id\":2,\"tokens\":[]}\n").is_err());
        assert!(parse_captions("not json").is_err());
    }
}
