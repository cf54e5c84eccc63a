//! Program image files.
//!
//! An image is a flat binary of encoded instructions plus a textual
//! manifest. The manifest is line oriented, `#` starts a comment:
//!
//! ```text
//! image v1
//! base 0x4000
//! entry 0x4000
//! code <hex bytes, may repeat>
//! map 0x4000 0x4004      # original -> rewritten instruction address
//! gate 0x4008 0x4000     # gate return site -> logged original address
//! ```
//!
//! `map` and `gate` lines are present only on instrumented images; the
//! measurement runtime uses them to express log entries in original
//! addresses.

use std::collections::BTreeMap;
use std::path::Path;

use crate::vm::inst::Program;
use crate::vm::Word;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("line {0}: {1}")]
    Parse(usize, String),
    #[error("missing field {0}")]
    Missing(&'static str),
    #[error("bad code bytes: {0}")]
    Code(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A loadable program image.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Image {
    pub base: Word,
    /// Initial program counter.
    pub entry: Word,
    pub code: Vec<u8>,
    /// Original instruction address -> rewritten address.
    pub addr_map: BTreeMap<Word, Word>,
    /// Gate return site -> original address to log.
    pub gate_log_map: BTreeMap<Word, Word>,
}

fn parse_word(tok: &str) -> Result<Word, String> {
    let t = tok.trim();
    if let Some(hex) = t.strip_prefix("0x") {
        Word::from_str_radix(hex, 16).map_err(|e| e.to_string())
    } else {
        t.parse::<Word>().map_err(|e| e.to_string())
    }
}

impl Image {
    pub fn from_program(program: &Program) -> Image {
        Image {
            base: program.base,
            entry: program.base,
            code: program.encode().expect("program encodes"),
            addr_map: BTreeMap::new(),
            gate_log_map: BTreeMap::new(),
        }
    }

    pub fn program(&self) -> Result<Program, String> {
        Program::decode(self.base, &self.code)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("image v1\n");
        out.push_str(&format!("base 0x{:x}\n", self.base));
        out.push_str(&format!("entry 0x{:x}\n", self.entry));
        for chunk in self.code.chunks(32) {
            out.push_str("code ");
            out.push_str(&hex::encode(chunk));
            out.push('\n');
        }
        for (orig, new) in &self.addr_map {
            out.push_str(&format!("map 0x{orig:x} 0x{new:x}\n"));
        }
        for (site, logged) in &self.gate_log_map {
            out.push_str(&format!("gate 0x{site:x} 0x{logged:x}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Image, ImageError> {
        let mut base = None;
        let mut entry = None;
        let mut code = Vec::new();
        let mut addr_map = BTreeMap::new();
        let mut gate_log_map = BTreeMap::new();
        let mut seen_header = false;

        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut toks = line.split_whitespace();
            let key = toks.next().unwrap();
            let err = |msg: String| ImageError::Parse(ln + 1, msg);
            match key {
                "image" => {
                    if toks.next() != Some("v1") {
                        return Err(err("unsupported image version".into()));
                    }
                    seen_header = true;
                }
                "base" => {
                    let v = toks.next().ok_or_else(|| err("base needs a value".into()))?;
                    base = Some(parse_word(v).map_err(err)?);
                }
                "entry" => {
                    let v = toks.next().ok_or_else(|| err("entry needs a value".into()))?;
                    entry = Some(parse_word(v).map_err(err)?);
                }
                "code" => {
                    let v = toks.next().ok_or_else(|| err("code needs hex bytes".into()))?;
                    let bytes = hex::decode(v).map_err(|e| ImageError::Code(e.to_string()))?;
                    code.extend_from_slice(&bytes);
                }
                "map" | "gate" => {
                    let a = toks.next().ok_or_else(|| err(format!("{key} needs two words")))?;
                    let b = toks.next().ok_or_else(|| err(format!("{key} needs two words")))?;
                    let a = parse_word(a).map_err(&err)?;
                    let b = parse_word(b).map_err(&err)?;
                    if key == "map" {
                        addr_map.insert(a, b);
                    } else {
                        gate_log_map.insert(a, b);
                    }
                }
                other => return Err(err(format!("unknown key {other}"))),
            }
        }
        if !seen_header {
            return Err(ImageError::Missing("image header"));
        }
        let base = base.ok_or(ImageError::Missing("base"))?;
        Ok(Image {
            base,
            entry: entry.unwrap_or(base),
            code,
            addr_map,
            gate_log_map,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Image, ImageError> {
        let text = std::fs::read_to_string(path)?;
        Image::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::asm::Asm;
    use crate::vm::inst::R0;

    #[test]
    fn text_roundtrip() {
        let prog = Asm::new(0x4000).mov_imm(R0, 1).halt().assemble();
        let mut img = Image::from_program(&prog);
        img.addr_map.insert(0x4000, 0x4004);
        img.gate_log_map.insert(0x4004, 0x4000);
        let text = img.to_text();
        let back = Image::from_text(&text).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.program().unwrap(), prog);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Image::from_text("").is_err());
        assert!(Image::from_text("image v2\nbase 0\n").is_err());
        assert!(Image::from_text("image v1\nbase zz\n").is_err());
        assert!(Image::from_text("image v1\nnope 3\n").is_err());
    }
}
