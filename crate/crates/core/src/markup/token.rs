//! Tokenizer shared by both grammars.
//!
//! Whitespace separates tokens and is otherwise ignored. The sequence `box(`
//! followed by a digit opens a box header; inside a header, integers and the
//! keywords `left`/`right` are attributes and commas are separators. All
//! other characters must be vocabulary glyphs or the four structural marks
//! `^ _ { }`.

use super::{font, FloatDir, MarkupError};

#[derive(Clone, Debug, PartialEq)]
pub enum TokenKind {
    Glyph(char),
    Sup,
    Sub,
    LBrace,
    RBrace,
    BoxOpen,
    BoxClose,
    Attr(Attr),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Attr {
    Width(u32),
    Float(FloatDir),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    /// Byte offset of the lexeme in the source.
    pub pos: usize,
}

pub fn tokenize(source: &str) -> Result<Vec<Token>, MarkupError> {
    let bytes = source.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0usize;
    let mut in_header = false;
    while i < bytes.len() {
        let b = bytes[i];
        if b.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let pos = i;
        if in_header {
            match b {
                b',' => i += 1,
                b')' => {
                    toks.push(Token { kind: TokenKind::BoxClose, pos });
                    in_header = false;
                    i += 1;
                }
                b'0'..=b'9' => {
                    let start = i;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                    let val: u32 = source[start..i].parse().map_err(|_| {
                        MarkupError::InvalidAttribute {
                            position: pos,
                            reason: "integer attribute overflows".into(),
                        }
                    })?;
                    toks.push(Token { kind: TokenKind::Attr(Attr::Width(val)), pos });
                }
                _ if rest_starts_with(bytes, i, b"left") => {
                    toks.push(Token { kind: TokenKind::Attr(Attr::Float(FloatDir::Left)), pos });
                    i += 4;
                }
                _ if rest_starts_with(bytes, i, b"right") => {
                    toks.push(Token { kind: TokenKind::Attr(Attr::Float(FloatDir::Right)), pos });
                    i += 5;
                }
                _ => {
                    return Err(MarkupError::UnknownCharacter { ch: bytes[i] as char, position: pos })
                }
            }
            continue;
        }
        match b {
            b'^' => {
                toks.push(Token { kind: TokenKind::Sup, pos });
                i += 1;
            }
            b'_' => {
                toks.push(Token { kind: TokenKind::Sub, pos });
                i += 1;
            }
            b'{' => {
                toks.push(Token { kind: TokenKind::LBrace, pos });
                i += 1;
            }
            b'}' => {
                toks.push(Token { kind: TokenKind::RBrace, pos });
                i += 1;
            }
            // `box(` + digit opens a header; `box(` followed by anything else
            // lexes as the four glyphs b o x (.
            _ if rest_starts_with(bytes, i, b"box(")
                && bytes.get(i + 4).is_some_and(|c| c.is_ascii_digit()) =>
            {
                toks.push(Token { kind: TokenKind::BoxOpen, pos });
                in_header = true;
                i += 4;
            }
            _ => {
                let ch = b as char;
                if font::is_glyph(ch) {
                    toks.push(Token { kind: TokenKind::Glyph(ch), pos });
                    i += 1;
                } else {
                    return Err(MarkupError::UnknownCharacter { ch, position: pos });
                }
            }
        }
    }
    if toks.is_empty() {
        return Err(MarkupError::EmptySource);
    }
    Ok(toks)
}

fn rest_starts_with(bytes: &[u8], i: usize, prefix: &[u8]) -> bool {
    bytes[i..].starts_with(prefix)
}

/// Inverse of tokenize up to whitespace: payloads concatenated, with the
/// canonical comma restored between consecutive attributes.
pub fn detokenize(toks: &[Token]) -> String {
    let mut out = String::new();
    let mut prev_attr = false;
    for t in toks {
        let is_attr = matches!(t.kind, TokenKind::Attr(_));
        if prev_attr && is_attr {
            out.push(',');
        }
        match &t.kind {
            TokenKind::Glyph(c) => out.push(*c),
            TokenKind::Sup => out.push('^'),
            TokenKind::Sub => out.push('_'),
            TokenKind::LBrace => out.push('{'),
            TokenKind::RBrace => out.push('}'),
            TokenKind::BoxOpen => out.push_str("box("),
            TokenKind::BoxClose => out.push(')'),
            TokenKind::Attr(Attr::Width(v)) => out.push_str(&v.to_string()),
            TokenKind::Attr(Attr::Float(FloatDir::Left)) => out.push_str("left"),
            TokenKind::Attr(Attr::Float(FloatDir::Right)) => out.push_str("right"),
        }
        prev_attr = is_attr;
    }
    out
}
