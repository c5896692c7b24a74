//! Closed-vocabulary integer encoding of markup programs for conditioning.
//!
//! Ids: 0 = pad, 1 = bos, 2 = eos, then the 43 glyphs in font order, the
//! structural marks, float keywords, and one id per legal box width.

use super::font::{glyph_index, VOCABULARY};
use super::parse::WIDTH_RANGE;
use super::token::{detokenize, Attr, Token, TokenKind};
use super::{FloatDir, Item, MarkupProgram, ScriptKind};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;

const GLYPH_BASE: u32 = 3;
const SUP: u32 = GLYPH_BASE + VOCABULARY.len() as u32;
const SUB: u32 = SUP + 1;
const LBRACE: u32 = SUB + 1;
const RBRACE: u32 = LBRACE + 1;
const BOXOPEN: u32 = RBRACE + 1;
const BOXCLOSE: u32 = BOXOPEN + 1;
const FLOAT_LEFT: u32 = BOXCLOSE + 1;
const FLOAT_RIGHT: u32 = FLOAT_LEFT + 1;
const WIDTH_BASE: u32 = FLOAT_RIGHT + 1;

/// Total id count; ids are dense in `0..VOCAB_SIZE`.
pub const VOCAB_SIZE: usize =
    (WIDTH_BASE + (WIDTH_RANGE.1 - WIDTH_RANGE.0) + 1) as usize;

/// Fixed-length id sequence with its true (unpadded) length.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSeq {
    pub ids: Vec<u32>,
    pub len: usize,
}

impl EncodedSeq {
    /// True-length mask: `true` for bos, payload, and eos positions.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i < self.len).collect()
    }
}

fn id_of(kind: &TokenKind) -> u32 {
    match kind {
        TokenKind::Glyph(c) => {
            GLYPH_BASE + glyph_index(*c).expect("parsed glyphs are in the vocabulary") as u32
        }
        TokenKind::Sup => SUP,
        TokenKind::Sub => SUB,
        TokenKind::LBrace => LBRACE,
        TokenKind::RBrace => RBRACE,
        TokenKind::BoxOpen => BOXOPEN,
        TokenKind::BoxClose => BOXCLOSE,
        TokenKind::Attr(Attr::Float(FloatDir::Left)) => FLOAT_LEFT,
        TokenKind::Attr(Attr::Float(FloatDir::Right)) => FLOAT_RIGHT,
        TokenKind::Attr(Attr::Width(v)) => {
            debug_assert!((WIDTH_RANGE.0..=WIDTH_RANGE.1).contains(v));
            WIDTH_BASE + (v - WIDTH_RANGE.0)
        }
    }
}

fn kind_of(id: u32) -> Option<TokenKind> {
    match id {
        _ if id >= GLYPH_BASE && id < SUP => {
            Some(TokenKind::Glyph(VOCABULARY[(id - GLYPH_BASE) as usize]))
        }
        _ if id == SUP => Some(TokenKind::Sup),
        _ if id == SUB => Some(TokenKind::Sub),
        _ if id == LBRACE => Some(TokenKind::LBrace),
        _ if id == RBRACE => Some(TokenKind::RBrace),
        _ if id == BOXOPEN => Some(TokenKind::BoxOpen),
        _ if id == BOXCLOSE => Some(TokenKind::BoxClose),
        _ if id == FLOAT_LEFT => Some(TokenKind::Attr(Attr::Float(FloatDir::Left))),
        _ if id == FLOAT_RIGHT => Some(TokenKind::Attr(Attr::Float(FloatDir::Right))),
        _ if id >= WIDTH_BASE && (id as usize) < VOCAB_SIZE => {
            Some(TokenKind::Attr(Attr::Width(WIDTH_RANGE.0 + (id - WIDTH_BASE))))
        }
        _ => None,
    }
}

fn push_item_kinds(items: &[Item], out: &mut Vec<TokenKind>) {
    for item in items {
        match item {
            Item::Glyph { ch, script } => {
                out.push(TokenKind::Glyph(*ch));
                if let Some(s) = script {
                    out.push(match s.kind {
                        ScriptKind::Sup => TokenKind::Sup,
                        ScriptKind::Sub => TokenKind::Sub,
                    });
                    out.push(TokenKind::LBrace);
                    out.extend(s.glyphs.iter().map(|&g| TokenKind::Glyph(g)));
                    out.push(TokenKind::RBrace);
                }
            }
            Item::Box { width_pct, float, children } => {
                out.push(TokenKind::BoxOpen);
                out.push(TokenKind::Attr(Attr::Width(*width_pct)));
                out.push(TokenKind::Attr(Attr::Float(*float)));
                out.push(TokenKind::BoxClose);
                out.push(TokenKind::LBrace);
                push_item_kinds(children, out);
                out.push(TokenKind::RBrace);
            }
        }
    }
}

/// bos + token ids + eos, truncated to and padded with `PAD` up to `max_len`.
pub fn encode(program: &MarkupProgram, max_len: usize) -> EncodedSeq {
    assert!(max_len >= 2, "max_len must fit bos and eos");
    let mut kinds = Vec::new();
    push_item_kinds(&program.items, &mut kinds);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(kinds.iter().take(max_len - 2).map(id_of));
    ids.push(EOS);
    let len = ids.len();
    ids.resize(max_len, PAD);
    EncodedSeq { ids, len }
}

/// Source text for an id sequence, ignoring pad/bos/eos; unknown ids are
/// skipped. Inverse of `encode` for programs that fit the length budget.
pub fn decode(ids: &[u32]) -> String {
    let toks: Vec<Token> = ids
        .iter()
        .filter(|&&id| id != PAD && id != BOS && id != EOS)
        .filter_map(|&id| kind_of(id))
        .map(|kind| Token { kind, pos: 0 })
        .collect();
    detokenize(&toks)
}
