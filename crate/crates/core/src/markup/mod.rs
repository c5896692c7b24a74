//! Toy markup languages: a formula grammar (glyphs with superscript or
//! subscript groups) and a nested-boxes grammar (floated boxes, depth two).
//!
//! Programs are small ordered trees. Rendering is deterministic, so every
//! program pairs with exactly one ground-truth image.

pub mod corpus;
pub mod encode;
pub mod font;
pub mod parse;
pub mod perturb;
pub mod render;
pub mod token;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MarkupError {
    #[error("empty source")]
    EmptySource,
    #[error("unknown character {ch:?} at byte {position}")]
    UnknownCharacter { ch: char, position: usize },
    #[error("unbalanced brace (token {position})")]
    UnbalancedBrace { position: usize },
    #[error("nesting depth exceeded (token {position})")]
    DepthExceeded { position: usize },
    #[error("empty script group (token {position})")]
    EmptyGroup { position: usize },
    #[error("script group longer than 3 glyphs (token {position})")]
    GroupTooLong { position: usize },
    #[error("unexpected {found} (token {position})")]
    UnexpectedToken { position: usize, found: String },
    #[error("invalid attribute (token {position}): {reason}")]
    InvalidAttribute { position: usize, reason: String },
    #[error("canvas spec invalid: {0}")]
    InvalidCanvas(String),
    #[error("content exceeds canvas: {0}")]
    CanvasOverflow(String),
    #[error("not enough symbols: {available} removable, {requested} requested")]
    NotEnoughSymbols { available: usize, requested: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("generation stalled: {rejected} of {attempts} attempts rejected")]
    GenerationStalled { attempts: usize, rejected: usize },
    #[error("corpus i/o: {0}")]
    CorpusIo(String),
    #[error("corpus malformed: {0}")]
    CorpusFormat(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grammar {
    Formula,
    Boxes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FloatDir {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScriptKind {
    Sup,
    Sub,
}

/// Superscript or subscript group: one to three plain glyphs.
#[derive(Clone, Debug, PartialEq)]
pub struct Script {
    pub kind: ScriptKind,
    pub glyphs: Vec<char>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Item {
    /// Formula leaf: a base glyph with an optional script group.
    Glyph { ch: char, script: Option<Script> },
    /// Boxes node: floated box sized as a percentage of its parent interior.
    Box { width_pct: u32, float: FloatDir, children: Vec<Item> },
}

/// Parsed markup source: the conditioning input of the generation task.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkupProgram {
    pub grammar: Grammar,
    pub items: Vec<Item>,
}

impl MarkupProgram {
    pub fn empty(grammar: Grammar) -> Self {
        MarkupProgram { grammar, items: Vec::new() }
    }

    /// Removable leaf symbols: every glyph (base and script) in the formula
    /// grammar, childless boxes in the boxes grammar.
    pub fn leaf_count(&self) -> usize {
        fn boxes(items: &[Item]) -> usize {
            items
                .iter()
                .map(|it| match it {
                    Item::Box { children, .. } if children.is_empty() => 1,
                    Item::Box { children, .. } => boxes(children),
                    Item::Glyph { .. } => 0,
                })
                .sum()
        }
        match self.grammar {
            Grammar::Formula => self
                .items
                .iter()
                .map(|it| match it {
                    Item::Glyph { script, .. } => {
                        1 + script.as_ref().map_or(0, |s| s.glyphs.len())
                    }
                    Item::Box { .. } => 0,
                })
                .sum(),
            Grammar::Boxes => boxes(&self.items),
        }
    }

    /// Canonical source text; `parse(tokenize(source()))` reproduces the tree.
    pub fn source(&self) -> String {
        let mut out = String::new();
        write_items(&self.items, &mut out);
        out
    }
}

fn write_items(items: &[Item], out: &mut String) {
    for it in items {
        match it {
            Item::Glyph { ch, script } => {
                out.push(*ch);
                if let Some(s) = script {
                    out.push(match s.kind {
                        ScriptKind::Sup => '^',
                        ScriptKind::Sub => '_',
                    });
                    out.push('{');
                    out.extend(s.glyphs.iter());
                    out.push('}');
                }
            }
            Item::Box { width_pct, float, children } => {
                let dir = match float {
                    FloatDir::Left => "left",
                    FloatDir::Right => "right",
                };
                out.push_str(&format!("box({width_pct},{dir}){{"));
                write_items(children, out);
                out.push('}');
            }
        }
    }
}

/// Fixed raster geometry for rendering: glyph cell 5x7, horizontal advance,
/// and vertical script offsets relative to the baseline stamp.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanvasSpec {
    pub height: usize,
    pub width: usize,
    pub baseline_row: usize,
    pub advance: usize,
    pub sup_offset: i32,
    pub sub_offset: i32,
}

impl CanvasSpec {
    pub fn formula_default() -> Self {
        CanvasSpec { height: 32, width: 96, baseline_row: 19, advance: 6, sup_offset: -6, sub_offset: 6 }
    }

    pub fn boxes_default() -> Self {
        CanvasSpec { height: 64, width: 64, baseline_row: 19, advance: 6, sup_offset: -6, sub_offset: 6 }
    }

    pub fn for_grammar(grammar: Grammar) -> Self {
        match grammar {
            Grammar::Formula => Self::formula_default(),
            Grammar::Boxes => Self::boxes_default(),
        }
    }

    /// Glyph cells must fit above, at, and below the baseline.
    pub fn validate(&self) -> Result<(), MarkupError> {
        let h = font::GLYPH_H;
        if self.baseline_row + h + self.sub_offset.unsigned_abs() as usize > self.height {
            return Err(MarkupError::InvalidCanvas(format!(
                "baseline_row {} + {} + |sub_offset| exceeds height {}",
                self.baseline_row, h, self.height
            )));
        }
        if (self.baseline_row as i64) < h as i64 + self.sup_offset.unsigned_abs() as i64 {
            return Err(MarkupError::InvalidCanvas(format!(
                "baseline_row {} leaves no room for superscripts",
                self.baseline_row
            )));
        }
        if self.advance < font::GLYPH_W {
            return Err(MarkupError::InvalidCanvas(format!(
                "advance {} narrower than glyph cell {}",
                self.advance,
                font::GLYPH_W
            )));
        }
        Ok(())
    }
}
