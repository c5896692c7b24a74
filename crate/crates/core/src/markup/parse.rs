//! Recursive-descent parsers for both grammars.
//!
//! Formula: items are base glyphs, each optionally carrying one `^{...}` or
//! `_{...}` group of one to three plain glyphs; groups cannot nest.
//! Boxes: `box(W,float){children}` with nesting depth at most two and sibling
//! widths summing to at most 100 percent.

use super::token::{tokenize, Attr, Token, TokenKind};
use super::{FloatDir, Grammar, Item, MarkupError, MarkupProgram, Script, ScriptKind};

/// Maximum glyphs in a script group.
pub const MAX_GROUP: usize = 3;
/// Maximum box nesting depth.
pub const MAX_DEPTH: usize = 2;
/// Inclusive box width bounds, percent of parent interior.
pub const WIDTH_RANGE: (u32, u32) = (10, 90);

pub fn parse(tokens: &[Token], grammar: Grammar) -> Result<MarkupProgram, MarkupError> {
    let items = match grammar {
        Grammar::Formula => parse_formula(tokens)?,
        Grammar::Boxes => {
            let mut i = 0;
            let items = parse_box_seq(tokens, &mut i, 1)?;
            if i < tokens.len() {
                // Only a stray `}` can stop the root sequence early.
                return Err(MarkupError::UnbalancedBrace { position: i });
            }
            items
        }
    };
    Ok(MarkupProgram { grammar, items })
}

/// `tokenize` + `parse` in one step.
pub fn parse_source(source: &str, grammar: Grammar) -> Result<MarkupProgram, MarkupError> {
    parse(&tokenize(source)?, grammar)
}

fn parse_formula(tokens: &[Token]) -> Result<Vec<Item>, MarkupError> {
    let mut items = Vec::new();
    let mut i = 0usize;
    while i < tokens.len() {
        match &tokens[i].kind {
            TokenKind::Glyph(ch) => {
                let base = *ch;
                i += 1;
                let script = match tokens.get(i).map(|t| &t.kind) {
                    Some(TokenKind::Sup) => Some(ScriptKind::Sup),
                    Some(TokenKind::Sub) => Some(ScriptKind::Sub),
                    _ => None,
                }
                .map(|kind| {
                    i += 1;
                    parse_group(tokens, &mut i).map(|glyphs| Script { kind, glyphs })
                })
                .transpose()?;
                items.push(Item::Glyph { ch: base, script });
            }
            TokenKind::RBrace => return Err(MarkupError::UnbalancedBrace { position: i }),
            other => {
                return Err(MarkupError::UnexpectedToken {
                    position: i,
                    found: describe(other),
                })
            }
        }
    }
    Ok(items)
}

/// Parses `{ g g g }` after a script marker; `i` sits on the expected `{`.
fn parse_group(tokens: &[Token], i: &mut usize) -> Result<Vec<char>, MarkupError> {
    let open = *i;
    match tokens.get(*i).map(|t| &t.kind) {
        Some(TokenKind::LBrace) => *i += 1,
        _ => return Err(MarkupError::UnbalancedBrace { position: open }),
    }
    let mut glyphs = Vec::new();
    loop {
        match tokens.get(*i).map(|t| &t.kind) {
            Some(TokenKind::Glyph(ch)) => {
                glyphs.push(*ch);
                *i += 1;
            }
            Some(TokenKind::RBrace) => {
                *i += 1;
                break;
            }
            Some(TokenKind::Sup) | Some(TokenKind::Sub) => {
                return Err(MarkupError::DepthExceeded { position: *i })
            }
            Some(_) => return Err(MarkupError::UnbalancedBrace { position: *i }),
            None => return Err(MarkupError::UnbalancedBrace { position: open }),
        }
    }
    if glyphs.is_empty() {
        return Err(MarkupError::EmptyGroup { position: open });
    }
    if glyphs.len() > MAX_GROUP {
        return Err(MarkupError::GroupTooLong { position: open });
    }
    Ok(glyphs)
}

/// Parses sibling boxes until end of input (depth 1) or the parent's `}`.
/// Leaves `i` on the terminating `}` for the caller to consume.
fn parse_box_seq(tokens: &[Token], i: &mut usize, depth: usize) -> Result<Vec<Item>, MarkupError> {
    let mut items = Vec::new();
    let mut width_sum: u64 = 0;
    loop {
        match tokens.get(*i).map(|t| &t.kind) {
            Some(TokenKind::BoxOpen) => {
                if depth > MAX_DEPTH {
                    return Err(MarkupError::DepthExceeded { position: *i });
                }
                let open = *i;
                *i += 1;
                let width_pct = expect_width(tokens, i)?;
                let float = expect_float(tokens, i)?;
                expect(tokens, i, &TokenKind::BoxClose)?;
                expect(tokens, i, &TokenKind::LBrace)?;
                let children = parse_box_seq(tokens, i, depth + 1)?;
                match tokens.get(*i).map(|t| &t.kind) {
                    Some(TokenKind::RBrace) => *i += 1,
                    _ => return Err(MarkupError::UnbalancedBrace { position: open }),
                }
                width_sum += width_pct as u64;
                if width_sum > 100 {
                    return Err(MarkupError::InvalidAttribute {
                        position: open,
                        reason: format!("sibling widths sum to {width_sum} > 100"),
                    });
                }
                items.push(Item::Box { width_pct, float, children });
            }
            Some(TokenKind::RBrace) | None => return Ok(items),
            Some(other) => {
                return Err(MarkupError::UnexpectedToken {
                    position: *i,
                    found: describe(other),
                })
            }
        }
    }
}

fn expect(tokens: &[Token], i: &mut usize, want: &TokenKind) -> Result<(), MarkupError> {
    match tokens.get(*i).map(|t| &t.kind) {
        Some(k) if k == want => {
            *i += 1;
            Ok(())
        }
        Some(other) => {
            Err(MarkupError::UnexpectedToken { position: *i, found: describe(other) })
        }
        None => Err(MarkupError::UnbalancedBrace { position: *i }),
    }
}

fn expect_width(tokens: &[Token], i: &mut usize) -> Result<u32, MarkupError> {
    match tokens.get(*i).map(|t| &t.kind) {
        Some(TokenKind::Attr(Attr::Width(v))) => {
            if *v < WIDTH_RANGE.0 || *v > WIDTH_RANGE.1 {
                return Err(MarkupError::InvalidAttribute {
                    position: *i,
                    reason: format!("width {v} outside {}..={}", WIDTH_RANGE.0, WIDTH_RANGE.1),
                });
            }
            *i += 1;
            Ok(*v)
        }
        Some(other) => Err(MarkupError::UnexpectedToken { position: *i, found: describe(other) }),
        None => Err(MarkupError::UnbalancedBrace { position: *i }),
    }
}

fn expect_float(tokens: &[Token], i: &mut usize) -> Result<FloatDir, MarkupError> {
    match tokens.get(*i).map(|t| &t.kind) {
        Some(TokenKind::Attr(Attr::Float(d))) => {
            *i += 1;
            Ok(*d)
        }
        Some(other) => Err(MarkupError::UnexpectedToken { position: *i, found: describe(other) }),
        None => Err(MarkupError::UnbalancedBrace { position: *i }),
    }
}

fn describe(kind: &TokenKind) -> String {
    match kind {
        TokenKind::Glyph(c) => format!("glyph {c:?}"),
        TokenKind::Sup => "'^'".into(),
        TokenKind::Sub => "'_'".into(),
        TokenKind::LBrace => "'{'".into(),
        TokenKind::RBrace => "'}'".into(),
        TokenKind::BoxOpen => "'box('".into(),
        TokenKind::BoxClose => "')'".into(),
        TokenKind::Attr(Attr::Width(v)) => format!("attribute {v}"),
        TokenKind::Attr(Attr::Float(_)) => "float attribute".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_glyph_tree() {
        let p = parse_source("a^{2}", Grammar::Formula).unwrap();
        assert_eq!(
            p.items,
            vec![Item::Glyph {
                ch: 'a',
                script: Some(Script { kind: ScriptKind::Sup, glyphs: vec!['2'] }),
            }]
        );
    }

    #[test]
    fn nested_scripts_exceed_depth() {
        assert!(matches!(
            parse_source("a^{b^{c}}", Grammar::Formula),
            Err(MarkupError::DepthExceeded { .. })
        ));
    }

    #[test]
    fn group_size_limits() {
        assert!(matches!(
            parse_source("a^{}", Grammar::Formula),
            Err(MarkupError::EmptyGroup { .. })
        ));
        assert!(parse_source("a^{123}", Grammar::Formula).is_ok());
        assert!(matches!(
            parse_source("a^{1234}", Grammar::Formula),
            Err(MarkupError::GroupTooLong { .. })
        ));
    }

    #[test]
    fn modifier_needs_base_and_braces() {
        assert!(matches!(
            parse_source("^{2}", Grammar::Formula),
            Err(MarkupError::UnexpectedToken { .. })
        ));
        assert!(matches!(
            parse_source("a^2", Grammar::Formula),
            Err(MarkupError::UnbalancedBrace { .. })
        ));
        assert!(matches!(
            parse_source("a^{2", Grammar::Formula),
            Err(MarkupError::UnbalancedBrace { .. })
        ));
        // One modifier per base: a second marker has no bare glyph to bind.
        assert!(matches!(
            parse_source("a^{2}_{3}", Grammar::Formula),
            Err(MarkupError::UnexpectedToken { .. })
        ));
    }

    #[test]
    fn depth_two_boxes_accepted() {
        let p = parse_source("box(50,left){box(40,right){}}", Grammar::Boxes).unwrap();
        match &p.items[0] {
            Item::Box { width_pct: 50, float: FloatDir::Left, children } => {
                assert_eq!(children.len(), 1);
                assert!(matches!(
                    children[0],
                    Item::Box { width_pct: 40, float: FloatDir::Right, ref children }
                        if children.is_empty()
                ));
            }
            other => panic!("unexpected tree: {other:?}"),
        }
    }

    #[test]
    fn depth_three_boxes_rejected() {
        let src = "box(50,left){box(40,right){box(30,left){}}}";
        assert!(matches!(
            parse_source(src, Grammar::Boxes),
            Err(MarkupError::DepthExceeded { .. })
        ));
    }

    #[test]
    fn box_attribute_validation() {
        assert!(matches!(
            parse_source("box(95,left){}", Grammar::Boxes),
            Err(MarkupError::InvalidAttribute { .. })
        ));
        assert!(matches!(
            parse_source("box(60,left){}box(50,right){}", Grammar::Boxes),
            Err(MarkupError::InvalidAttribute { .. })
        ));
        assert!(parse_source("box(60,left){}box(40,right){}", Grammar::Boxes).is_ok());
    }

    #[test]
    fn cross_grammar_tokens_rejected() {
        assert!(matches!(
            parse_source("box(50,left){}", Grammar::Formula),
            Err(MarkupError::UnexpectedToken { .. })
        ));
        assert!(matches!(
            parse_source("ab", Grammar::Boxes),
            Err(MarkupError::UnexpectedToken { .. })
        ));
    }

    #[test]
    fn stray_closing_brace() {
        assert!(matches!(
            parse_source("ab}", Grammar::Formula),
            Err(MarkupError::UnbalancedBrace { .. })
        ));
        assert!(matches!(
            parse_source("box(50,left){}}", Grammar::Boxes),
            Err(MarkupError::UnbalancedBrace { .. })
        ));
    }

    #[test]
    fn source_round_trip() {
        for src in ["a^{2}bx_{k1}", "box(50,left){box(40,right){}}box(20,right){}"] {
            let grammar =
                if src.starts_with("box(") { Grammar::Boxes } else { Grammar::Formula };
            let p = parse_source(src, grammar).unwrap();
            assert_eq!(p.source(), src);
            assert_eq!(parse_source(&p.source(), grammar).unwrap(), p);
        }
    }
}
