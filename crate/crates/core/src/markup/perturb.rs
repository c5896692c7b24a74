//! Symbol-removal perturbations: the difficulty dial for evaluation.
//!
//! Each round removes one uniformly chosen removable leaf. In the formula
//! grammar leaves are glyphs; removing a scripted base glyph promotes its
//! group members to plain items so exactly one leaf disappears per round,
//! and a group emptied of glyphs is deleted together with its modifier. In
//! the boxes grammar leaves are childless boxes.

use super::{Grammar, Item, MarkupError, MarkupProgram};
use crate::rng::Prng;

/// Remove `k` leaves from `program`, drawing uniformly from the evolving
/// leaf set on each round.
pub fn perturb(
    program: &MarkupProgram,
    k: usize,
    rng: &mut Prng,
) -> Result<MarkupProgram, MarkupError> {
    let available = program.leaf_count();
    if k > available {
        return Err(MarkupError::NotEnoughSymbols { available, requested: k });
    }
    let mut out = program.clone();
    for _ in 0..k {
        let n = out.leaf_count() as u64;
        debug_assert!(n > 0, "leaf budget checked up front");
        let pick = rng.below(n) as usize;
        match out.grammar {
            Grammar::Formula => remove_formula_leaf(&mut out.items, pick),
            Grammar::Boxes => {
                remove_box_leaf(&mut out.items, pick);
            }
        }
    }
    Ok(out)
}

/// Leaf order: items left to right, base glyph before its script glyphs.
fn remove_formula_leaf(items: &mut Vec<Item>, mut pick: usize) {
    for idx in 0..items.len() {
        let Item::Glyph { script, .. } = &items[idx] else { continue };
        let group = script.as_ref().map_or(0, |s| s.glyphs.len());
        if pick == 0 {
            // Base glyph: promote any script glyphs to plain items in place.
            let Item::Glyph { script, .. } = items.remove(idx) else { unreachable!() };
            if let Some(s) = script {
                for (j, g) in s.glyphs.into_iter().enumerate() {
                    items.insert(idx + j, Item::Glyph { ch: g, script: None });
                }
            }
            return;
        }
        pick -= 1;
        if pick < group {
            let Item::Glyph { script, .. } = &mut items[idx] else { unreachable!() };
            let s = script.as_mut().expect("group indexed");
            s.glyphs.remove(pick);
            if s.glyphs.is_empty() {
                *script = None;
            }
            return;
        }
        pick -= group;
    }
    unreachable!("pick exceeds leaf count");
}

/// Returns true when the pick was consumed inside this sibling list.
fn remove_box_leaf(items: &mut Vec<Item>, pick: usize) -> bool {
    let mut remaining = pick;
    for idx in 0..items.len() {
        let Item::Box { children, .. } = &mut items[idx] else { continue };
        if children.is_empty() {
            if remaining == 0 {
                items.remove(idx);
                return true;
            }
            remaining -= 1;
        } else {
            let inside = count_box_leaves(children);
            if remaining < inside {
                return remove_box_leaf(children, remaining);
            }
            remaining -= inside;
        }
    }
    false
}

fn count_box_leaves(items: &[Item]) -> usize {
    items
        .iter()
        .map(|it| match it {
            Item::Box { children, .. } if children.is_empty() => 1,
            Item::Box { children, .. } => count_box_leaves(children),
            Item::Glyph { .. } => 0,
        })
        .sum()
}
