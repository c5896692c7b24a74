//! Deterministic rasterizer: programs in, bit-exact pixels out.
//!
//! Formula glyphs stamp the 5x7 font on the baseline, script groups shifted
//! by the configured vertical offsets, every glyph consuming one advance.
//! Boxes draw one-pixel borders; children split the parent interior by
//! float direction in document order, one row per nesting level.

use super::font::{glyph_bitmap, GLYPH_H, GLYPH_W};
use super::{CanvasSpec, FloatDir, Grammar, Item, MarkupError, MarkupProgram};
use crate::image::ImageBuffer;

pub fn render(program: &MarkupProgram, spec: &CanvasSpec) -> Result<ImageBuffer, MarkupError> {
    spec.validate()?;
    let mut img = ImageBuffer::white(spec.height, spec.width);
    match program.grammar {
        Grammar::Formula => render_formula(program, spec, &mut img)?,
        Grammar::Boxes => {
            render_boxes(&program.items, Rect { x: 0, y: 0, w: spec.width, h: spec.height }, &mut img)?
        }
    }
    Ok(img)
}

fn render_formula(
    program: &MarkupProgram,
    spec: &CanvasSpec,
    img: &mut ImageBuffer,
) -> Result<(), MarkupError> {
    let total = program.leaf_count() * spec.advance;
    if total > spec.width {
        return Err(MarkupError::CanvasOverflow(format!(
            "formula needs {total} columns, canvas has {}",
            spec.width
        )));
    }
    let mut pen_x = 0usize;
    for item in &program.items {
        let Item::Glyph { ch, script } = item else {
            return Err(MarkupError::CanvasOverflow("box item in formula program".into()));
        };
        stamp(img, *ch, spec.baseline_row, pen_x)?;
        pen_x += spec.advance;
        if let Some(s) = script {
            let offset = match s.kind {
                super::ScriptKind::Sup => spec.sup_offset,
                super::ScriptKind::Sub => spec.sub_offset,
            };
            let row = (spec.baseline_row as i64 + offset as i64) as usize;
            for &g in &s.glyphs {
                stamp(img, g, row, pen_x)?;
                pen_x += spec.advance;
            }
        }
    }
    Ok(())
}

/// Stamp one glyph whose cell bottom sits at `baseline - 1`.
fn stamp(img: &mut ImageBuffer, ch: char, baseline: usize, x: usize) -> Result<(), MarkupError> {
    let rows = glyph_bitmap(ch)
        .ok_or_else(|| MarkupError::UnknownCharacter { ch, position: 0 })?;
    let top = baseline - GLYPH_H;
    for (dy, bits) in rows.iter().enumerate() {
        for dx in 0..GLYPH_W {
            if bits & (1 << (GLYPH_W - 1 - dx)) != 0 {
                img.set(top + dy, x + dx, 0.0);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy)]
struct Rect {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

fn render_boxes(items: &[Item], interior: Rect, img: &mut ImageBuffer) -> Result<(), MarkupError> {
    let mut used_left = 0usize;
    let mut used_right = 0usize;
    for item in items {
        let Item::Box { width_pct, float, children } = item else {
            return Err(MarkupError::CanvasOverflow("glyph item in boxes program".into()));
        };
        let w = interior.w * *width_pct as usize / 100;
        if w < 3 || interior.h < 3 {
            return Err(MarkupError::CanvasOverflow(format!(
                "box of {width_pct}% collapses to {w}x{} pixels",
                interior.h
            )));
        }
        debug_assert!(used_left + used_right + w <= interior.w, "floats collide");
        let x = match float {
            FloatDir::Left => {
                let x = interior.x + used_left;
                used_left += w;
                x
            }
            FloatDir::Right => {
                used_right += w;
                interior.x + interior.w - used_right
            }
        };
        let rect = Rect { x, y: interior.y, w, h: interior.h };
        outline(img, rect);
        render_boxes(
            children,
            Rect { x: rect.x + 1, y: rect.y + 1, w: rect.w - 2, h: rect.h - 2 },
            img,
        )?;
    }
    Ok(())
}

fn outline(img: &mut ImageBuffer, r: Rect) {
    for dx in 0..r.w {
        img.set(r.y, r.x + dx, 0.0);
        img.set(r.y + r.h - 1, r.x + dx, 0.0);
    }
    for dy in 0..r.h {
        img.set(r.y + dy, r.x, 0.0);
        img.set(r.y + dy, r.x + r.w - 1, 0.0);
    }
}
