//! Random corpus generation and the on-disk corpus format.
//!
//! A corpus directory holds `manifest.json`, `markup.txt` (one source per
//! line), and `images/NNNNNN.pgm`, index-aligned. Every item is generated
//! from a sub-stream derived from the corpus seed and item index, so corpora
//! are reproducible byte for byte and generation could shard by index.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::font::VOCABULARY;
use super::parse::parse_source;
use super::render::render;
use super::{CanvasSpec, FloatDir, Grammar, Item, MarkupError, MarkupProgram, Script, ScriptKind};
use crate::image::ImageBuffer;
use crate::rng::Prng;

/// Attempt budget before the rejection rate is judged.
const STALL_WINDOW: usize = 100_000;
const STALL_RATE: f64 = 0.99;

/// Probability that a base glyph carries a script group.
const SCRIPT_PROB: f64 = 0.3;
/// Probability that a box with remaining budget gets children.
const CHILD_PROB: f64 = 0.5;

pub fn generate_corpus(
    grammar: Grammar,
    n: usize,
    length_range: (usize, usize),
    rng: &Prng,
    canvas: &CanvasSpec,
) -> Result<Vec<(MarkupProgram, ImageBuffer)>, MarkupError> {
    let (lmin, lmax) = length_range;
    if lmin < 1 || lmin > lmax {
        return Err(MarkupError::InvalidRequest(format!(
            "length range {lmin}..={lmax} is not usable"
        )));
    }
    canvas.validate()?;
    let mut pairs = Vec::with_capacity(n);
    let mut attempts = 0usize;
    let mut rejected = 0usize;
    for i in 0..n {
        let item_rng = rng.derive("item", i as u64);
        let mut attempt = 0u64;
        loop {
            attempts += 1;
            let mut try_rng = item_rng.derive("try", attempt);
            attempt += 1;
            let len = lmin + try_rng.below((lmax - lmin + 1) as u64) as usize;
            let candidate = match grammar {
                Grammar::Formula => Some(gen_formula(&mut try_rng, len)),
                Grammar::Boxes => gen_boxes(&mut try_rng, len),
            };
            let accepted = candidate.and_then(|p| render(&p, canvas).ok().map(|img| (p, img)));
            match accepted {
                Some(pair) => {
                    pairs.push(pair);
                    break;
                }
                None => {
                    rejected += 1;
                    if attempts >= STALL_WINDOW && rejected as f64 > attempts as f64 * STALL_RATE {
                        return Err(MarkupError::GenerationStalled { attempts, rejected });
                    }
                }
            }
        }
    }
    Ok(pairs)
}

/// Exactly `len` glyphs split between bases and script groups.
fn gen_formula(rng: &mut Prng, len: usize) -> MarkupProgram {
    let mut items = Vec::new();
    let mut remaining = len;
    while remaining > 0 {
        let ch = *rng.choose(&VOCABULARY);
        remaining -= 1;
        let script = if remaining > 0 && rng.flip(SCRIPT_PROB) {
            let kind = if rng.flip(0.5) { ScriptKind::Sup } else { ScriptKind::Sub };
            let size = 1 + rng.below(remaining.min(3) as u64) as usize;
            remaining -= size;
            let glyphs = (0..size).map(|_| *rng.choose(&VOCABULARY)).collect();
            Some(Script { kind, glyphs })
        } else {
            None
        };
        items.push(Item::Glyph { ch, script });
    }
    MarkupProgram { grammar: Grammar::Formula, items }
}

/// Exactly `len` boxes; None when the width budget dead-ends.
fn gen_boxes(rng: &mut Prng, len: usize) -> Option<MarkupProgram> {
    let mut items = Vec::new();
    let mut remaining = len;
    let mut root_sum = 0u32;
    while remaining > 0 {
        let width_pct = 10 + rng.below(81) as u32;
        if root_sum + width_pct > 100 {
            return None;
        }
        root_sum += width_pct;
        let float = if rng.flip(0.5) { FloatDir::Left } else { FloatDir::Right };
        remaining -= 1;
        let mut children = Vec::new();
        if remaining > 0 && rng.flip(CHILD_PROB) {
            let count = 1 + rng.below(remaining.min(2) as u64) as usize;
            let mut child_sum = 0u32;
            for _ in 0..count {
                let w = 10 + rng.below(81) as u32;
                if child_sum + w > 100 {
                    return None;
                }
                child_sum += w;
                let f = if rng.flip(0.5) { FloatDir::Left } else { FloatDir::Right };
                children.push(Item::Box { width_pct: w, float: f, children: Vec::new() });
                remaining -= 1;
            }
        }
        items.push(Item::Box { width_pct, float, children });
    }
    Some(MarkupProgram { grammar: Grammar::Boxes, items })
}

/// Index lists per split, resolved at generation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Split request: fractions of the corpus or exact counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitSpec {
    Counts { train: usize, val: usize, test: usize },
    Fractions { train: f64, val: f64, test: f64 },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitSpec {
    /// Shuffle 0..n and slice; fractions must sum to 1, counts to n.
    pub fn resolve(&self, n: usize, rng: &mut Prng) -> Result<Split, MarkupError> {
        let (a, b) = match *self {
            SplitSpec::Counts { train, val, test } => {
                if train + val + test != n {
                    return Err(MarkupError::InvalidRequest(format!(
                        "split counts {train}+{val}+{test} != corpus size {n}"
                    )));
                }
                (train, train + val)
            }
            SplitSpec::Fractions { train, val, test } => {
                if (train + val + test - 1.0).abs() > 1e-9 || train < 0.0 || val < 0.0 || test < 0.0
                {
                    return Err(MarkupError::InvalidRequest(format!(
                        "split fractions {train}+{val}+{test} must sum to 1"
                    )));
                }
                let a = (train * n as f64).round() as usize;
                let b = ((train + val) * n as f64).round() as usize;
                (a.min(n), b.min(n))
            }
        };
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Ok(Split {
            train: order[..a].to_vec(),
            val: order[a..b].to_vec(),
            test: order[b..].to_vec(),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub grammar: Grammar,
    pub canvas: CanvasSpec,
    pub seed: u64,
    pub count: usize,
    pub length_min: usize,
    pub length_max: usize,
    pub split: Split,
}

/// In-memory corpus: manifest plus index-aligned programs and images.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub programs: Vec<MarkupProgram>,
    pub images: Vec<ImageBuffer>,
}

impl Corpus {
    pub fn pair(&self, index: usize) -> (&MarkupProgram, &ImageBuffer) {
        (&self.programs[index], &self.images[index])
    }
}

fn io_err(context: &str, e: impl std::fmt::Display) -> MarkupError {
    MarkupError::CorpusIo(format!("{context}: {e}"))
}

/// Write a corpus directory. Refuses to touch an existing directory unless
/// `force` is set, in which case it is replaced wholesale.
pub fn write_corpus(
    dir: &Path,
    manifest: &CorpusManifest,
    pairs: &[(MarkupProgram, ImageBuffer)],
    force: bool,
) -> Result<(), MarkupError> {
    if dir.exists() {
        if !force {
            return Err(MarkupError::CorpusIo(format!(
                "{} already exists (use force to replace)",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| io_err("removing old corpus", e))?;
    }
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| io_err("creating corpus dir", e))?;
    let manifest_json = serde_json::to_string_pretty(manifest)
        .map_err(|e| io_err("encoding manifest", e))?;
    fs::write(dir.join("manifest.json"), manifest_json)
        .map_err(|e| io_err("writing manifest", e))?;
    let mut lines = String::new();
    for (p, _) in pairs {
        lines.push_str(&p.source());
        lines.push('\n');
    }
    fs::write(dir.join("markup.txt"), lines).map_err(|e| io_err("writing markup.txt", e))?;
    for (i, (_, img)) in pairs.iter().enumerate() {
        let path = images_dir.join(format!("{i:06}.pgm"));
        img.write_pgm(&path).map_err(|e| io_err("writing image", e))?;
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, MarkupError> {
    let manifest_raw = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| io_err("reading manifest", e))?;
    let manifest: CorpusManifest = serde_json::from_str(&manifest_raw)
        .map_err(|e| MarkupError::CorpusFormat(format!("manifest: {e}")))?;
    let markup_raw = fs::read_to_string(dir.join("markup.txt"))
        .map_err(|e| io_err("reading markup.txt", e))?;
    let lines: Vec<&str> = markup_raw.lines().collect();
    if lines.len() != manifest.count {
        return Err(MarkupError::CorpusFormat(format!(
            "manifest count {} != markup lines {}",
            manifest.count,
            lines.len()
        )));
    }
    let mut programs = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let p = parse_source(line, manifest.grammar)
            .map_err(|e| MarkupError::CorpusFormat(format!("markup line {i}: {e}")))?;
        programs.push(p);
    }
    let mut images = Vec::with_capacity(lines.len());
    for i in 0..lines.len() {
        let path = dir.join("images").join(format!("{i:06}.pgm"));
        let img = ImageBuffer::read_pgm(&path).map_err(|e| io_err("reading image", e))?;
        images.push(img);
    }
    for split in [&manifest.split.train, &manifest.split.val, &manifest.split.test] {
        if split.iter().any(|&i| i >= manifest.count) {
            return Err(MarkupError::CorpusFormat("split index out of range".into()));
        }
    }
    Ok(Corpus { manifest, programs, images })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_corpus() {
        let rng = Prng::from_root(1);
        let pairs = generate_corpus(
            Grammar::Formula,
            0,
            (3, 12),
            &rng,
            &CanvasSpec::formula_default(),
        )
        .unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn same_seed_same_corpus() {
        let canvas = CanvasSpec::formula_default();
        let a = generate_corpus(Grammar::Formula, 20, (3, 12), &Prng::from_root(7), &canvas)
            .unwrap();
        let b = generate_corpus(Grammar::Formula, 20, (3, 12), &Prng::from_root(7), &canvas)
            .unwrap();
        assert_eq!(a.len(), b.len());
        for ((pa, ia), (pb, ib)) in a.iter().zip(&b) {
            assert_eq!(pa, pb);
            assert_eq!(ia, ib);
        }
    }

    #[test]
    fn generated_programs_have_requested_lengths_and_reparse() {
        let canvas = CanvasSpec::formula_default();
        let pairs =
            generate_corpus(Grammar::Formula, 50, (3, 12), &Prng::from_root(11), &canvas).unwrap();
        for (p, img) in &pairs {
            let n = p.leaf_count();
            assert!((3..=12).contains(&n), "length {n}");
            assert_eq!(&parse_source(&p.source(), Grammar::Formula).unwrap(), p);
            assert!(img.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(img.as_slice().iter().any(|&v| v == 0.0), "blank render");
        }
    }

    #[test]
    fn boxes_corpus_generates_and_reparses() {
        let canvas = CanvasSpec::boxes_default();
        let pairs =
            generate_corpus(Grammar::Boxes, 30, (1, 3), &Prng::from_root(13), &canvas).unwrap();
        for (p, _) in &pairs {
            assert_eq!(&parse_source(&p.source(), Grammar::Boxes).unwrap(), p);
        }
    }

    #[test]
    fn infeasible_config_stalls() {
        // 40 glyphs * 6 columns never fits a 96-column canvas.
        let canvas = CanvasSpec::formula_default();
        let err = generate_corpus(Grammar::Formula, 1, (40, 40), &Prng::from_root(1), &canvas);
        assert!(matches!(err, Err(MarkupError::GenerationStalled { .. })));
    }

    #[test]
    fn split_fractions_and_counts() {
        let mut rng = Prng::from_root(3);
        let s = SplitSpec::default().resolve(10, &mut rng).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let mut all: Vec<usize> =
            s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let counts = SplitSpec::Counts { train: 7, val: 0, test: 3 };
        let s2 = counts.resolve(10, &mut rng).unwrap();
        assert_eq!((s2.train.len(), s2.val.len(), s2.test.len()), (7, 0, 3));
        assert!(counts.resolve(11, &mut rng).is_err());

        let bad = SplitSpec::Fractions { train: 0.5, val: 0.2, test: 0.2 };
        assert!(bad.resolve(10, &mut rng).is_err());
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let canvas = CanvasSpec::formula_default();
        let rng = Prng::from_root(21);
        let pairs = generate_corpus(Grammar::Formula, 12, (3, 8), &rng, &canvas).unwrap();
        let mut split_rng = rng.derive("split", 0);
        let split = SplitSpec::default().resolve(12, &mut split_rng).unwrap();
        let manifest = CorpusManifest {
            grammar: Grammar::Formula,
            canvas,
            seed: 21,
            count: 12,
            length_min: 3,
            length_max: 8,
            split,
        };
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("corpus");
        write_corpus(&root, &manifest, &pairs, false).unwrap();
        assert!(write_corpus(&root, &manifest, &pairs, false).is_err());
        let loaded = load_corpus(&root).unwrap();
        assert_eq!(loaded.programs.len(), 12);
        for (i, (p, img)) in pairs.iter().enumerate() {
            assert_eq!(&loaded.programs[i], p);
            assert_eq!(loaded.images[i].to_bytes(), img.to_bytes());
        }
        write_corpus(&root, &manifest, &pairs, true).unwrap();
    }
}
