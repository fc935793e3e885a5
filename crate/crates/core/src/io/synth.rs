//! Seeded generators of structured synthetic layouts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::layout::{raster_sort, BBox, CategoryVocab, Element, Layout, DEFAULT_MAX_ELEMENTS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Title band on top, one or two columns of stacked blocks below.
    #[default]
    Document,
    /// Boxes on a 1/32 lattice separated by gutters.
    Grid,
    /// Outdoor scene: sky on top, ground at the bottom, objects standing on it.
    Asymmetric,
}

impl SynthKind {
    pub fn categories(self) -> CategoryVocab {
        let names: &[&str] = match self {
            SynthKind::Document => &["text", "title", "list", "table", "figure"],
            SynthKind::Grid => &["image", "text", "button", "icon"],
            SynthKind::Asymmetric => &["sky", "cloud", "ground", "tree", "person"],
        };
        CategoryVocab::new(names.iter().copied()).expect("distinct names")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub min_elements: usize,
    pub max_elements: usize,
    /// Standard deviation of centroid jitter, in bins at `bits` precision.
    pub jitter: f64,
    pub bits: u32,
    pub seed: u64,
    /// Hard element limit of the target vocabulary.
    pub element_limit: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            kind: SynthKind::Document,
            min_elements: 1,
            max_elements: 24,
            jitter: 0.0,
            bits: 8,
            seed: 0,
            element_limit: DEFAULT_MAX_ELEMENTS,
        }
    }
}

const MARGIN: f64 = 0.08;
const LATTICE: u32 = 32;
const MAX_ATTEMPTS: usize = 1000;

/// A box in continuous coordinates before jitter and quantization.
type Draft = (u32, BBox);

fn from_edges(category: u32, x0: f64, y0: f64, x1: f64, y1: f64) -> Draft {
    (category, BBox::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, y1 - y0, x1 - x0))
}

fn document(rng: &mut ChaCha8Rng, bins: f64) -> Vec<Draft> {
    const TEXT: u32 = 0;
    const TITLE: u32 = 1;
    const LIST: u32 = 2;
    const TABLE: u32 = 3;
    const FIGURE: u32 = 4;
    let bottom = 1.0 - MARGIN;
    let width = 1.0 - 2.0 * MARGIN;
    // sub-bin horizontal registration offset keeps the corpus mirror
    // symmetric after quantization
    let shift = rng.random_range(-1.0..1.0) / bins;
    let mut out = Vec::new();
    let title_cy = rng.random_range(0.06..0.10);
    let title_h = rng.random_range(0.04..0.06);
    out.push((TITLE, BBox::new(0.5 + shift, title_cy, title_h, width)));
    let mut top = title_cy + title_h / 2.0 + rng.random_range(0.02..0.03);
    let two_columns = rng.random_bool(0.5);
    if rng.random_bool(0.3) {
        let h = rng.random_range(0.15..0.25);
        out.push((FIGURE, BBox::new(0.5 + shift, top + h / 2.0, h, width)));
        top += h + rng.random_range(0.02..0.03);
    }
    let columns: &[(f64, f64)] = if two_columns {
        &[(0.28, 0.40), (0.72, 0.40)]
    } else {
        &[(0.5, 0.84)]
    };
    for &(cx, w) in columns {
        let mut y = top;
        loop {
            let (category, h) = match rng.random_range(0..20) {
                0..=10 => (TEXT, rng.random_range(0.04..0.14)),
                11..=13 => (LIST, rng.random_range(0.05..0.12)),
                14..=16 => (TABLE, rng.random_range(0.08..0.18)),
                _ => (FIGURE, rng.random_range(0.10..0.22)),
            };
            if y + h > bottom {
                break;
            }
            out.push((category, BBox::new(cx + shift, y + h / 2.0, h, w)));
            y += h + rng.random_range(0.02..0.03);
        }
    }
    out
}

/// Splits `LATTICE` units into `parts` spans separated by one-unit
/// gutters, with one-unit outer margins. Returns unit edges.
fn lattice_spans(rng: &mut ChaCha8Rng, parts: u32) -> Vec<(u32, u32)> {
    let free = LATTICE - 2 - (parts - 1);
    // random composition of `free` into `parts` positive sizes
    let mut cuts: Vec<u32> = Vec::new();
    while cuts.len() < (parts - 1) as usize {
        let c = rng.random_range(1..free);
        if !cuts.contains(&c) {
            cuts.push(c);
        }
    }
    cuts.sort_unstable();
    cuts.push(free);
    let mut spans = Vec::with_capacity(parts as usize);
    let (mut prev, mut at) = (0, 1);
    for c in cuts {
        let size = c - prev;
        spans.push((at, at + size));
        at += size + 1;
        prev = c;
    }
    spans
}

fn grid(rng: &mut ChaCha8Rng) -> Vec<Draft> {
    let (n_rows, n_cols) = (rng.random_range(2..=4), rng.random_range(2..=4));
    let rows = lattice_spans(rng, n_rows);
    let cols = lattice_spans(rng, n_cols);
    let u = f64::from(LATTICE);
    let mut out = Vec::new();
    for &(y0, y1) in &rows {
        for &(x0, x1) in &cols {
            if rng.random_bool(0.8) {
                let category = rng.random_range(0..4);
                out.push(from_edges(
                    category,
                    f64::from(x0) / u,
                    f64::from(y0) / u,
                    f64::from(x1) / u,
                    f64::from(y1) / u,
                ));
            }
        }
    }
    if out.is_empty() {
        let (y0, y1) = rows[0];
        let (x0, x1) = cols[0];
        out.push(from_edges(0, f64::from(x0) / u, f64::from(y0) / u, f64::from(x1) / u, f64::from(y1) / u));
    }
    out
}

fn asymmetric(rng: &mut ChaCha8Rng, bins: f64) -> Vec<Draft> {
    const SKY: u32 = 0;
    const CLOUD: u32 = 1;
    const GROUND: u32 = 2;
    const TREE: u32 = 3;
    const PERSON: u32 = 4;
    let shift = rng.random_range(-1.0..1.0) / bins;
    let mut out = Vec::new();
    let sky_h = rng.random_range(0.25..0.40);
    out.push((SKY, BBox::new(0.5 + shift, sky_h / 2.0, sky_h, 1.0)));
    for _ in 0..rng.random_range(0..=3) {
        let w = rng.random_range(0.08..0.2);
        let h = rng.random_range(0.04..0.08);
        let cx = rng.random_range(w / 2.0..1.0 - w / 2.0);
        let cy = rng.random_range(h / 2.0 + 0.02..sky_h - h / 2.0);
        out.push((CLOUD, BBox::new(cx, cy, h, w)));
    }
    let ground_h = rng.random_range(0.15..0.3);
    let horizon = 1.0 - ground_h;
    out.push((GROUND, BBox::new(0.5 + shift, horizon + ground_h / 2.0, ground_h, 1.0)));
    for _ in 0..rng.random_range(1..=5) {
        let (category, h, w) = if rng.random_bool(0.5) {
            (TREE, rng.random_range(0.2..0.4), rng.random_range(0.08..0.16))
        } else {
            (PERSON, rng.random_range(0.1..0.2), rng.random_range(0.03..0.06))
        };
        let cx = rng.random_range(w / 2.0..1.0 - w / 2.0);
        let foot = horizon + rng.random_range(0.0..ground_h * 0.5);
        out.push((category, BBox::new(cx, foot - h / 2.0, h, w)));
    }
    out
}

fn clamp_box(b: BBox) -> BBox {
    BBox {
        cx: b.cx.clamp(0.0, 1.0),
        cy: b.cy.clamp(0.0, 1.0),
        h: b.h.clamp(0.0, 1.0),
        w: b.w.clamp(0.0, 1.0),
    }
}

fn realize(drafts: Vec<Draft>, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Layout> {
    let bins = f64::from(1u32 << config.bits);
    let noise = (config.jitter > 0.0).then(|| Normal::new(0.0, config.jitter / bins).expect("positive std"));
    let mut elements = Vec::with_capacity(drafts.len());
    for (category, mut b) in drafts {
        if let Some(n) = &noise {
            b.cx += n.sample(rng);
            b.cy += n.sample(rng);
        }
        elements.push(Element::from_box(category, clamp_box(b), config.bits)?);
    }
    Ok(raster_sort(&Layout::new(config.bits, elements)))
}

/// Generates `count` layouts. Layouts with more than `max_elements`
/// elements keep their first elements in raster order; layouts with fewer
/// than `min_elements` are redrawn.
pub fn synth_generate(config: &SynthConfig, count: usize) -> Result<Vec<Layout>> {
    if config.min_elements > config.max_elements || config.max_elements == 0 {
        return Err(Error::InvalidConfig(format!(
            "element range {}..={} is empty",
            config.min_elements, config.max_elements
        )));
    }
    if config.max_elements > config.element_limit {
        return Err(Error::InvalidConfig(format!(
            "element range up to {} exceeds the limit of {}",
            config.max_elements, config.element_limit
        )));
    }
    if !(config.jitter >= 0.0 && config.jitter.is_finite()) {
        return Err(Error::InvalidConfig(format!("jitter {} must be non-negative", config.jitter)));
    }
    crate::layout::quantize(0.0, config.bits)?;
    let bins = f64::from(1u32 << config.bits);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, i as u64));
        let mut layout = None;
        for _ in 0..MAX_ATTEMPTS {
            let drafts = match config.kind {
                SynthKind::Document => document(&mut rng, bins),
                SynthKind::Grid => grid(&mut rng),
                SynthKind::Asymmetric => asymmetric(&mut rng, bins),
            };
            let mut l = realize(drafts, config, &mut rng)?;
            l.elements.truncate(config.max_elements);
            if l.len() >= config.min_elements {
                layout = Some(l);
                break;
            }
        }
        let mut l = layout.ok_or_else(|| {
            Error::InvalidConfig(format!(
                "could not reach {} elements with the {:?} grammar",
                config.min_elements, config.kind
            ))
        })?;
        l.source_id = Some(format!("{:?}-{}-{i}", config.kind, config.seed).to_lowercase());
        out.push(l);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{layout_stats, overlap};

    fn cfg(kind: SynthKind) -> SynthConfig {
        SynthConfig {
            kind,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        for kind in [SynthKind::Document, SynthKind::Grid, SynthKind::Asymmetric] {
            let a = synth_generate(&cfg(kind), 20).unwrap();
            assert_eq!(a, synth_generate(&cfg(kind), 20).unwrap());
        }
    }

    #[test]
    fn document_title_is_on_top() {
        let layouts = synth_generate(&cfg(SynthKind::Document), 100).unwrap();
        for l in &layouts {
            let title = l.elements.iter().find(|e| e.category == 1).expect("title");
            assert!(title.to_box(8).unwrap().cy < 0.2);
            assert!(layout_stats(l, 256).unwrap().overlap_pct < 1e-9);
        }
    }

    #[test]
    fn jittered_documents_barely_overlap() {
        let c = SynthConfig {
            jitter: 1.0,
            ..cfg(SynthKind::Document)
        };
        for l in synth_generate(&c, 50).unwrap() {
            assert!(overlap(&l.boxes().unwrap()) < 1.0);
        }
    }

    #[test]
    fn grid_edges_lie_on_lattice_and_do_not_overlap() {
        for l in synth_generate(&cfg(SynthKind::Grid), 100).unwrap() {
            assert_eq!(layout_stats(&l, 256).unwrap().overlap_pct, 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for parts in 2..=4 {
            let spans = lattice_spans(&mut rng, parts);
            assert_eq!(spans.len(), parts as usize);
            assert_eq!(spans[0].0, 1);
            assert_eq!(spans.last().unwrap().1, LATTICE - 1);
            for w in spans.windows(2) {
                assert_eq!(w[1].0, w[0].1 + 1);
            }
        }
    }

    #[test]
    fn element_range_is_respected() {
        let c = SynthConfig {
            min_elements: 4,
            max_elements: 6,
            ..cfg(SynthKind::Asymmetric)
        };
        for l in synth_generate(&c, 50).unwrap() {
            assert!((4..=6).contains(&l.len()));
        }
    }

    #[test]
    fn infeasible_range_is_rejected() {
        let c = SynthConfig {
            max_elements: 200,
            ..cfg(SynthKind::Document)
        };
        assert!(matches!(synth_generate(&c, 1), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn documents_are_mirror_symmetric_in_distribution() {
        // centered elements land on either side of the midline equally often
        let layouts = synth_generate(&cfg(SynthKind::Document), 400).unwrap();
        let titles: Vec<u32> = layouts.iter().map(|l| l.elements.iter().find(|e| e.category == 1).unwrap().x).collect();
        let left = titles.iter().filter(|&&x| x < 128).count() as f64 / titles.len() as f64;
        assert!((left - 0.5).abs() < 0.1, "{left}");
    }
}
