use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{raster_sort, BBox, CategoryVocab, Element, Layout, DEFAULT_CANVAS};
use crate::train::write_atomic;

#[derive(Serialize, Deserialize)]
struct ElementRecord {
    category: String,
    /// `[cx, cy, h, w]` on the unit canvas.
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    attrs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayoutRecord {
    #[serde(default)]
    id: Option<String>,
    #[serde(default = "default_canvas")]
    canvas: [f64; 2],
    elements: Vec<ElementRecord>,
}

fn default_canvas() -> [f64; 2] {
    [DEFAULT_CANVAS.0, DEFAULT_CANVAS.1]
}

/// Layouts read from a corpus file.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub layouts: Vec<Layout>,
    /// Layouts skipped for exceeding the element limit.
    pub dropped: usize,
}

/// Parses one JSONL record. Data problems other than unknown categories
/// are returned as messages so the caller can attach a line number.
fn parse_record(line: &str, categories: &CategoryVocab, bits: u32) -> Result<Result<Layout, String>> {
    let record: LayoutRecord = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => return Ok(Err(e.to_string())),
    };
    let [cw, ch] = record.canvas;
    if !(cw > 0.0 && ch > 0.0 && cw.is_finite() && ch.is_finite()) {
        return Ok(Err(format!("canvas size {cw}x{ch} must be positive")));
    }
    let mut elements = Vec::with_capacity(record.elements.len());
    for e in record.elements {
        let category = categories.id(&e.category)?;
        let [cx, cy, h, w] = e.bbox;
        let mut el = match Element::from_box(category, BBox::new(cx, cy, h, w), bits) {
            Ok(el) => el,
            Err(err) => return Ok(Err(err.to_string())),
        };
        el.attrs = e.attrs;
        elements.push(el);
    }
    let mut layout = Layout::new(bits, elements);
    layout.canvas_w = cw;
    layout.canvas_h = ch;
    layout.source_id = record.id;
    Ok(Ok(raster_sort(&layout)))
}

/// Reads a JSONL corpus, quantizing at `bits` and raster-sorting each
/// layout. Layouts with more than `max_elements` elements are dropped and
/// counted; blank lines are skipped.
pub fn load_corpus(path: &Path, categories: &CategoryVocab, bits: u32, max_elements: usize) -> Result<Corpus> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut corpus = Corpus {
        layouts: Vec::new(),
        dropped: 0,
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let layout = parse_record(&line, categories, bits)?.map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        if layout.len() > max_elements {
            corpus.dropped += 1;
        } else {
            corpus.layouts.push(layout);
        }
    }
    Ok(corpus)
}

/// One JSONL line for `layout`, with coordinates at bin centers.
pub fn layout_to_json(layout: &Layout, categories: &CategoryVocab) -> Result<String> {
    let elements = layout
        .elements
        .iter()
        .map(|e| {
            let b = e.to_box(layout.bits)?;
            let category = categories
                .name(e.category)
                .ok_or(Error::InvalidCategory {
                    id: e.category,
                    count: categories.len(),
                })?
                .to_string();
            Ok(ElementRecord {
                category,
                bbox: [b.cx, b.cy, b.h, b.w],
                attrs: e.attrs.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let record = LayoutRecord {
        id: layout.source_id.clone(),
        canvas: [layout.canvas_w, layout.canvas_h],
        elements,
    };
    Ok(serde_json::to_string(&record)?)
}

/// Writes layouts as JSONL, atomically.
pub fn save_corpus(path: &Path, layouts: &[Layout], categories: &CategoryVocab) -> Result<()> {
    let mut out = String::new();
    for l in layouts {
        out.push_str(&layout_to_json(l, categories)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Reads a category vocabulary stored as a JSON array of names.
pub fn load_categories(path: &Path) -> Result<CategoryVocab> {
    let names: Vec<String> = serde_json::from_slice(&std::fs::read(path)?)?;
    CategoryVocab::new(names)
}

pub fn save_categories(path: &Path, categories: &CategoryVocab) -> Result<()> {
    write_atomic(path, &serde_json::to_vec(categories)?)
}
