//! Layout domain types, coordinate quantization and the token grammar.

mod quantize;
mod sequence;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use quantize::{dequantize, quantize, MAX_BITS};
pub use sequence::{decode_sequence, encode_sequence, SlotKind, TokenKind, TokenSequence, Vocab, GROUP};

pub const DEFAULT_BITS: u32 = 8;
pub const DEFAULT_MAX_ELEMENTS: usize = 128;
pub const DEFAULT_CANVAS: (f64, f64) = (256.0, 256.0);

/// Ordered category names; the index of a name is its category id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct CategoryVocab {
    names: Vec<String>,
}

impl CategoryVocab {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::InvalidConfig("category vocabulary is empty".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::DuplicateCategory(n.clone()));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Result<u32> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| i as u32)
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }
}

impl TryFrom<Vec<String>> for CategoryVocab {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<CategoryVocab> for Vec<String> {
    fn from(v: CategoryVocab) -> Self {
        v.names
    }
}

/// Axis-aligned box in centroid form on the unit canvas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub h: f64,
    pub w: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, h: f64, w: f64) -> Self {
        Self { cx, cy, h, w }
    }

    /// `(x0, y0, x1, y1)` corners.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }
}

/// One layout primitive: a category and four quantized geometry bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Element {
    pub category: u32,
    /// Centroid x bin.
    pub x: u32,
    /// Centroid y bin.
    pub y: u32,
    /// Height bin.
    pub h: u32,
    /// Width bin.
    pub w: u32,
    /// Optional unit-normalized continuous attributes.
    pub attrs: Vec<f64>,
}

impl Element {
    pub fn new(category: u32, x: u32, y: u32, h: u32, w: u32) -> Self {
        Self {
            category,
            x,
            y,
            h,
            w,
            attrs: Vec::new(),
        }
    }

    pub fn from_box(category: u32, b: BBox, bits: u32) -> Result<Self> {
        Ok(Self::new(
            category,
            quantize(b.cx, bits)?,
            quantize(b.cy, bits)?,
            quantize(b.h, bits)?,
            quantize(b.w, bits)?,
        ))
    }

    /// Bin-center reconstruction of the geometry.
    pub fn to_box(&self, bits: u32) -> Result<BBox> {
        Ok(BBox {
            cx: dequantize(self.x, bits)?,
            cy: dequantize(self.y, bits)?,
            h: dequantize(self.h, bits)?,
            w: dequantize(self.w, bits)?,
        })
    }

    pub fn bins(&self) -> [u32; 4] {
        [self.x, self.y, self.h, self.w]
    }

    fn raster_key(&self) -> (u32, u32, u32, u32, u32) {
        (self.y, self.x, self.category, self.w, self.h)
    }
}

/// An ordered set of elements quantized at `bits` precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub elements: Vec<Element>,
    pub bits: u32,
    /// Canvas size in pixels; only used for rendering.
    pub canvas_w: f64,
    pub canvas_h: f64,
    pub source_id: Option<String>,
}

impl Layout {
    pub fn new(bits: u32, elements: Vec<Element>) -> Self {
        Self {
            elements,
            bits,
            canvas_w: DEFAULT_CANVAS.0,
            canvas_h: DEFAULT_CANVAS.1,
            source_id: None,
        }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn boxes(&self) -> Result<Vec<BBox>> {
        self.elements.iter().map(|e| e.to_box(self.bits)).collect()
    }

    pub fn categories(&self) -> Vec<u32> {
        self.elements.iter().map(|e| e.category).collect()
    }

    /// Checks every bin and category against the given limits.
    pub fn validate(&self, num_categories: usize) -> Result<()> {
        let n = 1u64 << self.bits;
        for e in &self.elements {
            if e.category as usize >= num_categories {
                return Err(Error::InvalidCategory {
                    id: e.category,
                    count: num_categories,
                });
            }
            for b in e.bins() {
                if u64::from(b) >= n {
                    return Err(Error::InvalidBin {
                        bin: b,
                        bits: self.bits,
                    });
                }
            }
        }
        Ok(())
    }

    /// Re-expresses the geometry at another precision via bin centers.
    pub fn requantize(&self, bits: u32) -> Result<Layout> {
        let mut out = self.clone();
        out.bits = bits;
        for (dst, src) in out.elements.iter_mut().zip(&self.elements) {
            let b = src.to_box(self.bits)?;
            let mut e = Element::from_box(src.category, b, bits)?;
            e.attrs = src.attrs.clone();
            *dst = e;
        }
        Ok(out)
    }

    pub fn with_elements(&self, elements: Vec<Element>) -> Layout {
        Layout {
            elements,
            ..self.clone()
        }
    }
}

/// Sorts elements by centroid in row-major scan order: `(y, x)`, then
/// `(category, w, h)` to break ties. Stable.
pub fn raster_sort(layout: &Layout) -> Layout {
    let mut out = layout.clone();
    out.elements.sort_by_key(Element::raster_key);
    out
}

/// Seeded uniform shuffle of the elements (Fisher–Yates).
pub fn permute_seed(layout: &Layout, seed: u64) -> Layout {
    let mut out = layout.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    out.elements.shuffle(&mut rng);
    out
}
