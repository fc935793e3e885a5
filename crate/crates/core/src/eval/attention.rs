use std::path::Path;

use serde::Serialize;
use slyt_tensor::Float;

use crate::error::Result;
use crate::layout::{encode_sequence, CategoryVocab, Layout, GROUP};
use crate::model::{Model, TokenBatch};
use crate::train::write_atomic;

/// Final-layer attention of one element's category slot, averaged over
/// heads and grouped by element.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionRecord {
    pub index: usize,
    pub category: String,
    /// Weight on the start token.
    pub bos: f64,
    /// Summed weight on each earlier element's five tokens.
    pub prior: Vec<f64>,
    /// Weight on the element's own category token.
    #[serde(rename = "self")]
    pub own: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionExport {
    pub id: Option<String>,
    pub layer: usize,
    pub elements: Vec<AttentionRecord>,
}

pub fn attention_records<T: Float>(model: &Model<T>, layout: &Layout, categories: &CategoryVocab) -> Result<AttentionExport> {
    let vocab = model.vocab();
    let seq = encode_sequence(layout, &vocab)?;
    let t = seq.len();
    let (_, maps) = model.logits_and_attention(&TokenBatch::single(&seq.tokens))?;
    let last = maps.last().expect("at least one layer");
    let heads = model.config.n_head;
    let probs = last.data();
    let mean_row = |q: usize| -> Vec<f64> {
        let mut row = vec![0.0; t];
        for h in 0..heads {
            let off = (h * t + q) * t;
            for (r, p) in row.iter_mut().zip(&probs[off..off + t]) {
                *r += p.as_f64() / heads as f64;
            }
        }
        row
    };
    let elements = layout
        .elements
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let q = 1 + GROUP * i;
            let row = mean_row(q);
            AttentionRecord {
                index: i,
                category: categories.name(e.category).unwrap_or("?").to_string(),
                bos: row[0],
                prior: (0..i).map(|k| row[1 + GROUP * k..1 + GROUP * (k + 1)].iter().sum()).collect(),
                own: row[q],
            }
        })
        .collect();
    Ok(AttentionExport {
        id: layout.source_id.clone(),
        layer: model.config.n_layer - 1,
        elements,
    })
}

/// Writes [`attention_records`] as pretty JSON.
pub fn export_attention<T: Float>(
    model: &Model<T>,
    layout: &Layout,
    categories: &CategoryVocab,
    path: &Path,
) -> Result<()> {
    let records = attention_records(model, layout, categories)?;
    write_atomic(path, &serde_json::to_vec_pretty(&records)?)
}
