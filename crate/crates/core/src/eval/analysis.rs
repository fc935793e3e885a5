use std::collections::HashMap;

use slyt_tensor::Float;

use crate::error::{Error, Result};
use crate::layout::{raster_sort, Layout};
use crate::model::Model;
use crate::sample::score_corpus;

/// Mirrors every centroid horizontally (`x -> 1 - x`) and re-sorts.
pub fn flip_lr(layout: &Layout) -> Layout {
    let top = (1u32 << layout.bits) - 1;
    let mut out = layout.clone();
    out.elements.iter_mut().for_each(|e| e.x = top - e.x.min(top));
    raster_sort(&out)
}

/// Mirrors every centroid vertically (`y -> 1 - y`) and re-sorts.
pub fn flip_ud(layout: &Layout) -> Layout {
    let top = (1u32 << layout.bits) - 1;
    let mut out = layout.clone();
    out.elements.iter_mut().for_each(|e| e.y = top - e.y.min(top));
    raster_sort(&out)
}

/// Per-token NLL of a layout and of its two mirror images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlipScores {
    pub original: f64,
    pub lr: f64,
    pub ud: f64,
}

pub fn verify_flips<T: Float>(model: &Model<T>, layouts: &[Layout], token_budget: usize) -> Result<Vec<FlipScores>> {
    let orig: Vec<Layout> = layouts.iter().map(raster_sort).collect();
    let lr: Vec<Layout> = layouts.iter().map(flip_lr).collect();
    let ud: Vec<Layout> = layouts.iter().map(flip_ud).collect();
    let [so, sl, su] = [&orig, &lr, &ud].map(|set| score_corpus(model, set, token_budget));
    let (so, sl, su) = (so?, sl?, su?);
    Ok(so
        .iter()
        .zip(&sl)
        .zip(&su)
        .map(|((o, l), u)| FlipScores {
            original: o.per_token(),
            lr: l.per_token(),
            ud: u.per_token(),
        })
        .collect())
}

/// Rows of the token embedding table that belong to category tokens.
pub fn category_embeddings<T: Float>(model: &Model<T>) -> Vec<Vec<f64>> {
    let table = model.param("tok_emb").expect("token embedding");
    model
        .vocab()
        .category_range()
        .map(|t| table.row(t as usize).iter().map(|v| v.as_f64()).collect())
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `a : b :: c : ?`: categories ranked by cosine similarity to
/// `e(b) - e(a) + e(c)`, excluding the three query ids.
pub fn analogy(embeddings: &[Vec<f64>], a: u32, b: u32, c: u32, k: usize) -> Result<Vec<u32>> {
    let n = embeddings.len();
    for id in [a, b, c] {
        if id as usize >= n {
            return Err(Error::InvalidCategory { id, count: n });
        }
    }
    let (ea, eb, ec) = (&embeddings[a as usize], &embeddings[b as usize], &embeddings[c as usize]);
    let query: Vec<f64> = eb.iter().zip(ea).zip(ec).map(|((b, a), c)| b - a + c).collect();
    let mut ranked: Vec<(u32, f64)> = (0..n as u32)
        .filter(|id| ![a, b, c].contains(id))
        .map(|id| (id, cosine(&query, &embeddings[id as usize])))
        .collect();
    ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    Ok(ranked.into_iter().take(k).map(|(id, _)| id).collect())
}

/// Counts of consecutive category windows of length `n` whose members are
/// pairwise distinct, sorted by descending count and then by n-gram.
pub fn ngram_stats(layouts: &[Layout], n: usize) -> Vec<(Vec<u32>, usize)> {
    let mut counts: HashMap<Vec<u32>, usize> = HashMap::new();
    if n == 0 {
        return Vec::new();
    }
    for l in layouts {
        let cats = l.categories();
        for w in cats.windows(n) {
            let distinct = (0..n).all(|i| (i + 1..n).all(|j| w[i] != w[j]));
            if distinct {
                *counts.entry(w.to_vec()).or_default() += 1;
            }
        }
    }
    let mut out: Vec<_> = counts.into_iter().collect();
    out.sort_by(|x, y| y.1.cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    out
}

fn corner_vectors(layout: &Layout) -> Result<Vec<[f64; 4]>> {
    if layout.is_empty() {
        return Err(Error::EmptyLayout);
    }
    Ok(layout.boxes()?.iter().map(|b| b.corners()).collect())
}

fn sq_dist(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_min(from: &[[f64; 4]], to: &[[f64; 4]]) -> f64 {
    from.iter()
        .map(|p| to.iter().map(|q| sq_dist(p, q)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / from.len() as f64
}

/// Symmetric chamfer distance between the corner 4-vectors
/// `(x0, y0, x1, y1)` of two layouts.
pub fn chamfer_distance(a: &Layout, b: &Layout) -> Result<f64> {
    let (pa, pb) = (corner_vectors(a)?, corner_vectors(b)?);
    Ok(mean_min(&pa, &pb) + mean_min(&pb, &pa))
}

/// The `k` corpus entries closest to `query` as `(index, distance)`,
/// ascending by distance with ties broken by index.
pub fn nearest_neighbors(query: &Layout, corpus: &[Layout], k: usize) -> Result<Vec<(usize, f64)>> {
    if corpus.is_empty() {
        return Err(Error::InvalidConfig("nearest-neighbor corpus is empty".into()));
    }
    let mut d = corpus
        .iter()
        .enumerate()
        .map(|(i, l)| Ok((i, chamfer_distance(query, l)?)))
        .collect::<Result<Vec<_>>>()?;
    d.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
    d.truncate(k);
    Ok(d)
}
