//! Length-sorted batch packing and teacher-forcing batch assembly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::layout::{encode_sequence, permute_seed, raster_sort, Layout, TokenSequence, Vocab, GROUP};
use crate::model::TokenBatch;

/// Element ordering used to build training sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementOrder {
    #[default]
    Raster,
    /// A fresh random permutation of the elements for every example.
    Random,
}

/// Dataset indices that share one padded batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub indices: Vec<usize>,
    /// Padded sequence length (longest member).
    pub seq_len: usize,
}

/// Sorts by length and greedily packs contiguous runs so that
/// `members * longest <= token_budget`. Batch order is left sorted.
pub fn pack_lengths(lengths: &[usize], token_budget: usize) -> Result<Vec<BatchPlan>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| lengths[i]);
    let mut plans = Vec::new();
    let mut current = BatchPlan {
        indices: Vec::new(),
        seq_len: 0,
    };
    for i in order {
        let len = lengths[i];
        if len > token_budget {
            return Err(Error::LayoutTooLong {
                n: len,
                max: token_budget,
            });
        }
        let longest = current.seq_len.max(len);
        if !current.indices.is_empty() && (current.indices.len() + 1) * longest > token_budget {
            plans.push(std::mem::replace(
                &mut current,
                BatchPlan {
                    indices: Vec::new(),
                    seq_len: 0,
                },
            ));
        }
        current.seq_len = current.seq_len.max(len);
        current.indices.push(i);
    }
    if !current.indices.is_empty() {
        plans.push(current);
    }
    Ok(plans)
}

/// Packs `dataset` by encoded length and shuffles the batch order with `seed`.
pub fn make_batches(dataset: &[Layout], vocab: &Vocab, token_budget: usize, seed: u64) -> Result<Vec<BatchPlan>> {
    let lengths: Vec<usize> = dataset
        .iter()
        .map(|l| {
            if l.len() > vocab.max_elements {
                Err(Error::LayoutTooLong {
                    n: l.len(),
                    max: vocab.max_elements,
                })
            } else {
                Ok(GROUP * l.len() + 2)
            }
        })
        .collect::<Result<_>>()?;
    let mut plans = pack_lengths(&lengths, token_budget)?;
    plans.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(plans)
}

/// How training sequences are assembled from layouts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceOptions {
    pub order: ElementOrder,
    /// Present a random-size prefix of the elements in random order and
    /// train only on the continuation.
    pub permute_prefix: bool,
    pub n_continuous: usize,
}

/// Teacher-forcing inputs and targets for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    /// Sequences without their final token, `[batch, seq_len - 1]`.
    pub input: TokenBatch,
    /// `targets[r]` is the token following input row position `r`.
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
    /// Rows (category-slot positions) with continuous supervision.
    pub cont_rows: Vec<usize>,
    /// `[cont_rows.len(), n_continuous]` row-major.
    pub cont_targets: Vec<f64>,
}

impl TrainBatch {
    pub fn target_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn arrange(layout: &Layout, options: &SequenceOptions, seed: u64) -> (Layout, usize) {
    let base = match options.order {
        ElementOrder::Raster => raster_sort(layout),
        ElementOrder::Random => permute_seed(layout, seed),
    };
    if !options.permute_prefix || layout.is_empty() {
        return (base, 0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let k = rng.random_range(0..=layout.len());
    let shuffled = permute_seed(layout, derive_seed(seed, 2));
    let prefix: Vec<_> = shuffled.elements[..k].to_vec();
    // the continuation keeps the base order of the remaining elements
    let mut rest = base.elements.clone();
    for e in &prefix {
        let at = rest.iter().position(|r| r == e).expect("prefix element present");
        rest.remove(at);
    }
    let mut elements = prefix;
    elements.extend(rest);
    (layout.with_elements(elements), k)
}

/// Encodes the layouts and shifts them into input/target pairs. Targets
/// that are padding, or that fall inside a permuted prefix, are masked.
pub fn build_batch(layouts: &[&Layout], vocab: &Vocab, options: &SequenceOptions, seed: u64) -> Result<TrainBatch> {
    if layouts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut seqs: Vec<(TokenSequence, usize)> = Vec::with_capacity(layouts.len());
    let mut arranged = Vec::with_capacity(layouts.len());
    for (k, l) in layouts.iter().enumerate() {
        let (l, prefix) = arrange(l, options, derive_seed(seed, k as u64));
        seqs.push((encode_sequence(&l, vocab)?, prefix));
        arranged.push(l);
    }
    let full = seqs.iter().map(|(s, _)| s.len()).max().expect("non-empty");
    let t = full - 1;
    let mut tokens = Vec::with_capacity(layouts.len() * t);
    let mut targets = Vec::with_capacity(layouts.len() * t);
    let mut mask = Vec::with_capacity(layouts.len() * t);
    let mut cont_rows = Vec::new();
    let mut cont_targets = Vec::new();
    for (b, ((seq, prefix), l)) in seqs.iter().zip(&arranged).enumerate() {
        let padded = seq.padded(full).tokens;
        tokens.extend_from_slice(&padded[..t]);
        for (j, &target) in padded[1..].iter().enumerate() {
            targets.push(target);
            mask.push(target != Vocab::PAD && j >= GROUP * prefix);
        }
        if options.n_continuous > 0 {
            for (i, e) in l.elements.iter().enumerate().skip(*prefix) {
                if e.attrs.is_empty() {
                    continue;
                }
                if e.attrs.len() != options.n_continuous {
                    return Err(Error::InvalidConfig(format!(
                        "element has {} continuous attributes, model expects {}",
                        e.attrs.len(),
                        options.n_continuous
                    )));
                }
                cont_rows.push(b * t + 1 + GROUP * i);
                cont_targets.extend_from_slice(&e.attrs);
            }
        }
    }
    Ok(TrainBatch {
        input: TokenBatch {
            tokens,
            batch: layouts.len(),
            seq_len: t,
        },
        targets,
        mask,
        cont_rows,
        cont_targets,
    })
}
