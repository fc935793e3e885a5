//! Decoding, layout completion and exact likelihood scoring.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use slyt_tensor::Float;

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::layout::{decode_sequence, encode_sequence, permute_seed, raster_sort, Layout, SlotKind, Vocab, GROUP};
use crate::model::{Model, TokenBatch};
use crate::train::{log_softmax_at, pack_lengths};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Nucleus,
    Greedy,
    /// Sample from the full temperature-scaled distribution.
    Temperature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub top_p: f64,
    pub temperature: f64,
    pub max_elements: usize,
    /// Forbid tokens that the sequence grammar does not allow at a slot.
    pub grammar_mask: bool,
    /// Feed seed elements to the model in a random order.
    pub permute_seed: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Nucleus,
            top_p: 0.9,
            temperature: 1.0,
            max_elements: 128,
            grammar_mask: true,
            permute_seed: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidP(self.top_p));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Token ids of the nucleus: the shortest prefix of ids sorted by
/// descending probability (ties by ascending id) whose mass reaches `p`.
pub fn nucleus_set(probs: &[f64], p: f64) -> Result<Vec<usize>> {
    if !(p > 0.0) {
        return Err(Error::InvalidP(p));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut keep = Vec::new();
    for i in order {
        if probs[i] <= 0.0 {
            break;
        }
        keep.push(i);
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    Ok(keep)
}

/// Zeroes everything outside the nucleus and renormalizes.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Result<Vec<f64>> {
    if p >= 1.0 && p.is_finite() {
        return Ok(probs.to_vec());
    }
    let keep = nucleus_set(probs, p)?;
    let mass: f64 = keep.iter().map(|&i| probs[i]).sum();
    if !(mass > 0.0) {
        return Err(Error::DegenerateDistribution);
    }
    let mut out = vec![0.0; probs.len()];
    for i in keep {
        out[i] = probs[i] / mass;
    }
    Ok(out)
}

fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateDistribution);
    }
    let exp: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / sum).collect())
}

fn draw(probs: &[f64], rng: &mut impl Rng) -> Result<u32> {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = None;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last = Some(i);
            if u < cum {
                return Ok(i as u32);
            }
        }
    }
    last.map(|i| i as u32).ok_or(Error::DegenerateDistribution)
}

/// Logits after grammar masking: pad and bos are always excluded.
pub fn masked_logits<T: Float>(logits: &[T], slot: SlotKind, vocab: &Vocab, grammar_mask: bool) -> Vec<f64> {
    let legal = vocab.legal_range(slot);
    logits
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let t = i as u32;
            let allowed = t != Vocab::PAD && t != Vocab::BOS && (!grammar_mask || legal.contains(&t));
            if allowed {
                l.as_f64()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}

/// Chooses the next token from one row of logits.
pub fn next_token<T: Float>(
    logits: &[T],
    slot: SlotKind,
    vocab: &Vocab,
    sampler: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<u32> {
    sampler.validate()?;
    let masked = masked_logits(logits, slot, vocab, sampler.grammar_mask);
    if masked.iter().any(|l| l.is_nan()) {
        return Err(Error::DegenerateDistribution);
    }
    match sampler.strategy {
        Strategy::Greedy => {
            let mut best: Option<(usize, f64)> = None;
            for (i, &l) in masked.iter().enumerate() {
                if l > f64::NEG_INFINITY && best.is_none_or(|(_, b)| l > b) {
                    best = Some((i, l));
                }
            }
            best.map(|(i, _)| i as u32).ok_or(Error::DegenerateDistribution)
        }
        Strategy::Temperature | Strategy::Nucleus => {
            let scaled: Vec<f64> = masked.iter().map(|&l| l / sampler.temperature).collect();
            let probs = softmax(&scaled)?;
            let probs = if sampler.strategy == Strategy::Nucleus {
                nucleus_filter(&probs, sampler.top_p)?
            } else {
                probs
            };
            draw(&probs, rng)
        }
    }
}

fn check_layout(model_vocab: &Vocab, layout: &Layout) -> Result<()> {
    if layout.bits != model_vocab.bits {
        return Err(Error::Vocab(format!(
            "layout uses {} bits, model uses {}",
            layout.bits, model_vocab.bits
        )));
    }
    layout
        .validate(model_vocab.num_categories)
        .map_err(|e| Error::Vocab(e.to_string()))
}

/// Completes `seed_layout` (possibly empty) autoregressively. The result
/// holds the seed elements plus the generated ones, raster-sorted.
pub fn generate<T: Float>(model: &Model<T>, seed_layout: &Layout, sampler: &SamplerConfig) -> Result<Layout> {
    sampler.validate()?;
    let vocab = model.vocab();
    check_layout(&vocab, seed_layout)?;
    let limit = sampler.max_elements.min(vocab.max_elements);
    let prefix = if sampler.permute_seed {
        permute_seed(seed_layout, derive_seed(sampler.seed, u64::MAX))
    } else {
        seed_layout.clone()
    };
    let mut tokens = encode_sequence(&prefix, &vocab)?.tokens;
    tokens.pop();
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut n = prefix.len();
    while n < limit {
        let slot = Vocab::slot_kind(tokens.len());
        let logits = model.logits(&TokenBatch::single(&tokens))?;
        let token = next_token(logits.row(logits.rows() - 1), slot, &vocab, sampler, &mut rng)?;
        if token == Vocab::EOS {
            break;
        }
        tokens.push(token);
        if tokens.len() % GROUP == 1 {
            n += 1;
        }
    }
    let decoded = decode_sequence(&tokens, &vocab)?;
    let mut out = seed_layout.with_elements(decoded.elements);
    out.bits = vocab.bits;
    Ok(raster_sort(&out))
}

/// Draws `count` layouts from scratch; request `i` uses seed `base + i`.
pub fn sample_many<T: Float>(model: &Model<T>, count: usize, sampler: &SamplerConfig) -> Result<Vec<Layout>> {
    let empty = Layout::new(model.config.bits, Vec::new());
    (0..count)
        .map(|i| {
            let s = SamplerConfig {
                seed: sampler.seed.wrapping_add(i as u64),
                ..sampler.clone()
            };
            generate(model, &empty, &s)
        })
        .collect()
}

/// Exact negative log-likelihood of one layout, in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct NllScore {
    pub total: f64,
    /// One entry per predicted token, eos included.
    pub token_nlls: Vec<f64>,
}

impl NllScore {
    pub fn per_token(&self) -> f64 {
        self.total / self.token_nlls.len() as f64
    }
}

/// Teacher-forced NLL of `layout` in its current element order.
pub fn score_nll<T: Float>(model: &Model<T>, layout: &Layout) -> Result<NllScore> {
    let mut scores = score_corpus(model, std::slice::from_ref(layout), model.config.max_seq_len())?;
    Ok(scores.pop().expect("one score"))
}

/// Scores many layouts, batching them under `token_budget`.
pub fn score_corpus<T: Float>(model: &Model<T>, layouts: &[Layout], token_budget: usize) -> Result<Vec<NllScore>> {
    let vocab = model.vocab();
    let seqs = layouts
        .iter()
        .map(|l| {
            check_layout(&vocab, l)?;
            encode_sequence(l, &vocab)
        })
        .collect::<Result<Vec<_>>>()?;
    let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let budget = token_budget.max(lengths.iter().copied().max().unwrap_or(0));
    let mut out: Vec<Option<NllScore>> = vec![None; layouts.len()];
    for plan in pack_lengths(&lengths, budget)? {
        let t = plan.seq_len - 1;
        let mut tokens = Vec::with_capacity(plan.indices.len() * t);
        for &i in &plan.indices {
            tokens.extend_from_slice(&seqs[i].padded(plan.seq_len).tokens[..t]);
        }
        let batch = TokenBatch {
            tokens,
            batch: plan.indices.len(),
            seq_len: t,
        };
        let logits = model.logits(&batch)?;
        for (b, &i) in plan.indices.iter().enumerate() {
            let seq = &seqs[i].tokens;
            let token_nlls: Vec<f64> = (0..seq.len() - 1)
                .map(|j| -log_softmax_at(logits.row(b * t + j), seq[j + 1] as usize))
                .collect();
            out[i] = Some(NllScore {
                total: token_nlls.iter().sum(),
                token_nlls,
            });
        }
    }
    Ok(out.into_iter().map(|s| s.expect("every layout scored")).collect())
}

/// Total NLL divided by total predicted tokens.
pub fn corpus_per_token_nll(scores: &[NllScore]) -> f64 {
    let total: f64 = scores.iter().map(|s| s.total).sum();
    let count: usize = scores.iter().map(|s| s.token_nlls.len()).sum();
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::Element;
    use crate::model::ModelConfig;
    use proptest::prelude::{prop_assert, prop_assert_eq, prop_assume, proptest};

    #[test]
    fn nucleus_examples() {
        let probs = [0.5, 0.3, 0.15, 0.05];
        assert_eq!(nucleus_filter(&probs, 1.0).unwrap(), probs.to_vec());
        let f = nucleus_filter(&probs, 0.9).unwrap();
        let expected = [0.5 / 0.95, 0.3 / 0.95, 0.15 / 0.95, 0.0];
        for (a, b) in f.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((f[0] - 0.5263).abs() < 1e-4 && (f[1] - 0.3158).abs() < 1e-4 && (f[2] - 0.1579).abs() < 1e-4);
        assert_eq!(nucleus_set(&[0.25; 4], 0.9).unwrap(), vec![0, 1, 2, 3]);
        assert!(matches!(nucleus_filter(&probs, 0.0), Err(Error::InvalidP(_))));
    }

    #[test]
    fn nucleus_ties_prefer_lower_ids() {
        assert_eq!(nucleus_set(&[0.2, 0.4, 0.4], 0.5).unwrap(), vec![1, 2]);
        assert_eq!(nucleus_set(&[0.2, 0.4, 0.4], 0.3).unwrap(), vec![1]);
    }

    proptest! {
        #[test]
        fn nucleus_output_is_a_distribution(raw in proptest::collection::vec(0.0f64..1.0, 1..30), p in 0.01f64..1.0) {
            let sum: f64 = raw.iter().sum();
            prop_assume!(sum > 1e-6);
            let probs: Vec<f64> = raw.iter().map(|x| x / sum).collect();
            let keep = nucleus_set(&probs, p).unwrap();
            let mass: f64 = keep.iter().map(|&i| probs[i]).sum();
            prop_assert!(mass >= p - 1e-12);
            let f = nucleus_filter(&probs, p).unwrap();
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (i, &x) in f.iter().enumerate() {
                prop_assert_eq!(x > 0.0, keep.contains(&i));
            }
        }
    }

    fn vocab() -> Vocab {
        Vocab::new(3, 3).unwrap()
    }

    #[test]
    fn greedy_picks_argmax() {
        let v = vocab();
        let mut logits = vec![0.0f64; v.size()];
        logits[v.coord_range().start as usize + 4] = 3.0;
        let s = SamplerConfig {
            strategy: Strategy::Greedy,
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = next_token(&logits, SlotKind::Coordinate, &v, &s, &mut rng).unwrap();
        assert_eq!(t, v.coord_range().start + 4);
    }

    #[test]
    fn grammar_mask_excludes_categories_at_coordinate_slots() {
        let v = vocab();
        let mut logits = vec![0.0f64; v.size()];
        for t in v.category_range() {
            logits[t as usize] = 5.0;
        }
        let s = SamplerConfig {
            strategy: Strategy::Temperature,
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let t = next_token(&logits, SlotKind::Coordinate, &v, &s, &mut rng).unwrap();
            assert!(v.coord_range().contains(&t));
        }
    }

    #[test]
    fn pad_and_bos_are_never_sampled() {
        let v = vocab();
        let mut logits = vec![0.0f64; v.size()];
        logits[0] = 50.0;
        logits[1] = 50.0;
        let s = SamplerConfig {
            grammar_mask: false,
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let t = next_token(&logits, SlotKind::CategoryOrEos, &v, &s, &mut rng).unwrap();
            assert!(t >= 2);
        }
    }

    #[test]
    fn all_masked_is_degenerate() {
        let v = vocab();
        let logits = vec![f64::NEG_INFINITY; v.size()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = next_token(&logits, SlotKind::Coordinate, &v, &SamplerConfig::default(), &mut rng);
        assert!(matches!(r, Err(Error::DegenerateDistribution)));
    }

    #[test]
    fn low_temperature_matches_greedy() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cold = SamplerConfig {
            strategy: Strategy::Temperature,
            temperature: 1e-6,
            ..SamplerConfig::default()
        };
        let greedy = SamplerConfig {
            strategy: Strategy::Greedy,
            ..SamplerConfig::default()
        };
        for _ in 0..100 {
            let logits: Vec<f64> = (0..v.size()).map(|_| rng.random_range(-3.0..3.0)).collect();
            for slot in [SlotKind::Coordinate, SlotKind::CategoryOrEos] {
                let a = next_token(&logits, slot, &v, &cold, &mut rng).unwrap();
                let b = next_token(&logits, slot, &v, &greedy, &mut rng).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    fn tiny_model() -> Model<f64> {
        let c = ModelConfig {
            num_categories: 3,
            bits: 3,
            max_elements: 6,
            d: 8,
            n_layer: 1,
            n_head: 2,
            d_ff: 16,
            ..ModelConfig::default()
        };
        Model::init(c, 4).unwrap()
    }

    #[test]
    fn generation_preserves_seed_and_is_deterministic() {
        let m = tiny_model();
        let seed = Layout::new(3, vec![Element::new(1, 2, 3, 4, 5), Element::new(0, 7, 0, 1, 1)]);
        for s in 0..20 {
            let cfg = SamplerConfig {
                seed: s,
                ..SamplerConfig::default()
            };
            let out = generate(&m, &seed, &cfg).unwrap();
            assert!(out.len() >= 2 && out.len() <= 6);
            for e in &seed.elements {
                assert!(out.elements.contains(e));
            }
            assert_eq!(out, generate(&m, &seed, &cfg).unwrap());
        }
    }

    #[test]
    fn generation_rejects_mismatched_layouts() {
        let m = tiny_model();
        let bad = Layout::new(4, vec![]);
        assert!(matches!(generate(&m, &bad, &SamplerConfig::default()), Err(Error::Vocab(_))));
        let bad = Layout::new(3, vec![Element::new(9, 0, 0, 0, 0)]);
        assert!(matches!(generate(&m, &bad, &SamplerConfig::default()), Err(Error::Vocab(_))));
    }

    #[test]
    fn zero_head_scores_ln_v() {
        let mut m = tiny_model();
        m.zero_output_head();
        let l = Layout::new(3, vec![Element::new(2, 1, 2, 3, 4)]);
        let s = score_nll(&m, &l).unwrap();
        assert_eq!(s.token_nlls.len(), 6);
        let ln_v = (m.config.vocab_size() as f64).ln();
        assert!((s.per_token() - ln_v).abs() < 1e-12);
    }

    #[test]
    fn batched_scoring_matches_single() {
        let m = tiny_model();
        let layouts: Vec<Layout> = (0..5)
            .map(|n| Layout::new(3, (0..n).map(|i| Element::new(i % 3, i, 7 - i, 1, 2)).collect()))
            .collect();
        let batched = score_corpus(&m, &layouts, 64).unwrap();
        for (l, b) in layouts.iter().zip(&batched) {
            let s = score_nll(&m, l).unwrap();
            assert!((s.total - b.total).abs() < 1e-10);
        }
    }

    #[test]
    fn score_ignores_canvas_size() {
        let m = tiny_model();
        let mut l = Layout::new(3, vec![Element::new(0, 1, 2, 3, 4)]);
        let a = score_nll(&m, &l).unwrap();
        l.canvas_w = 1000.0;
        l.canvas_h = 17.0;
        assert_eq!(a, score_nll(&m, &l).unwrap());
    }
}
