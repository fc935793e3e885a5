//! The decoder checked against a naive re-implementation and against
//! finite differences of its own loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slyt_core::model::{Mode, TokenBatch};
use slyt_core::train::{sequence_loss, LossConfig};
use slyt_core::{Model, ModelConfig, Vocab};
use slyt_tensor::{Tape, Tensor};

fn tiny(n_layer: usize) -> ModelConfig {
    ModelConfig {
        num_categories: 3,
        bits: 3,
        max_elements: 4,
        d: 8,
        n_layer,
        n_head: 2,
        d_ff: 16,
        dropout: 0.1,
        ..ModelConfig::default()
    }
}

/// A model whose every parameter, biases and gains included, is random.
fn randomized(config: ModelConfig, seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, p) in m.names().to_vec().iter().zip(m.params_mut()) {
        for x in p.data_mut() {
            *x = if name.ends_with("gain") {
                1.0 + rng.random_range(-0.3..0.3)
            } else {
                rng.random_range(-0.5..0.5)
            };
        }
    }
    m
}

/// `[rows, cols]` view of a parameter.
struct Mat<'a> {
    data: &'a [f64],
    cols: usize,
}

impl Mat<'_> {
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

fn param<'a>(m: &'a Model<f64>, name: &str) -> Mat<'a> {
    let t = m.param(name).unwrap_or_else(|| panic!("missing {name}"));
    Mat {
        data: t.data(),
        cols: *t.shape().last().unwrap(),
    }
}

fn affine(x: &[Vec<f64>], w: &Mat, b: &Mat) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..w.cols)
                .map(|j| b.data[j] + row.iter().enumerate().map(|(i, &v)| v * w.at(i, j)).sum::<f64>())
                .collect()
        })
        .collect()
}

fn norm(x: &[Vec<f64>], gain: &Mat, bias: &Mat) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * gain.data[j] + bias.data[j])
                .collect()
        })
        .collect()
}

fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Eval-mode logits of one unpadded sequence, written from scratch.
fn reference_logits(m: &Model<f64>, tokens: &[u32]) -> Vec<Vec<f64>> {
    let c = &m.config;
    let (tok, pos) = (param(m, "tok_emb"), param(m, "pos_emb"));
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| (0..c.d).map(|j| tok.at(t as usize, j) + pos.at(i, j)).collect())
        .collect();
    let dh = c.d / c.n_head;
    for l in 0..c.n_layer {
        let p = |s: &str| param(m, &format!("layers.{l}.{s}"));
        let q = affine(&x, &p("attn.wq"), &p("attn.bq"));
        let k = affine(&x, &p("attn.wk"), &p("attn.bk"));
        let v = affine(&x, &p("attn.wv"), &p("attn.bv"));
        let mut a = vec![vec![0.0; c.d]; x.len()];
        for h in 0..c.n_head {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..x.len() {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| cols.clone().map(|e| q[i][e] * k[j][e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let w = (s - max).exp() / z;
                    for e in cols.clone() {
                        a[i][e] += w * v[j][e];
                    }
                }
            }
        }
        let o = affine(&a, &p("attn.wo"), &p("attn.bo"));
        let h1 = norm(&add(&x, &o), &p("ln1.gain"), &p("ln1.bias"));
        let f: Vec<Vec<f64>> = affine(&h1, &p("ff.w1"), &p("ff.b1"))
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        let f = affine(&f, &p("ff.w2"), &p("ff.b2"));
        x = norm(&add(&h1, &f), &p("ln2.gain"), &p("ln2.bias"));
    }
    let hidden = norm(&x, &param(m, "ln_f.gain"), &param(m, "ln_f.bias"));
    affine(&hidden, &param(m, "head.w"), &param(m, "head.b"))
}

#[test]
fn forward_matches_naive_reference() {
    for (layers, seed) in [(1, 3), (2, 4)] {
        let m = randomized(tiny(layers), seed);
        let tokens = [Vocab::BOS, 3, 7, 9, 12, 8, 5, 6, 13, 10, 11, Vocab::EOS];
        let got = m.logits(&TokenBatch::single(&tokens)).unwrap();
        let want = reference_logits(&m, &tokens);
        let v = m.config.vocab_size();
        for (i, row) in want.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                let g = got.data()[i * v + j];
                assert!((g - w).abs() < 1e-10, "layers {layers} row {i} col {j}: {g} vs {w}");
            }
        }
    }
}

fn two_row_batch() -> (TokenBatch, Vec<u32>, Vec<bool>) {
    let a = [Vocab::BOS, 3, 7, 9, 12, 8, 5, 6, 13, 10, 11, Vocab::EOS];
    let b = [Vocab::BOS, 4, 6, 6, 7, 8, Vocab::EOS];
    let t = a.len() - 1;
    let mut tokens = Vec::new();
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for s in [&a[..], &b[..]] {
        for i in 0..t {
            tokens.push(s.get(i).copied().unwrap_or(Vocab::PAD));
            let target = s.get(i + 1).copied().unwrap_or(Vocab::PAD);
            targets.push(target);
            mask.push(target != Vocab::PAD);
        }
    }
    let batch = TokenBatch {
        tokens,
        batch: 2,
        seq_len: t,
    };
    (batch, targets, mask)
}

fn loss_and_grads(m: &Model<f64>, batch: &TokenBatch, targets: &[u32], mask: &[bool], mode: Mode) -> (f64, Vec<Tensor<f64>>) {
    let mut tape = Tape::new();
    let fw = m.forward(&mut tape, batch, mode, true).unwrap();
    let loss = sequence_loss(&mut tape, fw.logits, targets, mask, None, &LossConfig::default()).unwrap();
    let value = tape.value(loss).item().unwrap();
    let mut g = tape.backward(loss).unwrap();
    let grads = fw
        .params
        .iter()
        .zip(m.params())
        .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    (value, grads)
}

fn loss_only(m: &Model<f64>, batch: &TokenBatch, targets: &[u32], mask: &[bool], mode: Mode) -> f64 {
    let mut tape = Tape::new();
    let fw = m.forward(&mut tape, batch, mode, false).unwrap();
    let loss = sequence_loss(&mut tape, fw.logits, targets, mask, None, &LossConfig::default()).unwrap();
    tape.value(loss).item().unwrap()
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over every parameter entry.
fn max_relative_error(layers: usize, mode: Mode) -> f64 {
    let mut m = randomized(tiny(layers), 11);
    let (batch, targets, mask) = two_row_batch();
    let (_, grads) = loss_and_grads(&m, &batch, &targets, &mask, mode);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, g) in grads.iter().enumerate() {
        for j in 0..g.numel() {
            let orig = m.params()[i].data()[j];
            m.params_mut()[i].data_mut()[j] = orig + h;
            let plus = loss_only(&m, &batch, &targets, &mask, mode);
            m.params_mut()[i].data_mut()[j] = orig - h;
            let minus = loss_only(&m, &batch, &targets, &mask, mode);
            m.params_mut()[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = g.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    worst
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let err = max_relative_error(1, Mode::Eval);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn gradients_with_dropout_match_finite_differences() {
    let err = max_relative_error(2, Mode::Train { seed: 5 });
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn padding_receives_no_gradient() {
    let m = randomized(tiny(1), 2);
    let (batch, targets, mask) = two_row_batch();
    let (_, grads) = loss_and_grads(&m, &batch, &targets, &mask, Mode::Eval);
    let tok = &grads[0];
    let d = m.config.d;
    let pad_row = &tok.data()[Vocab::PAD as usize * d..(Vocab::PAD as usize + 1) * d];
    assert!(pad_row.iter().all(|&g| g == 0.0), "{pad_row:?}");
    // the bos row is used and must receive gradient
    let bos_row = &tok.data()[Vocab::BOS as usize * d..(Vocab::BOS as usize + 1) * d];
    assert!(bos_row.iter().any(|&g| g != 0.0));
}

#[test]
fn padded_rows_score_like_unpadded_ones() {
    let m = randomized(tiny(2), 9);
    let (batch, _, _) = two_row_batch();
    let v = m.config.vocab_size();
    let both = m.logits(&batch).unwrap();
    let short: Vec<u32> = batch.row(1).iter().copied().filter(|&t| t != Vocab::PAD).collect();
    let alone = m.logits(&TokenBatch::single(&short)).unwrap();
    let offset = batch.seq_len * v;
    for (i, &a) in alone.data().iter().enumerate() {
        assert!((both.data()[offset + i] - a).abs() < 1e-12);
    }
}

#[test]
fn future_tokens_do_not_change_past_logits() {
    let m = randomized(tiny(2), 1);
    let v = m.config.vocab_size();
    let base = [Vocab::BOS, 3, 7, 9, 12, 8, 5, 6, 13, 10, 11, Vocab::EOS];
    let before = m.logits(&TokenBatch::single(&base)).unwrap();
    for j in 0..base.len() - 1 {
        let mut changed = base;
        for t in changed.iter_mut().skip(j + 1) {
            *t = 4;
        }
        let after = m.logits(&TokenBatch::single(&changed)).unwrap();
        assert_eq!(before.data()[..(j + 1) * v], after.data()[..(j + 1) * v]);
        assert_ne!(before.data()[(j + 1) * v..], after.data()[(j + 1) * v..]);
    }
}
