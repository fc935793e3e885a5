use slyt_core::io::{synth_generate, SynthConfig, SynthKind};
use slyt_core::layout::{decode_sequence, encode_sequence};
use slyt_core::model::TokenBatch;
use slyt_core::sample::{generate, sample_many, score_corpus, corpus_per_token_nll, SamplerConfig};
use slyt_core::train::{Checkpoint, TrainConfig, Trainer};
use slyt_core::{Layout, Model, ModelConfig};

fn corpus(count: usize, seed: u64) -> Vec<Layout> {
    let config = SynthConfig {
        kind: SynthKind::Document,
        bits: 5,
        max_elements: 6,
        element_limit: 8,
        seed,
        ..SynthConfig::default()
    };
    synth_generate(&config, count).unwrap()
}

fn small_model(seed: u64) -> Model<f32> {
    let config = ModelConfig {
        num_categories: 5,
        bits: 5,
        max_elements: 8,
        d: 16,
        n_layer: 1,
        n_head: 2,
        d_ff: 32,
        ..ModelConfig::default()
    };
    Model::init(config, seed).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        epochs,
        token_budget: 256,
        seed: 7,
        ..TrainConfig::default()
    }
}

fn trainer(epochs: usize) -> Trainer {
    Trainer::new(small_model(1), SynthKind::Document.categories(), config(epochs)).unwrap()
}

#[test]
fn training_lowers_validation_nll() {
    let (train, val) = (corpus(48, 1), corpus(12, 2));
    let t = trainer(4);
    let before = t.validate(&val).unwrap();
    let out = t.fit(&train, &val).unwrap();
    let after = out.log.last().unwrap().val_nll;
    assert!(after < before - 0.5, "{before} -> {after}");
}

#[test]
fn best_checkpoint_has_lowest_logged_validation() {
    let (train, val) = (corpus(24, 3), corpus(8, 4));
    let out = trainer(5).fit(&train, &val).unwrap();
    let progress = out.best.progress.clone().unwrap();
    let best = progress.best_val_nll.unwrap();
    assert!(out.log.iter().all(|e| best <= e.val_nll));
    let scores = score_corpus(&out.best.model, &val, 256).unwrap();
    assert!((corpus_per_token_nll(&scores) - best).abs() < 1e-9);
}

#[test]
fn resuming_from_a_checkpoint_is_bit_identical() {
    let (train, val) = (corpus(24, 5), corpus(8, 6));
    let straight = trainer(3).fit(&train, &val).unwrap();

    let first = trainer(1).fit(&train, &val).unwrap();
    let bytes = first.last.to_bytes().unwrap();
    let restored = Checkpoint::from_bytes(&bytes).unwrap();
    let resumed = Trainer::resume(restored, config(3)).unwrap().fit(&train, &val).unwrap();

    assert_eq!(resumed.last.model, straight.last.model);
    assert_eq!(resumed.log.len(), 3);
    for (a, b) in resumed.log.iter().zip(&straight.log) {
        assert_eq!(a.val_nll, b.val_nll);
        assert_eq!(a.train_nll, b.train_nll);
    }
}

#[test]
fn step_limit_is_respected() {
    let (train, val) = (corpus(24, 7), corpus(4, 8));
    let c = TrainConfig {
        max_steps: Some(2),
        ..config(10)
    };
    let t = Trainer::new(small_model(2), SynthKind::Document.categories(), c).unwrap();
    let out = t.fit(&train, &val).unwrap();
    assert_eq!(out.last.progress.unwrap().step, 2);
}

#[test]
fn checkpoint_file_round_trip_preserves_logits() {
    let (train, val) = (corpus(16, 9), corpus(4, 10));
    let out = trainer(1).fit(&train, &val).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.slyt");
    out.last.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let seq = encode_sequence(&val[0], &out.last.model.vocab()).unwrap();
    let batch = TokenBatch::single(&seq.tokens);
    let a = out.last.model.logits(&batch).unwrap();
    let b = loaded.model.logits(&batch).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(loaded.log, out.last.log);
}

#[test]
fn trained_model_samples_decode_and_completions_keep_the_seed() {
    let (train, val) = (corpus(48, 11), corpus(8, 12));
    let model = trainer(3).fit(&train, &val).unwrap().best.model;
    let sampler = SamplerConfig {
        max_elements: 8,
        seed: 3,
        ..SamplerConfig::default()
    };
    let vocab = model.vocab();
    for layout in sample_many(&model, 20, &sampler).unwrap() {
        layout.validate(5).unwrap();
        let tokens = encode_sequence(&layout, &vocab).unwrap();
        assert_eq!(decode_sequence(&tokens.tokens, &vocab).unwrap(), layout);
    }
    let seed_layout = val[0].with_elements(val[0].elements[..1].to_vec());
    let done = generate(&model, &seed_layout, &sampler).unwrap();
    assert!(done.elements.contains(&seed_layout.elements[0]));
    assert_eq!(generate(&model, &seed_layout, &sampler).unwrap(), done);
}
