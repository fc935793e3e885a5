use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::json;
use slyt_core::eval::{
    analogy, category_embeddings, export_attention, layout_stats, nearest_neighbors, ngram_stats, verify_flips,
};
use slyt_core::io::{
    load_categories, load_corpus, save_categories, save_corpus, synth_generate, write_csv, write_svg,
    write_training_log, MetricsRow, SynthConfig,
};
use slyt_core::sample::{corpus_per_token_nll, generate, sample_many, score_corpus, SamplerConfig};
use slyt_core::train::{Checkpoint, TrainConfig, Trainer};
use slyt_core::{CategoryVocab, Layout, Model, ModelConfig};

use crate::args::{
    AblateArgs, CompleteArgs, DataArgs, EvalArgs, InitArgs, RenderArgs, SampleArgs, ScoreArgs, SynthArgs, TrainArgs,
};
use crate::config::{apply_model, apply_train, load, sampler};
use crate::UsageError;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn read_layouts(path: &Path, categories: &CategoryVocab, bits: u32, max_elements: usize) -> anyhow::Result<Vec<Layout>> {
    let corpus = load_corpus(path, categories, bits, max_elements)
        .with_context(|| format!("loading corpus {}", path.display()))?;
    if corpus.dropped > 0 {
        eprintln!(
            "{}: dropped {} layouts with more than {max_elements} elements",
            path.display(),
            corpus.dropped
        );
    }
    Ok(corpus.layouts)
}

fn layout_name(layout: &Layout, index: usize) -> String {
    match &layout.source_id {
        Some(id) if !id.is_empty() => id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect(),
        _ => format!("{index:05}"),
    }
}

fn write_svgs(dir: &Path, layouts: &[Layout], categories: &CategoryVocab) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (i, l) in layouts.iter().enumerate() {
        write_svg(l, categories, &dir.join(format!("{}.svg", layout_name(l, i))))?;
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let mut config = SynthConfig {
        kind: a.kind.into(),
        bits: a.bits,
        seed: a.seed,
        jitter: a.jitter,
        ..SynthConfig::default()
    };
    if let Some(m) = a.min_elements {
        config.min_elements = m;
    }
    if let Some(m) = a.max_elements {
        config.max_elements = m;
    }
    let layouts = synth_generate(&config, a.count)?;
    let categories = config.kind.categories();
    save_corpus(&a.out, &layouts, &categories)?;
    if let Some(path) = &a.categories_out {
        save_categories(path, &categories)?;
    }
    eprintln!("wrote {} layouts to {}", layouts.len(), a.out.display());
    Ok(())
}

/// Training and validation layouts: an explicit validation file, or the
/// tail of the corpus.
fn split(data: &DataArgs, categories: &CategoryVocab, model: &ModelConfig) -> anyhow::Result<(Vec<Layout>, Vec<Layout>)> {
    let mut train = read_layouts(&data.corpus, categories, model.bits, model.max_elements)?;
    if let Some(v) = &data.val {
        let val = read_layouts(v, categories, model.bits, model.max_elements)?;
        return Ok((train, val));
    }
    if !(data.val_fraction > 0.0 && data.val_fraction < 1.0) {
        return Err(usage(format!("--val-fraction {} must be in (0, 1)", data.val_fraction)));
    }
    if train.len() < 2 {
        return Err(usage("the corpus needs at least two layouts to hold some out; pass --val"));
    }
    let n_val = ((train.len() as f64 * data.val_fraction).round() as usize).clamp(1, train.len() - 1);
    let val = train.split_off(train.len() - n_val);
    Ok((train, val))
}

fn categories_arg(path: Option<&PathBuf>) -> anyhow::Result<CategoryVocab> {
    let path = path.ok_or_else(|| usage("--categories is required"))?;
    load_categories(path).with_context(|| format!("loading categories {}", path.display()))
}

fn log_epoch(e: &slyt_core::train::EpochLog) {
    eprintln!(
        "epoch {:>3}  train {:.4}  val {:.4}  ({:.1}s)",
        e.epoch, e.train_nll, e.val_nll, e.seconds
    );
}

pub fn train(a: TrainArgs) -> anyhow::Result<()> {
    let run = load(a.config.as_deref())?;
    let trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let mut config = match (&a.config, &ckpt.train_config) {
                (None, Some(c)) => c.clone(),
                _ => run.train.clone(),
            };
            apply_train(&mut config, &a.train);
            Trainer::resume(ckpt, config)?
        }
        None => {
            let categories = categories_arg(a.data.categories.as_ref())?;
            let mut model = run.model.clone();
            apply_model(&mut model, a.bits, &a.model);
            model.num_categories = categories.len();
            let mut config = run.train.clone();
            apply_train(&mut config, &a.train);
            let init = Model::init(model, a.init_seed.unwrap_or(config.seed))?;
            Trainer::new(init, categories, config)?
        }
    };
    let (train, val) = split(&a.data, &trainer.categories, &trainer.model.config)?;
    eprintln!(
        "training on {} layouts, validating on {}; {} parameters",
        train.len(),
        val.len(),
        trainer.model.config.param_count()
    );
    let out = trainer.fit_with(&train, &val, log_epoch)?;
    out.best.save(&a.out)?;
    if let Some(path) = &a.last {
        out.last.save(path)?;
    }
    if let Some(path) = &a.log {
        write_training_log(path, &out.log)?;
    }
    let best = out.best.progress.as_ref().and_then(|p| p.best_val_nll);
    println!("{}", json!({ "epochs": out.log.len(), "best_val_nll": best }));
    Ok(())
}

pub fn sample(a: SampleArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let s = sampler(&a.sampler)?;
    let mut layouts = sample_many(&ckpt.model, a.count, &s)?;
    for (i, l) in layouts.iter_mut().enumerate() {
        l.source_id = Some(format!("sample-{}", s.seed.wrapping_add(i as u64)));
    }
    save_corpus(&a.out, &layouts, &ckpt.categories)?;
    if let Some(dir) = &a.svg_dir {
        write_svgs(dir, &layouts, &ckpt.categories)?;
    }
    eprintln!("wrote {} samples to {}", layouts.len(), a.out.display());
    Ok(())
}

pub fn complete(a: CompleteArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let mut s = sampler(&a.sampler)?;
    s.permute_seed = !a.keep_seed_order;
    let c = &ckpt.model.config;
    let seeds = read_layouts(&a.seeds, &ckpt.categories, c.bits, c.max_elements)?;
    let done = seeds
        .iter()
        .enumerate()
        .map(|(i, seed_layout)| {
            let si = SamplerConfig {
                seed: s.seed.wrapping_add(i as u64),
                ..s.clone()
            };
            generate(&ckpt.model, seed_layout, &si)
        })
        .collect::<slyt_core::Result<Vec<_>>>()?;
    save_corpus(&a.out, &done, &ckpt.categories)?;
    if let Some(dir) = &a.svg_dir {
        write_svgs(dir, &done, &ckpt.categories)?;
    }
    eprintln!("wrote {} completions to {}", done.len(), a.out.display());
    Ok(())
}

fn metrics_rows(layouts: &[Layout], grid: usize, model: Option<(&Model<f32>, usize)>) -> anyhow::Result<(Vec<MetricsRow>, Option<f64>)> {
    let scores = model.map(|(m, budget)| score_corpus(m, layouts, budget)).transpose()?;
    let mut rows = Vec::with_capacity(layouts.len());
    for (i, l) in layouts.iter().enumerate() {
        let stats = layout_stats(l, grid)?;
        let score = scores.as_ref().map(|s| &s[i]);
        rows.push(MetricsRow {
            id: layout_name(l, i),
            n: stats.element_count,
            coverage: stats.coverage_pct,
            overlap: stats.overlap_pct,
            nll_total: score.map(|s| s.total),
            nll_per_token: score.map(|s| s.per_token()),
        });
    }
    Ok((rows, scores.as_deref().map(corpus_per_token_nll)))
}

pub fn score(a: ScoreArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let c = &ckpt.model.config;
    let layouts = read_layouts(&a.corpus, &ckpt.categories, c.bits, c.max_elements)?;
    let (rows, nll) = metrics_rows(&layouts, slyt_core::eval::DEFAULT_GRID, Some((&ckpt.model, a.token_budget)))?;
    write_csv(&a.out, &rows)?;
    println!("{}", json!({ "layouts": layouts.len(), "nll_per_token": nll }));
    Ok(())
}

#[derive(Serialize)]
struct FlipRow {
    id: String,
    nll_original: f64,
    nll_lr: f64,
    nll_ud: f64,
}

#[derive(Serialize)]
struct NgramRow {
    n: usize,
    ngram: String,
    count: usize,
}

#[derive(Serialize)]
struct NeighborRow {
    query: String,
    rank: usize,
    index: usize,
    neighbor: String,
    distance: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n.max(1) as f64
}

pub fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let ckpt = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let categories = match &ckpt {
        Some(c) => c.categories.clone(),
        None => categories_arg(a.categories.as_ref())?,
    };
    let (bits, max_elements) = match &ckpt {
        Some(c) => (c.model.config.bits, c.model.config.max_elements),
        None => (a.bits, slyt_core::layout::DEFAULT_MAX_ELEMENTS),
    };
    let layouts = read_layouts(&a.corpus, &categories, bits, max_elements)?;
    let model = ckpt.as_ref().map(|c| &c.model);
    let needs_model = |flag: &str| usage(format!("{flag} needs --checkpoint"));

    let (rows, nll) = metrics_rows(&layouts, a.grid, model.map(|m| (m, a.token_budget)))?;
    write_csv(&a.out, &rows)?;
    let mut summary = json!({
        "layouts": layouts.len(),
        "coverage": mean(rows.iter().map(|r| r.coverage)),
        "overlap": mean(rows.iter().map(|r| r.overlap)),
        "nll_per_token": nll,
    });

    if let Some(path) = &a.flips {
        let m = model.ok_or_else(|| needs_model("--flips"))?;
        let scores = verify_flips(m, &layouts, a.token_budget)?;
        let rows: Vec<FlipRow> = scores
            .iter()
            .enumerate()
            .map(|(i, s)| FlipRow {
                id: layout_name(&layouts[i], i),
                nll_original: s.original,
                nll_lr: s.lr,
                nll_ud: s.ud,
            })
            .collect();
        write_csv(path, &rows)?;
        summary["flip_gap_lr"] = json!(mean(scores.iter().map(|s| s.lr - s.original)));
        summary["flip_gap_ud"] = json!(mean(scores.iter().map(|s| s.ud - s.original)));
    }

    if let Some(path) = &a.ngrams {
        let mut rows = Vec::new();
        for n in [2, 3] {
            for (gram, count) in ngram_stats(&layouts, n) {
                let names: Vec<&str> = gram.iter().map(|&c| categories.name(c).unwrap_or("?")).collect();
                rows.push(NgramRow {
                    n,
                    ngram: names.join("+"),
                    count,
                });
            }
        }
        write_csv(path, &rows)?;
    }

    if let Some(query) = &a.analogy {
        let m = model.ok_or_else(|| needs_model("--analogy"))?;
        let ids = query
            .split(',')
            .map(|name| categories.id(name.trim()))
            .collect::<slyt_core::Result<Vec<_>>>()?;
        let [x, y, z] = ids[..] else {
            return Err(usage("--analogy takes three comma-separated category names"));
        };
        let ranked = analogy(&category_embeddings(m), x, y, z, a.k)?;
        let names: Vec<&str> = ranked.iter().map(|&c| categories.name(c).unwrap_or("?")).collect();
        summary["analogy"] = json!({ "query": query, "answers": names });
    }

    if let Some(path) = &a.nn_queries {
        let out = a.nn_out.as_ref().ok_or_else(|| usage("--nn-queries needs --nn-out"))?;
        let queries = read_layouts(path, &categories, bits, max_elements)?;
        let mut rows = Vec::new();
        for (qi, q) in queries.iter().enumerate() {
            for (rank, (index, distance)) in nearest_neighbors(q, &layouts, a.k)?.into_iter().enumerate() {
                rows.push(NeighborRow {
                    query: layout_name(q, qi),
                    rank: rank + 1,
                    index,
                    neighbor: layout_name(&layouts[index], index),
                    distance,
                });
            }
        }
        write_csv(out, &rows)?;
    }

    if let Some(path) = &a.attention {
        let m = model.ok_or_else(|| needs_model("--attention"))?;
        let layout = layouts
            .get(a.attention_index)
            .ok_or_else(|| usage(format!("--attention-index {} is past the corpus end", a.attention_index)))?;
        export_attention(m, layout, &categories, path)?;
    }

    println!("{summary}");
    Ok(())
}

pub fn render(a: RenderArgs) -> anyhow::Result<()> {
    let categories = load_categories(&a.categories)?;
    let mut layouts = read_layouts(&a.corpus, &categories, a.bits, usize::MAX)?;
    if let Some(limit) = a.limit {
        layouts.truncate(limit);
    }
    write_svgs(&a.out_dir, &layouts, &categories)?;
    eprintln!("rendered {} layouts into {}", layouts.len(), a.out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    bits: u32,
    order: String,
    vocab_size: usize,
    uniform_nll: f64,
    val_nll: f64,
    epochs: usize,
}

pub fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let run = load(a.config.as_deref())?;
    let categories = categories_arg(a.data.categories.as_ref())?;
    let mut base_model = run.model.clone();
    apply_model(&mut base_model, None, &a.model);
    base_model.num_categories = categories.len();
    let mut base_train: TrainConfig = run.train.clone();
    apply_train(&mut base_train, &a.train);
    let bits = if a.bits.is_empty() { vec![base_model.bits] } else { a.bits.clone() };
    let orders = if a.orders.is_empty() {
        vec![base_train.order]
    } else {
        a.orders.iter().map(|&o| o.into()).collect()
    };

    let mut rows = Vec::new();
    for &b in &bits {
        let model_config = ModelConfig {
            bits: b,
            ..base_model.clone()
        };
        let (train, val) = split(&a.data, &categories, &model_config)?;
        for &order in &orders {
            let config = TrainConfig {
                order,
                ..base_train.clone()
            };
            eprintln!("bits {b}, order {order:?}");
            let init = Model::init(model_config.clone(), a.init_seed.unwrap_or(config.seed))?;
            let out = Trainer::new(init, categories.clone(), config)?.fit_with(&train, &val, log_epoch)?;
            let val_nll = corpus_per_token_nll(&score_corpus(&out.best.model, &val, base_train.token_budget)?);
            rows.push(AblationRow {
                bits: b,
                order: format!("{order:?}").to_lowercase(),
                vocab_size: model_config.vocab_size(),
                uniform_nll: (model_config.vocab_size() as f64).ln(),
                val_nll,
                epochs: out.log.len(),
            });
        }
    }
    write_csv(&a.out, &rows)?;
    println!("{:>4}  {:<7} {:>6}  {:>8}  {:>8}", "bits", "order", "V", "uniform", "val_nll");
    for r in &rows {
        println!(
            "{:>4}  {:<7} {:>6}  {:>8.4}  {:>8.4}",
            r.bits, r.order, r.vocab_size, r.uniform_nll, r.val_nll
        );
    }
    Ok(())
}

pub fn init(a: InitArgs) -> anyhow::Result<()> {
    let run = load(a.config.as_deref())?;
    let categories = load_categories(&a.categories)?;
    let mut config = run.model;
    apply_model(&mut config, a.bits, &a.model);
    config.num_categories = categories.len();
    let mut model = Model::init(config, a.seed)?;
    if a.zero_head {
        model.zero_output_head();
    }
    Checkpoint::new(model, categories).save(&a.out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}
