//! Run configuration: a JSON file overlaid by command-line flags.

use std::path::Path;

use anyhow::Context;
use serde::Deserialize;
use slyt_core::sample::SamplerConfig;
use slyt_core::train::TrainConfig;
use slyt_core::ModelConfig;

use crate::args::{ModelFlags, SamplerFlags, TrainFlags};

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes)
        .map_err(slyt_core::Error::from)
        .with_context(|| format!("parsing {}", path.display()))
}

pub fn load(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), read_json)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

pub fn apply_model(m: &mut ModelConfig, bits: Option<u32>, f: &ModelFlags) {
    set(&mut m.bits, bits);
    set(&mut m.max_elements, f.max_elements);
    set(&mut m.d, f.d);
    set(&mut m.n_layer, f.layers);
    set(&mut m.n_head, f.heads);
    set(&mut m.d_ff, f.d_ff);
    set(&mut m.dropout, f.dropout);
    m.tie_embeddings |= f.tie_embeddings;
}

pub fn apply_train(t: &mut TrainConfig, f: &TrainFlags) {
    set(&mut t.lr, f.lr);
    set(&mut t.epochs, f.epochs);
    set(&mut t.loss.mode, f.loss.map(Into::into));
    set(&mut t.loss.epsilon, f.epsilon);
    set(&mut t.loss.kl_direction, f.kl_direction.map(Into::into));
    set(&mut t.loss.lambda, f.lambda);
    set(&mut t.token_budget, f.token_budget);
    set(&mut t.patience, f.patience);
    set(&mut t.seed, f.seed);
    if f.max_steps.is_some() {
        t.max_steps = f.max_steps;
    }
    if f.clip_norm.is_some() {
        t.clip_norm = f.clip_norm;
    }
    set(&mut t.order, f.order.map(Into::into));
    t.permute_prefix |= f.permute_prefix;
}

pub fn sampler(f: &SamplerFlags) -> anyhow::Result<SamplerConfig> {
    let mut s = match &f.sampler_config {
        Some(p) => read_json(p)?,
        None => SamplerConfig::default(),
    };
    set(&mut s.strategy, f.strategy.map(Into::into));
    set(&mut s.top_p, f.top_p);
    set(&mut s.temperature, f.temperature);
    set(&mut s.max_elements, f.max_elements);
    set(&mut s.seed, f.seed);
    if f.no_grammar_mask {
        s.grammar_mask = false;
    }
    s.validate()?;
    Ok(s)
}
