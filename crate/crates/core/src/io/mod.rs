//! Corpus files, synthetic corpora, SVG rendering and CSV reports.

mod corpus;
mod report;
mod svg;
mod synth;

pub use corpus::{layout_to_json, load_categories, load_corpus, save_categories, save_corpus, Corpus};
pub use report::{to_csv, write_csv, write_training_log, MetricsRow};
pub use svg::{category_hue, render_svg, svg_rect, write_svg};
pub use synth::{synth_generate, SynthConfig, SynthKind};
