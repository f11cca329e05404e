//! Multi-parallel corpora, their division into per-pair training data,
//! vocabularies, synthetic languages, and token-budget batching.

mod batch;
pub mod bpe;
mod corpus;
mod size_plan;
mod split;
mod synth;
mod vocab;

pub use batch::{batch_by_tokens, Batch};
pub use corpus::{Bitext, CorpusSegments, MultiParallelCorpus, Segment, Sentence};
pub use size_plan::{apply_size_plan, SizePlan, Tier};
pub use split::{min_parts, part_rows, split_nonsharing, split_sharing, DataSplit, SplitPlan};
pub use synth::{default_specs, ideal_translate, synth_generate, synth_segments, Reorder, SynthConfig, SyntheticLanguageSpec};
pub use vocab::{build_vocab, lang_token, VocabMode, VocabSet, Vocabulary, BOS, EOS, PAD, UNK};
