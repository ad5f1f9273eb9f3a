//! Text tokenization and the synthetic paired text/audio corpus.

pub mod bpe;
pub mod corpus;

pub use bpe::{bpe_train, BpeVocab, BEGIN_TEXT, END_TEXT, PAD, UNKNOWN};
pub use corpus::{
    read_manifest, render_text, synth_corpus, write_corpus, CorpusConfig, CorpusItem,
    ManifestEntry,
};
