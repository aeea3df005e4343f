//! Moving-shapes clips with templated captions, the template tokenizer,
//! masking and negative sampling, and the corpus directory format.

pub mod clip;
pub mod corpus;
pub mod masking;
pub mod vocab;

pub use clip::{
    generate_clip, render_caption, sample_spec, ClipDims, ClipSpec, Color, Direction, ShapeKind, SyntheticClip,
};
pub use corpus::{generate_corpus, make_vtm_pair, read_corpus, write_corpus, Corpus, CorpusConfig, VtmPair};
pub use masking::{mask_positions, mask_tokens, MaskedText};
pub use vocab::{detokenize, tokenize, TokenizedText, Vocabulary};
