//! Toy GLU transformer, FFN neuron profiling, binary activation patterns,
//! normalized edit distance between patterns, and neuron ablation.

mod ablation;
mod editdist;
mod model;
mod profile;

pub use ablation::{perf_drop, select_top, top_count, AblationSet, RankKey};
pub use editdist::{edit_distance, levenshtein_bitparallel, levenshtein_bits, levenshtein_dp, DP_LIMIT};
pub use model::{
    argmax, names, random_checkpoint, Activation, ActivationTrace, ForwardOptions, ForwardOutput, ToyModel,
    ToyModelSpec,
};
pub use profile::{
    binarize, decode_corpus, load_corpus, profile, ActivationProfile, BinarizePolicy, BinaryPattern, CorpusFormat,
    DEFAULT_WINDOW,
};
