//! Acoustic unit discovery: subspace HMM parameter construction, phone-loop
//! EM training, and Viterbi labeling of features into unit transcripts.

mod em;
mod hmm;
mod model_io;
mod subspace;

pub use em::{em_train_from, em_train_phone_loop, EmConfig, EmOutcome};
pub use model_io::{load_phone_loop, save_phone_loop};
pub use hmm::{
    load_transcripts, loglik, viterbi_label, viterbi_score, write_transcripts, GmmState,
    HmmUnitParams, PhoneLoopModel, Segment, UnitTranscript,
};
pub use subspace::{
    build_subspace, load_hyper_subspace, realize_unit, write_hyper_subspace, HyperSubspace,
    LanguageEmbedding, Subspace, SupervectorLayout, UnitEmbedding,
};
