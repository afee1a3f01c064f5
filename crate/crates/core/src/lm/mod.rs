//! The toy language model: corpus, transformer, training, checkpoints and
//! activation dumps.

mod acts;
mod ce;
mod checkpoint;
pub mod corpus;
mod model;
mod train;

pub use acts::{dump_activations, ActivationDump, HookDumps};
pub use ce::{per_token_ce, CeReport, CeScope, LogitsRunner};
pub use checkpoint::LmCheckpoint;
pub use corpus::{generate_corpus, Corpus, CorpusSpec, Rule, Trigger};
pub use model::{token_ce, HookPoint, HookedRun, LmConfig, PrefixState, ToyLm, INIT_STD};
pub use train::{train_lm, LmTrainConfig, CHECKPOINT_FRACTIONS};
