//! Coherence-conditioned dialogue response generation: GloVe-based
//! coherence scoring, coherence-filtered corpus construction, a conditional
//! VAE encoder-decoder with a coherence context gate, and the associated
//! evaluation metrics.

pub mod coherence;
pub mod cooccur;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod glove;
pub mod inference;
pub mod model;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
