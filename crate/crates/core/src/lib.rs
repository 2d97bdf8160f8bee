//! Spoken language identification with an x-vector baseline.
//!
//! - [`metrics`]: `Cavg` with out-of-set handling and pooled EER over a DET curve.
//! - [`submission`]: score and key text formats, lost-trial filling.
//! - [`dsp`]: log mel filterbanks and an energy VAD.
//! - [`net`]: the TDNN x-vector network, its gradients and minibatch SGD.
//! - [`backend`]: closed-set posteriors and cosine scoring against enrolled centroids.
//! - [`harness`]: seeded synthetic corpora, channel simulation and the three task drivers.
//! - [`cli`]: the `lidkit` command line.
//!
//! Scores are log-likelihood-like: larger means more likely. Out-of-set
//! segments carry the key label `OOS` and count as an extra non-target class.

pub mod backend;
pub mod cli;
pub mod config;
pub mod dsp;
pub mod harness;
pub mod metrics;
pub mod net;
pub mod submission;
pub mod wav;
