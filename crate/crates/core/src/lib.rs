//! Hard out-of-distribution curation and cluster-distance classifier training
//! for weakly supervised localization.
//!
//! The crate is organised bottom-up:
//!
//! * [`manifest`] holds the shared dataset types and the JSONL manifest format.
//! * [`synth`] renders a shapes-on-textures benchmark with a controllable
//!   foreground/background correlation.
//! * [`net`] is a small convolutional multi-label classifier with hand-written
//!   backpropagation.
//! * [`loss`] builds in-distribution and OoD cluster sets and evaluates the
//!   distance and classification objectives.
//! * [`oodpipe`] ranks candidate OoD images, prunes easy ones and assembles the
//!   hard-OoD set from review decisions.
//! * [`localization`] turns the classifier into CAM seeds and scores them.
//! * [`runner`] drives training, ablations, sweeps and reports.

pub mod error;
pub mod imageio;
pub mod kv;
pub mod localization;
pub mod loss;
pub mod manifest;
pub mod net;
pub mod oodpipe;
pub mod rng;
pub mod runner;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use manifest::{ClassList, Manifest, SampleRecord, Split};
