//! Review service for the manual pruning step.
//!
//! Endpoints, all JSON except images and static files:
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/batch?annotator=<id>&size=<n>` | next undecided candidates in queue order |
//! | POST | `/decision` | one verdict; `timestamp` optional |
//! | GET | `/progress` | decided / remaining counts and the review-cost estimate |
//! | GET | `/image/<sample_id>` | the candidate image |
//! | GET | `/...` | files from the static directory, if configured |
//!
//! Every accepted decision is appended to the log by a single writer thread,
//! in the format read by [`wood_core::oodpipe::read_decision_log`].

pub mod queue;
pub mod server;

pub use queue::{Batch, BatchItem, DecisionRequest, Progress, ReviewState};
pub use server::{serve, BackgroundServer, DecisionAck, ServeConfig, ServeError};
