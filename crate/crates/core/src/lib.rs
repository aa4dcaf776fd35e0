//! Retrieval-augmented assembly planning for flat-pack furniture.
//!
//! The pipeline loads a corpus of items with manuals and part meshes, retrieves
//! supporting manual pages, asks a vision-language provider for the part
//! connection graph, scores the prediction, and can drive a simulated robot
//! that gathers parts in the predicted order.

pub mod corpus;
pub mod harness;
pub mod metrics;
pub mod partviz;
pub mod planner;
pub mod retrieval;
pub mod simulator;
