//! Desk-scale laboratory for backdoor attacks against graph prompt tuning.
//!
//! The pipeline: build or load an undirected attributed graph, pretrain a
//! minimal two-layer GCN contrastively over k-hop ego-networks, tune an
//! All-in-One-style graph prompt against the frozen backbone, then mount a
//! label-flipping backdoor whose trigger is itself a prompt. Victim nodes
//! are chosen by label non-uniformity homophily, the trigger is grown by
//! one of three generation methods, and the training objective augments
//! cross-entropy with a centroid-difference hinge. Evaluation covers
//! ASR/AMC/CA/PR/ADD/AHD plus two inference-time defenses.

pub mod attack;
pub mod checkpoint;
pub mod defense;
pub mod error;
pub mod eval;
pub mod features;
pub mod gnn;
pub mod graph;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod pretrain;
pub mod prompt;
pub mod rng;
pub mod sbm;

pub use error::{Error, Result};
pub use graph::{ego_network, EgoNetwork, Graph, SubgraphLike};
