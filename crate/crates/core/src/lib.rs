//! Preference optimisation on toy autoregressive policies: a small
//! reverse-mode autodiff engine, bigram and MLP policies, synthetic
//! preference data with a planted signal, and a family of pairwise
//! objectives (DPO, IPO, SimPO, beta-DPO, DPO-Shift, ACPO) selectable by name.

pub mod error;
pub mod experiment;
pub mod graph;
pub mod objectives;
pub mod policy;
pub mod rewards;
pub mod synthdata;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result, Shape};
pub use graph::{Array, Graph, NodeId};
pub use objectives::{Objective, ObjectiveRegistry};
pub use policy::{MlpDims, PolicyKind, PolicyModel, Token, Vocab};
pub use rewards::{AlphaBounds, ObjectiveConfig, TauMode};
pub use synthdata::{Corruption, Dataset, PreferencePair, WorldSpec};
