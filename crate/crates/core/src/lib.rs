//! Inverted-index routing for granular mixture-of-experts layers.
//!
//! Tokens are assigned to the nearest codeword of an adaptive spherical
//! k-means codebook, and only the experts on that codeword's cached
//! shortlist are scored exactly. The crate also carries exact and
//! hierarchical baseline routers, a routing-mass bound checker, analytical
//! FLOP accounting, a toy training loop and a binary index format.

pub mod analysis;
pub mod baselines;
pub mod codebook;
pub mod config;
pub mod error;
pub mod flops;
pub mod io;
pub mod numerics;
pub mod router;
pub mod trainer;

pub use analysis::{check_bound, mass_recall, overlap_fraction, routing_distribution, BoundReport, UsageStats};
pub use baselines::{
    derive_coarse_config, exact_route, hierarchical_route, validate_fairness, CoarseConfig, FairnessReport,
    HierarchicalConfig,
};
pub use codebook::{Assignment, CodebookParams, CodebookState};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use flops::{router_flop_ledger, FlopLedger, LedgerParams, RouterKind};
pub use io::{load_index, save_index, IndexFile};
pub use numerics::{Matrix, RngStream, TokenBatch};
pub use router::{air_route, moe_forward, ExpertBank, RouterConfig, RoutingResult, ShortlistCache};
pub use trainer::{train_loop, SyntheticTask, ToyModel, TrainConfig};
