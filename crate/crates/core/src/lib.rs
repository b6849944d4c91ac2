//! Hierarchical probabilistic demand forecasting.
//!
//! The crate covers the full loop for a strictly nested product/market
//! hierarchy: panel ingestion and simulation, leakage-safe features,
//! multi-step quantile strategies over a pluggable learner, pooled ensembles
//! with data-driven pool selection, coherent and integer-coherent
//! reconciliation, scaled accuracy metrics and paired nonparametric tests.

pub mod baselines;
pub mod error;
pub mod evalstats;
pub mod features;
pub mod hierarchy;
pub mod metrics;
pub mod milp;
pub mod panel;
pub mod pipeline;
pub mod pooling;
pub mod reconcile;
pub mod strategies;

pub use error::{Error, ErrorKind, Result};
pub use hierarchy::{
    aggregate_bottom, build_summing_matrix, check_coherence, HierarchySpec, NodeRecord,
    SummingMatrix,
};
pub use metrics::QuantileGrid;
pub use panel::{Month, Panel, PanelSeries};
pub use strategies::QuantileGridForecast;
