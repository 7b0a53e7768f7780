//! Session-based next-item recommendation with a cause-gated attention model
//! and counterfactual collaborative inference over neighbor sessions.
//!
//! The pipeline is:
//!
//! 1. [`ingest`] parses an interaction log, filters inactive users and items,
//!    cuts per-user histories into gap-delimited sessions and builds
//!    cross-validation folds.
//! 2. [`brm`] trains the base recommendation model: an attention encoder over
//!    the user's recent items, an attention encoder over the session context,
//!    and a sigmoid gate that mixes the two per candidate item.
//! 3. [`counterfactual`] answers "what would a similar user pick in this
//!    context" for each neighbor session, aggregates the answers by
//!    similarity and boosts recently seen items.
//! 4. [`eval`] ranks the full catalog and reports Recall@K / NDCG@K.
//!
//! [`synthgen`] produces datasets with planted inner-session, outer-session
//! and confounded interactions so that the gate can be checked against
//! ground truth.

pub mod brm;
pub mod counterfactual;
pub mod eval;
pub mod gradcheck;
pub mod ingest;
pub mod numerics;
pub mod session;
pub mod snapshot;
pub mod synthgen;

pub use brm::{BrmConfig, BrmParams};
pub use counterfactual::{CocoConfig, CocoModel, ItemSet};
pub use session::{Dataset, Interaction, ItemId, PredictionEvent, Session, SessionId, UserId};
