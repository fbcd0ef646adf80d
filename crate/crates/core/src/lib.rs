//! Long-term-value policy improvement for auction-based recommenders.
//!
//! The crate simulates a marketplace of users served by a single-slot
//! second-price auction, estimates the base policy's Q-function with SARSA
//! over irregularly timed interactions, and checks with exact dynamic
//! programming that blending the bid-eCVR score with that Q-function never
//! lowers any state's value.

pub mod auction;
pub mod dp_oracle;
pub mod env;
pub mod error;
pub mod experiment;
pub mod mdp;
pub mod pipeline;
pub mod policy;
pub mod sarsa;
pub mod scalar;
pub mod state;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use state::{Action, Interest, Period, UserId, UserState};

/// Double-precision instances used throughout the simulator and CLI.
pub type Mdp = mdp::TabularMdp<f64>;
pub type Scoring = auction::TabularScoring<f64>;
pub type QTable = dp_oracle::QTable<f64>;
pub type QNetwork = sarsa::MlpQ<f64>;
pub type QLookup = sarsa::TabularQ<f64>;
