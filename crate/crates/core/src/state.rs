//! Identifiers and the user state tuple `(z, x, i)`.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Simulation tick. One period is the unit of inter-interaction time.
pub type Period = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UserId(pub u64);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "u{}", self.0)
    }
}

/// A recommendable item. Id 0 is reserved for "no recommendation"; catalog
/// items are numbered from 1. Ordering is by id, which is also the tie-break
/// order for every argmax in the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Action(pub u32);

impl Action {
    pub const NO_RECOMMENDATION: Action = Action(0);

    pub fn is_null(self) -> bool {
        self == Self::NO_RECOMMENDATION
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_null() {
            f.write_str("none")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// Interest component `z` of the state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Interest {
    /// Tabular backend: the whole state is a single index.
    Index(usize),
    Vector(Vec<f64>),
}

/// The MDP state `s = (z, x, i)` of one user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserState {
    pub user_id: UserId,
    /// Interest features, driven by the user's history with the recommender.
    pub z: Interest,
    /// Static context features.
    pub x: Vec<f64>,
    /// Exogenously evolving side information.
    pub i: Vec<f64>,
}

impl UserState {
    pub fn tabular(user_id: UserId, index: usize) -> Self {
        UserState {
            user_id,
            z: Interest::Index(index),
            x: Vec::new(),
            i: Vec::new(),
        }
    }

    pub fn tabular_index(&self) -> Option<usize> {
        match self.z {
            Interest::Index(s) => Some(s),
            Interest::Vector(_) => None,
        }
    }

    /// Concatenated `z ++ x ++ i` for the vector backend; `None` in tabular mode.
    pub fn features(&self) -> Option<Vec<f64>> {
        match &self.z {
            Interest::Index(_) => None,
            Interest::Vector(z) => {
                let mut out = Vec::with_capacity(z.len() + self.x.len() + self.i.len());
                out.extend_from_slice(z);
                out.extend_from_slice(&self.x);
                out.extend_from_slice(&self.i);
                Some(out)
            }
        }
    }

    /// Compact text form used in CSV logs: the index in tabular mode, or
    /// `;`-joined features.
    pub fn repr(&self) -> String {
        match &self.z {
            Interest::Index(s) => s.to_string(),
            Interest::Vector(_) => self
                .features()
                .unwrap_or_default()
                .iter()
                .map(|v| format!("{v:.6}"))
                .collect::<Vec<_>>()
                .join(";"),
        }
    }

    pub fn label(&self) -> String {
        format!("{}[{}]", self.user_id, self.repr())
    }
}
