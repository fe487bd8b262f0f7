use serde::{Deserialize, Serialize};

use crate::curve::ReparamVector;

/// Message a client sends back when its local round finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client: usize,
    /// Global version the client trained against.
    pub origin_version: u64,
    /// Curve displacement relative to the point curve of the origin model.
    /// Pointwise clients leave `da` and `db` at zero.
    pub reparam: ReparamVector,
    /// Aggregation weight `w_i`.
    pub weight: f64,
    pub dispatch_time: f64,
    pub arrival_time: f64,
}

impl ClientUpdate {
    pub fn new(client: usize, origin_version: u64, reparam: ReparamVector, weight: f64) -> Self {
        ClientUpdate { client, origin_version, reparam, weight, dispatch_time: 0.0, arrival_time: 0.0 }
    }
}
