//! Peer-to-peer prosumer energy trading on a radial low-voltage feeder.
//!
//! The crate is split along the pipeline a trading interval goes through:
//!
//! - [`market`] sorts sellers and buyers, balances supply against demand and
//!   matches them at mid-market-rate prices.
//! - [`settlement`] turns a day of cleared markets into seller profit and
//!   buyer savings against feed-in and time-of-use tariffs.
//! - [`grid`] holds the per-unit radial network model and a
//!   backward-forward sweep power-flow solver.
//! - [`feasibility`] maps cleared trades onto the network, checks voltage
//!   limits, curtails injections and measures the grid import caused by the
//!   trades.
//! - [`scenario`] loads scenario files, drives a whole day and writes
//!   reports.

pub mod feasibility;
pub mod grid;
pub mod market;
pub mod report;
pub mod scenario;
pub mod settlement;

/// Absolute tolerance used when comparing kW quantities and prices.
pub const EPS: f64 = 1e-9;

pub use feasibility::{FeasibilityError, FeasibilityReport, VoltageLimits};
pub use grid::{BusId, GridError, InjectionSet, NetworkModel, PowerFlowSolution, SolverSettings};
pub use market::{Bid, MarketError, MarketResult, Offer, ProsumerId, Transaction};
pub use scenario::{RunReport, Scenario, ScenarioError};
pub use settlement::{SettlementError, SettlementReport, TariffSchedule};
