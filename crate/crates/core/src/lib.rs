//! Decentralized EV charging valley-filling simulator.
//!
//! A coordinator and a population of EV agents iterate a shrunken
//! primal-dual subgradient scheme to flatten the overnight load valley of a
//! radial distribution feeder while keeping nodal voltages above a lower
//! bound. Individual agents may run gradient-injection attacks (smooth
//! charging, rush charging, and stealthy variants of both) against their own
//! primal updates; reference oracles and post-run metrics quantify the attack
//! impact and stealthiness.

pub mod attacks;
pub mod engine;
pub mod feeder;
pub mod fleet;
pub mod metrics;
pub mod oracle;
pub mod scenario;
