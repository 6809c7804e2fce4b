//! Online-verified safety layer and deterministic simulator for cooperative
//! vehicle platooning.
//!
//! The library is organized around a per-step safety protocol: a nominal
//! cruise controller proposes an input, the [`verify`] module checks it
//! against guaranteed reachable-position bounds of every preceding vehicle
//! ([`dynamics`]), and the [`controllers`] module supplies fail-safe and
//! cut-in recapturing inputs when the nominal one is rejected. Platoon
//! vehicles exchange braking capabilities over a lossy simulated network
//! ([`network`]) and adopt consensus braking limits through a
//! confirmation-gated protocol ([`consensus`]). The [`sim`] module ties it
//! all together into deterministic, seedable scenario runs, and [`fuzz`]
//! hosts the randomized invariant suites.

pub mod consensus;
pub mod controllers;
pub mod dynamics;
pub mod fuzz;
pub mod network;
pub mod scenario;
pub mod sim;
pub mod types;
pub mod verify;
