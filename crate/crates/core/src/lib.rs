//! System identification and terminal-voltage forecasting for pulse-excited
//! lithium-ion cells.
//!
//! The crate has three legs:
//!
//! * a synthetic data oracle ([`ecmsim`]) — a 2RC Thevenin equivalent-circuit
//!   cell driven by an HPPC-style pulse protocol, with a degradation schedule,
//!   used to generate ground-truth series for every numeric claim in the test
//!   suite;
//! * a linear-operator path ([`embed`] + [`dmdc`]) — Hankel delay embedding of
//!   the voltage record and DMD-with-control identification of a discrete
//!   operator pair (A, B), plus modal analysis and embedding-dimension sweeps;
//! * a learned path ([`physics`] + [`tst`] + [`forecast`]) — an open-circuit
//!   voltage table indexed by Coulomb-counted pseudo-SOC splits the measured
//!   voltage into a slow physics baseline and a dynamic residual; a small
//!   patch-based transformer regresses future residual from a context window
//!   and the known future current; chunked autoregressive rollout reassembles
//!   full-horizon voltage forecasts.
//!
//! [`dataio`] handles the on-disk corpus (CSV series + JSON sidecars, split
//! selection, normalization stats) and [`checkpoint`] the binary model
//! container shared by both model families.

pub mod checkpoint;
pub mod dataio;
pub mod dmdc;
pub mod ecmsim;
pub mod embed;
pub mod forecast;
pub mod physics;
pub mod tst;
