//! Independent oracles for the test suites: finite-difference trial runners,
//! exhaustive path and alignment enumerators. Nothing here is used by the
//! library itself.

pub mod grad;
pub mod ctc;
pub mod align;
