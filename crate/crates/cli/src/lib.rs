//! Scenario drivers and output emission behind the `codeplane` binary.

pub mod output;
pub mod scenarios;
