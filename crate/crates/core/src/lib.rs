//! Packet-level linear network coding on emulated programmable switches.
//!
//! The crate is organized the way a deployment would be:
//!
//! - [`gf`] — GF(2^8) arithmetic and the encode/decode linear algebra.
//! - [`codec`] — the coding header and bit-exact wire format.
//! - [`primitives`] — the five atomic coding primitives (split, code,
//!   forward, gather, decode) expressed as table entries and actions.
//! - [`switch`] — the programmable-switch emulator: match tables, register
//!   banks, clone + recirculate, and a deterministic per-packet cost model.
//! - [`control`] — topology model, max-flow / disjoint-path computation, and
//!   compilation of coding functions into per-switch configuration.
//! - [`sim`] — a deterministic discrete-event simulator driving hosts, links
//!   and switches, producing delivery traces and counters.

pub mod codec;
pub mod control;
pub mod gf;
pub mod primitives;
pub mod sim;
pub mod switch;
