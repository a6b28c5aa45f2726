//! Real-economy analysis of a public transaction ledger.
//!
//! Transactions are clustered into entities by common inputs, turned into
//! USD-valued inter-entity payments, and entities are labeled monthly as
//! full-time recipients (FR), their counterparts (N1) or others (TO). Weekly
//! activity patterns of FR entities are then aligned by circular hour shifts
//! to estimate their time zones.

pub mod classify;
pub mod cluster;
pub mod ingest;
pub mod payments;
pub mod pipeline;
pub mod synth;
pub mod temporal;
