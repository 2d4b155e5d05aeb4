//! Document vault: files are stored under opaque derived names in a
//! protected placement and served only through an authenticated, mediated
//! endpoint. Includes an auditor that probes a web-exposed directory for
//! listing leaks, guessable names and direct static access.

pub mod access;
pub mod auditor;
pub mod cli;
pub mod delivery;
pub mod metadata;
pub mod naming;
pub mod placement;
pub mod service;
