#![cfg_attr(not(feature = "std"), no_std)]
//! Core protocol logic: cryptography, the epoch-based messaging layer,
//! governance, and the client state machine tying them together. Contains
//! no IO; randomness is always supplied by the caller.

extern crate alloc;

pub mod backoff;
pub mod canonical;
pub mod client;
pub mod crypto;
pub mod directory;
pub mod governance;
pub mod hexbytes;
pub mod mls;
pub mod policy;
