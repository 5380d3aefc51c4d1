// SPDX-License-Identifier: Apache-2.0

//! Privacy-preserving smart-meter aggregation: a shared data model, a simulated fleet,
//! an in-process message bus, and two aggregation backends (an attested enclave and a
//! homomorphic secure sum).

pub mod attestation;
pub mod bus;
pub mod channel;
pub(crate) mod codec;
pub mod enclave;
pub mod fleet;
pub mod homomorphic;
pub mod model;
