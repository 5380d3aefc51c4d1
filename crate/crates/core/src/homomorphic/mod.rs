// SPDX-License-Identifier: Apache-2.0

//! Multi-party secure sum with ElGamal in the exponent.
//!
//! Configuration: every producer publishes `y_p = g^x_p` with a certificate; all parties
//! derive the joint key `y = prod y_p`.
//!
//! Each round, producer `p` with reading `v_p` draws a fresh mask `z_p` and randomness
//! `r_p` and sends `(c_p, d_p) = (g^r_p, g^(v_p + z_p) * y^r_p)`. The aggregator
//! multiplies everything into `(c, d)` and hands `c` back; each producer answers with
//! `T_p = c^x_p * g^z_p`. Then `D = d / prod T_p = g^(sum v_p)` and the sum is recovered
//! by a bounded discrete log. The aggregator never sees anything that depends on a
//! single `v_p` without that producer's mask.

mod dlog;
mod group;
mod protocol;

pub use dlog::{discrete_log, BabyStepTable};
pub use group::{is_probable_prime, jacobi, setup_group, setup_group_with_limit, GroupError, GroupParams};
pub use protocol::{
    combine, encrypt_share, encrypt_with, partial_decrypt, partial_decrypt_with, recover_sum, AggregatePublicKey,
    CombinedMsg, ConfigRequest, CtMsg, HomAggregator, HomCiphertext, Mask, PartialDecryption, PartialMsg, Producer,
    ProducerKeys, PubkeyMsg, RosterMsg,
};

use thiserror::Error;

use crate::attestation::AttestationError;
use crate::model::MeterId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HomError {
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error("certificate for {0} rejected")]
    BadCredential(MeterId),
    #[error("roster mismatch: {0}")]
    RosterMismatch(String),
    #[error("round has no ciphertexts")]
    EmptyRound,
    #[error("no ciphertext from {0}")]
    MissingCiphertext(MeterId),
    #[error("no partial decryption from {0}")]
    MissingPartial(MeterId),
    #[error("{0} is not on the roster or already answered")]
    UnexpectedParty(MeterId),
    #[error("discrete log not found within bound")]
    LogNotFound,
    #[error("{0} is not in the order-q subgroup")]
    NotInSubgroup(&'static str),
    #[error("round {round} already used (last round {last})")]
    MaskReuse { round: u32, last: u32 },
    #[error("no open round at this producer")]
    NoOpenRound,
    #[error("configuration phase not complete")]
    NotConfigured,
    #[error("malformed message: {0}")]
    Malformed(String),
}

impl From<AttestationError> for HomError {
    fn from(e: AttestationError) -> Self {
        HomError::Malformed(e.to_string())
    }
}
