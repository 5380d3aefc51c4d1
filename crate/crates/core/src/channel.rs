// SPDX-License-Identifier: Apache-2.0

//! AES-128-GCM sealing of per-slot readings.
//!
//! Wire layout (all integers big-endian):
//!
//! ```text
//! meter index (2) | region len (1) | region | slot (4) | nonce (12) | ciphertext (8) | tag (16)
//! nonce = session id (4) | counter (8)
//! AAD   = meter id bytes | slot (4)
//! ```

use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::{Aes128Gcm, Nonce, Tag};
use thiserror::Error;

use crate::attestation::SessionKeys;
use crate::model::{MeasurementValue, MeterId, ModelError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    #[error("nonce counter exhausted; session must be re-established")]
    CounterExhausted,
    #[error("authentication tag mismatch")]
    TagMismatch,
    #[error("replayed counter {counter} (last seen {last_seen})")]
    Replay { counter: u64, last_seen: u64 },
    #[error("no session for {0}")]
    UnknownSession(MeterId),
    #[error("malformed wire message: {0}")]
    Malformed(String),
}

impl From<ModelError> for ChannelError {
    fn from(e: ModelError) -> Self {
        ChannelError::Malformed(e.to_string())
    }
}

/// Per-session nonce source. Counters start at 1, so `last_seen = 0` means nothing yet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NonceCounter {
    session_id: u32,
    next: u64,
}

impl NonceCounter {
    pub fn new(session_id: u32) -> Self {
        Self { session_id, next: 1 }
    }

    /// Test hook for exhaustion paths.
    pub fn starting_at(session_id: u32, next: u64) -> Self {
        Self { session_id, next }
    }

    pub fn next_value(&self) -> u64 {
        self.next
    }

    fn take(&mut self) -> Result<[u8; 12], ChannelError> {
        // u64::MAX is never issued: reaching it ends the session.
        if self.next == u64::MAX {
            return Err(ChannelError::CounterExhausted);
        }
        let nonce = make_nonce(self.session_id, self.next);
        self.next += 1;
        Ok(nonce)
    }
}

fn make_nonce(session_id: u32, counter: u64) -> [u8; 12] {
    let mut n = [0u8; 12];
    n[..4].copy_from_slice(&session_id.to_be_bytes());
    n[4..].copy_from_slice(&counter.to_be_bytes());
    n
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncryptedMeasurement {
    pub meter: MeterId,
    pub slot: u32,
    pub nonce: [u8; 12],
    pub ciphertext: [u8; 8],
    pub tag: [u8; 16],
}

impl EncryptedMeasurement {
    pub fn session_id(&self) -> u32 {
        u32::from_be_bytes(self.nonce[..4].try_into().expect("4 bytes"))
    }

    pub fn counter(&self) -> u64 {
        u64::from_be_bytes(self.nonce[4..].try_into().expect("8 bytes"))
    }

    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(3 + self.meter.region().len() + 4 + 12 + 8 + 16);
        self.meter.write_bytes(&mut out);
        out.extend_from_slice(&self.slot.to_be_bytes());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_wire(buf: &[u8]) -> Result<Self, ChannelError> {
        let (meter, used) = MeterId::from_bytes(buf)?;
        let rest = &buf[used..];
        if rest.len() != 4 + 12 + 8 + 16 {
            return Err(ChannelError::Malformed(format!("{} trailing bytes, want 40", rest.len())));
        }
        let mut em = EncryptedMeasurement {
            meter,
            slot: u32::from_be_bytes(rest[..4].try_into().expect("4 bytes")),
            nonce: [0; 12],
            ciphertext: [0; 8],
            tag: [0; 16],
        };
        em.nonce.copy_from_slice(&rest[4..16]);
        em.ciphertext.copy_from_slice(&rest[16..24]);
        em.tag.copy_from_slice(&rest[24..40]);
        Ok(em)
    }
}

pub(crate) fn aad(meter: &MeterId, slot: u32) -> Vec<u8> {
    let mut a = meter.to_bytes();
    a.extend_from_slice(&slot.to_be_bytes());
    a
}

/// Encrypts `v` for `(meter, slot)` under the session key, consuming one counter value.
pub fn seal_measurement(
    meter: &MeterId,
    v: MeasurementValue,
    slot: u32,
    keys: &SessionKeys,
    ctr: &mut NonceCounter,
) -> Result<EncryptedMeasurement, ChannelError> {
    let nonce = ctr.take()?;
    let mut buf = v.wh().to_be_bytes();
    let cipher = Aes128Gcm::new(&keys.channel_key.into());
    let tag = cipher
        .encrypt_in_place_detached(Nonce::from_slice(&nonce), &aad(meter, slot), &mut buf)
        .expect("8-byte plaintext is within GCM limits");
    Ok(EncryptedMeasurement { meter: meter.clone(), slot, nonce, ciphertext: buf, tag: tag.into() })
}

/// Verifies and decrypts. Returns the value and the counter to record as `last_seen`.
///
/// The tag is checked first; a correctly tagged message with an old counter is a replay.
pub fn open_measurement(
    em: &EncryptedMeasurement,
    keys: &SessionKeys,
    last_seen: u64,
) -> Result<(MeasurementValue, u64), ChannelError> {
    if em.session_id() != keys.session_id {
        return Err(ChannelError::TagMismatch);
    }
    let mut buf = em.ciphertext;
    let cipher = Aes128Gcm::new(&keys.channel_key.into());
    cipher
        .decrypt_in_place_detached(
            Nonce::from_slice(&em.nonce),
            &aad(&em.meter, em.slot),
            &mut buf,
            Tag::from_slice(&em.tag),
        )
        .map_err(|_| ChannelError::TagMismatch)?;
    let counter = em.counter();
    if counter <= last_seen {
        return Err(ChannelError::Replay { counter, last_seen });
    }
    Ok((MeasurementValue::from_trusted(u64::from_be_bytes(buf)), counter))
}

/// A meter's sending half of an established channel.
pub struct MeterChannel {
    meter: MeterId,
    keys: SessionKeys,
    counter: NonceCounter,
}

impl MeterChannel {
    pub fn new(meter: MeterId, keys: SessionKeys) -> Self {
        let counter = NonceCounter::new(keys.session_id);
        Self { meter, keys, counter }
    }

    pub fn meter(&self) -> &MeterId {
        &self.meter
    }

    pub fn seal(&mut self, v: MeasurementValue, slot: u32) -> Result<EncryptedMeasurement, ChannelError> {
        seal_measurement(&self.meter, v, slot, &self.keys, &mut self.counter)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_measurement;
    use proptest::prelude::*;

    fn keys(k: u8) -> SessionKeys {
        SessionKeys { channel_key: [k; 16], session_id: 0x0a0b0c0d, established_at: 0 }
    }

    fn meter(i: u16) -> MeterId {
        MeterId::new("north", i).unwrap()
    }

    fn v(x: u64) -> MeasurementValue {
        validate_measurement(x as i128, 5000).unwrap()
    }

    #[test]
    fn seal_open_round_trip() {
        let mut ctr = NonceCounter::new(keys(1).session_id);
        let em = seal_measurement(&meter(1), v(150), 1, &keys(1), &mut ctr).unwrap();
        assert_eq!(open_measurement(&em, &keys(1), 0).unwrap(), (v(150), 1));
        assert_eq!(em.nonce[..4], [0x0a, 0x0b, 0x0c, 0x0d]);
    }

    #[test]
    fn consecutive_zero_seals_differ() {
        let mut ctr = NonceCounter::new(keys(1).session_id);
        let a = seal_measurement(&meter(1), v(0), 1, &keys(1), &mut ctr).unwrap();
        let b = seal_measurement(&meter(1), v(0), 2, &keys(1), &mut ctr).unwrap();
        assert_ne!(a.nonce, b.nonce);
        assert_ne!(a.ciphertext, b.ciphertext);
    }

    #[test]
    fn tamper_and_replay_rejected() {
        let mut ctr = NonceCounter::new(keys(1).session_id);
        let em = seal_measurement(&meter(1), v(42), 3, &keys(1), &mut ctr).unwrap();
        let mut bad = em.clone();
        bad.ciphertext[0] ^= 0x80;
        assert_eq!(open_measurement(&bad, &keys(1), 0), Err(ChannelError::TagMismatch));
        assert_eq!(open_measurement(&em, &keys(1), 1), Err(ChannelError::Replay { counter: 1, last_seen: 1 }));
        assert_eq!(open_measurement(&em, &keys(2), 0), Err(ChannelError::TagMismatch));
    }

    #[test]
    fn identity_is_bound() {
        let mut ctr = NonceCounter::new(keys(1).session_id);
        let mut em = seal_measurement(&meter(1), v(42), 3, &keys(1), &mut ctr).unwrap();
        em.meter = meter(2);
        assert_eq!(open_measurement(&em, &keys(1), 0), Err(ChannelError::TagMismatch));
        let mut moved = seal_measurement(&meter(1), v(42), 3, &keys(1), &mut ctr).unwrap();
        moved.slot = 4;
        assert_eq!(open_measurement(&moved, &keys(1), 0), Err(ChannelError::TagMismatch));
    }

    #[test]
    fn counter_exhaustion() {
        let mut ctr = NonceCounter::starting_at(1, u64::MAX - 1);
        let k = SessionKeys { session_id: 1, ..keys(1) };
        assert!(seal_measurement(&meter(1), v(1), 1, &k, &mut ctr).is_ok());
        assert_eq!(seal_measurement(&meter(1), v(1), 2, &k, &mut ctr), Err(ChannelError::CounterExhausted));
    }

    #[test]
    fn wire_layout() {
        let em = EncryptedMeasurement {
            meter: MeterId::new("ab", 258).unwrap(),
            slot: 0x01020304,
            nonce: [0x11; 12],
            ciphertext: [0x22; 8],
            tag: [0x33; 16],
        };
        let w = em.to_wire();
        assert_eq!(&w[..9], &[1, 2, 2, b'a', b'b', 1, 2, 3, 4]);
        assert_eq!(w.len(), 5 + 4 + 12 + 8 + 16);
        assert_eq!(EncryptedMeasurement::from_wire(&w).unwrap(), em);
        assert!(EncryptedMeasurement::from_wire(&w[..w.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_any_value(x in 0u64..=5000, slot in 1u32..=100_000, key in any::<[u8; 16]>(), sid in any::<u32>()) {
            let k = SessionKeys { channel_key: key, session_id: sid, established_at: 0 };
            let mut ctr = NonceCounter::new(sid);
            let em = seal_measurement(&meter(7), v(x), slot, &k, &mut ctr).unwrap();
            let em = EncryptedMeasurement::from_wire(&em.to_wire()).unwrap();
            prop_assert_eq!(open_measurement(&em, &k, 0).unwrap().0, v(x));
        }
    }
}
