// SPDX-License-Identifier: Apache-2.0

//! Meter identification and remote attestation of the aggregation enclave.
//!
//! The exchange, as seen by a meter:
//!
//! ```text
//!   meter                aggregator host / enclave            utility
//!     | IDENTIFY(cred)  ->   |  --- forwards credential --->    |
//!     |                 <-   |  <-- CRED_OK (signed) --------   |
//!     | CHALLENGE(nonce) ->  |
//!     |                 <-   | QUOTE(quote, enclave_pub, session id)
//!     | ATTEST_OK(meter_pub, signature) -> |
//! ```
//!
//! The quote's report data is `nonce || SHA-256(enclave_pub)`, so a verified quote binds
//! exactly one ephemeral X25519 key. Both ends derive the channel key as
//! `SHA-256(shared_secret || transcript_hash)[..16]`.
//!
//! Quotes are signed with an ordinary Ed25519 key held by a mock attestation authority.
//! Nothing about group-signature anonymity is modelled.

use std::collections::HashSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

use crate::bus::MessageKind;
use crate::codec::b64_fixed;
use crate::model::MeterId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttestationError {
    #[error("signature does not verify")]
    BadSignature,
    #[error("meter {0} is revoked")]
    Revoked(MeterId),
    #[error("quote measurement does not match the expected enclave")]
    WrongMeasurement,
    #[error("quote was not produced for the outstanding challenge")]
    StaleChallenge,
    #[error("remote key does not match the digest bound in the quote")]
    DigestMismatch,
    #[error("{kind:?} not accepted in state {state:?}")]
    OutOfOrder { state: HandshakeState, kind: MessageKind },
    #[error("message for {got} delivered to handshake of {expected}")]
    WrongMeter { expected: MeterId, got: MeterId },
    #[error("no outstanding challenge for {0}")]
    NoPendingChallenge(MeterId),
    #[error("malformed {0}")]
    Malformed(String),
}

pub fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

pub fn signing_key_from_rng<R: RngCore + CryptoRng>(rng: &mut R) -> SigningKey {
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    SigningKey::from_bytes(&seed)
}

fn verifying_key(bytes: &[u8; 32]) -> Result<VerifyingKey, AttestationError> {
    VerifyingKey::from_bytes(bytes).map_err(|_| AttestationError::BadSignature)
}

fn check_signature(vk: &VerifyingKey, msg: &[u8], sig: &[u8; 64]) -> Result<(), AttestationError> {
    vk.verify(msg, &Signature::from_bytes(sig)).map_err(|_| AttestationError::BadSignature)
}

/// A meter's deployment credential, issued by the utility.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    pub meter: MeterId,
    #[serde(with = "b64_fixed")]
    pub public_key: [u8; 32],
    #[serde(with = "b64_fixed")]
    pub signature: [u8; 64],
}

impl Credential {
    fn signed_bytes(meter: &MeterId, public_key: &[u8; 32]) -> Vec<u8> {
        let mut msg = b"meterpriv/credential/v1".to_vec();
        meter.write_bytes(&mut msg);
        msg.extend_from_slice(public_key);
        msg
    }
}

/// Accepts `cred` iff the provisioning key signed it and the meter is not revoked.
pub fn verify_credential(
    cred: &Credential,
    provisioning: &VerifyingKey,
    revoked: &HashSet<MeterId>,
) -> Result<MeterId, AttestationError> {
    check_signature(provisioning, &Credential::signed_bytes(&cred.meter, &cred.public_key), &cred.signature)?;
    if revoked.contains(&cred.meter) {
        return Err(AttestationError::Revoked(cred.meter.clone()));
    }
    Ok(cred.meter.clone())
}

/// The utility's confirmation that a credential checked out.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredOk {
    pub meter: MeterId,
    #[serde(with = "b64_fixed")]
    pub signature: [u8; 64],
}

impl CredOk {
    fn signed_bytes(meter: &MeterId) -> Vec<u8> {
        let mut msg = b"meterpriv/cred-ok/v1".to_vec();
        meter.write_bytes(&mut msg);
        msg
    }

    pub fn verify(&self, provisioning: &VerifyingKey) -> Result<(), AttestationError> {
        check_signature(provisioning, &Self::signed_bytes(&self.meter), &self.signature)
    }
}

/// The utility provider's provisioning authority.
pub struct UtilityProvider {
    key: SigningKey,
    revoked: HashSet<MeterId>,
}

impl UtilityProvider {
    pub fn new(key: SigningKey) -> Self {
        Self { key, revoked: HashSet::new() }
    }

    pub fn provisioning_key(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    pub fn signing_key(&self) -> &SigningKey {
        &self.key
    }

    pub fn issue_credential(&self, meter: &MeterId, meter_key: &VerifyingKey) -> Credential {
        let public_key = meter_key.to_bytes();
        let signature = self.key.sign(&Credential::signed_bytes(meter, &public_key)).to_bytes();
        Credential { meter: meter.clone(), public_key, signature }
    }

    pub fn revoke(&mut self, meter: MeterId) {
        self.revoked.insert(meter);
    }

    pub fn verify_credential(&self, cred: &Credential) -> Result<MeterId, AttestationError> {
        verify_credential(cred, &self.provisioning_key(), &self.revoked)
    }

    /// Verifies and, on success, signs the CRED_OK reply.
    pub fn approve(&self, cred: &Credential) -> Result<CredOk, AttestationError> {
        let meter = self.verify_credential(cred)?;
        let signature = self.key.sign(&CredOk::signed_bytes(&meter)).to_bytes();
        Ok(CredOk { meter, signature })
    }
}

/// Code identity of an enclave: a digest over its identity string and policy bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnclaveMeasurement(#[serde(with = "b64_fixed")] pub [u8; 32]);

impl EnclaveMeasurement {
    pub fn compute(code_identity: &str, policy: &[u8]) -> Self {
        let len = (code_identity.len() as u32).to_be_bytes();
        Self(sha256(&[b"meterpriv/measurement/v1", &len, code_identity.as_bytes(), policy]))
    }
}

impl fmt::Debug for EnclaveMeasurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EnclaveMeasurement({})", hex::encode(self.0))
    }
}

impl fmt::Display for EnclaveMeasurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// Stand-in for the platform quoting service: signs `(measurement || report_data)`.
pub struct AttestationAuthority {
    key: SigningKey,
}

impl AttestationAuthority {
    pub fn new(key: SigningKey) -> Self {
        Self { key }
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    pub fn signing_key(&self) -> &SigningKey {
        &self.key
    }

    fn sign(&self, measurement: &EnclaveMeasurement, report_data: &[u8; 64]) -> [u8; 64] {
        self.key.sign(&Quote::signed_bytes(measurement, report_data)).to_bytes()
    }
}

pub const QUOTE_LEN: usize = 32 + 64 + 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quote {
    pub measurement: EnclaveMeasurement,
    #[serde(with = "b64_fixed")]
    pub report_data: [u8; 64],
    #[serde(with = "b64_fixed")]
    pub signature: [u8; 64],
}

impl Quote {
    fn signed_bytes(measurement: &EnclaveMeasurement, report_data: &[u8; 64]) -> Vec<u8> {
        let mut msg = b"meterpriv/quote/v1".to_vec();
        msg.extend_from_slice(&measurement.0);
        msg.extend_from_slice(report_data);
        msg
    }

    /// `measurement || report_data || signature`.
    pub fn to_bytes(&self) -> [u8; QUOTE_LEN] {
        let mut out = [0u8; QUOTE_LEN];
        out[..32].copy_from_slice(&self.measurement.0);
        out[32..96].copy_from_slice(&self.report_data);
        out[96..].copy_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, AttestationError> {
        if b.len() != QUOTE_LEN {
            return Err(AttestationError::Malformed(format!("quote of {} bytes", b.len())));
        }
        let mut q = Quote { measurement: EnclaveMeasurement([0; 32]), report_data: [0; 64], signature: [0; 64] };
        q.measurement.0.copy_from_slice(&b[..32]);
        q.report_data.copy_from_slice(&b[32..96]);
        q.signature.copy_from_slice(&b[96..]);
        Ok(q)
    }
}

/// Produces the quote for an enclave holding `measurement`, answering `challenge` and
/// binding `enclave_pub`.
pub fn issue_quote(
    authority: &AttestationAuthority,
    measurement: EnclaveMeasurement,
    challenge: &[u8; 32],
    enclave_pub: &[u8; 32],
) -> Quote {
    let mut report_data = [0u8; 64];
    report_data[..32].copy_from_slice(challenge);
    report_data[32..].copy_from_slice(&sha256(&[enclave_pub]));
    let signature = authority.sign(&measurement, &report_data);
    Quote { measurement, report_data, signature }
}

/// Checks signature, then measurement, then challenge freshness. Returns the key
/// digest the quote binds.
pub fn verify_quote(
    quote: &Quote,
    expected: &EnclaveMeasurement,
    challenge: &[u8; 32],
    authority: &VerifyingKey,
) -> Result<[u8; 32], AttestationError> {
    check_signature(authority, &Quote::signed_bytes(&quote.measurement, &quote.report_data), &quote.signature)?;
    if &quote.measurement != expected {
        return Err(AttestationError::WrongMeasurement);
    }
    if &quote.report_data[..32] != challenge {
        return Err(AttestationError::StaleChallenge);
    }
    let mut digest = [0u8; 32];
    digest.copy_from_slice(&quote.report_data[32..]);
    Ok(digest)
}

/// Where a meter sends quotes for checking. Meters may verify locally or defer to the
/// attestation service; both end in [`verify_quote`].
pub trait QuoteVerifier: Send + Sync {
    fn verify(
        &self,
        quote: &Quote,
        expected: &EnclaveMeasurement,
        challenge: &[u8; 32],
    ) -> Result<[u8; 32], AttestationError>;
}

/// The meter holds the authority's public key and checks quotes itself.
pub struct LocalVerifier(pub VerifyingKey);

impl QuoteVerifier for LocalVerifier {
    fn verify(&self, q: &Quote, e: &EnclaveMeasurement, c: &[u8; 32]) -> Result<[u8; 32], AttestationError> {
        verify_quote(q, e, c, &self.0)
    }
}

/// Remote verification service shared by many meters.
pub struct AttestationService {
    authority: VerifyingKey,
    served: AtomicU64,
}

impl AttestationService {
    pub fn new(authority: VerifyingKey) -> Self {
        Self { authority, served: AtomicU64::new(0) }
    }

    pub fn requests_served(&self) -> u64 {
        self.served.load(Ordering::Relaxed)
    }
}

impl QuoteVerifier for AttestationService {
    fn verify(&self, q: &Quote, e: &EnclaveMeasurement, c: &[u8; 32]) -> Result<[u8; 32], AttestationError> {
        self.served.fetch_add(1, Ordering::Relaxed);
        verify_quote(q, e, c, &self.authority)
    }
}

/// Symmetric state for one meter-to-enclave channel.
#[derive(Clone, PartialEq, Eq)]
pub struct SessionKeys {
    pub channel_key: [u8; 16],
    pub session_id: u32,
    pub established_at: u32,
}

impl fmt::Debug for SessionKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionKeys")
            .field("session_id", &self.session_id)
            .field("established_at", &self.established_at)
            .finish_non_exhaustive()
    }
}

/// Hash of everything both parties agreed on during the handshake.
pub fn transcript_hash(
    meter: &MeterId,
    challenge: &[u8; 32],
    enclave_pub: &[u8; 32],
    meter_pub: &[u8; 32],
    session_id: u32,
) -> [u8; 32] {
    sha256(&[
        b"meterpriv/handshake/v1",
        &meter.to_bytes(),
        challenge,
        enclave_pub,
        meter_pub,
        &session_id.to_be_bytes(),
    ])
}

/// X25519 agreement followed by `SHA-256(shared || transcript)[..16]`.
///
/// With `bound_digest` set, the remote key must hash to it (the quote binding).
pub fn derive_session_key(
    local: &StaticSecret,
    remote_public: &[u8; 32],
    bound_digest: Option<&[u8; 32]>,
    transcript: &[u8; 32],
    session_id: u32,
    established_at: u32,
) -> Result<SessionKeys, AttestationError> {
    if let Some(d) = bound_digest {
        if &sha256(&[remote_public]) != d {
            return Err(AttestationError::DigestMismatch);
        }
    }
    let shared = local.diffie_hellman(&PublicKey::from(*remote_public));
    let okm = sha256(&[shared.as_bytes(), transcript]);
    let mut channel_key = [0u8; 16];
    channel_key.copy_from_slice(&okm[..16]);
    Ok(SessionKeys { channel_key, session_id, established_at })
}

pub fn x25519_secret_from_rng<R: RngCore + CryptoRng>(rng: &mut R) -> StaticSecret {
    let mut b = [0u8; 32];
    rng.fill_bytes(&mut b);
    StaticSecret::from(b)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identify {
    pub credential: Credential,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Challenge {
    pub meter: MeterId,
    #[serde(with = "b64_fixed")]
    pub nonce: [u8; 32],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuoteResponse {
    pub meter: MeterId,
    pub quote: Quote,
    #[serde(with = "b64_fixed")]
    pub enclave_pub: [u8; 32],
    pub session_id: u32,
}

/// Final meter message: its ephemeral key, signed with its credential key over the
/// handshake transcript.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestOk {
    pub credential: Credential,
    #[serde(with = "b64_fixed")]
    pub meter_pub: [u8; 32],
    #[serde(with = "b64_fixed")]
    pub signature: [u8; 64],
}

impl AttestOk {
    pub fn meter(&self) -> &MeterId {
        &self.credential.meter
    }

    /// Checks the credential and the meter's signature over `transcript`.
    pub fn verify(&self, provisioning: &VerifyingKey, transcript: &[u8; 32]) -> Result<(), AttestationError> {
        verify_credential(&self.credential, provisioning, &HashSet::new())?;
        check_signature(&verifying_key(&self.credential.public_key)?, transcript, &self.signature)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HandshakeMessage {
    Identify(Identify),
    CredOk(CredOk),
    Challenge(Challenge),
    Quote(QuoteResponse),
    AttestOk(AttestOk),
}

impl HandshakeMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            Self::Identify(_) => MessageKind::Identify,
            Self::CredOk(_) => MessageKind::CredOk,
            Self::Challenge(_) => MessageKind::Challenge,
            Self::Quote(_) => MessageKind::Quote,
            Self::AttestOk(_) => MessageKind::AttestOk,
        }
    }

    pub fn meter(&self) -> &MeterId {
        match self {
            Self::Identify(m) => &m.credential.meter,
            Self::CredOk(m) => &m.meter,
            Self::Challenge(m) => &m.meter,
            Self::Quote(m) => &m.meter,
            Self::AttestOk(m) => m.meter(),
        }
    }

    /// JSON payload for the bus envelope.
    pub fn to_payload(&self) -> Vec<u8> {
        let r = match self {
            Self::Identify(m) => serde_json::to_vec(m),
            Self::CredOk(m) => serde_json::to_vec(m),
            Self::Challenge(m) => serde_json::to_vec(m),
            Self::Quote(m) => serde_json::to_vec(m),
            Self::AttestOk(m) => serde_json::to_vec(m),
        };
        r.expect("handshake messages serialize")
    }

    pub fn from_payload(kind: MessageKind, payload: &[u8]) -> Result<Self, AttestationError> {
        let bad = |e: serde_json::Error| AttestationError::Malformed(format!("{kind:?}: {e}"));
        Ok(match kind {
            MessageKind::Identify => Self::Identify(serde_json::from_slice(payload).map_err(bad)?),
            MessageKind::CredOk => Self::CredOk(serde_json::from_slice(payload).map_err(bad)?),
            MessageKind::Challenge => Self::Challenge(serde_json::from_slice(payload).map_err(bad)?),
            MessageKind::Quote => Self::Quote(serde_json::from_slice(payload).map_err(bad)?),
            MessageKind::AttestOk => Self::AttestOk(serde_json::from_slice(payload).map_err(bad)?),
            other => return Err(AttestationError::Malformed(format!("{other:?} is not a handshake message"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HandshakeState {
    Identify,
    CredentialVerified,
    Challenged,
    QuoteVerified,
    KeysEstablished,
}

impl HandshakeState {
    pub const ALL: [HandshakeState; 5] = [
        HandshakeState::Identify,
        HandshakeState::CredentialVerified,
        HandshakeState::Challenged,
        HandshakeState::QuoteVerified,
        HandshakeState::KeysEstablished,
    ];
}

/// Everything a meter needs to know about the enclave it is willing to talk to.
#[derive(Clone)]
pub struct TrustAnchors {
    pub provisioning: VerifyingKey,
    pub expected: EnclaveMeasurement,
    pub verifier: Arc<dyn QuoteVerifier>,
}

/// The meter's side of the handshake.
///
/// Inbound messages go through [`receive`](Self::receive); the meter's own sends are
/// [`challenge`](Self::challenge) and [`confirm`](Self::confirm). Anything out of order
/// is rejected and leaves the state untouched.
pub struct MeterHandshake {
    meter: MeterId,
    identity: SigningKey,
    credential: Credential,
    anchors: TrustAnchors,
    state: HandshakeState,
    nonce: Option<[u8; 32]>,
    enclave: Option<([u8; 32], u32)>,
}

impl MeterHandshake {
    /// Starts a handshake; the returned IDENTIFY goes to the aggregator.
    pub fn begin(identity: SigningKey, credential: Credential, anchors: TrustAnchors) -> (Self, HandshakeMessage) {
        let msg = HandshakeMessage::Identify(Identify { credential: credential.clone() });
        let hs = Self {
            meter: credential.meter.clone(),
            identity,
            credential,
            anchors,
            state: HandshakeState::Identify,
            nonce: None,
            enclave: None,
        };
        (hs, msg)
    }

    pub fn state(&self) -> HandshakeState {
        self.state
    }

    pub fn meter(&self) -> &MeterId {
        &self.meter
    }

    fn out_of_order(&self, kind: MessageKind) -> AttestationError {
        AttestationError::OutOfOrder { state: self.state, kind }
    }

    pub fn receive(&mut self, msg: &HandshakeMessage) -> Result<HandshakeState, AttestationError> {
        match (self.state, msg) {
            (HandshakeState::Identify, HandshakeMessage::CredOk(ok)) => {
                self.check_meter(&ok.meter)?;
                ok.verify(&self.anchors.provisioning)?;
                self.state = HandshakeState::CredentialVerified;
            }
            (HandshakeState::Challenged, HandshakeMessage::Quote(resp)) => {
                self.check_meter(&resp.meter)?;
                let nonce = self.nonce.expect("challenged state holds a nonce");
                let digest = self.anchors.verifier.verify(&resp.quote, &self.anchors.expected, &nonce)?;
                if sha256(&[&resp.enclave_pub]) != digest {
                    return Err(AttestationError::DigestMismatch);
                }
                self.enclave = Some((resp.enclave_pub, resp.session_id));
                self.state = HandshakeState::QuoteVerified;
            }
            _ => return Err(self.out_of_order(msg.kind())),
        }
        Ok(self.state)
    }

    fn check_meter(&self, got: &MeterId) -> Result<(), AttestationError> {
        if got != &self.meter {
            return Err(AttestationError::WrongMeter { expected: self.meter.clone(), got: got.clone() });
        }
        Ok(())
    }

    /// Issues a fresh challenge. Only valid right after the credential was accepted.
    pub fn challenge<R: RngCore + CryptoRng>(&mut self, rng: &mut R) -> Result<HandshakeMessage, AttestationError> {
        if self.state != HandshakeState::CredentialVerified {
            return Err(self.out_of_order(MessageKind::Challenge));
        }
        let mut nonce = [0u8; 32];
        rng.fill_bytes(&mut nonce);
        self.nonce = Some(nonce);
        self.state = HandshakeState::Challenged;
        Ok(HandshakeMessage::Challenge(Challenge { meter: self.meter.clone(), nonce }))
    }

    /// Completes the agreement against the quoted enclave key and produces ATTEST_OK.
    pub fn confirm<R: RngCore + CryptoRng>(
        &mut self,
        rng: &mut R,
        established_at: u32,
    ) -> Result<(HandshakeMessage, SessionKeys), AttestationError> {
        if self.state != HandshakeState::QuoteVerified {
            return Err(self.out_of_order(MessageKind::AttestOk));
        }
        let (enclave_pub, session_id) = self.enclave.expect("quote verified state holds the enclave key");
        let nonce = self.nonce.expect("nonce set");
        let secret = x25519_secret_from_rng(rng);
        let meter_pub = PublicKey::from(&secret).to_bytes();
        let transcript = transcript_hash(&self.meter, &nonce, &enclave_pub, &meter_pub, session_id);
        let bound = sha256(&[&enclave_pub]);
        let keys = derive_session_key(&secret, &enclave_pub, Some(&bound), &transcript, session_id, established_at)?;
        let signature = self.identity.sign(&transcript).to_bytes();
        self.state = HandshakeState::KeysEstablished;
        let msg = HandshakeMessage::AttestOk(AttestOk { credential: self.credential.clone(), meter_pub, signature });
        Ok((msg, keys))
    }
}
