// SPDX-License-Identifier: Apache-2.0

//! The trusted aggregation core.
//!
//! [`Enclave`] stands in for a hardware enclave: all state is private and reachable only
//! through the methods below, and the only plaintext that leaves it is an
//! [`AggregateRecord`] per slot and a [`BillingRecord`] per meter per period. The
//! attestation measurement covers [`CODE_IDENTITY`] and the substitution policy.
//!
//! Fault tolerance: a meter that stays silent for a slot is replaced by the floor of the
//! mean of its last `window` real readings. If more than `max_failed_fraction` of the
//! roster is silent, or a silent meter has no history yet, the slot is flagged and no
//! sum is released. Substitutes never enter billing totals or the history ring.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ed25519_dalek::VerifyingKey;
use num_integer::Integer;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

use crate::attestation::{
    derive_session_key, issue_quote, transcript_hash, x25519_secret_from_rng, AttestOk, AttestationAuthority,
    AttestationError, Challenge, EnclaveMeasurement, QuoteResponse, SessionKeys,
};
use crate::channel::{open_measurement, ChannelError, EncryptedMeasurement};
use crate::model::{validate_measurement, AggregateRecord, BillingRecord, MeterId, ModelError, TimeSlot};

pub const CODE_IDENTITY: &str = "meterpriv/enclave-aggregator/1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnclaveError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Attestation(#[from] AttestationError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{meter} already reported slot {slot}")]
    DuplicateSlot { meter: MeterId, slot: u32 },
    #[error("slot {got} is not the open slot {current}")]
    WrongSlot { got: u32, current: u32 },
    #[error("slot {0} already closed")]
    SlotAlreadyClosed(u32),
    #[error("period incomplete: {closed} of {t} slots closed")]
    PeriodIncomplete { closed: u32, t: u32 },
    #[error("billing for {0} already released this period")]
    AlreadyReleased(MeterId),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
}

/// An exact fraction in `[0, 1]`, compared by cross-multiplication.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Fraction {
    num: u64,
    den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Result<Self, EnclaveError> {
        if den == 0 || num > den {
            return Err(EnclaveError::InvalidPolicy(format!("{num}/{den} not in [0,1]")));
        }
        let g = num.gcd(&den);
        Ok(Self { num: num / g, den: den / g })
    }

    pub fn num(self) -> u64 {
        self.num
    }

    pub fn den(self) -> u64 {
        self.den
    }

    /// `part / whole > self`, exactly.
    pub fn exceeded_by(self, part: u64, whole: u64) -> bool {
        (part as u128) * (self.den as u128) > (self.num as u128) * (whole as u128)
    }
}

impl FromStr for Fraction {
    type Err = EnclaveError;

    /// Accepts `a/b` or a plain decimal such as `0.25`.
    fn from_str(s: &str) -> Result<Self, EnclaveError> {
        let bad = || EnclaveError::InvalidPolicy(format!("cannot parse fraction {s:?}"));
        let s = s.trim();
        if let Some((a, b)) = s.split_once('/') {
            return Fraction::new(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 18 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let den = 10u64.pow(frac.len() as u32);
        let frac_v: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let num = int.checked_mul(den).and_then(|x| x.checked_add(frac_v)).ok_or_else(bad)?;
        Fraction::new(num, den)
    }
}

impl TryFrom<String> for Fraction {
    type Error = EnclaveError;
    fn try_from(s: String) -> Result<Self, EnclaveError> {
        s.parse()
    }
}

impl From<Fraction> for String {
    fn from(f: Fraction) -> String {
        f.to_string()
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubstitutionPolicy {
    pub window: u32,
    pub max_failed_fraction: Fraction,
}

impl Default for SubstitutionPolicy {
    fn default() -> Self {
        Self { window: 3, max_failed_fraction: Fraction { num: 1, den: 10 } }
    }
}

impl SubstitutionPolicy {
    pub fn new(window: u32, max_failed_fraction: Fraction) -> Result<Self, EnclaveError> {
        if window == 0 {
            return Err(EnclaveError::InvalidPolicy("window must be >= 1".into()));
        }
        Ok(Self { window, max_failed_fraction })
    }

    /// Canonical bytes covered by the measurement.
    pub fn to_bytes(&self) -> [u8; 20] {
        let mut b = [0u8; 20];
        b[..4].copy_from_slice(&self.window.to_be_bytes());
        b[4..12].copy_from_slice(&self.max_failed_fraction.num.to_be_bytes());
        b[12..].copy_from_slice(&self.max_failed_fraction.den.to_be_bytes());
        b
    }

    pub fn measurement(&self) -> EnclaveMeasurement {
        EnclaveMeasurement::compute(CODE_IDENTITY, &self.to_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnclaveConfig {
    pub region: String,
    /// Slots per billing period.
    pub t: u32,
    pub slot_secs: u32,
    pub v_max: u64,
    pub policy: SubstitutionPolicy,
}

/// Releases each meter's bill at most once per period.
#[derive(Debug, Default)]
pub struct ReleaseGate {
    period: u32,
    released: BTreeSet<MeterId>,
}

impl ReleaseGate {
    fn release(&mut self, meter: &MeterId) -> Result<(), EnclaveError> {
        if !self.released.insert(meter.clone()) {
            return Err(EnclaveError::AlreadyReleased(meter.clone()));
        }
        Ok(())
    }

    fn next_period(&mut self) {
        self.period += 1;
        self.released.clear();
    }
}

struct MeterState {
    keys: SessionKeys,
    last_seen: u64,
    billing: u64,
    history: VecDeque<u64>,
}

struct Pending {
    nonce: [u8; 32],
    secret: StaticSecret,
    public: [u8; 32],
    session_id: u32,
}

pub struct Enclave {
    config: EnclaveConfig,
    measurement: EnclaveMeasurement,
    authority: Arc<AttestationAuthority>,
    provisioning: VerifyingKey,
    rng: ChaCha20Rng,
    pending: HashMap<MeterId, Pending>,
    next_session_id: u32,
    meters: BTreeMap<MeterId, MeterState>,
    buffer: BTreeMap<MeterId, u64>,
    open_slot: u32,
    gate: ReleaseGate,
}

impl fmt::Debug for Enclave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Enclave")
            .field("measurement", &self.measurement)
            .field("meters", &self.meters.len())
            .field("open_slot", &self.open_slot)
            .finish_non_exhaustive()
    }
}

impl Enclave {
    /// `authority` plays the platform's quoting service; `provisioning` is the utility
    /// key that signs meter credentials; `seed` drives the enclave's ephemeral keys.
    pub fn new(
        config: EnclaveConfig,
        authority: Arc<AttestationAuthority>,
        provisioning: VerifyingKey,
        seed: [u8; 32],
    ) -> Result<Self, EnclaveError> {
        let policy = SubstitutionPolicy::new(config.policy.window, config.policy.max_failed_fraction)?;
        if config.t == 0 {
            return Err(EnclaveError::InvalidPolicy("t must be >= 1".into()));
        }
        Ok(Self {
            measurement: policy.measurement(),
            config,
            authority,
            provisioning,
            rng: ChaCha20Rng::from_seed(seed),
            pending: HashMap::new(),
            next_session_id: 1,
            meters: BTreeMap::new(),
            buffer: BTreeMap::new(),
            open_slot: 1,
            gate: ReleaseGate { period: 1, released: BTreeSet::new() },
        })
    }

    pub fn measurement(&self) -> EnclaveMeasurement {
        self.measurement
    }

    pub fn roster_len(&self) -> usize {
        self.meters.len()
    }

    pub fn open_slot(&self) -> u32 {
        self.open_slot
    }

    pub fn period(&self) -> u32 {
        self.gate.period
    }

    /// Answers a challenge with a fresh ephemeral key bound into a quote. A new
    /// challenge from the same meter replaces any earlier one.
    pub fn answer_challenge(&mut self, ch: &Challenge) -> QuoteResponse {
        let secret = x25519_secret_from_rng(&mut self.rng);
        let public = PublicKey::from(&secret).to_bytes();
        let session_id = self.next_session_id;
        self.next_session_id = self.next_session_id.wrapping_add(1).max(1);
        let quote = issue_quote(&self.authority, self.measurement, &ch.nonce, &public);
        self.pending.insert(ch.meter.clone(), Pending { nonce: ch.nonce, secret, public, session_id });
        QuoteResponse { meter: ch.meter.clone(), quote, enclave_pub: public, session_id }
    }

    /// Installs the channel once the meter has verified the quote and signed the
    /// transcript with its credential key.
    pub fn accept_attestation(&mut self, ok: &AttestOk, established_at: u32) -> Result<(), EnclaveError> {
        let meter = ok.meter().clone();
        let p = self.pending.get(&meter).ok_or_else(|| AttestationError::NoPendingChallenge(meter.clone()))?;
        if meter.region() != self.config.region {
            return Err(AttestationError::WrongMeter { expected: meter.clone(), got: meter }.into());
        }
        let transcript = transcript_hash(&meter, &p.nonce, &p.public, &ok.meter_pub, p.session_id);
        ok.verify(&self.provisioning, &transcript)?;
        let keys = derive_session_key(&p.secret, &ok.meter_pub, None, &transcript, p.session_id, established_at)?;
        self.pending.remove(&meter);
        let window = self.config.policy.window as usize;
        match self.meters.get_mut(&meter) {
            Some(state) => {
                state.keys = keys;
                state.last_seen = 0;
            }
            None => {
                self.meters.insert(
                    meter,
                    MeterState { keys, last_seen: 0, billing: 0, history: VecDeque::with_capacity(window) },
                );
            }
        }
        Ok(())
    }

    /// Decrypts a reading into the open slot.
    pub fn ingest(&mut self, em: &EncryptedMeasurement) -> Result<(), EnclaveError> {
        let state = self
            .meters
            .get_mut(&em.meter)
            .ok_or_else(|| ChannelError::UnknownSession(em.meter.clone()))?;
        let (value, counter) = open_measurement(em, &state.keys, state.last_seen)?;
        if em.slot < self.open_slot {
            return Err(EnclaveError::SlotAlreadyClosed(em.slot));
        }
        if em.slot != self.open_slot {
            return Err(EnclaveError::WrongSlot { got: em.slot, current: self.open_slot });
        }
        if self.buffer.contains_key(&em.meter) {
            return Err(EnclaveError::DuplicateSlot { meter: em.meter.clone(), slot: em.slot });
        }
        let wh = validate_measurement(value.wh() as i128, self.config.v_max)?.wh();
        let billing = state.billing.checked_add(wh).ok_or(ModelError::Overflow)?;
        state.last_seen = counter;
        state.billing = billing;
        if state.history.len() == self.config.policy.window as usize {
            state.history.pop_front();
        }
        state.history.push_back(wh);
        self.buffer.insert(em.meter.clone(), wh);
        Ok(())
    }

    /// Closes the open slot and produces its record.
    pub fn close_slot(&mut self, j: u32) -> Result<AggregateRecord, EnclaveError> {
        if j < self.open_slot || (j > self.config.t && self.open_slot > self.config.t) {
            return Err(EnclaveError::SlotAlreadyClosed(j));
        }
        if j != self.open_slot {
            return Err(EnclaveError::WrongSlot { got: j, current: self.open_slot });
        }
        let slot = TimeSlot::new(j, self.config.slot_secs)?;
        let n = self.meters.len() as u64;
        let present = self.buffer.len() as u32;
        let missing: Vec<&MeterId> = self.meters.keys().filter(|m| !self.buffer.contains_key(*m)).collect();
        let flagged_record = AggregateRecord { slot, sum: None, contributing: present, substituted: 0, flagged: true };

        let record = if self.config.policy.max_failed_fraction.exceeded_by(missing.len() as u64, n) {
            flagged_record
        } else {
            let mut sum = self.buffer.values().try_fold(0u64, |a, &v| a.checked_add(v)).ok_or(ModelError::Overflow)?;
            let mut substitutes = Some(0u32);
            for m in &missing {
                match substitute(&self.meters[*m].history) {
                    Some(v) => {
                        sum = sum.checked_add(v).ok_or(ModelError::Overflow)?;
                        substitutes = substitutes.map(|s| s + 1);
                    }
                    None => {
                        substitutes = None;
                        break;
                    }
                }
            }
            match substitutes {
                Some(substituted) => {
                    AggregateRecord { slot, sum: Some(sum), contributing: present, substituted, flagged: false }
                }
                None => flagged_record,
            }
        };
        self.buffer.clear();
        self.open_slot += 1;
        Ok(record)
    }

    /// Releases per-meter totals of real readings and starts a new period.
    pub fn close_period(&mut self) -> Result<Vec<BillingRecord>, EnclaveError> {
        let closed = self.open_slot - 1;
        if closed != self.config.t {
            return Err(EnclaveError::PeriodIncomplete { closed, t: self.config.t });
        }
        let period = self.gate.period;
        let mut out = Vec::with_capacity(self.meters.len());
        for (meter, state) in &mut self.meters {
            self.gate.release(meter)?;
            out.push(BillingRecord { meter: meter.clone(), period, total: state.billing });
            state.billing = 0;
        }
        self.gate.next_period();
        self.open_slot = 1;
        Ok(out)
    }

    /// Mean in-enclave bytes per attested meter: map key and value inline sizes plus
    /// their heap allocations (region string, history ring).
    pub fn footprint_per_meter(&self) -> usize {
        if self.meters.is_empty() {
            return 0;
        }
        let inline = std::mem::size_of::<MeterId>() + std::mem::size_of::<MeterState>();
        let total: usize = self
            .meters
            .iter()
            .map(|(m, s)| inline + m.region().len() + s.history.capacity() * std::mem::size_of::<u64>())
            .sum();
        total / self.meters.len()
    }
}

/// `floor(mean(history))`, or `None` with no history.
fn substitute(history: &VecDeque<u64>) -> Option<u64> {
    if history.is_empty() {
        return None;
    }
    let total: u128 = history.iter().map(|&v| v as u128).sum();
    Some((total / history.len() as u128) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attestation::{
        signing_key_from_rng, HandshakeMessage, LocalVerifier, MeterHandshake, TrustAnchors, UtilityProvider,
    };
    use crate::channel::MeterChannel;
    use proptest::prelude::*;

    struct Fixture {
        enclave: Enclave,
        up: UtilityProvider,
        authority: Arc<AttestationAuthority>,
        rng: ChaCha20Rng,
    }

    fn fixture(t: u32, policy: SubstitutionPolicy) -> Fixture {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let up = UtilityProvider::new(signing_key_from_rng(&mut rng));
        let authority = Arc::new(AttestationAuthority::new(signing_key_from_rng(&mut rng)));
        let cfg = EnclaveConfig { region: "north".into(), t, slot_secs: 60, v_max: 5000, policy };
        let enclave = Enclave::new(cfg, authority.clone(), up.provisioning_key(), [3; 32]).unwrap();
        Fixture { enclave, up, authority, rng }
    }

    fn attest(f: &mut Fixture, i: u16) -> MeterChannel {
        let id = MeterId::new("north", i).unwrap();
        let sk = signing_key_from_rng(&mut f.rng);
        let cred = f.up.issue_credential(&id, &sk.verifying_key());
        let anchors = TrustAnchors {
            provisioning: f.up.provisioning_key(),
            expected: f.enclave.measurement(),
            verifier: Arc::new(LocalVerifier(f.authority.verifying_key())),
        };
        let (mut hs, identify) = MeterHandshake::begin(sk, cred, anchors);
        let HandshakeMessage::Identify(idm) = identify else { unreachable!() };
        hs.receive(&HandshakeMessage::CredOk(f.up.approve(&idm.credential).unwrap())).unwrap();
        let HandshakeMessage::Challenge(ch) = hs.challenge(&mut f.rng).unwrap() else { unreachable!() };
        hs.receive(&HandshakeMessage::Quote(f.enclave.answer_challenge(&ch))).unwrap();
        let (msg, keys) = hs.confirm(&mut f.rng, 0).unwrap();
        let HandshakeMessage::AttestOk(ok) = msg else { unreachable!() };
        f.enclave.accept_attestation(&ok, 0).unwrap();
        MeterChannel::new(id, keys)
    }

    fn mv(x: u64) -> crate::model::MeasurementValue {
        validate_measurement(x as i128, 5000).unwrap()
    }

    fn policy(window: u32, num: u64, den: u64) -> SubstitutionPolicy {
        SubstitutionPolicy::new(window, Fraction::new(num, den).unwrap()).unwrap()
    }

    #[test]
    fn fractions() {
        assert_eq!("0.2".parse::<Fraction>().unwrap(), Fraction::new(1, 5).unwrap());
        assert_eq!("2/10".parse::<Fraction>().unwrap(), Fraction::new(1, 5).unwrap());
        assert_eq!("1".parse::<Fraction>().unwrap(), Fraction::new(1, 1).unwrap());
        assert!("1.5".parse::<Fraction>().is_err());
        assert!("x".parse::<Fraction>().is_err());
        let f = Fraction::new(1, 5).unwrap();
        assert!(!f.exceeded_by(2, 10));
        assert!(f.exceeded_by(3, 10));
    }

    #[test]
    fn measurement_tracks_policy() {
        assert_eq!(policy(2, 1, 10).measurement(), policy(2, 1, 10).measurement());
        assert_ne!(policy(2, 1, 10).measurement(), policy(3, 1, 10).measurement());
        assert_ne!(policy(2, 1, 10).measurement(), policy(2, 2, 10).measurement());
        assert_eq!(policy(2, 1, 10).measurement(), policy(2, 2, 20).measurement());
    }

    #[test]
    fn ingest_then_duplicate_then_unknown() {
        let mut f = fixture(3, policy(2, 1, 10));
        let mut m1 = attest(&mut f, 1);
        f.enclave.ingest(&m1.seal(mv(150), 1).unwrap()).unwrap();
        let again = m1.seal(mv(151), 1).unwrap();
        assert!(matches!(f.enclave.ingest(&again), Err(EnclaveError::DuplicateSlot { slot: 1, .. })));

        let rogue_keys = SessionKeys { channel_key: [1; 16], session_id: 99, established_at: 0 };
        let mut rogue = MeterChannel::new(MeterId::new("north", 9).unwrap(), rogue_keys);
        assert!(matches!(
            f.enclave.ingest(&rogue.seal(mv(1), 1).unwrap()),
            Err(EnclaveError::Channel(ChannelError::UnknownSession(_)))
        ));
        f.enclave.close_slot(1).unwrap();
        f.enclave.close_slot(2).unwrap();
        f.enclave.close_slot(3).unwrap();
        let bills = f.enclave.close_period().unwrap();
        assert_eq!(bills[0].total, 150);
    }

    #[test]
    fn replayed_envelope_is_rejected() {
        let mut f = fixture(3, policy(2, 1, 10));
        let mut m1 = attest(&mut f, 1);
        let em = m1.seal(mv(10), 1).unwrap();
        f.enclave.ingest(&em).unwrap();
        assert!(matches!(f.enclave.ingest(&em), Err(EnclaveError::Channel(ChannelError::Replay { .. }))));
    }

    #[test]
    fn full_slot_sums() {
        let mut f = fixture(1, policy(2, 0, 1));
        let mut ms: Vec<_> = (1..=3).map(|i| attest(&mut f, i)).collect();
        for (m, v) in ms.iter_mut().zip([100, 200, 300]) {
            f.enclave.ingest(&m.seal(mv(v), 1).unwrap()).unwrap();
        }
        let rec = f.enclave.close_slot(1).unwrap();
        assert_eq!((rec.sum, rec.contributing, rec.substituted, rec.flagged), (Some(600), 3, 0, false));
        assert_eq!(f.enclave.close_slot(1), Err(EnclaveError::SlotAlreadyClosed(1)));
    }

    #[test]
    fn substitutes_mean_of_history() {
        let mut f = fixture(3, policy(2, 1, 3));
        let mut ms: Vec<_> = (1..=3).map(|i| attest(&mut f, i)).collect();
        let rows = [[100, 100], [200, 200], [280, 320]];
        for j in 1..=2u32 {
            for (m, row) in ms.iter_mut().zip(rows) {
                f.enclave.ingest(&m.seal(mv(row[j as usize - 1]), j).unwrap()).unwrap();
            }
            f.enclave.close_slot(j).unwrap();
        }
        f.enclave.ingest(&ms[0].seal(mv(100), 3).unwrap()).unwrap();
        f.enclave.ingest(&ms[1].seal(mv(200), 3).unwrap()).unwrap();
        let rec = f.enclave.close_slot(3).unwrap();
        assert_eq!((rec.sum, rec.substituted, rec.contributing), (Some(600), 1, 2));

        let bills = f.enclave.close_period().unwrap();
        assert_eq!(bills.iter().map(|b| b.total).collect::<Vec<_>>(), [300, 600, 600]);
    }

    #[test]
    fn too_many_failures_flag_the_slot() {
        let mut f = fixture(1, policy(1, 1, 5));
        let mut ms: Vec<_> = (1..=10).map(|i| attest(&mut f, i)).collect();
        for m in ms.iter_mut().take(7) {
            f.enclave.ingest(&m.seal(mv(10), 1).unwrap()).unwrap();
        }
        let rec = f.enclave.close_slot(1).unwrap();
        assert!(rec.flagged);
        assert_eq!(rec.sum, None);
    }

    #[test]
    fn missing_meter_without_history_flags() {
        let mut f = fixture(2, policy(1, 1, 1));
        let mut ms: Vec<_> = (1..=2).map(|i| attest(&mut f, i)).collect();
        f.enclave.ingest(&ms[0].seal(mv(10), 1).unwrap()).unwrap();
        assert!(f.enclave.close_slot(1).unwrap().flagged);
        // Silence of m1 in slot 2 can be covered from its history.
        f.enclave.ingest(&ms[1].seal(mv(30), 2).unwrap()).unwrap();
        let rec = f.enclave.close_slot(2).unwrap();
        assert_eq!((rec.sum, rec.substituted, rec.flagged), (Some(40), 1, false));
    }

    #[test]
    fn billing_excludes_substitutes_and_gate_holds() {
        let mut f = fixture(3, policy(2, 1, 1));
        let mut m = attest(&mut f, 1);
        f.enclave.ingest(&m.seal(mv(10), 1).unwrap()).unwrap();
        f.enclave.close_slot(1).unwrap();
        assert_eq!(f.enclave.close_period(), Err(EnclaveError::PeriodIncomplete { closed: 1, t: 3 }));
        assert_eq!(f.enclave.close_slot(2).unwrap().sum, Some(10));
        f.enclave.ingest(&m.seal(mv(30), 3).unwrap()).unwrap();
        f.enclave.close_slot(3).unwrap();
        let bills = f.enclave.close_period().unwrap();
        assert_eq!(bills[0].total, 40);
        assert_eq!(f.enclave.period(), 2);
        assert_eq!(f.enclave.close_period(), Err(EnclaveError::PeriodIncomplete { closed: 0, t: 3 }));
    }

    #[test]
    fn slot_ordering_errors() {
        let mut f = fixture(2, policy(1, 1, 1));
        let mut m = attest(&mut f, 1);
        assert_eq!(f.enclave.close_slot(2), Err(EnclaveError::WrongSlot { got: 2, current: 1 }));
        assert!(matches!(f.enclave.ingest(&m.seal(mv(1), 2).unwrap()), Err(EnclaveError::WrongSlot { .. })));
    }

    #[test]
    fn footprint_is_small() {
        let mut f = fixture(2, policy(3, 1, 1));
        let mut m = attest(&mut f, 1);
        f.enclave.ingest(&m.seal(mv(1), 1).unwrap()).unwrap();
        let bytes = f.enclave.footprint_per_meter();
        assert!(bytes > 0 && bytes <= 512, "{bytes}");
    }

    proptest! {
        #[test]
        fn substitute_within_history_range(h in prop::collection::vec(0u64..=5000, 1..8)) {
            let d: VecDeque<u64> = h.iter().copied().collect();
            let s = substitute(&d).unwrap();
            prop_assert!(s >= *h.iter().min().unwrap() && s <= *h.iter().max().unwrap());
        }

        #[test]
        fn raising_threshold_never_flags(missing in 0u64..=20, extra in 0u64..=20, a in 0u64..=100, b in 0u64..=100) {
            let n = missing + extra;
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let lo = Fraction::new(lo, 100).unwrap();
            let hi = Fraction::new(hi, 100).unwrap();
            if !lo.exceeded_by(missing, n) {
                prop_assert!(!hi.exceeded_by(missing, n));
            }
        }
    }
}
