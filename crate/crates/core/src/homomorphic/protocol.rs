// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use num_bigint::BigUint;
use num_traits::One;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::dlog::BabyStepTable;
use super::group::GroupParams;
use super::HomError;
use crate::attestation::{verify_credential, Credential};
use crate::codec::{b64_fixed, hex_biguint};
use crate::model::{MeasurementValue, MeterId};

/// A producer's long-term ElGamal key pair and the credential vouching for it.
pub struct ProducerKeys {
    pub meter: MeterId,
    x: BigUint,
    pub y: BigUint,
    pub cert: Credential,
}

impl fmt::Debug for ProducerKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProducerKeys").field("meter", &self.meter).field("y", &self.y).finish_non_exhaustive()
    }
}

impl ProducerKeys {
    pub fn generate<R: RngCore>(params: &GroupParams, cert: Credential, rng: &mut R) -> Self {
        Self::from_secret(params, cert, params.random_exponent(rng))
    }

    pub fn from_secret(params: &GroupParams, cert: Credential, x: BigUint) -> Self {
        let y = params.g_pow(&x);
        Self { meter: cert.meter.clone(), x, y, cert }
    }

    pub fn secret(&self) -> &BigUint {
        &self.x
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregatePublicKey {
    #[serde(with = "hex_biguint")]
    pub y: BigUint,
    pub roster: Vec<MeterId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HomCiphertext {
    #[serde(with = "hex_biguint")]
    pub c: BigUint,
    #[serde(with = "hex_biguint")]
    pub d: BigUint,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialDecryption {
    pub meter: MeterId,
    #[serde(with = "hex_biguint")]
    pub t: BigUint,
}

/// The per-round blinding exponent `z`. Deliberately not `Clone`: it is consumed by
/// exactly one partial decryption.
pub struct Mask(BigUint);

impl Mask {
    pub fn from_value(z: BigUint) -> Self {
        Self(z)
    }

    pub fn value(&self) -> &BigUint {
        &self.0
    }
}

/// `(g^r, g^(v+z) * y^r)` with caller-chosen `z` and `r`.
pub fn encrypt_with(v: u64, y: &BigUint, z: &BigUint, r: &BigUint, params: &GroupParams) -> HomCiphertext {
    let exponent = (BigUint::from(v) + z) % &params.q;
    let c = params.g_pow(r);
    let d = params.mul(&params.g_pow(&exponent), &params.pow(y, r));
    HomCiphertext { c, d }
}

/// Fresh `z, r` uniform in `[1, q-1]`.
pub fn encrypt_share<R: RngCore + ?Sized>(
    v: MeasurementValue,
    apk: &AggregatePublicKey,
    params: &GroupParams,
    rng: &mut R,
) -> (HomCiphertext, Mask) {
    let z = params.random_exponent(rng);
    let r = params.random_exponent(rng);
    (encrypt_with(v.wh(), &apk.y, &z, &r, params), Mask(z))
}

/// Componentwise product.
pub fn combine<'a, I>(cts: I, params: &GroupParams) -> Result<HomCiphertext, HomError>
where
    I: IntoIterator<Item = &'a HomCiphertext>,
{
    let mut it = cts.into_iter();
    let first = it.next().ok_or(HomError::EmptyRound)?;
    Ok(it.fold(first.clone(), |acc, ct| HomCiphertext { c: params.mul(&acc.c, &ct.c), d: params.mul(&acc.d, &ct.d) }))
}

/// `c^x * g^z`.
pub fn partial_decrypt_with(c: &BigUint, x: &BigUint, z: &BigUint, params: &GroupParams) -> BigUint {
    params.mul(&params.pow(c, x), &params.g_pow(z))
}

pub fn partial_decrypt(
    combined: &HomCiphertext,
    keys: &ProducerKeys,
    mask: Mask,
    params: &GroupParams,
) -> PartialDecryption {
    PartialDecryption { meter: keys.meter.clone(), t: partial_decrypt_with(&combined.c, &keys.x, &mask.0, params) }
}

/// `log_g(d / prod T)`, requiring exactly one partial per roster meter.
pub fn recover_sum(
    combined: &HomCiphertext,
    parts: &[PartialDecryption],
    roster: &[MeterId],
    params: &GroupParams,
    table: &BabyStepTable,
) -> Result<u64, HomError> {
    if !params.contains(&combined.c) || !params.contains(&combined.d) {
        return Err(HomError::NotInSubgroup("combined ciphertext"));
    }
    let on_roster: HashSet<&MeterId> = roster.iter().collect();
    let mut seen = HashSet::with_capacity(parts.len());
    let mut product = BigUint::one();
    for part in parts {
        if !on_roster.contains(&part.meter) || !seen.insert(&part.meter) {
            return Err(HomError::UnexpectedParty(part.meter.clone()));
        }
        if !params.contains(&part.t) {
            return Err(HomError::NotInSubgroup("partial decryption"));
        }
        product = params.mul(&product, &part.t);
    }
    if let Some(m) = roster.iter().find(|m| !seen.contains(m)) {
        return Err(HomError::MissingPartial(m.clone()));
    }
    let d = params.mul(&combined.d, &params.inv(&product));
    table.solve(params, &d)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigRequest {
    pub region: String,
}

/// `y_p` with its certificate: the utility-issued credential plus the meter's signature
/// over `y_p` under the credential key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PubkeyMsg {
    pub credential: Credential,
    #[serde(with = "hex_biguint")]
    pub y: BigUint,
    #[serde(with = "b64_fixed")]
    pub binding: [u8; 64],
}

impl PubkeyMsg {
    fn signed_bytes(meter: &MeterId, y: &BigUint) -> Vec<u8> {
        let mut msg = b"meterpriv/hom-key/v1".to_vec();
        meter.write_bytes(&mut msg);
        msg.extend_from_slice(&y.to_bytes_be());
        msg
    }

    pub fn new(keys: &ProducerKeys, identity: &SigningKey) -> Self {
        let binding = identity.sign(&Self::signed_bytes(&keys.meter, &keys.y)).to_bytes();
        Self { credential: keys.cert.clone(), y: keys.y.clone(), binding }
    }

    pub fn meter(&self) -> &MeterId {
        &self.credential.meter
    }

    /// Credential chain, key binding, and subgroup membership of `y_p`.
    pub fn verify(&self, provisioning: &VerifyingKey, params: &GroupParams) -> Result<(), HomError> {
        let bad = || HomError::BadCredential(self.meter().clone());
        verify_credential(&self.credential, provisioning, &HashSet::new()).map_err(|_| bad())?;
        let vk = VerifyingKey::from_bytes(&self.credential.public_key).map_err(|_| bad())?;
        vk.verify(&Self::signed_bytes(self.meter(), &self.y), &Signature::from_bytes(&self.binding))
            .map_err(|_| bad())?;
        if !params.contains(&self.y) {
            return Err(HomError::NotInSubgroup("public key"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterMsg {
    pub entries: Vec<PubkeyMsg>,
    #[serde(with = "hex_biguint")]
    pub y: BigUint,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtMsg {
    pub meter: MeterId,
    pub round: u32,
    pub ct: HomCiphertext,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinedMsg {
    pub round: u32,
    pub ct: HomCiphertext,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialMsg {
    pub round: u32,
    pub partial: PartialDecryption,
}

fn joint_key(entries: &[PubkeyMsg], params: &GroupParams) -> BigUint {
    entries.iter().fold(BigUint::one(), |acc, e| params.mul(&acc, &e.y))
}

/// The meter-side role.
pub struct Producer {
    keys: ProducerKeys,
    identity: SigningKey,
    params: GroupParams,
    provisioning: VerifyingKey,
    apk: Option<AggregatePublicKey>,
    open: Option<(u32, Mask)>,
    last_round: u32,
}

impl Producer {
    pub fn new(keys: ProducerKeys, identity: SigningKey, params: GroupParams, provisioning: VerifyingKey) -> Self {
        Self { keys, identity, params, provisioning, apk: None, open: None, last_round: 0 }
    }

    pub fn meter(&self) -> &MeterId {
        &self.keys.meter
    }

    pub fn joint_key(&self) -> Option<&AggregatePublicKey> {
        self.apk.as_ref()
    }

    pub fn pubkey_msg(&self) -> PubkeyMsg {
        PubkeyMsg::new(&self.keys, &self.identity)
    }

    /// Checks every certificate, that our own key is present, and that the advertised
    /// joint key is the product of the listed keys.
    pub fn on_roster(&mut self, msg: &RosterMsg) -> Result<&AggregatePublicKey, HomError> {
        for e in &msg.entries {
            e.verify(&self.provisioning, &self.params)?;
        }
        let ours = msg.entries.iter().filter(|e| e.meter() == &self.keys.meter).collect::<Vec<_>>();
        if ours.len() != 1 || ours[0].y != self.keys.y {
            return Err(HomError::RosterMismatch(format!("{} missing or altered", self.keys.meter)));
        }
        let y = joint_key(&msg.entries, &self.params);
        if y != msg.y {
            return Err(HomError::RosterMismatch("advertised joint key differs".into()));
        }
        let roster: Vec<MeterId> = msg.entries.iter().map(|e| e.meter().clone()).collect();
        if roster.iter().collect::<HashSet<_>>().len() != roster.len() {
            return Err(HomError::RosterMismatch("duplicate roster entry".into()));
        }
        Ok(self.apk.insert(AggregatePublicKey { y, roster }))
    }

    /// Encrypts this round's reading. Each round number is usable once, in increasing order.
    pub fn encrypt<R: RngCore + ?Sized>(&mut self, round: u32, v: MeasurementValue, rng: &mut R) -> Result<CtMsg, HomError> {
        let apk = self.apk.as_ref().ok_or(HomError::NotConfigured)?;
        if round <= self.last_round {
            return Err(HomError::MaskReuse { round, last: self.last_round });
        }
        let (ct, mask) = encrypt_share(v, apk, &self.params, rng);
        self.last_round = round;
        self.open = Some((round, mask));
        Ok(CtMsg { meter: self.keys.meter.clone(), round, ct })
    }

    /// Answers the combined ciphertext for the open round, consuming its mask.
    pub fn partial(&mut self, msg: &CombinedMsg) -> Result<PartialMsg, HomError> {
        if !self.params.contains(&msg.ct.c) || !self.params.contains(&msg.ct.d) {
            return Err(HomError::NotInSubgroup("combined ciphertext"));
        }
        match self.open.take() {
            Some((round, mask)) if round == msg.round => Ok(PartialMsg {
                round,
                partial: partial_decrypt(&msg.ct, &self.keys, mask, &self.params),
            }),
            Some(other) => {
                let last = other.0;
                self.open = Some(other);
                Err(HomError::MaskReuse { round: msg.round, last })
            }
            None => Err(HomError::NoOpenRound),
        }
    }
}

struct Round {
    id: u32,
    cts: BTreeMap<MeterId, HomCiphertext>,
    combined: Option<HomCiphertext>,
    partials: BTreeMap<MeterId, PartialDecryption>,
}

/// The untrusted aggregator role.
pub struct HomAggregator {
    params: GroupParams,
    provisioning: VerifyingKey,
    roster: Vec<MeterId>,
    bound: u64,
    keys: BTreeMap<MeterId, PubkeyMsg>,
    apk: Option<AggregatePublicKey>,
    table: Option<BabyStepTable>,
    round: Option<Round>,
}

impl HomAggregator {
    /// `roster` fixes the expected producers; sums are recovered up to
    /// `roster.len() * v_max`.
    pub fn new(params: GroupParams, provisioning: VerifyingKey, roster: Vec<MeterId>, v_max: u64) -> Self {
        let bound = v_max.saturating_mul(roster.len() as u64);
        Self { params, provisioning, roster, bound, keys: BTreeMap::new(), apk: None, table: None, round: None }
    }

    pub fn params(&self) -> &GroupParams {
        &self.params
    }

    pub fn joint_key(&self) -> Option<&AggregatePublicKey> {
        self.apk.as_ref()
    }

    pub fn config_request(&self, region: &str) -> ConfigRequest {
        ConfigRequest { region: region.to_string() }
    }

    pub fn accept_pubkey(&mut self, msg: &PubkeyMsg) -> Result<(), HomError> {
        if !self.roster.contains(msg.meter()) || self.keys.contains_key(msg.meter()) {
            return Err(HomError::UnexpectedParty(msg.meter().clone()));
        }
        msg.verify(&self.provisioning, &self.params)?;
        self.keys.insert(msg.meter().clone(), msg.clone());
        Ok(())
    }

    /// Publishes the roster once every expected producer has checked in.
    pub fn finish_config(&mut self) -> Result<RosterMsg, HomError> {
        if let Some(m) = self.roster.iter().find(|m| !self.keys.contains_key(*m)) {
            return Err(HomError::RosterMismatch(format!("no key from {m}")));
        }
        let entries: Vec<PubkeyMsg> = self.roster.iter().map(|m| self.keys[m].clone()).collect();
        let y = joint_key(&entries, &self.params);
        self.apk = Some(AggregatePublicKey { y: y.clone(), roster: self.roster.clone() });
        if self.table.as_ref().map(|t| t.bound()) != Some(self.bound) {
            self.table = Some(BabyStepTable::new(&self.params, self.bound));
        }
        Ok(RosterMsg { entries, y })
    }

    pub fn open_round(&mut self, id: u32) -> Result<(), HomError> {
        if self.apk.is_none() {
            return Err(HomError::NotConfigured);
        }
        self.round = Some(Round { id, cts: BTreeMap::new(), combined: None, partials: BTreeMap::new() });
        Ok(())
    }

    fn round_mut(&mut self, id: u32) -> Result<&mut Round, HomError> {
        match self.round.as_mut() {
            Some(r) if r.id == id => Ok(r),
            _ => Err(HomError::Malformed(format!("round {id} is not open"))),
        }
    }

    pub fn accept_ct(&mut self, msg: &CtMsg) -> Result<(), HomError> {
        if !self.params.contains(&msg.ct.c) || !self.params.contains(&msg.ct.d) {
            return Err(HomError::NotInSubgroup("ciphertext"));
        }
        let on_roster = self.roster.contains(&msg.meter);
        let round = self.round_mut(msg.round)?;
        if !on_roster || round.combined.is_some() || round.cts.contains_key(&msg.meter) {
            return Err(HomError::UnexpectedParty(msg.meter.clone()));
        }
        round.cts.insert(msg.meter.clone(), msg.ct.clone());
        Ok(())
    }

    /// Multiplies the round's ciphertexts; every roster producer must have sent one.
    pub fn combine_round(&mut self) -> Result<CombinedMsg, HomError> {
        let round = self.round.as_mut().ok_or(HomError::NoOpenRound)?;
        if let Some(m) = self.roster.iter().find(|m| !round.cts.contains_key(*m)) {
            return Err(HomError::MissingCiphertext(m.clone()));
        }
        let ct = combine(round.cts.values(), &self.params)?;
        round.combined = Some(ct.clone());
        Ok(CombinedMsg { round: round.id, ct })
    }

    pub fn accept_partial(&mut self, msg: &PartialMsg) -> Result<(), HomError> {
        let on_roster = self.roster.contains(&msg.partial.meter);
        let round = self.round_mut(msg.round)?;
        if !on_roster || round.combined.is_none() || round.partials.contains_key(&msg.partial.meter) {
            return Err(HomError::UnexpectedParty(msg.partial.meter.clone()));
        }
        round.partials.insert(msg.partial.meter.clone(), msg.partial.clone());
        Ok(())
    }

    /// Recovers the round's sum and closes the round.
    pub fn finish_round(&mut self) -> Result<u64, HomError> {
        let round = self.round.take().ok_or(HomError::NoOpenRound)?;
        let combined = round.combined.ok_or(HomError::NoOpenRound)?;
        let parts: Vec<PartialDecryption> = round.partials.into_values().collect();
        let table = self.table.as_ref().ok_or(HomError::NotConfigured)?;
        recover_sum(&combined, &parts, &self.roster, &self.params, table)
    }
}
