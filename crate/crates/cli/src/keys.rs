// SPDX-License-Identifier: Apache-2.0

//! Deterministic key material for a fleet, shared by `simulate` and `keygen`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ed25519_dalek::SigningKey;
use meterpriv::attestation::{sha256, signing_key_from_rng, AttestationAuthority, Credential, UtilityProvider};
use meterpriv::fleet::FleetConfig;
use meterpriv::homomorphic::{setup_group, GroupParams, ProducerKeys};
use meterpriv::model::MeterId;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::RunError;

/// A ChaCha20 stream keyed by `SHA-256(label || seed || extra)`.
pub fn derive_rng(label: &str, seed: u64, extra: &[u8]) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(sha256(&[label.as_bytes(), &seed.to_be_bytes(), extra]))
}

pub struct MeterKeys {
    pub meter: MeterId,
    pub identity: SigningKey,
    pub credential: Credential,
}

pub struct KeyMaterial {
    pub utility: UtilityProvider,
    pub authority: Arc<AttestationAuthority>,
    pub meters: Vec<MeterKeys>,
    seed: u64,
}

impl KeyMaterial {
    pub fn derive(fleet: &FleetConfig, seed: u64) -> Self {
        let mut rng = derive_rng("meterpriv/keys/v1", seed, &[]);
        let utility = UtilityProvider::new(signing_key_from_rng(&mut rng));
        let authority = Arc::new(AttestationAuthority::new(signing_key_from_rng(&mut rng)));
        let meters = fleet
            .meters()
            .into_iter()
            .map(|meter| {
                let identity = signing_key_from_rng(&mut rng);
                let credential = utility.issue_credential(&meter, &identity.verifying_key());
                MeterKeys { meter, identity, credential }
            })
            .collect();
        Self { utility, authority, meters, seed }
    }

    pub fn producer_keys(&self, m: &MeterKeys, params: &GroupParams) -> ProducerKeys {
        let mut rng = derive_rng("meterpriv/producer/v1", self.seed, &m.meter.to_bytes());
        ProducerKeys::generate(params, m.credential.clone(), &mut rng)
    }
}

/// The group the homomorphic backend uses: explicit parameters, a freshly generated
/// safe prime of the configured size, or the 2048-bit default.
pub fn resolve_group(fleet: &FleetConfig, seed: u64) -> Result<GroupParams, RunError> {
    let Some(spec) = &fleet.group else {
        return Ok(GroupParams::modp_2048());
    };
    if let Some(params) = &spec.params {
        params.validate()?;
        return Ok(params.clone());
    }
    match spec.bits {
        Some(bits) => Ok(setup_group(bits, &mut derive_rng("meterpriv/group/v1", seed, &[]))?),
        None => Ok(GroupParams::modp_2048()),
    }
}

fn write_file(path: PathBuf, body: String, out: &mut Vec<PathBuf>) -> Result<(), RunError> {
    fs::write(&path, body).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
    out.push(path);
    Ok(())
}

/// Writes `utility.key`, `authority.key` and one `meter-NNNNN.key` per meter into `dir`.
pub fn keygen(fleet: &FleetConfig, seed: u64, dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    fleet.validate()?;
    let params = resolve_group(fleet, seed)?;
    let keys = KeyMaterial::derive(fleet, seed);
    fs::create_dir_all(dir).map_err(|e| RunError::Io(format!("{}: {e}", dir.display())))?;
    let mut written = Vec::new();

    let role = |name: &str, sk: &SigningKey| {
        format!(
            "role={name}\nsigning_key={}\nverifying_key={}\n",
            hex::encode(sk.to_bytes()),
            hex::encode(sk.verifying_key().to_bytes())
        )
    };
    write_file(dir.join("utility.key"), role("utility", keys.utility.signing_key()), &mut written)?;
    write_file(dir.join("authority.key"), role("authority", keys.authority.signing_key()), &mut written)?;

    for m in &keys.meters {
        let producer = keys.producer_keys(m, &params);
        let mut body = String::new();
        writeln!(body, "role=meter").unwrap();
        writeln!(body, "meter={}", m.meter).unwrap();
        writeln!(body, "identity_key={}", hex::encode(m.identity.to_bytes())).unwrap();
        writeln!(body, "credential_public_key={}", hex::encode(m.credential.public_key)).unwrap();
        writeln!(body, "credential_signature={}", hex::encode(m.credential.signature)).unwrap();
        writeln!(body, "producer_secret={}", producer.secret().to_str_radix(16)).unwrap();
        writeln!(body, "producer_public={}", producer.y.to_str_radix(16)).unwrap();
        write_file(dir.join(format!("meter-{:05}.key", m.meter.index())), body, &mut written)?;
    }
    Ok(written)
}
