// SPDX-License-Identifier: Apache-2.0

//! Deterministic household load traces and outage schedules.
//!
//! Every backend in a run is fed from the same traces, so cross-backend sums can be
//! compared for exact equality.
//!
//! Trace algorithm (`TRACE_ALGORITHM`): the per-meter stream is ChaCha20 keyed with
//! `SHA-256("meterpriv/trace/v1" || seed_be64 || meter_wire_bytes)`. Each slot draws two
//! `u64` words `a, b`: the slot spikes when `(a >> 11) * 2^-53 < spike_prob`, and the
//! spike adds `1 + b mod spike_wh` watt-hours on top of `base_wh`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::enclave::SubstitutionPolicy;
use crate::homomorphic::GroupParams;
use crate::model::{
    validate_region, MeasurementValue, MeterId, ModelError, TimeSlot, DEFAULT_SLOTS_PER_PERIOD,
    DEFAULT_SLOT_SECS, DEFAULT_V_MAX,
};

pub const TRACE_ALGORITHM: &str = "chacha20-sha256-trace-v1";

#[derive(Debug, Error)]
pub enum FleetError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("invalid fault plan: {0}")]
    InvalidFaultPlan(String),
    #[error("invalid fleet config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing fleet config: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadProfile {
    pub seed: u64,
    pub base_wh: u64,
    pub spike_prob: f64,
    pub spike_wh: u64,
}

impl LoadProfile {
    pub fn validate(&self, v_max: u64) -> Result<(), FleetError> {
        if !(0.0..=1.0).contains(&self.spike_prob) {
            return Err(FleetError::InvalidProfile(format!("spike_prob {} not in [0,1]", self.spike_prob)));
        }
        match self.base_wh.checked_add(self.spike_wh) {
            Some(top) if top <= v_max => Ok(()),
            _ => Err(FleetError::InvalidProfile(format!(
                "base_wh {} + spike_wh {} exceeds v_max {v_max}",
                self.base_wh, self.spike_wh
            ))),
        }
    }
}

fn trace_rng(seed: u64, meter: &MeterId) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(b"meterpriv/trace/v1");
    h.update(seed.to_be_bytes());
    h.update(meter.to_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

/// `t` readings for `meter`, fully determined by `(profile, meter, t)`.
///
/// The profile must already be validated against the region's `v_max`.
pub fn generate_trace(profile: &LoadProfile, meter: &MeterId, t: u32) -> Vec<MeasurementValue> {
    let mut rng = trace_rng(profile.seed, meter);
    (0..t)
        .map(|_| {
            let a = rng.next_u64();
            let b = rng.next_u64();
            let u = (a >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            let spike = if profile.spike_wh > 0 && u < profile.spike_prob {
                1 + b % profile.spike_wh
            } else {
                0
            };
            MeasurementValue::from_trusted(profile.base_wh + spike)
        })
        .collect()
}

/// A meter is silent for slots `from..=to`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outage {
    pub meter: MeterId,
    pub from: u32,
    pub to: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FaultPlan {
    outages: Vec<Outage>,
}

impl FaultPlan {
    pub fn new(outages: Vec<Outage>, t: u32) -> Result<Self, FleetError> {
        let mut covered: BTreeMap<&MeterId, BTreeSet<u32>> = BTreeMap::new();
        for o in &outages {
            if o.from == 0 || o.from > o.to || o.to > t {
                return Err(FleetError::InvalidFaultPlan(format!(
                    "{}: range {}..={} not within 1..={t}",
                    o.meter, o.from, o.to
                )));
            }
            let slots = covered.entry(&o.meter).or_default();
            for j in o.from..=o.to {
                if !slots.insert(j) {
                    return Err(FleetError::InvalidFaultPlan(format!("{} slot {j} listed twice", o.meter)));
                }
            }
        }
        Ok(Self { outages })
    }

    pub fn outages(&self) -> &[Outage] {
        &self.outages
    }

    /// Meters whose outages cover `slot`.
    pub fn faulted(&self, slot: TimeSlot) -> BTreeSet<MeterId> {
        self.outages
            .iter()
            .filter(|o| (o.from..=o.to).contains(&slot.j))
            .map(|o| o.meter.clone())
            .collect()
    }

    pub fn is_faulted(&self, meter: &MeterId, slot: u32) -> bool {
        self.outages.iter().any(|o| &o.meter == meter && (o.from..=o.to).contains(&slot))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSpec {
    pub base_wh: u64,
    pub spike_prob: f64,
    pub spike_wh: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutageSpec {
    pub meter: u16,
    pub from: u32,
    pub to: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    /// Bit length of the safe prime to generate when `params` is absent.
    #[serde(default)]
    pub bits: Option<u32>,
    #[serde(default)]
    pub params: Option<GroupParams>,
}

fn default_t() -> u32 {
    DEFAULT_SLOTS_PER_PERIOD
}
fn default_slot_secs() -> u32 {
    DEFAULT_SLOT_SECS
}
fn default_v_max() -> u64 {
    DEFAULT_V_MAX
}

/// The fleet config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetConfig {
    pub region: String,
    pub n: u16,
    #[serde(default = "default_t")]
    pub t: u32,
    #[serde(default = "default_slot_secs")]
    pub slot_secs: u32,
    #[serde(default = "default_v_max")]
    pub v_max: u64,
    pub seed: u64,
    /// Meter `i` uses `profiles[(i - 1) % len]`.
    pub profiles: Vec<ProfileSpec>,
    #[serde(default)]
    pub faults: Vec<OutageSpec>,
    #[serde(default)]
    pub policy: Option<SubstitutionPolicy>,
    #[serde(default)]
    pub group: Option<GroupSpec>,
}

impl FleetConfig {
    pub fn load(path: &Path) -> Result<Self, FleetError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| FleetError::Io { path: path.display().to_string(), source })?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A single-profile fleet with no faults.
    pub fn uniform(region: &str, n: u16, t: u32, seed: u64, profile: ProfileSpec) -> Self {
        Self {
            region: region.to_string(),
            n,
            t,
            slot_secs: DEFAULT_SLOT_SECS,
            v_max: DEFAULT_V_MAX,
            seed,
            profiles: vec![profile],
            faults: Vec::new(),
            policy: None,
            group: None,
        }
    }

    pub fn validate(&self) -> Result<(), FleetError> {
        validate_region(&self.region)?;
        if self.n == 0 {
            return Err(FleetError::InvalidConfig("n must be >= 1".into()));
        }
        if self.t == 0 || self.slot_secs == 0 {
            return Err(FleetError::InvalidConfig("t and slot_secs must be >= 1".into()));
        }
        if self.profiles.is_empty() {
            return Err(FleetError::InvalidConfig("at least one profile required".into()));
        }
        for p in &self.profiles {
            self.load_profile(p).validate(self.v_max)?;
        }
        if let Some(o) = self.faults.iter().find(|o| o.meter == 0 || o.meter > self.n) {
            return Err(FleetError::InvalidFaultPlan(format!("meter {} not in 1..={}", o.meter, self.n)));
        }
        self.fault_plan()?;
        Ok(())
    }

    fn load_profile(&self, p: &ProfileSpec) -> LoadProfile {
        LoadProfile { seed: self.seed, base_wh: p.base_wh, spike_prob: p.spike_prob, spike_wh: p.spike_wh }
    }

    pub fn meters(&self) -> Vec<MeterId> {
        (1..=self.n)
            .map(|i| MeterId::new(self.region.as_str(), i).expect("region validated"))
            .collect()
    }

    pub fn profile_for(&self, meter: &MeterId) -> LoadProfile {
        let idx = (meter.index() as usize - 1) % self.profiles.len();
        self.load_profile(&self.profiles[idx])
    }

    pub fn fault_plan(&self) -> Result<FaultPlan, FleetError> {
        let outages = self
            .faults
            .iter()
            .map(|o| Ok(Outage { meter: MeterId::new(self.region.as_str(), o.meter)?, from: o.from, to: o.to }))
            .collect::<Result<Vec<_>, FleetError>>()?;
        FaultPlan::new(outages, self.t)
    }

    /// Traces for every meter over `slots` slots (which may span several periods).
    pub fn traces(&self, slots: u32) -> BTreeMap<MeterId, Vec<MeasurementValue>> {
        self.meters()
            .into_iter()
            .map(|m| {
                let trace = generate_trace(&self.profile_for(&m), &m, slots);
                (m, trace)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meter(i: u16) -> MeterId {
        MeterId::new("north", i).unwrap()
    }

    fn slot(j: u32) -> TimeSlot {
        TimeSlot::new(j, 60).unwrap()
    }

    #[test]
    fn flat_profile_is_constant() {
        let p = LoadProfile { seed: 9, base_wh: 250, spike_prob: 0.0, spike_wh: 1000 };
        let trace = generate_trace(&p, &meter(1), 96);
        assert_eq!(trace.len(), 96);
        assert!(trace.iter().all(|v| v.wh() == 250));
    }

    #[test]
    fn traces_are_deterministic() {
        let p = LoadProfile { seed: 9, base_wh: 250, spike_prob: 0.4, spike_wh: 1000 };
        assert_eq!(generate_trace(&p, &meter(3), 96), generate_trace(&p, &meter(3), 96));
    }

    #[test]
    fn neighbouring_seeds_differ() {
        let p = LoadProfile { seed: 41, base_wh: 250, spike_prob: 0.4, spike_wh: 1000 };
        let q = LoadProfile { seed: 42, ..p.clone() };
        let a = generate_trace(&p, &meter(1), 96);
        let b = generate_trace(&q, &meter(1), 96);
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    }

    #[test]
    fn traces_respect_bounds() {
        let p = LoadProfile { seed: 1, base_wh: 4000, spike_prob: 1.0, spike_wh: 1000 };
        p.validate(5000).unwrap();
        for i in 1..=20 {
            assert!(generate_trace(&p, &meter(i), 500).iter().all(|v| (4001..=5000).contains(&v.wh())));
        }
        let too_big = LoadProfile { base_wh: 4001, ..p };
        assert!(too_big.validate(5000).is_err());
    }

    #[test]
    fn faulted_sets() {
        let empty = FaultPlan::default();
        assert!(empty.faulted(slot(1)).is_empty());

        let plan = FaultPlan::new(vec![Outage { meter: meter(2), from: 3, to: 5 }], 96).unwrap();
        assert_eq!(plan.faulted(slot(4)), BTreeSet::from([meter(2)]));
        assert_eq!(plan.faulted(slot(3)), BTreeSet::from([meter(2)]));
        assert!(plan.faulted(slot(6)).is_empty());
        assert!(plan.faulted(slot(2)).is_empty());
    }

    #[test]
    fn fault_plan_validation() {
        assert!(FaultPlan::new(vec![Outage { meter: meter(1), from: 0, to: 2 }], 10).is_err());
        assert!(FaultPlan::new(vec![Outage { meter: meter(1), from: 5, to: 11 }], 10).is_err());
        let overlapping = vec![
            Outage { meter: meter(1), from: 1, to: 4 },
            Outage { meter: meter(1), from: 4, to: 6 },
        ];
        assert!(FaultPlan::new(overlapping, 10).is_err());
        let disjoint = vec![
            Outage { meter: meter(1), from: 1, to: 3 },
            Outage { meter: meter(1), from: 4, to: 6 },
            Outage { meter: meter(2), from: 1, to: 3 },
        ];
        assert!(FaultPlan::new(disjoint, 10).is_ok());
    }

    #[test]
    fn config_parses_with_defaults() {
        let json = r#"{
            "region": "north", "n": 3, "seed": 5,
            "profiles": [{"base_wh": 100, "spike_prob": 0.5, "spike_wh": 900}],
            "faults": [{"meter": 2, "from": 1, "to": 2}]
        }"#;
        let cfg: FleetConfig = serde_json::from_str(json).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.t, DEFAULT_SLOTS_PER_PERIOD);
        assert_eq!(cfg.v_max, DEFAULT_V_MAX);
        assert_eq!(cfg.meters().len(), 3);
        assert!(cfg.fault_plan().unwrap().is_faulted(&meter(2), 2));

        let bad: FleetConfig = serde_json::from_str(&json.replace("\"meter\": 2", "\"meter\": 4")).unwrap();
        assert!(bad.validate().is_err());
    }
}
