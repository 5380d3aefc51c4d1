// SPDX-License-Identifier: Apache-2.0

//! Run driver and benchmark harness: wires a simulated fleet through the bus into the
//! plain, enclave and homomorphic backends and cross-checks what the utility receives.

mod bench;
mod keys;
mod run;
mod verify;

use std::fmt;

use meterpriv::bus::BusError;
use meterpriv::enclave::SubstitutionPolicy;
use meterpriv::fleet::{FleetConfig, FleetError};
use meterpriv::homomorphic::{GroupError, GroupParams};
use meterpriv::model::{AggregateRecord, BillingRecord};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bench::{bench, bench_csv, BenchRow};
pub use keys::{derive_rng, keygen, resolve_group, KeyMaterial, MeterKeys};
pub use run::{run, simulate, Simulation};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("{step}: {reason}")]
    Protocol { step: String, reason: String },
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
}

pub(crate) fn failed<E: fmt::Display>(step: impl Into<String>) -> impl FnOnce(E) -> RunError {
    let step = step.into();
    move |e| RunError::Protocol { step, reason: e.to_string() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Plain,
    Enclave,
    Homomorphic,
    All,
}

impl Backend {
    pub fn expand(self) -> Vec<Backend> {
        match self {
            Backend::All => vec![Backend::Plain, Backend::Enclave, Backend::Homomorphic],
            b => vec![b],
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Plain => "plain",
            Backend::Enclave => "enclave",
            Backend::Homomorphic => "homomorphic",
            Backend::All => "all",
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub fleet: FleetConfig,
    pub backend: Backend,
    /// Slots to run; may span several billing periods.
    pub slots: u32,
    pub seed: u64,
    pub policy: SubstitutionPolicy,
    /// Resolved from the fleet config when absent.
    pub group: Option<GroupParams>,
    pub record_transcripts: bool,
}

impl RunConfig {
    /// Seed, policy and slot count default from the fleet config (one full period).
    pub fn new(fleet: FleetConfig, backend: Backend) -> Self {
        Self {
            slots: fleet.t,
            seed: fleet.seed,
            policy: fleet.policy.unwrap_or_default(),
            fleet,
            backend,
            group: None,
            record_transcripts: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.fleet.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.fleet.validate()?;
        if self.slots == 0 {
            return Err(RunError::Config("slots must be >= 1".into()));
        }
        if self.fleet.seed != self.seed {
            return Err(RunError::Config("fleet seed and run seed differ".into()));
        }
        if let Some(g) = &self.group {
            g.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub trace_algorithm: String,
    pub seed: u64,
    pub region: String,
    pub n: u16,
    pub t: u32,
    pub slot_secs: u32,
    pub slots: u32,
    pub v_max: u64,
    pub policy: SubstitutionPolicy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub enclave_measurement: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub footprint_bytes_per_meter: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_bits: Option<u64>,
}

/// An [`AggregateRecord`] as the utility received it, with its place in the run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotRecord {
    /// 1-based slot index over the whole run.
    pub index: u32,
    pub period: u32,
    #[serde(flatten)]
    pub record: AggregateRecord,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub setup_ms: f64,
    pub total_ms: f64,
    /// Ingest-to-release latency of each round.
    pub round_ms: Vec<f64>,
}

impl Timings {
    pub fn mean_round_ms(&self) -> f64 {
        if self.round_ms.is_empty() {
            return 0.0;
        }
        self.round_ms.iter().sum::<f64>() / self.round_ms.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendReport {
    pub backend: Backend,
    pub records: Vec<SlotRecord>,
    pub billing: Vec<BillingRecord>,
    /// Slots that produced no sum because the round itself failed.
    pub flagged_by_error: Vec<u32>,
    pub timings: Timings,
}

impl BackendReport {
    pub fn sum_at(&self, index: u32) -> Option<u64> {
        self.records.iter().find(|r| r.index == index).and_then(|r| r.record.sum)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub metadata: RunMetadata,
    pub backends: Vec<BackendReport>,
    pub mismatches: Vec<String>,
}

impl RunReport {
    pub fn backend(&self, b: Backend) -> Option<&BackendReport> {
        self.backends.iter().find(|r| r.backend == b)
    }

    /// No oracle or cross-backend mismatches and no slot lost to a failed round.
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty() && self.backends.iter().all(|b| b.flagged_by_error.is_empty())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
