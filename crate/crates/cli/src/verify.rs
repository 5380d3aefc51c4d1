// SPDX-License-Identifier: Apache-2.0

//! Post-run checks of everything the utility received against the model-core oracle.

use std::collections::BTreeMap;

use meterpriv::fleet::FaultPlan;
use meterpriv::model::{ConsumptionMatrix, MeasurementValue, MeterId, TimeSlot};

use crate::{Backend, BackendReport, RunConfig};

fn period_matrices(cfg: &RunConfig, traces: &BTreeMap<MeterId, Vec<MeasurementValue>>) -> Vec<ConsumptionMatrix> {
    let t = cfg.fleet.t as usize;
    let periods = (cfg.slots as usize).div_ceil(t);
    (0..periods)
        .map(|p| {
            let mut m = ConsumptionMatrix::new(cfg.fleet.region.as_str(), cfg.fleet.t, cfg.fleet.v_max)
                .expect("validated fleet")
                .with_period(p as u32 + 1);
            for (meter, trace) in traces {
                let row: Vec<u64> = trace.iter().skip(p * t).take(t).map(|v| v.wh()).collect();
                m.set_row(meter, &row).expect("trace within bounds");
            }
            m
        })
        .collect()
}

/// Every discrepancy found, as human-readable lines. Empty means the run is consistent.
pub(crate) fn verify(
    cfg: &RunConfig,
    traces: &BTreeMap<MeterId, Vec<MeasurementValue>>,
    faults: &FaultPlan,
    reports: &[BackendReport],
) -> Vec<String> {
    let t = cfg.fleet.t;
    let matrices = period_matrices(cfg, traces);
    let mut out = Vec::new();

    for report in reports {
        let b = report.backend;
        if report.records.len() != cfg.slots as usize {
            out.push(format!("{b}: {} records for {} slots", report.records.len(), cfg.slots));
        }
        for rec in &report.records {
            let j = (rec.index - 1) % t + 1;
            let slot = TimeSlot::new(j, cfg.fleet.slot_secs).expect("j >= 1");
            let matrix = &matrices[(rec.period - 1) as usize];
            let expected = match matrix.slot_aggregate(slot) {
                Ok(v) => v,
                Err(e) => {
                    out.push(format!("oracle: slot {}: {e}", rec.index));
                    continue;
                }
            };
            let down = faults.faulted(slot);
            let received: u64 = traces
                .iter()
                .filter(|(m, _)| !down.contains(*m))
                .map(|(_, tr)| tr[(rec.index - 1) as usize].wh())
                .sum();
            let got = rec.record.sum;
            let bad = match b {
                Backend::Plain => got != Some(received),
                Backend::Enclave if down.is_empty() => rec.record.flagged || got != Some(expected),
                Backend::Enclave => !rec.record.flagged && got.is_none_or(|s| s < received),
                Backend::Homomorphic if down.is_empty() => got != Some(expected),
                Backend::Homomorphic => !rec.record.flagged,
                Backend::All => false,
            };
            if bad {
                out.push(format!(
                    "{b}: slot {} released {got:?} (oracle {expected}, received {received}, faulted {})",
                    rec.index,
                    down.len()
                ));
            }
        }

        let complete_periods = cfg.slots / t;
        for p in 1..=complete_periods {
            let bills: Vec<_> = report.billing.iter().filter(|r| r.period == p).collect();
            if b == Backend::Homomorphic {
                continue;
            }
            if bills.len() != traces.len() {
                out.push(format!("{b}: period {p} released {} bills for {} meters", bills.len(), traces.len()));
            }
            let offset = ((p - 1) * t) as usize;
            for bill in &bills {
                let Some(trace) = traces.get(&bill.meter) else {
                    out.push(format!("{b}: bill for unknown meter {}", bill.meter));
                    continue;
                };
                let real: u64 = (1..=t)
                    .filter(|&j| !faults.is_faulted(&bill.meter, j))
                    .map(|j| trace[offset + (j - 1) as usize].wh())
                    .sum();
                if bill.total != real {
                    out.push(format!("{b}: period {p} bill for {} is {} (real readings {real})", bill.meter, bill.total));
                }
                if faults.outages().is_empty() {
                    let oracle = matrices[(p - 1) as usize].billing_total(&bill.meter).map(|r| r.total);
                    if oracle.as_ref().ok() != Some(&bill.total) {
                        out.push(format!("{b}: period {p} bill for {} disagrees with oracle {oracle:?}", bill.meter));
                    }
                }
            }
            if faults.outages().is_empty() {
                let slot_total: u64 = report.records.iter().filter(|r| r.period == p).filter_map(|r| r.record.sum).sum();
                let bill_total: u64 = bills.iter().map(|r| r.total).sum();
                if slot_total != bill_total {
                    out.push(format!("{b}: period {p} slot sums {slot_total} != bill totals {bill_total}"));
                }
            }
        }
    }

    for index in 1..=cfg.slots {
        let j = (index - 1) % t + 1;
        if !faults.faulted(TimeSlot::new(j, cfg.fleet.slot_secs).expect("j >= 1")).is_empty() {
            continue;
        }
        let sums: Vec<(Backend, Option<u64>)> = reports.iter().map(|r| (r.backend, r.sum_at(index))).collect();
        if sums.windows(2).any(|w| w[0].1 != w[1].1) {
            out.push(format!("cross-backend: slot {index} sums differ: {sums:?}"));
        }
    }
    out
}
