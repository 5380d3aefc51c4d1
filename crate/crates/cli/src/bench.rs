// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::keys::resolve_group;
use crate::run::simulate;
use crate::{Backend, RunConfig, RunError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub backend: Backend,
    pub n: u16,
    pub mean_ms: f64,
    /// Half-width of the 95% confidence interval for the mean.
    pub ci95_ms: f64,
    pub runs: u32,
}

fn mean_ci95(samples: &[f64]) -> (f64, f64) {
    let k = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / k;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    let t = StudentsT::new(0.0, 1.0, k - 1.0).expect("df >= 1").inverse_cdf(0.975);
    (mean, t * (var / k).sqrt())
}

/// Mean per-round latency for each size and backend, `runs` seeded runs per point.
/// Fault plans are dropped; run `r` uses seed `base.seed + r`.
pub fn bench(base: &RunConfig, sizes: &[u16], runs: u32) -> Result<Vec<BenchRow>, RunError> {
    if sizes.is_empty() || runs == 0 {
        return Err(RunError::Config("bench needs at least one size and one run".into()));
    }
    let backends = base.backend.expand();
    let group = match (&base.group, backends.contains(&Backend::Homomorphic)) {
        (Some(g), _) => Some(g.clone()),
        (None, true) => Some(resolve_group(&base.fleet, base.seed)?),
        (None, false) => None,
    };
    let mut rows = Vec::new();
    for &n in sizes {
        for &backend in &backends {
            let mut samples = Vec::with_capacity(runs as usize);
            for r in 0..runs {
                let mut cfg = base.clone().with_seed(base.seed.wrapping_add(r as u64));
                cfg.fleet.n = n;
                cfg.fleet.faults.clear();
                cfg.backend = backend;
                cfg.group = group.clone();
                cfg.record_transcripts = false;
                let report = simulate(&cfg)?;
                if !report.ok() {
                    return Err(RunError::Protocol {
                        step: format!("bench {backend} n={n} run {r}"),
                        reason: report.mismatches.join("; "),
                    });
                }
                samples.push(report.backends[0].timings.mean_round_ms());
            }
            let (mean_ms, ci95_ms) = mean_ci95(&samples);
            rows.push(BenchRow { backend, n, mean_ms, ci95_ms, runs });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("backend,n,mean_ms,ci95_ms\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6},{:.6}\n", r.backend, r.n, r.mean_ms, r.ci95_ms));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_matches_hand_computation() {
        // mean 2, sample variance 1, t(0.975, 2) = 4.302653
        let (m, h) = mean_ci95(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((h - 4.302653 / 3f64.sqrt()).abs() < 1e-5, "{h}");
        assert_eq!(mean_ci95(&[5.0]), (5.0, 0.0));
    }
}
