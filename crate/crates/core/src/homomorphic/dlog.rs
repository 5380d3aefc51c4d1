// SPDX-License-Identifier: Apache-2.0

//! Bounded discrete logarithm by baby-step giant-step.

use std::collections::HashMap;

use num_bigint::BigUint;
use num_integer::Roots;
use num_traits::One;

use super::group::GroupParams;
use super::HomError;

/// Precomputed baby steps `g^0 .. g^(m-1)` for exponents up to `bound`, with
/// `m = ceil(sqrt(bound + 1))`. Reusable across rounds with the same bound.
pub struct BabyStepTable {
    bound: u64,
    m: u64,
    table: HashMap<BigUint, u64>,
    giant: BigUint,
}

impl BabyStepTable {
    pub fn new(params: &GroupParams, bound: u64) -> Self {
        let span = bound.saturating_add(1);
        let mut m = span.sqrt();
        if m.saturating_mul(m) < span {
            m += 1;
        }
        let mut table = HashMap::with_capacity(m as usize);
        let mut cur = BigUint::one();
        for j in 0..m {
            // Keep the smallest exponent when the subgroup is shorter than m.
            table.entry(cur.clone()).or_insert(j);
            cur = params.mul(&cur, &params.g);
        }
        // cur = g^m
        let giant = params.inv(&cur);
        Self { bound, m, table, giant }
    }

    pub fn bound(&self) -> u64 {
        self.bound
    }

    /// Smallest `x <= bound` with `g^x = d`.
    pub fn solve(&self, params: &GroupParams, d: &BigUint) -> Result<u64, HomError> {
        let mut gamma = d % &params.p;
        for i in 0..=self.bound / self.m {
            if let Some(&j) = self.table.get(&gamma) {
                let x = i * self.m + j;
                return if x <= self.bound { Ok(x) } else { Err(HomError::LogNotFound) };
            }
            gamma = params.mul(&gamma, &self.giant);
        }
        Err(HomError::LogNotFound)
    }
}

/// One-shot `log_g d` with `0 <= result <= bound`.
pub fn discrete_log(d: &BigUint, params: &GroupParams, bound: u64) -> Result<u64, HomError> {
    BabyStepTable::new(params, bound).solve(params, d)
}
