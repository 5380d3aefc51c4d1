// SPDX-License-Identifier: Apache-2.0

//! Order-`q` subgroup of `Z_p^*` for a safe prime `p = 2q + 1`.
//!
//! The subgroup is exactly the quadratic residues mod `p`, so membership is a Jacobi
//! symbol computation rather than a full exponentiation.

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::hex_biguint;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GroupError {
    #[error("{0} is not prime")]
    NotPrime(&'static str),
    #[error("p != 2q + 1")]
    NotSafePrime,
    #[error("g does not generate the order-q subgroup")]
    BadGenerator,
    #[error("group size must be at least 16 bits, got {0}")]
    TooSmall(u32),
    #[error("no safe prime found after {0} candidates")]
    PrimalitySearchExhausted(u64),
}

/// RFC 3526 group 14.
const MODP_2048: &str = "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7EDEE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3BE39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF6955817183995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF";

const SMALL_PRIMES: [u32; 24] = [3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97];

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupParams {
    #[serde(with = "hex_biguint")]
    pub p: BigUint,
    #[serde(with = "hex_biguint")]
    pub q: BigUint,
    #[serde(with = "hex_biguint")]
    pub g: BigUint,
}

impl GroupParams {
    pub fn new(p: BigUint, q: BigUint, g: BigUint) -> Result<Self, GroupError> {
        let params = Self { p, q, g };
        params.validate()?;
        Ok(params)
    }

    /// `p = 23, q = 11, g = 2`.
    pub fn toy() -> Self {
        Self { p: 23u32.into(), q: 11u32.into(), g: 2u32.into() }
    }

    /// RFC 3526 2048-bit MODP group with `g = 2` (a quadratic residue for this `p`).
    pub fn modp_2048() -> Self {
        let p = BigUint::parse_bytes(MODP_2048.as_bytes(), 16).expect("constant parses");
        let q = &p >> 1;
        Self { p, q, g: 2u32.into() }
    }

    pub fn validate(&self) -> Result<(), GroupError> {
        if self.p != &self.q * 2u32 + 1u32 {
            return Err(GroupError::NotSafePrime);
        }
        let mut rng = ChaCha20Rng::seed_from_u64(0x5afe);
        if !is_probable_prime(&self.q, 32, &mut rng) {
            return Err(GroupError::NotPrime("q"));
        }
        if !is_probable_prime(&self.p, 32, &mut rng) {
            return Err(GroupError::NotPrime("p"));
        }
        if self.g <= BigUint::one() || self.g >= self.p || !self.g.modpow(&self.q, &self.p).is_one() {
            return Err(GroupError::BadGenerator);
        }
        Ok(())
    }

    pub fn bits(&self) -> u64 {
        self.p.bits()
    }

    /// Subgroup membership: `0 < x < p` and `x` is a quadratic residue mod `p`.
    pub fn contains(&self, x: &BigUint) -> bool {
        !x.is_zero() && x < &self.p && jacobi(x, &self.p) == 1
    }

    pub fn pow(&self, base: &BigUint, exp: &BigUint) -> BigUint {
        base.modpow(exp, &self.p)
    }

    pub fn g_pow(&self, exp: &BigUint) -> BigUint {
        self.g.modpow(exp, &self.p)
    }

    pub fn mul(&self, a: &BigUint, b: &BigUint) -> BigUint {
        (a * b) % &self.p
    }

    /// Inverse by Fermat; `x` must be nonzero mod `p`.
    pub fn inv(&self, x: &BigUint) -> BigUint {
        x.modpow(&(&self.p - 2u32), &self.p)
    }

    /// Uniform in `[1, q-1]`.
    pub fn random_exponent<R: RngCore + ?Sized>(&self, rng: &mut R) -> BigUint {
        rng.gen_biguint_range(&BigUint::one(), &self.q)
    }
}

/// Safe-prime group of `bits` bits. The generator is the square of a random element
/// other than `0` and `+-1`. `bits == 2048` uses the RFC 3526 prime instead of searching.
pub fn setup_group<R: RngCore>(bits: u32, rng: &mut R) -> Result<GroupParams, GroupError> {
    setup_group_with_limit(bits, rng, 100_000 + 2_000 * bits as u64)
}

pub fn setup_group_with_limit<R: RngCore>(bits: u32, rng: &mut R, max_candidates: u64) -> Result<GroupParams, GroupError> {
    if bits < 16 {
        return Err(GroupError::TooSmall(bits));
    }
    let (p, q) = if bits == 2048 {
        let std = GroupParams::modp_2048();
        (std.p, std.q)
    } else {
        find_safe_prime(bits, rng, max_candidates)?
    };
    let g = loop {
        let h = rng.gen_biguint_range(&BigUint::from(2u32), &(&p - 1u32));
        let g = h.modpow(&BigUint::from(2u32), &p);
        if !g.is_one() {
            break g;
        }
    };
    let params = GroupParams { p, q, g };
    debug_assert!(params.validate().is_ok());
    Ok(params)
}

fn find_safe_prime<R: RngCore>(bits: u32, rng: &mut R, max_candidates: u64) -> Result<(BigUint, BigUint), GroupError> {
    for _ in 0..max_candidates {
        let mut q = rng.gen_biguint(bits as u64 - 1);
        q.set_bit(bits as u64 - 2, true);
        q.set_bit(0, true);
        // Any prime r dividing q or 2q+1 rules the candidate out cheaply.
        let sieved = SMALL_PRIMES.iter().any(|&r| {
            let m = (&q % r).iter_u32_digits().next().unwrap_or(0);
            (m == 0 && q != BigUint::from(r)) || (2 * m + 1) % r == 0
        });
        if sieved {
            continue;
        }
        if !is_probable_prime(&q, 24, rng) {
            continue;
        }
        let p: BigUint = &q * 2u32 + 1u32;
        if is_probable_prime(&p, 24, rng) {
            return Ok((p, q));
        }
    }
    Err(GroupError::PrimalitySearchExhausted(max_candidates))
}

/// Miller-Rabin with `rounds` random bases after trial division.
pub fn is_probable_prime<R: RngCore>(n: &BigUint, rounds: u32, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for &r in &SMALL_PRIMES {
        let r = BigUint::from(r);
        if n == &r {
            return true;
        }
        if (n % &r).is_zero() {
            return false;
        }
    }
    if n.is_even() {
        return n == &two;
    }
    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().expect("n > 1");
    let d = &n_minus_1 >> s;
    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n_minus_1);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Jacobi symbol `(a / n)` for odd `n > 0`.
pub fn jacobi(a: &BigUint, n: &BigUint) -> i8 {
    let low3 = |x: &BigUint| x.iter_u32_digits().next().unwrap_or(0) & 7;
    let mut a = a % n;
    let mut n = n.clone();
    let mut t = 1i8;
    while !a.is_zero() {
        let tz = a.trailing_zeros().expect("nonzero");
        a >>= tz;
        if tz % 2 == 1 && matches!(low3(&n), 3 | 5) {
            t = -t;
        }
        std::mem::swap(&mut a, &mut n);
        if low3(&a) & 3 == 3 && low3(&n) & 3 == 3 {
            t = -t;
        }
        a %= &n;
    }
    if n.is_one() {
        t
    } else {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_group_validates() {
        // 2^11 = 2048 = 89 * 23 + 1
        assert_eq!(BigUint::from(2u32).modpow(&BigUint::from(11u32), &BigUint::from(23u32)), BigUint::one());
        GroupParams::toy().validate().unwrap();
    }

    #[test]
    fn bad_params_rejected() {
        let mut g1 = GroupParams::toy();
        g1.g = BigUint::one();
        assert_eq!(g1.validate(), Err(GroupError::BadGenerator));

        let not_prime = GroupParams { p: 25u32.into(), q: 12u32.into(), g: 4u32.into() };
        assert!(not_prime.validate().is_err());

        // 5 is a non-residue mod 23: order 22, not 11.
        let mut g5 = GroupParams::toy();
        g5.g = 5u32.into();
        assert_eq!(g5.validate(), Err(GroupError::BadGenerator));
    }

    #[test]
    fn standard_group_validates() {
        let g = GroupParams::modp_2048();
        assert_eq!(g.bits(), 2048);
        g.validate().unwrap();
    }

    #[test]
    fn jacobi_matches_euler_criterion() {
        let toy = GroupParams::toy();
        for x in 1u32..23 {
            let x = BigUint::from(x);
            let euler = x.modpow(&toy.q, &toy.p).is_one();
            assert_eq!(toy.contains(&x), euler, "x = {x}");
        }
        assert!(!toy.contains(&BigUint::zero()));
        assert!(!toy.contains(&BigUint::from(23u32)));

        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let big = setup_group(64, &mut rng).unwrap();
        for _ in 0..200 {
            let x = rng.gen_biguint_range(&BigUint::one(), &big.p);
            assert_eq!(big.contains(&x), x.modpow(&big.q, &big.p).is_one());
        }
    }

    #[test]
    fn generated_groups_are_valid_and_deterministic() {
        for bits in [16, 32, 64, 128] {
            let a = setup_group(bits, &mut ChaCha20Rng::seed_from_u64(bits as u64)).unwrap();
            let b = setup_group(bits, &mut ChaCha20Rng::seed_from_u64(bits as u64)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.bits(), bits as u64);
            a.validate().unwrap();
        }
        assert_eq!(setup_group(8, &mut ChaCha20Rng::seed_from_u64(0)), Err(GroupError::TooSmall(8)));
        assert_eq!(
            setup_group_with_limit(256, &mut ChaCha20Rng::seed_from_u64(0), 1),
            Err(GroupError::PrimalitySearchExhausted(1))
        );
    }

    #[test]
    fn miller_rabin_small_numbers() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let sieve: Vec<bool> = (0u32..2000)
            .map(|n| n >= 2 && (2..n).take_while(|d| d * d <= n).all(|d| n % d != 0))
            .collect();
        for (n, &prime) in sieve.iter().enumerate() {
            assert_eq!(is_probable_prime(&BigUint::from(n), 16, &mut rng), prime, "n = {n}");
        }
    }

    #[test]
    fn json_is_lowercase_hex() {
        let json = serde_json::to_string(&GroupParams::toy()).unwrap();
        assert_eq!(json, r#"{"p":"17","q":"b","g":"2"}"#);
        assert!(serde_json::from_str::<GroupParams>(r#"{"p":"17","q":"B","g":"2"}"#).is_err());
    }
}
