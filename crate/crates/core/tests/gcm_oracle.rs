// SPDX-License-Identifier: Apache-2.0

//! The measurement channel checked against a from-scratch GCM built on the raw AES
//! block cipher, which is itself pinned to the published GCM test vectors.

use aes::cipher::{generic_array::GenericArray, BlockEncrypt, KeyInit};
use aes::Aes128;
use meterpriv::attestation::SessionKeys;
use meterpriv::channel::{open_measurement, seal_measurement, NonceCounter};
use meterpriv::model::{validate_measurement, MeterId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn block(cipher: &Aes128, input: [u8; 16]) -> [u8; 16] {
    let mut b = GenericArray::from(input);
    cipher.encrypt_block(&mut b);
    b.into()
}

fn gf_mul(x: u128, y: u128) -> u128 {
    const R: u128 = 0xe1 << 120;
    let mut z = 0u128;
    let mut v = y;
    for i in 0..128 {
        if (x >> (127 - i)) & 1 == 1 {
            z ^= v;
        }
        v = if v & 1 == 1 { (v >> 1) ^ R } else { v >> 1 };
    }
    z
}

fn ghash(h: u128, aad: &[u8], ct: &[u8]) -> u128 {
    let mut y = 0u128;
    for data in [aad, ct] {
        for chunk in data.chunks(16) {
            let mut b = [0u8; 16];
            b[..chunk.len()].copy_from_slice(chunk);
            y = gf_mul(y ^ u128::from_be_bytes(b), h);
        }
    }
    let lens = ((aad.len() as u128 * 8) << 64) | (ct.len() as u128 * 8);
    gf_mul(y ^ lens, h)
}

fn gcm_encrypt(key: &[u8; 16], iv: &[u8; 12], aad: &[u8], pt: &[u8]) -> (Vec<u8>, [u8; 16]) {
    let cipher = Aes128::new(GenericArray::from_slice(key));
    let h = u128::from_be_bytes(block(&cipher, [0; 16]));
    let mut j0 = [0u8; 16];
    j0[..12].copy_from_slice(iv);
    j0[15] = 1;
    let mut ct = Vec::with_capacity(pt.len());
    for (i, chunk) in pt.chunks(16).enumerate() {
        let mut cb = j0;
        let ctr = u32::from_be_bytes(j0[12..].try_into().unwrap()).wrapping_add(1 + i as u32);
        cb[12..].copy_from_slice(&ctr.to_be_bytes());
        let ks = block(&cipher, cb);
        ct.extend(chunk.iter().zip(ks).map(|(p, k)| p ^ k));
    }
    let s = ghash(h, aad, &ct);
    let tag = (u128::from_be_bytes(block(&cipher, j0)) ^ s).to_be_bytes();
    (ct, tag)
}

fn unhex(s: &str) -> Vec<u8> {
    hex::decode(s).unwrap()
}

#[test]
fn oracle_reproduces_published_vectors() {
    let (ct, tag) = gcm_encrypt(&[0; 16], &[0; 12], &[], &[]);
    assert!(ct.is_empty());
    assert_eq!(tag.to_vec(), unhex("58e2fccefa7e3061367f1d57a4e7455a"));

    let (ct, tag) = gcm_encrypt(&[0; 16], &[0; 12], &[], &[0; 16]);
    assert_eq!(ct, unhex("0388dace60b6a392f328c2b971b2fe78"));
    assert_eq!(tag.to_vec(), unhex("ab6e47d42cec13bdf53a67b21257bddf"));

    let key: [u8; 16] = unhex("feffe9928665731c6d6a8f9467308308").try_into().unwrap();
    let iv: [u8; 12] = unhex("cafebabefacedbaddecaf888").try_into().unwrap();
    let pt = unhex(
        "d9313225f88406e5a55909c5aff5269a86a7a9531534f7da2e4c303d8a318a721c3c0c95956809532fcf0e2449a6b525b16aedf5aa0de657ba637b39",
    );
    let aad = unhex("feedfacedeadbeeffeedfacedeadbeefabaddad2");
    let (ct, tag) = gcm_encrypt(&key, &iv, &aad, &pt);
    assert_eq!(
        ct,
        unhex("42831ec2217774244b7221b784d0d49ce3aa212f2c02a4e035c17e2329aca12e21d514b25466931c7d8f6a5aac84aa051ba30b396a0aac973d58e091")
    );
    assert_eq!(tag.to_vec(), unhex("5bc94fbc3221a5db94fae95ae7121a47"));
}

#[test]
fn channel_matches_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(0x6cc);
    for i in 0..500u32 {
        let keys = SessionKeys { channel_key: rng.gen(), session_id: rng.gen(), established_at: 0 };
        let meter = MeterId::new(format!("r{}", i % 7), rng.gen_range(1..=u16::MAX)).unwrap();
        let slot = rng.gen_range(1..=96);
        let wh = rng.gen_range(0..=5000u64);
        let start = rng.gen_range(1..1u64 << 40);
        let mut ctr = NonceCounter::starting_at(keys.session_id, start);
        let em = seal_measurement(&meter, validate_measurement(wh as i128, 5000).unwrap(), slot, &keys, &mut ctr).unwrap();

        let mut iv = [0u8; 12];
        iv[..4].copy_from_slice(&keys.session_id.to_be_bytes());
        iv[4..].copy_from_slice(&start.to_be_bytes());
        let mut aad = meter.to_bytes();
        aad.extend_from_slice(&slot.to_be_bytes());
        let (ct, tag) = gcm_encrypt(&keys.channel_key, &iv, &aad, &wh.to_be_bytes());

        assert_eq!(em.nonce, iv);
        assert_eq!(em.ciphertext.to_vec(), ct);
        assert_eq!(em.tag, tag);
        assert_eq!(open_measurement(&em, &keys, start - 1).unwrap().0.wh(), wh);
    }
}
