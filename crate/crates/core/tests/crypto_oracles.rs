mod oracles;

use msag_core::crypto;
use rand::{Rng, RngCore, SeedableRng};

#[test]
fn hmac_matches_definition_oracle_on_random_inputs() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(0x4d41_4353);
    let mut mismatches = 0;
    for _ in 0..200 {
        let mut key = vec![0u8; rng.random_range(0..160)];
        let mut msg = vec![0u8; rng.random_range(0..512)];
        rng.fill_bytes(&mut key);
        rng.fill_bytes(&mut msg);
        if crypto::hmac_sha256(&key, &msg) != oracles::hmac_sha256(&key, &msg) {
            mismatches += 1;
        }
    }
    assert_eq!(mismatches, 0);
}

#[test]
fn gcm_matches_ring_on_random_inputs() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(0x6763_6d21);
    for _ in 0..150 {
        let mut key = [0u8; 32];
        let mut nonce = [0u8; 12];
        let mut aad = vec![0u8; rng.random_range(0..24)];
        let mut pt = vec![0u8; rng.random_range(0..1024)];
        rng.fill_bytes(&mut key);
        rng.fill_bytes(&mut nonce);
        rng.fill_bytes(&mut aad);
        rng.fill_bytes(&mut pt);
        let ours = crypto::aes256gcm_encrypt(&key, &nonce, &aad, &pt);
        assert_eq!(ours, oracles::aes256gcm_seal(&key, &nonce, &aad, &pt));
        assert_eq!(crypto::aes256gcm_decrypt(&key, &nonce, &aad, &ours).unwrap(), pt);
    }
}

#[test]
fn gcm_reproduces_published_vectors() {
    // GCM specification test cases 13 and 14 (256-bit zero key, zero IV).
    let key = [0u8; 32];
    let iv = [0u8; 12];
    assert_eq!(
        hex::encode(crypto::aes256gcm_encrypt(&key, &iv, &[], &[])),
        "530f8afbc74536b9a963b4f1c4cb738b"
    );
    assert_eq!(
        hex::encode(crypto::aes256gcm_encrypt(&key, &iv, &[], &[0u8; 16])),
        "cea7403d4d606b6e074ec5d3baf39d18d0d1c8a799996bf0265b98b5d48ab919"
    );
}

#[test]
fn gcm_fixed_triple_frozen_from_external_oracle() {
    // Computed once with Python's `cryptography` AESGCM.
    let key: [u8; 32] = core::array::from_fn(|i| i as u8);
    let nonce: [u8; 12] = core::array::from_fn(|i| 100 + i as u8);
    let out = crypto::aes256gcm_encrypt(&key, &nonce, b"k-7", b"encryption at rest under rotating keys");
    assert_eq!(
        hex::encode(out),
        "2d75bd14009922f7510c7f89ae45189831b6267fe508960087a3c33c9ad7cc26\
         f3c92ba53561d19a3e8cd9f0d3824696094698b05127"
    );
}
