//! Hashing and report signing.
//!
//! The digest is blake2s (32 bytes). Reports are signed with Ed25519 over
//! the byte layout `digest(cflog_bytes) || h_app || chl [|| out]`, where
//! `cflog_bytes` is the little-endian 4-byte entry sequence.

use blake2::{Blake2s256, Digest as _};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::RngCore;

use crate::vm::Word;

pub type Digest = [u8; 32];

pub const CHL_LEN: usize = 32;
pub const SIG_LEN: usize = 64;

pub fn hash(bytes: &[u8]) -> Digest {
    let mut h = Blake2s256::new();
    h.update(bytes);
    h.finalize().into()
}

/// Little-endian serialization of the log entries, as hashed and as sent
/// on the wire.
pub fn cflog_bytes(entries: &[Word]) -> Vec<u8> {
    let mut out = Vec::with_capacity(entries.len() * 4);
    for e in entries {
        out.extend_from_slice(&e.to_le_bytes());
    }
    out
}

/// The exact byte string the report signature covers.
pub fn signed_message(
    entries: &[Word],
    h_app: &Digest,
    chl: &[u8; CHL_LEN],
    out: Option<&[u8]>,
) -> Vec<u8> {
    let mut msg = Vec::with_capacity(32 + 32 + CHL_LEN + out.map_or(0, <[u8]>::len));
    msg.extend_from_slice(&hash(&cflog_bytes(entries)));
    msg.extend_from_slice(h_app);
    msg.extend_from_slice(chl);
    if let Some(out_bytes) = out {
        msg.extend_from_slice(out_bytes);
    }
    msg
}

#[derive(Debug, thiserror::Error)]
pub enum KeyError {
    #[error("malformed key: {0}")]
    MalformedKey(String),
}

/// Device signing key pair. The signing half never leaves this struct.
#[derive(Clone)]
pub struct KeyMaterial {
    sk: SigningKey,
}

impl KeyMaterial {
    pub fn generate(rng: &mut dyn RngCore) -> KeyMaterial {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        KeyMaterial { sk: SigningKey::from_bytes(&seed) }
    }

    pub fn from_seed_bytes(seed: &[u8; 32]) -> KeyMaterial {
        KeyMaterial { sk: SigningKey::from_bytes(seed) }
    }

    pub fn from_hex(hex_seed: &str) -> Result<KeyMaterial, KeyError> {
        let bytes = hex::decode(hex_seed.trim()).map_err(|e| KeyError::MalformedKey(e.to_string()))?;
        let seed: [u8; 32] =
            bytes.try_into().map_err(|_| KeyError::MalformedKey("need 32 bytes".into()))?;
        Ok(KeyMaterial::from_seed_bytes(&seed))
    }

    pub fn secret_hex(&self) -> String {
        hex::encode(self.sk.to_bytes())
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey { vk: self.sk.verifying_key() }
    }

    pub fn sign(&self, message: &[u8]) -> Vec<u8> {
        self.sk.sign(message).to_bytes().to_vec()
    }
}

impl std::fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // never print the secret
        write!(f, "KeyMaterial(pk={})", self.public_key().to_hex())
    }
}

/// Verification half of the device key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PublicKey {
    vk: VerifyingKey,
}

impl PublicKey {
    pub fn from_bytes(bytes: &[u8; 32]) -> Result<PublicKey, KeyError> {
        VerifyingKey::from_bytes(bytes)
            .map(|vk| PublicKey { vk })
            .map_err(|e| KeyError::MalformedKey(e.to_string()))
    }

    pub fn from_hex(s: &str) -> Result<PublicKey, KeyError> {
        let bytes = hex::decode(s.trim()).map_err(|e| KeyError::MalformedKey(e.to_string()))?;
        let arr: [u8; 32] =
            bytes.try_into().map_err(|_| KeyError::MalformedKey("need 32 bytes".into()))?;
        PublicKey::from_bytes(&arr)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.vk.to_bytes())
    }

    pub fn verify(&self, message: &[u8], sigma: &[u8]) -> bool {
        let Ok(sig_bytes) = <[u8; SIG_LEN]>::try_from(sigma) else { return false };
        let sig = Signature::from_bytes(&sig_bytes);
        self.vk.verify(message, &sig).is_ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn hash_is_deterministic_and_injective_on_trivial_pair() {
        assert_eq!(hash(b"abc"), hash(b"abc"));
        assert_ne!(hash(b""), hash(b"\0"));
    }

    #[test]
    fn blake2s_reference_vector() {
        // RFC 7693 appendix B, BLAKE2s-256("abc")
        let expected = "508c5e8c327c14e2e1a72ba34eeb452f37458b209ed63a294d999b4c86675982";
        assert_eq!(hex::encode(hash(b"abc")), expected);
    }

    #[test]
    fn sign_verify_roundtrip_and_bitflips() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let keys = KeyMaterial::generate(&mut rng);
        let pk = keys.public_key();

        // empty message round trip
        let sig = keys.sign(b"");
        assert!(pk.verify(b"", &sig));

        let msg = b"attestation report body".to_vec();
        let sig = keys.sign(&msg);
        assert!(pk.verify(&msg, &sig));

        // sampled single-bit flips in the signature
        for bit in [0usize, 77, 200, 511] {
            let mut bad = sig.clone();
            bad[bit / 8] ^= 1 << (bit % 8);
            assert!(!pk.verify(&msg, &bad), "bit {bit}");
        }
        // sampled single-bit flips in the message
        for bit in [0usize, 63, 150] {
            let mut bad = msg.clone();
            bad[bit / 8] ^= 1 << (bit % 8);
            assert!(!pk.verify(&bad, &sig), "bit {bit}");
        }
        // wrong length sigma
        assert!(!pk.verify(&msg, &sig[..60]));
    }

    #[test]
    fn distinct_seeds_distinct_keys() {
        let mut r1 = ChaCha20Rng::seed_from_u64(1);
        let mut r2 = ChaCha20Rng::seed_from_u64(2);
        let k1 = KeyMaterial::generate(&mut r1);
        let k2 = KeyMaterial::generate(&mut r2);
        assert_ne!(k1.public_key().to_hex(), k2.public_key().to_hex());
    }

    #[test]
    fn key_hex_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let keys = KeyMaterial::generate(&mut rng);
        let again = KeyMaterial::from_hex(&keys.secret_hex()).unwrap();
        assert_eq!(keys.public_key(), again.public_key());
        let pk = PublicKey::from_hex(&keys.public_key().to_hex()).unwrap();
        assert_eq!(pk, keys.public_key());
        assert!(PublicKey::from_hex("zz").is_err());
        assert!(PublicKey::from_hex("00ff").is_err());
    }
}
