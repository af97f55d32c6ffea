//! At-rest sealing of secret values (ChaCha20-Poly1305, secret name as AAD).

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use thiserror::Error;

pub const MASTER_KEY_ENV: &str = "AGYNLITE_MASTER_KEY";

#[derive(Debug, Error)]
pub enum SealError {
    #[error("{MASTER_KEY_ENV} must be 64 hex characters (32 bytes)")]
    BadKey,
    #[error("{MASTER_KEY_ENV} is not set")]
    MissingKey,
    #[error("sealed secret is malformed")]
    Malformed,
    #[error("secret failed authentication (wrong master key or tampered data)")]
    Tampered,
}

#[derive(Clone)]
pub struct Sealer {
    cipher: ChaCha20Poly1305,
}

impl std::fmt::Debug for Sealer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Sealer(..)")
    }
}

impl Sealer {
    pub fn new(key: [u8; 32]) -> Self {
        Self {
            cipher: ChaCha20Poly1305::new(Key::from_slice(&key)),
        }
    }

    pub fn from_hex(hex_key: &str) -> Result<Self, SealError> {
        let bytes = hex::decode(hex_key.trim()).map_err(|_| SealError::BadKey)?;
        let key: [u8; 32] = bytes.try_into().map_err(|_| SealError::BadKey)?;
        Ok(Self::new(key))
    }

    pub fn from_env() -> Result<Self, SealError> {
        let v = std::env::var(MASTER_KEY_ENV).map_err(|_| SealError::MissingKey)?;
        Self::from_hex(&v)
    }

    pub fn seal(&self, name: &str, value: &[u8]) -> Result<([u8; 12], Vec<u8>), SealError> {
        let nonce: [u8; 12] = rand::random();
        let ct = self
            .cipher
            .encrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: value,
                    aad: name.as_bytes(),
                },
            )
            .map_err(|_| SealError::Malformed)?;
        Ok((nonce, ct))
    }

    pub fn open(&self, name: &str, nonce: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>, SealError> {
        if nonce.len() != 12 {
            return Err(SealError::Malformed);
        }
        self.cipher
            .decrypt(
                Nonce::from_slice(nonce),
                Payload {
                    msg: ciphertext,
                    aad: name.as_bytes(),
                },
            )
            .map_err(|_| SealError::Tampered)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_binding_to_name() {
        let s = Sealer::new([1; 32]);
        let (n, ct) = s.seal("db-pass", b"hunter2").unwrap();
        assert!(!ct.windows(7).any(|w| w == b"hunter2"));
        assert_eq!(s.open("db-pass", &n, &ct).unwrap(), b"hunter2");
        assert!(matches!(s.open("other", &n, &ct), Err(SealError::Tampered)));
        let other = Sealer::new([2; 32]);
        assert!(other.open("db-pass", &n, &ct).is_err());
    }

    #[test]
    fn hex_key_parsing() {
        assert!(Sealer::from_hex(&"ab".repeat(32)).is_ok());
        assert!(matches!(Sealer::from_hex("abcd"), Err(SealError::BadKey)));
        assert!(matches!(Sealer::from_hex(&"zz".repeat(32)), Err(SealError::BadKey)));
    }
}
