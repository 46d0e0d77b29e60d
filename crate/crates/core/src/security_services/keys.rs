//! Platform keys and the key provisioning file.
//!
//! Provisioning file layout (all lengths big-endian):
//!
//! ```text
//! "MTEE_KEYS\0" | 0x01 | root key (16) | u32 L | PKCS#8 DER (L) | u32 M | SPKI DER (M)
//! ```

use std::fmt;

use rand::{CryptoRng, RngCore};
use rsa::pkcs8::{EncodePrivateKey, EncodePublicKey};
use rsa::traits::PrivateKeyParts;
use rsa::{RsaPrivateKey, RsaPublicKey};
use thiserror::Error;

use super::crypto::{parse_private_key, parse_public_key};

pub const KEYFILE_MAGIC: &[u8; 10] = b"MTEE_KEYS\0";
pub const KEYFILE_VERSION: u8 = 0x01;
pub const ROOT_KEY_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum KeyFileError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0:#04x}")]
    BadVersion(u8),
    #[error("truncated key file")]
    Truncated,
    #[error("trailing bytes after public key")]
    TrailingData,
    #[error("device key blob does not parse")]
    BadKey,
    #[error("public key does not match private key")]
    KeyMismatch,
}

/// Vendor-provisioned 128-bit symmetric key. Never printed.
#[derive(Clone, PartialEq, Eq)]
pub struct RootKey([u8; ROOT_KEY_LEN]);

impl RootKey {
    pub fn from_bytes(bytes: [u8; ROOT_KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub(crate) fn expose(&self) -> &[u8; ROOT_KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for RootKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("RootKey(<redacted>)")
    }
}

/// Device identity key pair. Only the public half is exportable.
#[derive(Clone)]
pub struct DeviceKey {
    private: RsaPrivateKey,
    public_der: Vec<u8>,
}

impl DeviceKey {
    pub(crate) fn private(&self) -> &RsaPrivateKey {
        &self.private
    }

    pub fn public_key(&self) -> RsaPublicKey {
        self.private.to_public_key()
    }

    pub fn public_der(&self) -> &[u8] {
        &self.public_der
    }
}

impl fmt::Debug for DeviceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DeviceKey(<redacted>)")
    }
}

/// Contents of a provisioning file.
#[derive(Clone)]
pub struct KeyBundle {
    root_key: [u8; ROOT_KEY_LEN],
    private_der: Vec<u8>,
    public_der: Vec<u8>,
}

impl fmt::Debug for KeyBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyBundle")
            .field("public_der_len", &self.public_der.len())
            .finish_non_exhaustive()
    }
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8], KeyFileError> {
    if buf.len() < n {
        return Err(KeyFileError::Truncated);
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn take_u32(buf: &mut &[u8]) -> Result<usize, KeyFileError> {
    let b = take(buf, 4)?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
}

impl KeyBundle {
    pub fn from_parts(root_key: [u8; ROOT_KEY_LEN], private_der: Vec<u8>) -> Result<Self, KeyFileError> {
        let key = parse_private_key(&private_der).map_err(|_| KeyFileError::BadKey)?;
        let public_der = key
            .to_public_key()
            .to_public_key_der()
            .map_err(|_| KeyFileError::BadKey)?
            .as_bytes()
            .to_vec();
        Ok(Self {
            root_key,
            private_der,
            public_der,
        })
    }

    /// Fresh root key and RSA key pair of `bits` bits.
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R, bits: usize) -> Result<Self, KeyFileError> {
        let mut root_key = [0u8; ROOT_KEY_LEN];
        rng.fill_bytes(&mut root_key);
        let key = RsaPrivateKey::new(rng, bits).map_err(|_| KeyFileError::BadKey)?;
        let der = key.to_pkcs8_der().map_err(|_| KeyFileError::BadKey)?;
        Self::from_parts(root_key, der.as_bytes().to_vec())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.private_der.len() + self.public_der.len());
        out.extend_from_slice(KEYFILE_MAGIC);
        out.push(KEYFILE_VERSION);
        out.extend_from_slice(&self.root_key);
        out.extend_from_slice(&(self.private_der.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.private_der);
        out.extend_from_slice(&(self.public_der.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.public_der);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, KeyFileError> {
        let mut buf = bytes;
        if take(&mut buf, KEYFILE_MAGIC.len())? != KEYFILE_MAGIC {
            return Err(KeyFileError::BadMagic);
        }
        let version = take(&mut buf, 1)?[0];
        if version != KEYFILE_VERSION {
            return Err(KeyFileError::BadVersion(version));
        }
        let mut root_key = [0u8; ROOT_KEY_LEN];
        root_key.copy_from_slice(take(&mut buf, ROOT_KEY_LEN)?);
        let l = take_u32(&mut buf)?;
        let private_der = take(&mut buf, l)?.to_vec();
        let m = take_u32(&mut buf)?;
        let public_der = take(&mut buf, m)?.to_vec();
        if !buf.is_empty() {
            return Err(KeyFileError::TrailingData);
        }
        let bundle = Self::from_parts(root_key, private_der)?;
        parse_public_key(&public_der).map_err(|_| KeyFileError::BadKey)?;
        if bundle.public_der != public_der {
            return Err(KeyFileError::KeyMismatch);
        }
        Ok(bundle)
    }

    pub fn public_der(&self) -> &[u8] {
        &self.public_der
    }

    pub fn public_key(&self) -> RsaPublicKey {
        parse_public_key(&self.public_der).expect("validated at construction")
    }

    /// Vendor signing key, used by the image-signing tool.
    pub fn signing_key(&self) -> RsaPrivateKey {
        parse_private_key(&self.private_der).expect("validated at construction")
    }

    /// Hand the keys to Key Management. The bundle is consumed.
    pub fn into_platform_keys(self) -> (RootKey, DeviceKey) {
        let private = parse_private_key(&self.private_der).expect("validated at construction");
        (
            RootKey(self.root_key),
            DeviceKey {
                private,
                public_der: self.public_der,
            },
        )
    }

    /// Byte strings that must never leave Key Management: the root key, the
    /// private exponent and the primes.
    pub fn secret_fingerprints(&self) -> Vec<Vec<u8>> {
        let key = self.signing_key();
        let mut out = vec![self.root_key.to_vec(), key.d().to_bytes_be()];
        out.extend(key.primes().iter().map(|p| p.to_bytes_be()));
        out.push(self.private_der.clone());
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    use super::*;

    fn bundle() -> KeyBundle {
        KeyBundle::generate(&mut ChaCha20Rng::seed_from_u64(1), 1024).unwrap()
    }

    #[test]
    fn keyfile_roundtrip_and_layout() {
        let b = bundle();
        let bytes = b.encode();
        assert_eq!(&bytes[..10], b"MTEE_KEYS\0");
        assert_eq!(bytes[10], 0x01);
        let l = u32::from_be_bytes(bytes[27..31].try_into().unwrap()) as usize;
        assert_eq!(&bytes[31..31 + l], b.private_der.as_slice());
        let back = KeyBundle::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn keyfile_rejects_malformed() {
        let bytes = bundle().encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(KeyBundle::decode(&bad).unwrap_err(), KeyFileError::BadMagic);
        let mut bad = bytes.clone();
        bad[10] = 2;
        assert_eq!(KeyBundle::decode(&bad).unwrap_err(), KeyFileError::BadVersion(2));
        assert_eq!(
            KeyBundle::decode(&bytes[..bytes.len() - 1]).unwrap_err(),
            KeyFileError::Truncated
        );
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(KeyBundle::decode(&long).unwrap_err(), KeyFileError::TrailingData);
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        assert_eq!(bundle().encode(), bundle().encode());
    }

    #[test]
    fn debug_output_is_redacted() {
        let b = bundle();
        let (rk, dk) = b.clone().into_platform_keys();
        let text = format!("{b:?}{rk:?}{dk:?}");
        assert!(!text.contains(&hex::encode(b.root_key)));
        assert!(text.contains("redacted"));
    }
}
