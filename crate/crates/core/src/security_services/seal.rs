//! Root-Key sealing.
//!
//! Blob layout: `version (1) | iv (16) | ciphertext | tag (32)`, where the
//! ciphertext is AES-128-CBC with PKCS#7 padding and the tag is
//! HMAC-SHA256 over `version | iv | ciphertext`. Encryption and MAC keys are
//! derived from the Root Key by hashing it with a fixed label.

use hmac::{Hmac, Mac};
use rand::RngCore;
use sha2::{Digest, Sha256};

use super::crypto::{aes_decrypt, aes_encrypt, AES_BLOCK};
use super::keys::RootKey;
use super::CryptoError;

pub const SEAL_VERSION: u8 = 0x01;
pub const TAG_LEN: usize = 32;
pub const MAX_SEAL_INPUT: usize = 64 * 1024;
const HEADER_LEN: usize = 1 + AES_BLOCK;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBlob {
    pub version: u8,
    pub iv: [u8; 16],
    pub ciphertext: Vec<u8>,
    pub integrity_tag: [u8; TAG_LEN],
}

impl SealedBlob {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.ciphertext.len() + TAG_LEN);
        out.push(self.version);
        out.extend_from_slice(&self.iv);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.integrity_tag);
        out
    }

    /// Split a blob into its fields. Only the length is checked here.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < HEADER_LEN + AES_BLOCK + TAG_LEN {
            return Err(CryptoError::IntegrityFail);
        }
        let (head, rest) = bytes.split_at(HEADER_LEN);
        let (ct, tag) = rest.split_at(rest.len() - TAG_LEN);
        Ok(Self {
            version: head[0],
            iv: head[1..].try_into().expect("16-byte iv"),
            ciphertext: ct.to_vec(),
            integrity_tag: tag.try_into().expect("32-byte tag"),
        })
    }

    /// Size of the blob produced for a payload of `len` bytes.
    pub fn sealed_len(len: usize) -> usize {
        HEADER_LEN + (len / AES_BLOCK + 1) * AES_BLOCK + TAG_LEN
    }
}

struct SealKeys {
    enc: [u8; 16],
    mac: [u8; 32],
}

fn derive(root: &RootKey) -> SealKeys {
    let mut h = Sha256::new();
    h.update(b"microtee.seal.enc");
    h.update(root.expose());
    let enc_full: [u8; 32] = h.finalize().into();
    let mut h = Sha256::new();
    h.update(b"microtee.seal.mac");
    h.update(root.expose());
    SealKeys {
        enc: enc_full[..16].try_into().expect("16 bytes"),
        mac: h.finalize().into(),
    }
}

fn mac(keys: &SealKeys) -> Hmac<Sha256> {
    <Hmac<Sha256> as Mac>::new_from_slice(&keys.mac).expect("hmac accepts any key length")
}

pub fn seal<R: RngCore>(root: &RootKey, rng: &mut R, data: &[u8]) -> Result<SealedBlob, CryptoError> {
    if data.is_empty() {
        return Err(CryptoError::EmptyInput);
    }
    if data.len() > MAX_SEAL_INPUT {
        return Err(CryptoError::TooLarge);
    }
    let keys = derive(root);
    let mut iv = [0u8; 16];
    rng.fill_bytes(&mut iv);
    let ciphertext = aes_encrypt(&keys.enc, &iv, data)?;
    let mut m = mac(&keys);
    m.update(&[SEAL_VERSION]);
    m.update(&iv);
    m.update(&ciphertext);
    Ok(SealedBlob {
        version: SEAL_VERSION,
        iv,
        ciphertext,
        integrity_tag: m.finalize().into_bytes().into(),
    })
}

/// Every failure (bad version, tag, length or padding) is reported as
/// `IntegrityFail` so the caller learns nothing about which check tripped.
pub fn unseal(root: &RootKey, blob: &SealedBlob) -> Result<Vec<u8>, CryptoError> {
    let keys = derive(root);
    let mut m = mac(&keys);
    m.update(&[blob.version]);
    m.update(&blob.iv);
    m.update(&blob.ciphertext);
    m.verify_slice(&blob.integrity_tag)
        .map_err(|_| CryptoError::IntegrityFail)?;
    if blob.version != SEAL_VERSION {
        return Err(CryptoError::IntegrityFail);
    }
    aes_decrypt(&keys.enc, &blob.iv, &blob.ciphertext).map_err(|_| CryptoError::IntegrityFail)
}
