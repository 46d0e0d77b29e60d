//! Cryptographic primitives offered by the Crypto Service.

use aes::cipher::block_padding::Pkcs7;
use aes::cipher::{BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use rsa::pkcs8::{DecodePrivateKey, DecodePublicKey};
use rsa::traits::PublicKeyParts;
use rsa::{Pkcs1v15Sign, RsaPrivateKey, RsaPublicKey};
use sha2::{Digest, Sha256};

use super::CryptoError;

type Aes128CbcEnc = cbc::Encryptor<aes::Aes128>;
type Aes128CbcDec = cbc::Decryptor<aes::Aes128>;

pub const AES_KEY_LEN: usize = 16;
pub const AES_BLOCK: usize = 16;

/// AES-128-CBC with PKCS#7 padding.
pub fn aes_encrypt(key: &[u8], iv: &[u8], plaintext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if key.len() != AES_KEY_LEN {
        return Err(CryptoError::BadKeyLen);
    }
    if iv.len() != AES_BLOCK {
        return Err(CryptoError::BadIvLen);
    }
    if plaintext.is_empty() {
        return Err(CryptoError::EmptyInput);
    }
    let enc = Aes128CbcEnc::new_from_slices(key, iv).map_err(|_| CryptoError::BadKeyLen)?;
    Ok(enc.encrypt_padded_vec_mut::<Pkcs7>(plaintext))
}

pub fn aes_decrypt(key: &[u8], iv: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if key.len() != AES_KEY_LEN {
        return Err(CryptoError::BadKeyLen);
    }
    if iv.len() != AES_BLOCK {
        return Err(CryptoError::BadIvLen);
    }
    if ciphertext.is_empty() || !ciphertext.len().is_multiple_of(AES_BLOCK) {
        return Err(CryptoError::BadPadding);
    }
    let dec = Aes128CbcDec::new_from_slices(key, iv).map_err(|_| CryptoError::BadKeyLen)?;
    dec.decrypt_padded_vec_mut::<Pkcs7>(ciphertext)
        .map_err(|_| CryptoError::BadPadding)
}

pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

/// Modulus sizes the service accepts.
pub const RSA_KEY_BITS: [usize; 2] = [1024, 2048];

fn check_bits(bits: usize) -> Result<(), CryptoError> {
    if RSA_KEY_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(CryptoError::BadKey)
    }
}

pub fn parse_private_key(der: &[u8]) -> Result<RsaPrivateKey, CryptoError> {
    let key = RsaPrivateKey::from_pkcs8_der(der).map_err(|_| CryptoError::BadKey)?;
    check_bits(key.size() * 8)?;
    Ok(key)
}

pub fn parse_public_key(der: &[u8]) -> Result<RsaPublicKey, CryptoError> {
    let key = RsaPublicKey::from_public_key_der(der).map_err(|_| CryptoError::BadKey)?;
    check_bits(key.size() * 8)?;
    Ok(key)
}

/// PKCS#1 v1.5 signature over SHA-256(data). Deterministic.
pub fn rsa_sign(key: &RsaPrivateKey, data: &[u8]) -> Result<Vec<u8>, CryptoError> {
    check_bits(key.size() * 8)?;
    key.sign(Pkcs1v15Sign::new::<Sha256>(), &sha256(data))
        .map_err(|_| CryptoError::BadKey)
}

pub fn rsa_verify(key: &RsaPublicKey, data: &[u8], signature: &[u8]) -> bool {
    key.verify(Pkcs1v15Sign::new::<Sha256>(), &sha256(data), signature)
        .is_ok()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn sha256_is_deterministic() {
        assert_eq!(sha256(b"x"), sha256(b"x"));
        assert_ne!(sha256(b"x"), sha256(b"y"));
    }

    #[test]
    fn aes_rejects_bad_inputs() {
        assert_eq!(aes_encrypt(&[0; 15], &[0; 16], b"a"), Err(CryptoError::BadKeyLen));
        assert_eq!(aes_encrypt(&[0; 16], &[0; 16], b""), Err(CryptoError::EmptyInput));
        assert_eq!(aes_decrypt(&[0; 16], &[0; 16], &[0; 15]), Err(CryptoError::BadPadding));
    }

    #[test]
    fn last_block_bitflip_is_detected() {
        let key = [7u8; 16];
        let iv = [9u8; 16];
        let pt = b"sixteen byte msg plus a tail".to_vec();
        let ct = aes_encrypt(&key, &iv, &pt).unwrap();
        // Flipping a byte of the last block garbles the padding block; either
        // unpadding fails or the recovered plaintext differs.
        let n = ct.len();
        for i in n - AES_BLOCK..n {
            let mut bad = ct.clone();
            bad[i] ^= 0x01;
            match aes_decrypt(&key, &iv, &bad) {
                Err(CryptoError::BadPadding) => {}
                Ok(p) => assert_ne!(p, pt),
                Err(e) => panic!("unexpected {e}"),
            }
        }
    }

    proptest! {
        #[test]
        fn aes_roundtrip(key in any::<[u8; 16]>(), iv in any::<[u8; 16]>(),
                         pt in prop::collection::vec(any::<u8>(), 1..4096)) {
            let ct = aes_encrypt(&key, &iv, &pt).unwrap();
            prop_assert_eq!(ct.len() % AES_BLOCK, 0);
            prop_assert!(ct.len() > pt.len());
            prop_assert_eq!(aes_decrypt(&key, &iv, &ct).unwrap(), pt);
        }
    }
}
