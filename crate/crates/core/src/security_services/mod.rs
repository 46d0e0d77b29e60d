//! Crypto Service and Key Management, each run as its own task behind its
//! own endpoint.

pub mod crypto;
pub mod keys;
pub mod seal;
pub mod wire;

use rand::RngCore;
use rsa::RsaPublicKey;
use thiserror::Error;

use self::crypto::{aes_decrypt, aes_encrypt, parse_private_key, parse_public_key, rsa_sign, rsa_verify, sha256};
use self::keys::{DeviceKey, RootKey};
use self::seal::{seal, unseal, SealedBlob};

pub use self::wire::{ClientError, ServiceClient, ServiceTask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("key must be 16 bytes")]
    BadKeyLen,
    #[error("iv must be 16 bytes")]
    BadIvLen,
    #[error("empty input")]
    EmptyInput,
    #[error("bad padding")]
    BadPadding,
    #[error("unusable key")]
    BadKey,
    #[error("integrity check failed")]
    IntegrityFail,
    #[error("malformed request")]
    BadRequest,
    #[error("input too large")]
    TooLarge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum ServiceId {
    AesEnc = 0x10,
    AesDec = 0x11,
    RsaSign = 0x12,
    RsaVerify = 0x13,
    Sha256 = 0x14,
    Seal = 0x20,
    Unseal = 0x21,
    Attest = 0x22,
    GetAttestPubkey = 0x23,
}

impl ServiceId {
    pub const ALL: [ServiceId; 9] = [
        ServiceId::AesEnc,
        ServiceId::AesDec,
        ServiceId::RsaSign,
        ServiceId::RsaVerify,
        ServiceId::Sha256,
        ServiceId::Seal,
        ServiceId::Unseal,
        ServiceId::Attest,
        ServiceId::GetAttestPubkey,
    ];

    pub fn from_u32(v: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|s| *s as u32 == v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum Status {
    Ok = 0,
    UnknownServiceId = 1,
    BadKeyLen = 2,
    BadPadding = 3,
    BadKey = 4,
    IntegrityFail = 5,
    BadRequest = 6,
    TooLarge = 7,
}

impl Status {
    pub fn from_u32(v: u32) -> Option<Self> {
        use Status::*;
        [Ok, UnknownServiceId, BadKeyLen, BadPadding, BadKey, IntegrityFail, BadRequest, TooLarge]
            .into_iter()
            .find(|s| *s as u32 == v)
    }
}

impl From<CryptoError> for Status {
    fn from(e: CryptoError) -> Self {
        match e {
            CryptoError::BadKeyLen => Status::BadKeyLen,
            CryptoError::BadPadding => Status::BadPadding,
            CryptoError::BadKey => Status::BadKey,
            CryptoError::IntegrityFail => Status::IntegrityFail,
            CryptoError::TooLarge => Status::TooLarge,
            CryptoError::BadIvLen | CryptoError::EmptyInput | CryptoError::BadRequest => Status::BadRequest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceRequest {
    pub service_id: u32,
    pub payload: Vec<u8>,
}

impl ServiceRequest {
    pub fn new(id: ServiceId, payload: Vec<u8>) -> Self {
        Self {
            service_id: id as u32,
            payload,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceResponse {
    pub status: Status,
    pub payload: Vec<u8>,
}

impl ServiceResponse {
    pub fn ok(payload: Vec<u8>) -> Self {
        Self {
            status: Status::Ok,
            payload,
        }
    }

    pub fn error(status: Status) -> Self {
        Self {
            status,
            payload: Vec::new(),
        }
    }
}

impl From<Result<Vec<u8>, CryptoError>> for ServiceResponse {
    fn from(r: Result<Vec<u8>, CryptoError>) -> Self {
        match r {
            Ok(p) => ServiceResponse::ok(p),
            Err(e) => ServiceResponse::error(e.into()),
        }
    }
}

/// A request loop body: one request in, one response out.
pub trait ServiceHandler: Send {
    fn name(&self) -> &'static str;
    fn handle_request(&mut self, req: &ServiceRequest) -> ServiceResponse;
}

// ---- payload encodings --------------------------------------------------

/// `key_len (1) | key | iv (16) | data`
pub fn encode_aes(key: &[u8], iv: &[u8; 16], data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + key.len() + 16 + data.len());
    out.push(key.len() as u8);
    out.extend_from_slice(key);
    out.extend_from_slice(iv);
    out.extend_from_slice(data);
    out
}

/// `u32 der_len | PKCS#8 DER | data`
pub fn encode_rsa_sign(private_der: &[u8], data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + private_der.len() + data.len());
    push_chunk(&mut out, private_der);
    out.extend_from_slice(data);
    out
}

/// `u32 der_len | SPKI DER | u32 sig_len | sig | data`
pub fn encode_rsa_verify(public_der: &[u8], signature: &[u8], data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + public_der.len() + signature.len() + data.len());
    push_chunk(&mut out, public_der);
    push_chunk(&mut out, signature);
    out.extend_from_slice(data);
    out
}

fn push_chunk(out: &mut Vec<u8>, chunk: &[u8]) {
    out.extend_from_slice(&(chunk.len() as u32).to_be_bytes());
    out.extend_from_slice(chunk);
}

fn split_chunk(buf: &[u8]) -> Result<(&[u8], &[u8]), CryptoError> {
    if buf.len() < 4 {
        return Err(CryptoError::BadRequest);
    }
    let n = u32::from_be_bytes(buf[..4].try_into().expect("4 bytes")) as usize;
    let rest = &buf[4..];
    if rest.len() < n {
        return Err(CryptoError::BadRequest);
    }
    Ok(rest.split_at(n))
}

fn split_aes(buf: &[u8]) -> Result<(&[u8], &[u8], &[u8]), CryptoError> {
    let (&klen, rest) = buf.split_first().ok_or(CryptoError::BadRequest)?;
    let klen = klen as usize;
    if rest.len() < klen + 16 {
        return Err(CryptoError::BadRequest);
    }
    let (key, rest) = rest.split_at(klen);
    let (iv, data) = rest.split_at(16);
    Ok((key, iv, data))
}

// ---- Crypto Service -----------------------------------------------------

/// Stateless algorithm provider. Keys arrive with each request.
#[derive(Debug, Default)]
pub struct CryptoService;

impl CryptoService {
    fn dispatch(&self, id: ServiceId, p: &[u8]) -> Result<Vec<u8>, CryptoError> {
        match id {
            ServiceId::AesEnc => {
                let (key, iv, data) = split_aes(p)?;
                aes_encrypt(key, iv, data)
            }
            ServiceId::AesDec => {
                let (key, iv, data) = split_aes(p)?;
                aes_decrypt(key, iv, data)
            }
            ServiceId::Sha256 => Ok(sha256(p).to_vec()),
            ServiceId::RsaSign => {
                let (der, data) = split_chunk(p)?;
                rsa_sign(&parse_private_key(der)?, data)
            }
            ServiceId::RsaVerify => {
                let (der, rest) = split_chunk(p)?;
                let (sig, data) = split_chunk(rest)?;
                let key: RsaPublicKey = parse_public_key(der)?;
                Ok(vec![rsa_verify(&key, data, sig) as u8])
            }
            _ => unreachable!("filtered by handle_request"),
        }
    }
}

impl ServiceHandler for CryptoService {
    fn name(&self) -> &'static str {
        "crypto-service"
    }

    fn handle_request(&mut self, req: &ServiceRequest) -> ServiceResponse {
        match ServiceId::from_u32(req.service_id) {
            Some(
                id @ (ServiceId::AesEnc
                | ServiceId::AesDec
                | ServiceId::Sha256
                | ServiceId::RsaSign
                | ServiceId::RsaVerify),
            ) => self.dispatch(id, &req.payload).into(),
            _ => ServiceResponse::error(Status::UnknownServiceId),
        }
    }
}

// ---- Key Management -----------------------------------------------------

/// Holds the platform keys. Nothing derived from the private material other
/// than ciphertext, tags and signatures ever leaves this service.
pub struct KeyManagement {
    root: RootKey,
    device: DeviceKey,
    rng: Box<dyn RngCore + Send>,
}

impl KeyManagement {
    pub fn new(root: RootKey, device: DeviceKey, rng: Box<dyn RngCore + Send>) -> Self {
        Self { root, device, rng }
    }

    pub fn seal(&mut self, data: &[u8]) -> Result<SealedBlob, CryptoError> {
        seal(&self.root, &mut self.rng, data)
    }

    pub fn unseal(&self, blob: &SealedBlob) -> Result<Vec<u8>, CryptoError> {
        unseal(&self.root, blob)
    }

    pub fn attest_sign(&self, claims: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if claims.is_empty() {
            return Err(CryptoError::EmptyInput);
        }
        rsa_sign(self.device.private(), claims)
    }

    pub fn attestation_public_key(&self) -> Vec<u8> {
        self.device.public_der().to_vec()
    }
}

impl ServiceHandler for KeyManagement {
    fn name(&self) -> &'static str {
        "key-management"
    }

    fn handle_request(&mut self, req: &ServiceRequest) -> ServiceResponse {
        let r = match ServiceId::from_u32(req.service_id) {
            Some(ServiceId::Seal) => self.seal(&req.payload).map(|b| b.to_bytes()),
            Some(ServiceId::Unseal) => {
                SealedBlob::from_bytes(&req.payload).and_then(|b| self.unseal(&b))
            }
            Some(ServiceId::Attest) => self.attest_sign(&req.payload),
            Some(ServiceId::GetAttestPubkey) => Ok(self.attestation_public_key()),
            _ => return ServiceResponse::error(Status::UnknownServiceId),
        };
        r.into()
    }
}
