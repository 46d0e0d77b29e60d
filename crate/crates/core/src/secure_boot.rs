//! Chain-of-trust image verification.
//!
//! Image container (lengths big-endian):
//!
//! ```text
//! "MTIM" | stage (1) | payload_len (4) | payload | pubkey_len (2) | pubkey | signature (256)
//! ```
//!
//! The signature is RSA PKCS#1 v1.5 over SHA-256 of everything up to and
//! including the payload. Only BL1 carries a public key; the ROM checks it
//! against its hard-coded hash and every later stage is verified with it.

use std::fmt;
use std::fs;
use std::path::Path;

use rsa::pkcs8::EncodePublicKey;
use rsa::{RsaPrivateKey, RsaPublicKey};
use thiserror::Error;

use crate::security_services::crypto::{parse_public_key, rsa_sign, rsa_verify, sha256};

pub const IMAGE_MAGIC: &[u8; 4] = b"MTIM";
pub const SIGNATURE_LEN: usize = 256;
const HEADER_LEN: usize = 4 + 1 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Stage {
    Bl1 = 1,
    SecureOs = 2,
    Bl2 = 3,
    MobileOs = 4,
    RootTask = 5,
}

impl Stage {
    /// Verification order of the boot chain.
    pub const CHAIN: [Stage; 5] = [Stage::Bl1, Stage::SecureOs, Stage::Bl2, Stage::RootTask, Stage::MobileOs];

    pub fn from_tag(tag: u8) -> Option<Stage> {
        Self::CHAIN.into_iter().find(|s| *s as u8 == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Bl1 => "BL1",
            Stage::SecureOs => "SECURE_OS",
            Stage::Bl2 => "BL2",
            Stage::MobileOs => "MOBILE_OS",
            Stage::RootTask => "ROOT_TASK",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        let n = name.to_ascii_uppercase().replace('-', "_");
        Self::CHAIN.into_iter().find(|s| s.name() == n)
    }

    pub fn file_name(self) -> String {
        format!("{}.img", self.name().to_ascii_lowercase())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum FailReason {
    #[error("public key does not match the ROM hash")]
    PubkeyHashMismatch,
    #[error("signature does not verify")]
    BadSignature,
    #[error("malformed image")]
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedImage {
    pub stage: Stage,
    pub payload: Vec<u8>,
    pub pubkey: Vec<u8>,
    pub signature: Vec<u8>,
}

impl SignedImage {
    fn signed_bytes(stage: Stage, payload: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(IMAGE_MAGIC);
        out.push(stage as u8);
        out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        out.extend_from_slice(payload);
        out
    }

    /// Sign `payload` for `stage`. BL1 images embed the vendor public key.
    pub fn sign(stage: Stage, payload: &[u8], key: &RsaPrivateKey) -> Result<Self, FailReason> {
        let signature = rsa_sign(key, &Self::signed_bytes(stage, payload)).map_err(|_| FailReason::Malformed)?;
        if signature.len() != SIGNATURE_LEN {
            return Err(FailReason::Malformed);
        }
        let pubkey = if stage == Stage::Bl1 {
            key.to_public_key()
                .to_public_key_der()
                .map_err(|_| FailReason::Malformed)?
                .as_bytes()
                .to_vec()
        } else {
            Vec::new()
        };
        Ok(Self {
            stage,
            payload: payload.to_vec(),
            pubkey,
            signature,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Self::signed_bytes(self.stage, &self.payload);
        out.extend_from_slice(&(self.pubkey.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.pubkey);
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, FailReason> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != IMAGE_MAGIC {
            return Err(FailReason::Malformed);
        }
        let stage = Stage::from_tag(bytes[4]).ok_or(FailReason::Malformed)?;
        let len = u32::from_be_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let rest = &bytes[HEADER_LEN..];
        if rest.len() < len + 2 {
            return Err(FailReason::Malformed);
        }
        let (payload, rest) = rest.split_at(len);
        let klen = u16::from_be_bytes([rest[0], rest[1]]) as usize;
        let rest = &rest[2..];
        if rest.len() != klen + SIGNATURE_LEN {
            return Err(FailReason::Malformed);
        }
        let (pubkey, signature) = rest.split_at(klen);
        if (stage == Stage::Bl1) == pubkey.is_empty() {
            return Err(FailReason::Malformed);
        }
        Ok(Self {
            stage,
            payload: payload.to_vec(),
            pubkey: pubkey.to_vec(),
            signature: signature.to_vec(),
        })
    }
}

/// Immutable ROM contents: the hash of the vendor public key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RomState {
    pubkey_hash: [u8; 32],
}

impl RomState {
    pub fn new(pubkey_hash: [u8; 32]) -> Self {
        Self { pubkey_hash }
    }

    pub fn for_public_key(der: &[u8]) -> Self {
        Self::new(sha256(der))
    }

    pub fn pubkey_hash(&self) -> &[u8; 32] {
        &self.pubkey_hash
    }
}

/// Signature check of an already-parsed image.
pub fn verify_image(pubkey: &RsaPublicKey, img: &SignedImage) -> bool {
    rsa_verify(pubkey, &SignedImage::signed_bytes(img.stage, &img.payload), &img.signature)
}

fn verify_stage(pubkey: &RsaPublicKey, bytes: &[u8], stage: Stage) -> Result<SignedImage, FailReason> {
    let img = SignedImage::parse(bytes)?;
    if img.stage != stage {
        return Err(FailReason::Malformed);
    }
    if !verify_image(pubkey, &img) {
        return Err(FailReason::BadSignature);
    }
    Ok(img)
}

/// ROM check of BL1. On success returns the vendor key for later stages.
pub fn rom_verify(rom: &RomState, bl1: &[u8]) -> Result<RsaPublicKey, FailReason> {
    let img = SignedImage::parse(bl1)?;
    if img.stage != Stage::Bl1 {
        return Err(FailReason::Malformed);
    }
    if sha256(&img.pubkey) != rom.pubkey_hash {
        return Err(FailReason::PubkeyHashMismatch);
    }
    let key = parse_public_key(&img.pubkey).map_err(|_| FailReason::Malformed)?;
    if !verify_image(&key, &img) {
        return Err(FailReason::BadSignature);
    }
    Ok(key)
}

/// The secure OS's check of the Root Task before launching it.
pub fn kernel_verify_root_task(pubkey: &RsaPublicKey, img: &[u8]) -> Result<SignedImage, FailReason> {
    verify_stage(pubkey, img, Stage::RootTask)
}

/// Raw image files for every stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSet {
    pub bl1: Vec<u8>,
    pub secure_os: Vec<u8>,
    pub bl2: Vec<u8>,
    pub mobile_os: Vec<u8>,
    pub root_task: Vec<u8>,
}

impl ImageSet {
    pub fn get(&self, stage: Stage) -> &[u8] {
        match stage {
            Stage::Bl1 => &self.bl1,
            Stage::SecureOs => &self.secure_os,
            Stage::Bl2 => &self.bl2,
            Stage::MobileOs => &self.mobile_os,
            Stage::RootTask => &self.root_task,
        }
    }

    pub fn get_mut(&mut self, stage: Stage) -> &mut Vec<u8> {
        match stage {
            Stage::Bl1 => &mut self.bl1,
            Stage::SecureOs => &mut self.secure_os,
            Stage::Bl2 => &mut self.bl2,
            Stage::MobileOs => &mut self.mobile_os,
            Stage::RootTask => &mut self.root_task,
        }
    }

    /// Sign a default payload for every stage.
    pub fn build(key: &RsaPrivateKey) -> Result<Self, FailReason> {
        let img = |s: Stage| -> Result<Vec<u8>, FailReason> {
            let payload = format!("{} image", s.name()).into_bytes();
            Ok(SignedImage::sign(s, &payload, key)?.to_bytes())
        };
        Ok(Self {
            bl1: img(Stage::Bl1)?,
            secure_os: img(Stage::SecureOs)?,
            bl2: img(Stage::Bl2)?,
            mobile_os: img(Stage::MobileOs)?,
            root_task: img(Stage::RootTask)?,
        })
    }

    pub fn load(dir: &Path) -> std::io::Result<Self> {
        let read = |s: Stage| fs::read(dir.join(s.file_name()));
        Ok(Self {
            bl1: read(Stage::Bl1)?,
            secure_os: read(Stage::SecureOs)?,
            bl2: read(Stage::Bl2)?,
            mobile_os: read(Stage::MobileOs)?,
            root_task: read(Stage::RootTask)?,
        })
    }

    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        for s in Stage::CHAIN {
            fs::write(dir.join(s.file_name()), self.get(s))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BootStatus {
    Booted,
    HaltedAt(Stage),
}

impl fmt::Display for BootStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BootStatus::Booted => f.write_str("BOOTED"),
            BootStatus::HaltedAt(s) => write!(f, "HALTED_AT({s})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BootReport {
    pub stages: Vec<(Stage, Result<(), FailReason>)>,
    pub status: BootStatus,
}

impl BootReport {
    fn passed(&self, stage: Stage) -> bool {
        self.stages.iter().any(|(s, r)| *s == stage && r.is_ok())
    }

    /// Secure OS and Root Task both verified.
    pub fn secure_world_up(&self) -> bool {
        self.passed(Stage::SecureOs) && self.passed(Stage::RootTask)
    }

    pub fn ree_available(&self) -> bool {
        self.status == BootStatus::Booted
    }
}

impl fmt::Display for BootReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (s, r) in &self.stages {
            match r {
                Ok(()) => writeln!(f, "{s}: ok")?,
                Err(e) => writeln!(f, "{s}: FAIL ({e})")?,
            }
        }
        write!(f, "{}", self.status)
    }
}

/// Verify every stage in chain order, stopping at the first failure.
pub fn boot_chain(rom: &RomState, images: &ImageSet) -> BootReport {
    let mut stages = Vec::new();
    let key = match rom_verify(rom, &images.bl1) {
        Ok(k) => {
            stages.push((Stage::Bl1, Ok(())));
            k
        }
        Err(e) => {
            stages.push((Stage::Bl1, Err(e)));
            return BootReport {
                stages,
                status: BootStatus::HaltedAt(Stage::Bl1),
            };
        }
    };
    for stage in &Stage::CHAIN[1..] {
        let r = match stage {
            Stage::RootTask => kernel_verify_root_task(&key, images.get(*stage)),
            s => verify_stage(&key, images.get(*s), *s),
        };
        let failed = r.is_err();
        stages.push((*stage, r.map(|_| ())));
        if failed {
            return BootReport {
                stages,
                status: BootStatus::HaltedAt(*stage),
            };
        }
    }
    BootReport {
        stages,
        status: BootStatus::Booted,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_roundtrip() {
        for s in Stage::CHAIN {
            assert_eq!(Stage::from_name(s.name()), Some(s));
            assert_eq!(Stage::from_tag(s as u8), Some(s));
        }
        assert_eq!(Stage::from_name("secure-os"), Some(Stage::SecureOs));
        assert_eq!(Stage::from_tag(0), None);
        assert_eq!(Stage::from_tag(6), None);
    }

    #[test]
    fn parse_rejects_garbage() {
        assert_eq!(SignedImage::parse(b""), Err(FailReason::Malformed));
        assert_eq!(SignedImage::parse(b"MTIX\x01\0\0\0\0"), Err(FailReason::Malformed));
        let mut img = b"MTIM\x02\0\0\0\x01A\0\0".to_vec();
        img.extend_from_slice(&[0; SIGNATURE_LEN]);
        assert!(SignedImage::parse(&img).is_ok());
        img.push(0);
        assert_eq!(SignedImage::parse(&img), Err(FailReason::Malformed));
    }

    #[test]
    fn only_bl1_carries_a_key() {
        let mut img = b"MTIM\x01\0\0\0\x01A\0\0".to_vec();
        img.extend_from_slice(&[0; SIGNATURE_LEN]);
        assert_eq!(SignedImage::parse(&img), Err(FailReason::Malformed));
        let mut img = b"MTIM\x03\0\0\0\x01A\0\x01K".to_vec();
        img.extend_from_slice(&[0; SIGNATURE_LEN]);
        assert_eq!(SignedImage::parse(&img), Err(FailReason::Malformed));
    }
}
