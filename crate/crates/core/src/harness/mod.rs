//! Normal-world client stub, scenarios, benchmarks and the command line.

pub mod bench;
pub mod cli;
pub mod scenario;
pub mod stats;

use std::path::Path;

use thiserror::Error;

use crate::microkernel::{Kernel, KernelConfig, KernelError, PHYS_BASE};
use crate::monitor::{Monitor, MonitorError, MonitorState, World, WorldContext};
use crate::rng;
use crate::root_task::{root_init, RootError, RootTask};
use crate::secure_boot::{boot_chain, BootReport, FailReason, ImageSet, RomState};
use crate::security_services::keys::{KeyBundle, KeyFileError};
use crate::security_services::{ClientError, CryptoError};
use crate::trusted_apps::{crypto_client_spec, digest_spec, increment_spec};

const SECURE_ENTRY: u32 = PHYS_BASE;
const SECURE_STACK: u32 = PHYS_BASE + 0x8000;
const NORMAL_ENTRY: u32 = 0x8000_8000;
const NORMAL_STACK: u32 = 0x8800_0000;

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error("secure world is not running")]
    NotBooted,
    #[error("normal world failed verification")]
    ReeUnavailable,
    #[error("monitor: {0}")]
    Monitor(#[from] MonitorError),
    #[error("root task: {0}")]
    Root(#[from] RootError),
    #[error("key file: {0}")]
    Keys(#[from] KeyFileError),
    #[error("image signing: {0}")]
    Image(#[from] FailReason),
    #[error("kernel: {0}")]
    Kernel(#[from] KernelError),
    #[error("service call: {0}")]
    Service(#[from] ClientError),
    #[error("crypto: {0}")]
    Crypto(#[from] CryptoError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// The whole device: boot chain result, monitor, and the secure world.
pub struct Platform {
    report: BootReport,
    monitor: Option<Monitor>,
    secure: Option<RootTask>,
}

impl Platform {
    /// Run the boot chain and, if the secure OS and Root Task verify, bring
    /// up the secure world with the provisioned TAs.
    pub fn boot(rom: &RomState, images: &ImageSet, keys: KeyBundle) -> Result<Self, PlatformError> {
        Self::boot_with(rom, images, keys, KernelConfig::default())
    }

    pub fn boot_with(
        rom: &RomState,
        images: &ImageSet,
        keys: KeyBundle,
        config: KernelConfig,
    ) -> Result<Self, PlatformError> {
        let report = boot_chain(rom, images);
        if !report.secure_world_up() {
            return Ok(Self {
                report,
                monitor: None,
                secure: None,
            });
        }
        let (kernel, env) = Kernel::boot(config)?;
        let mut root = root_init(kernel, env, keys, Box::new(rng::from_env("key-management")))?;
        root.register_ta(digest_spec())?;
        root.register_ta(crypto_client_spec())?;
        root.register_ta(increment_spec())?;
        let mut monitor = Monitor::new(MonitorState::power_on(
            WorldContext::entry(World::Secure, SECURE_ENTRY, SECURE_STACK),
            Some(WorldContext::entry(World::Normal, NORMAL_ENTRY, NORMAL_STACK)),
        ));
        // Secure initialisation done: hand the CPU to the normal world.
        root.return_to_normal(&mut monitor, 0)?;
        root.take_trace();
        Ok(Self {
            report,
            monitor: Some(monitor),
            secure: Some(root),
        })
    }

    /// Images signed on the fly with the bundle's vendor key.
    pub fn boot_self_signed(keys: KeyBundle) -> Result<Self, PlatformError> {
        let images = ImageSet::build(&keys.signing_key())?;
        let rom = RomState::for_public_key(keys.public_der());
        Self::boot(&rom, &images, keys)
    }

    /// Boot from files. The ROM holds the hash of the key file's public key.
    pub fn boot_from_files(images_dir: &Path, keys_file: &Path) -> Result<Self, PlatformError> {
        let keys = KeyBundle::decode(&std::fs::read(keys_file)?)?;
        let images = ImageSet::load(images_dir)?;
        let rom = RomState::for_public_key(keys.public_der());
        Self::boot(&rom, &images, keys)
    }

    pub fn report(&self) -> &BootReport {
        &self.report
    }

    pub fn secure_world(&mut self) -> Option<&mut RootTask> {
        self.secure.as_mut()
    }

    pub fn monitor(&self) -> Option<&Monitor> {
        self.monitor.as_ref()
    }

    pub fn switch_counter(&self) -> u64 {
        self.monitor.as_ref().map_or(0, Monitor::switch_counter)
    }

    fn parts(&mut self) -> Result<(&mut Monitor, &mut RootTask), PlatformError> {
        match (self.monitor.as_mut(), self.secure.as_mut()) {
            (Some(m), Some(r)) if self.report.ree_available() => Ok((m, r)),
            (Some(_), Some(_)) => Err(PlatformError::ReeUnavailable),
            _ => Err(PlatformError::NotBooted),
        }
    }

    /// `MicroTEE_SMC(command_id, args)` from the normal world.
    pub fn smc(&mut self, command_id: u32, args: u32) -> Result<u32, PlatformError> {
        let (m, r) = self.parts()?;
        Ok(m.microtee_smc(r, command_id, args)?)
    }

    /// Like [`smc`](Self::smc); a payload is placed in shared memory and its
    /// handle passed as `args`.
    pub fn smc_invoke(
        &mut self,
        command_id: u32,
        args: u32,
        payload: Option<&[u8]>,
    ) -> Result<(u32, Option<Vec<u8>>), PlatformError> {
        let (m, r) = self.parts()?;
        match payload {
            None => Ok((m.microtee_smc(r, command_id, args)?, None)),
            Some(p) => {
                let h = m.shm.register(p.to_vec());
                let res = m.microtee_smc(r, command_id, h);
                let out = m.shm.release(h);
                Ok((res?, out))
            }
        }
    }
}
