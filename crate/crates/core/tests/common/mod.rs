#![allow(dead_code)]

use microtee::microkernel::{Kernel, KernelConfig};
use microtee::root_task::{root_init, RootTask};
use microtee::rng::seeded;
use microtee::security_services::keys::KeyBundle;

pub fn keys(bits: usize) -> KeyBundle {
    KeyBundle::generate(&mut seeded(7, "test-keys"), bits).unwrap()
}

pub fn root_with(bundle: KeyBundle) -> RootTask {
    let (k, env) = Kernel::boot(KernelConfig::default()).unwrap();
    root_init(k, env, bundle, Box::new(seeded(8, "test-seal"))).unwrap()
}

pub fn root() -> RootTask {
    root_with(keys(1024))
}

pub const KAT_PRIV: &[u8] = include_bytes!("../data/rsa2048_kat_priv.der");
pub const KAT_PUB: &[u8] = include_bytes!("../data/rsa2048_kat_pub.der");
pub const KAT_MSG: &[u8] = include_bytes!("../data/rsa2048_kat_msg.bin");
pub const KAT_SIG: &[u8] = include_bytes!("../data/rsa2048_kat_sig.bin");

/// Vendor bundle around the frozen 2048-bit test key.
pub fn vendor_keys() -> KeyBundle {
    KeyBundle::from_parts(*b"test-root-key-16", KAT_PRIV.to_vec()).unwrap()
}
