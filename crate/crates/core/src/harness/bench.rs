//! Benchmark suites: IPC leg latency, SMC round trip and crypto throughput.
//!
//! Every figure is a mean over `iterations` calls. Each measurement is
//! repeated for a few rounds and the fastest round is kept, which filters
//! out host scheduling noise without changing what a single call costs.

use std::fmt;
use std::time::Instant;

use crate::microkernel::{KernelError, Message, PAGE_SIZE};
use crate::rng;
use crate::root_task::{ClientHandle, RootTask};
use crate::security_services::crypto::{aes_encrypt, rsa_sign};
use crate::security_services::keys::KeyBundle;
use crate::security_services::{encode_aes, CryptoError, encode_rsa_sign, encode_rsa_verify, ServiceId, ServiceRequest};

use super::{Platform, PlatformError};

pub const CSV_HEADER: &str = "suite,param,iterations,mean_ns,context_switches";
pub const IPC_ITERS: u32 = 16;
pub const IPC_WORDS: [usize; 2] = [0, 10];
pub const CRYPTO_SIZES: [usize; 6] = [1024, 4096, 16 * 1024, 64 * 1024, 256 * 1024, 1024 * 1024];
pub const RSA_BITS: [usize; 2] = [1024, 2048];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Ipc,
    Switch,
    Crypto,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Ipc => "ipc",
            Suite::Switch => "switch",
            Suite::Crypto => "crypto",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub suite: Suite,
    /// e.g. `send_10w`, `aes_enc_4096`, `rsa_sign_2048`.
    pub param: String,
    /// Message words, data bytes or key bits, depending on the suite.
    pub size: u64,
    pub iterations: u32,
    pub mean_ns: f64,
    /// Thread switches (ipc, crypto) or monitor save/restore events
    /// (switch) per call.
    pub context_switches: u64,
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.1},{}",
            self.suite, self.param, self.iterations, self.mean_ns, self.context_switches
        )
    }
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Published figures for the original hardware, for side-by-side plots.
pub fn reference_ns(suite: Suite, param: &str) -> Option<f64> {
    let v = match (suite, param) {
        (Suite::Ipc, "send_0w") => 295.8,
        (Suite::Ipc, "reply_0w") => 307.6,
        (Suite::Ipc, "send_10w") => 862.1,
        (Suite::Ipc, "reply_10w") => 853.8,
        (Suite::Switch, "smc_round_trip") => 2_002_000.0,
        (Suite::Crypto, "rsa_sign_1024") => 13_851_400.0,
        (Suite::Crypto, "rsa_verify_1024") => 777_600.0,
        (Suite::Crypto, "rsa_sign_2048") => 63_821_600.0,
        (Suite::Crypto, "rsa_verify_2048") => 2_482_800.0,
        _ => return None,
    };
    Some(v)
}

/// `suite,param,paper_ref_ns` for every record with a published value.
pub fn reference_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from("suite,param,paper_ref_ns\n");
    for r in records {
        if let Some(v) = reference_ns(r.suite, &r.param) {
            out.push_str(&format!("{},{},{:.1}\n", r.suite, r.param, v));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub rounds: u32,
    pub ipc_iters: u32,
    pub switch_iters: u32,
    pub crypto_sizes: Vec<usize>,
    pub crypto_iters: u32,
    pub crypto_rounds: u32,
    pub rsa_iters: u32,
    pub rsa_rounds: u32,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            ipc_iters: IPC_ITERS,
            switch_iters: 64,
            crypto_sizes: CRYPTO_SIZES.to_vec(),
            crypto_iters: 16,
            crypto_rounds: 25,
            rsa_iters: 32,
            rsa_rounds: 5,
        }
    }
}

/// Fastest per-call mean over `rounds` rounds of `iters` calls.
fn best_mean<E>(rounds: u32, iters: u32, mut f: impl FnMut() -> Result<u64, E>) -> Result<f64, E> {
    let mut best = f64::INFINITY;
    for _ in 0..rounds.max(1) {
        let mut total = 0u64;
        for _ in 0..iters.max(1) {
            total += f()?;
        }
        best = best.min(total as f64 / iters.max(1) as f64);
    }
    Ok(best)
}

fn timed<E>(f: impl FnOnce() -> Result<(), E>) -> Result<u64, E> {
    let t = Instant::now();
    f()?;
    Ok(t.elapsed().as_nanos() as u64)
}

/// Send leg (client to service) and reply leg (service to client) of one
/// IPC round trip, timed separately. Only payload words vary; the label is
/// always present.
pub fn bench_ipc(
    root: &mut RootTask,
    words: usize,
    iters: u32,
    rounds: u32,
) -> Result<(BenchRecord, BenchRecord), PlatformError> {
    let client = root.create_client(100, PAGE_SIZE)?;
    let svc = root.crypto_service();
    let request = Message::new(ServiceId::Sha256 as u32, vec![0x5a5a_5a5a; words]);
    let reply = Message::new(0, vec![0xa5a5_a5a5; words]);
    let k = root.executor_mut().kernel_mut();
    let before = k.stats().transfers;
    let mut send = f64::INFINITY;
    let mut back = f64::INFINITY;
    for _ in 0..rounds.max(1) {
        let (mut s_total, mut r_total) = (0u64, 0u64);
        for _ in 0..iters {
            s_total += timed(|| {
                k.ipc_call(client.tcb, client.crypto.endpoint, &request)?;
                k.take_message(svc.tcb).ok_or(KernelError::NoReplyTarget)?;
                Ok::<_, KernelError>(())
            })?;
            r_total += timed(|| {
                k.ipc_reply(svc.tcb, &reply)?;
                k.take_message(client.tcb).ok_or(KernelError::NoReplyTarget)?;
                Ok::<_, KernelError>(())
            })?;
            k.ipc_recv(svc.tcb, svc.own_endpoint)?;
        }
        send = send.min(s_total as f64 / iters as f64);
        back = back.min(r_total as f64 / iters as f64);
    }
    let calls = rounds.max(1) as u64 * iters as u64;
    let per_leg = (k.stats().transfers - before) / (2 * calls).max(1);
    root.destroy_client(client)?;
    let rec = |leg: &str, mean_ns| BenchRecord {
        suite: Suite::Ipc,
        param: format!("{leg}_{words}w"),
        size: words as u64,
        iterations: iters,
        mean_ns,
        context_switches: per_leg,
    };
    Ok((rec("send", send), rec("reply", back)))
}

/// Full `MicroTEE_SMC` call and return through the increment TA.
pub fn bench_switch(platform: &mut Platform, iters: u32, rounds: u32) -> Result<BenchRecord, PlatformError> {
    let before = platform.switch_counter();
    let mut calls = 0u64;
    let mean = best_mean(rounds, iters, || {
        calls += 1;
        timed(|| platform.smc(3, 7).map(|_| ()))
    })?;
    let per_call = (platform.switch_counter() - before) / calls.max(1);
    Ok(BenchRecord {
        suite: Suite::Switch,
        param: "smc_round_trip".into(),
        size: 0,
        iterations: iters,
        mean_ns: mean,
        context_switches: per_call,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CryptoOp {
    AesEnc,
    AesDec,
    Sha256,
    RsaSign,
    RsaVerify,
}

impl CryptoOp {
    pub fn name(self) -> &'static str {
        match self {
            CryptoOp::AesEnc => "aes_enc",
            CryptoOp::AesDec => "aes_dec",
            CryptoOp::Sha256 => "sha256",
            CryptoOp::RsaSign => "rsa_sign",
            CryptoOp::RsaVerify => "rsa_verify",
        }
    }
}

/// A client with a buffer large enough for the biggest crypto request.
pub fn crypto_client(root: &mut RootTask, max_size: usize) -> Result<ClientHandle, PlatformError> {
    let bytes = (max_size + 2 * PAGE_SIZE as usize) as u32;
    Ok(root.create_client(100, bytes)?)
}

fn run_request(
    root: &mut RootTask,
    client: &ClientHandle,
    req: &ServiceRequest,
    rounds: u32,
    iters: u32,
) -> Result<(f64, u64), PlatformError> {
    let before = root.kernel().stats().transfers;
    let mut calls = 0u64;
    let svc = client.crypto;
    let mean = best_mean(rounds, iters, || {
        calls += 1;
        let mut port = root.port(client.tcb);
        timed(|| svc.invoke(&mut port, req).map(|_| ()).map_err(PlatformError::from))
    })?;
    let per_call = (root.kernel().stats().transfers - before) / calls.max(1);
    Ok((mean, per_call))
}

/// AES or SHA-256 over each size in `sizes`.
pub fn bench_crypto_sizes(
    root: &mut RootTask,
    op: CryptoOp,
    sizes: &[usize],
    iters: u32,
    rounds: u32,
) -> Result<Vec<BenchRecord>, PlatformError> {
    let max = sizes.iter().copied().max().unwrap_or(0) + 64;
    let client = crypto_client(root, max)?;
    let key = [0x2bu8; 16];
    let iv = [0x01u8; 16];
    let mut out = Vec::new();
    for &size in sizes {
        let data: Vec<u8> = (0..size).map(|i| i as u8).collect();
        let req = match op {
            CryptoOp::AesEnc => ServiceRequest::new(ServiceId::AesEnc, encode_aes(&key, &iv, &data)),
            CryptoOp::AesDec => {
                let ct = aes_encrypt(&key, &iv, &data)?;
                ServiceRequest::new(ServiceId::AesDec, encode_aes(&key, &iv, &ct))
            }
            CryptoOp::Sha256 => ServiceRequest::new(ServiceId::Sha256, data),
            CryptoOp::RsaSign | CryptoOp::RsaVerify => return Err(CryptoError::BadRequest.into()),
        };
        let (mean, switches) = run_request(root, &client, &req, rounds, iters)?;
        out.push(BenchRecord {
            suite: Suite::Crypto,
            param: format!("{}_{size}", op.name()),
            size: size as u64,
            iterations: iters,
            mean_ns: mean,
            context_switches: switches,
        });
    }
    root.destroy_client(client)?;
    Ok(out)
}

/// Key pair used for RSA benchmarks (never a platform key).
pub fn rsa_bench_key(bits: usize) -> Result<KeyBundle, PlatformError> {
    let seed = rng::seed_from_env().unwrap_or(0x6d74_6565);
    Ok(KeyBundle::generate(&mut rng::seeded(seed, &format!("bench-rsa-{bits}")), bits)?)
}

pub fn bench_rsa(
    root: &mut RootTask,
    op: CryptoOp,
    keys: &KeyBundle,
    iters: u32,
    rounds: u32,
) -> Result<BenchRecord, PlatformError> {
    use rsa::pkcs8::EncodePrivateKey;
    use rsa::traits::PublicKeyParts;

    let sk = keys.signing_key();
    let bits = sk.size() * 8;
    let der = sk.to_pkcs8_der().map_err(|_| CryptoError::BadKey)?.as_bytes().to_vec();
    let data = b"attestation claims: nonce=0123456789abcdef".to_vec();
    let req = match op {
        CryptoOp::RsaSign => ServiceRequest::new(ServiceId::RsaSign, encode_rsa_sign(&der, &data)),
        CryptoOp::RsaVerify => {
            let sig = rsa_sign(&sk, &data)?;
            ServiceRequest::new(ServiceId::RsaVerify, encode_rsa_verify(keys.public_der(), &sig, &data))
        }
        _ => return Err(CryptoError::BadRequest.into()),
    };
    let client = crypto_client(root, 4096)?;
    let r = run_request(root, &client, &req, rounds, iters);
    root.destroy_client(client)?;
    let (mean, switches) = r?;
    Ok(BenchRecord {
        suite: Suite::Crypto,
        param: format!("{}_{bits}", op.name()),
        size: bits as u64,
        iterations: iters,
        mean_ns: mean,
        context_switches: switches,
    })
}

pub fn run_suite(platform: &mut Platform, suite: Suite, cfg: &BenchConfig) -> Result<Vec<BenchRecord>, PlatformError> {
    let mut out = Vec::new();
    match suite {
        Suite::Ipc => {
            let root = platform.secure_world().ok_or(PlatformError::NotBooted)?;
            for w in IPC_WORDS {
                let (s, r) = bench_ipc(root, w, cfg.ipc_iters, cfg.rounds)?;
                out.push(s);
                out.push(r);
            }
        }
        Suite::Switch => out.push(bench_switch(platform, cfg.switch_iters, cfg.rounds.min(8))?),
        Suite::Crypto => {
            let root = platform.secure_world().ok_or(PlatformError::NotBooted)?;
            for op in [CryptoOp::AesEnc, CryptoOp::AesDec, CryptoOp::Sha256] {
                out.extend(bench_crypto_sizes(root, op, &cfg.crypto_sizes, cfg.crypto_iters, cfg.crypto_rounds)?);
            }
            for bits in RSA_BITS {
                let keys = rsa_bench_key(bits)?;
                for op in [CryptoOp::RsaSign, CryptoOp::RsaVerify] {
                    out.push(bench_rsa(root, op, &keys, cfg.rsa_iters, cfg.rsa_rounds)?);
                }
            }
        }
    }
    Ok(out)
}
