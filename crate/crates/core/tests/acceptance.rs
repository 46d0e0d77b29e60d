//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to the
//! real stdout (bypassing the test harness capture) and fails if its check or
//! its time budget is not met. Tests share a lock so timings never overlap.

mod common;

use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, RngCore};

use microtee::harness::bench::{
    bench_crypto_sizes, bench_ipc, bench_rsa, rsa_bench_key, run_suite, to_csv, BenchConfig, CryptoOp, Suite,
    CRYPTO_SIZES,
};
use microtee::harness::scenario::{builtin, run, SCENARIOS};
use microtee::harness::stats::{linear_fit, relative_linear_fit};
use microtee::harness::Platform;
use microtee::microkernel::{CPtr, Message, TcbRef};
use microtee::rng::seeded;
use microtee::root_task::{IGNORED, TA_FAULTED};
use microtee::runtime::{Action, Actor, UserMemory};
use microtee::secure_boot::{boot_chain, BootStatus, ImageSet, RomState, SignedImage, Stage};
use microtee::security_services::crypto::{
    aes_decrypt, aes_encrypt, parse_private_key, parse_public_key, rsa_sign, rsa_verify, sha256,
};
use microtee::security_services::seal::SealedBlob;
use microtee::security_services::{encode_aes, ServiceId, ServiceRequest, Status};
use microtee::trusted_apps::{TaEnv, TaSpec};

static SERIAL: Mutex<()> = Mutex::new(());

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn criterion(n: u32, name: &str, limit: Duration, body: impl FnOnce() -> Outcome) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    let (ok, detail) = match result {
        Ok(d) if elapsed <= limit => (true, d),
        Ok(d) => (false, format!("{d}; over time budget {limit:?}")),
        Err(e) => (false, e),
    };
    let verdict = if ok { "PASS" } else { "FAIL" };
    let line = format!("{verdict} [{n:>2}] {name}: {detail} ({elapsed:.2?})");
    let _ = writeln!(std::io::stdout(), "{line}");
    assert!(ok, "{line}");
}

fn platform() -> Platform {
    Platform::boot_self_signed(common::vendor_keys()).expect("boot")
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

#[test]
fn c01_increment_end_to_end() {
    criterion(1, "SMC(3, 0) through the increment TA", Duration::from_secs(1), || {
        let mut p = platform();
        let r = run(&mut p, &builtin("increment").unwrap()).map_err(|e| e.to_string())?;
        ensure(r.passed && r.lines == ["3 0 -> 1"], || format!("scenario lines {:?}", r.lines))?;
        let trace: Vec<_> = p
            .secure_world()
            .unwrap()
            .take_trace()
            .into_iter()
            .map(|e| (e.actor, e.action))
            .collect();
        let want = vec![
            (Actor::RootTask, Action::Send { label: 3, arg: Some(0) }),
            (Actor::Ta(3), Action::Recv { label: 3 }),
            (Actor::Ta(3), Action::Compute),
            (Actor::Ta(3), Action::Reply { label: 0 }),
            (Actor::RootTask, Action::Recv { label: 0 }),
        ];
        ensure(trace == want, || format!("trace {trace:?}"))?;

        let out = Command::new(env!("CARGO_BIN_EXE_microtee"))
            .args(["run", "--scenario", "increment"])
            .output()
            .map_err(|e| e.to_string())?;
        let stdout = String::from_utf8_lossy(&out.stdout);
        ensure(out.status.success() && stdout.trim() == "3 0 -> 1", || {
            format!("cli exit {:?}, stdout {stdout:?}", out.status.code())
        })?;
        Ok("result 1, five-step trace, cli prints \"3 0 -> 1\"".into())
    });
}

#[test]
fn c02_unknown_id_ignored() {
    criterion(2, "unknown command IDs", Duration::from_secs(1), || {
        let mut p = platform();
        let root = p.secure_world().unwrap();
        root.take_trace();
        let before = root.executor().total_invocations();
        for x in [0, 1, 7, 0xFFFF_FFFF] {
            let w = p.smc(99, x).map_err(|e| e.to_string())?;
            ensure(w == IGNORED, || format!("SMC(99, {x}) returned {w:#x}"))?;
        }
        let root = p.secure_world().unwrap();
        let after = root.executor().total_invocations();
        let ta_events = root
            .take_trace()
            .into_iter()
            .filter(|e| matches!(e.actor, Actor::Ta(_)))
            .count();
        ensure(after == before && ta_events == 0, || {
            format!("{} invocations, {ta_events} TA trace events", after - before)
        })?;
        Ok("IGNORED, 0 TA invocations".into())
    });
}

#[derive(Debug, Clone, Copy)]
enum Attack {
    ReadVirt(u32),
    WriteVirt(u32),
    CallSlot(CPtr),
    SendSlot(CPtr),
    Destroy,
    Suspend,
    Grant(CPtr),
}

const BREACHED: u32 = 0x0B4D_0B4D;

#[derive(Default)]
struct Target {
    tcb: Option<TcbRef>,
    attacks: Vec<Attack>,
}

#[test]
fn c03_isolation() {
    criterion(3, "isolation between TAs", Duration::from_secs(10), || {
        let mut root = common::root();
        let victim = root
            .register_ta(
                TaSpec::new("vault", |env: &mut TaEnv<'_, '_>, x: u32| {
                    let base = env.layout().data_base;
                    let cur = u32::from_le_bytes(env.ctx().read(base, 4)?.try_into().unwrap());
                    let next = cur.wrapping_add(x);
                    env.ctx().write(base, &next.to_le_bytes())?;
                    Ok(next)
                })
                .data_pages(2),
            )
            .unwrap();
        ensure(root.dispatch(victim, 5) == 5, || "victim setup failed".into())?;

        let target = Arc::new(Mutex::new(Target::default()));
        let t = target.clone();
        let attacker = root
            .register_ta(
                TaSpec::new("attacker", move |env: &mut TaEnv<'_, '_>, i: u32| {
                    let (tcb, attack) = {
                        let t = t.lock().unwrap();
                        (t.tcb.unwrap(), t.attacks[i as usize])
                    };
                    let ctx = env.ctx();
                    match attack {
                        Attack::ReadVirt(a) => drop(ctx.read(a, 4)?),
                        Attack::WriteVirt(a) => ctx.write(a, &[0xEE; 4])?,
                        Attack::CallSlot(c) => drop(ctx.call(c, Message::new(1, vec![0]))?),
                        Attack::SendSlot(c) => drop(ctx.send(c, &Message::new(1, vec![0]))?),
                        Attack::Destroy => ctx.destroy_ta(tcb)?,
                        Attack::Suspend => ctx.suspend(tcb)?,
                        Attack::Grant(c) => drop(ctx.grant(tcb, c)?),
                    }
                    // Anything but TA_FAULTED means the attempt went through.
                    Ok(BREACHED)
                })
                .data_pages(1),
            )
            .unwrap();

        let entry = root.registry().get(victim).unwrap().clone();
        let frames = root.kernel().frames_of(entry.tcb).unwrap();
        let victim_ep = entry.endpoint;
        let mut rng = seeded(3, "isolation");
        let mut attacks = Vec::new();
        for k in 0..100u32 {
            let in_data = entry.layout.data_base + rng.gen_range(0..entry.layout.data_len - 4);
            let (_, region) = frames[rng.gen_range(0..frames.len())];
            let phys = region.base + rng.gen_range(0..region.len - 4);
            let slot = CPtr(rng.gen_range(0..64));
            attacks.push(match k % 9 {
                0 => Attack::ReadVirt(in_data),
                1 => Attack::WriteVirt(in_data),
                2 => Attack::ReadVirt(phys),
                3 => Attack::WriteVirt(phys),
                4 => Attack::CallSlot(if k % 2 == 0 { victim_ep } else { slot }),
                5 => Attack::SendSlot(slot),
                6 => Attack::Destroy,
                7 => Attack::Suspend,
                _ => Attack::Grant(slot),
            });
        }
        {
            let mut t = target.lock().unwrap();
            t.tcb = Some(entry.tcb);
            t.attacks = attacks;
        }
        let mut blocked = 0;
        for i in 0..100u32 {
            let w = root.dispatch(attacker, i);
            let attack = target.lock().unwrap().attacks[i as usize];
            ensure(w == TA_FAULTED, || format!("attempt {i} ({attack:?}) returned {w:#x}"))?;
            blocked += 1;
            let rec = root.kernel().tcb(entry.tcb).map_err(|e| format!("victim gone: {e}"))?;
            ensure(!rec.is_faulted(), || format!("victim faulted after attempt {i}"))?;
        }
        // Control: the same probe on the attacker's own page must succeed.
        let own = root.registry().get(attacker).unwrap().layout.data_base;
        target.lock().unwrap().attacks.push(Attack::ReadVirt(own));
        ensure(root.dispatch(attacker, 100) == BREACHED, || "control probe did not run".into())?;
        ensure(root.dispatch(victim, 0) == 5, || "victim state changed".into())?;
        ensure(root.dispatch(victim, 1) == 6, || "victim stopped answering".into())?;
        Ok(format!("{blocked}/100 attempts faulted, victim unchanged"))
    });
}

#[test]
fn c04_switch_count() {
    criterion(4, "world switches per SMC", Duration::from_secs(1), || {
        let mut p = platform();
        let calls: [(u32, u32, Option<&[u8]>); 5] =
            [(3, 0, None), (99, 1, None), (0, 0, None), (1, 0, Some(b"abc")), (3, 0xFFFF_FFFF, None)];
        for i in 0..100 {
            let (cmd, args, payload) = calls[i % calls.len()];
            let before = p.switch_counter();
            p.smc_invoke(cmd, args, payload).map_err(|e| e.to_string())?;
            let d = p.switch_counter() - before;
            ensure(d == 4, || format!("SMC({cmd}, {args}) moved the counter by {d}"))?;
        }
        Ok("100 round trips, +4 each".into())
    });
}

#[test]
fn c05_ipc_ordering() {
    criterion(5, "IPC latency ordering", Duration::from_secs(10), || {
        let mut root = common::root();
        let (s0, r0) = bench_ipc(&mut root, 0, 16, 50).map_err(|e| e.to_string())?;
        let (s10, r10) = bench_ipc(&mut root, 10, 16, 50).map_err(|e| e.to_string())?;
        let detail = format!(
            "send {:.0} < {:.0} ns, reply {:.0} < {:.0} ns",
            s0.mean_ns, s10.mean_ns, r0.mean_ns, r10.mean_ns
        );
        ensure(s10.iterations == 16 && r10.iterations == 16, || "wrong iteration count".into())?;
        ensure(s10.mean_ns > s0.mean_ns && r10.mean_ns > r0.mean_ns, || detail.clone())?;
        Ok(detail)
    });
}

#[test]
fn c06_known_answers() {
    criterion(6, "crypto known-answer vectors", Duration::from_secs(5), || {
        let mut root = common::root();
        let c = root.create_client(100, 4096).unwrap();
        let mut service = |id: ServiceId, payload: Vec<u8>| {
            c.crypto
                .invoke(&mut root.port(c.tcb), &ServiceRequest::new(id, payload))
                .map_err(|e| e.to_string())
        };

        let empty = hex::decode("e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855").unwrap();
        let abc = hex::decode("ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad").unwrap();
        ensure(sha256(b"").to_vec() == empty && sha256(b"abc").to_vec() == abc, || "sha256".into())?;
        ensure(service(ServiceId::Sha256, b"abc".to_vec())? == abc, || "sha256 via service".into())?;

        let key = hex::decode("2b7e151628aed2a6abf7158809cf4f3c").unwrap();
        let iv: [u8; 16] = std::array::from_fn(|i| i as u8);
        let pt = hex::decode("6bc1bee22e409f96e93d7e117393172a").unwrap();
        // NIST block followed by the encrypted PKCS#7 padding block.
        let ct = hex::decode("7649abac8119b246cee98e9b12e9197d8964e0b149c10b7b682e6e39aaeb731c").unwrap();
        ensure(aes_encrypt(&key, &iv, &pt).unwrap() == ct, || "aes-cbc encrypt".into())?;
        ensure(aes_decrypt(&key, &iv, &ct).unwrap() == pt, || "aes-cbc decrypt".into())?;
        ensure(service(ServiceId::AesEnc, encode_aes(&key, &iv, &pt))? == ct, || "aes via service".into())?;
        ensure(service(ServiceId::AesDec, encode_aes(&key, &iv, &ct))? == pt, || "aes dec via service".into())?;

        let sk = parse_private_key(common::KAT_PRIV).unwrap();
        let pk = parse_public_key(common::KAT_PUB).unwrap();
        ensure(rsa_sign(&sk, common::KAT_MSG).unwrap() == common::KAT_SIG, || "rsa signature".into())?;
        ensure(rsa_verify(&pk, common::KAT_MSG, common::KAT_SIG), || "rsa verify".into())?;
        let sig = service(
            ServiceId::RsaSign,
            microtee::security_services::encode_rsa_sign(common::KAT_PRIV, common::KAT_MSG),
        )?;
        ensure(sig == common::KAT_SIG, || "rsa via service".into())?;
        Ok("SHA-256 x2, AES-CBC #1, RSA-2048 vector match".into())
    });
}

#[test]
fn c07_rsa_scaling() {
    criterion(7, "RSA 2048/1024 time ratios", Duration::from_secs(60), || {
        let mut root = common::root();
        let k1 = rsa_bench_key(1024).map_err(|e| e.to_string())?;
        let k2 = rsa_bench_key(2048).map_err(|e| e.to_string())?;
        let mut m = |op, k| bench_rsa(&mut root, op, k, 32, 5).map(|r| r.mean_ns).map_err(|e| e.to_string());
        let s1 = m(CryptoOp::RsaSign, &k1)?;
        let s2 = m(CryptoOp::RsaSign, &k2)?;
        let v1 = m(CryptoOp::RsaVerify, &k1)?;
        let v2 = m(CryptoOp::RsaVerify, &k2)?;
        let (sign, verify) = (s2 / s1, v2 / v1);
        let detail = format!("sign {sign:.2}x, verify {verify:.2}x over 32 calls");
        ensure((3.0..=9.0).contains(&sign) && (2.0..=6.0).contains(&verify), || detail.clone())?;
        Ok(detail)
    });
}

#[test]
fn c08_fixed_overhead_fit() {
    criterion(8, "AES/SHA time linear in size", Duration::from_secs(120), || {
        let mut root = common::root();
        let xs: Vec<f64> = CRYPTO_SIZES.iter().map(|&s| s as f64).collect();
        let mut parts = Vec::new();
        let mut failed = false;
        for op in [CryptoOp::AesEnc, CryptoOp::AesDec, CryptoOp::Sha256] {
            let recs = bench_crypto_sizes(&mut root, op, &CRYPTO_SIZES, 16, 25).map_err(|e| e.to_string())?;
            let ys: Vec<f64> = recs.iter().map(|r| r.mean_ns).collect();
            let fit = relative_linear_fit(&xs, &ys).ok_or("degenerate fit")?;
            let ols = linear_fit(&xs, &ys).ok_or("degenerate fit")?;
            failed |= !(fit.r_squared >= 0.95 && fit.intercept > 0.0);
            parts.push(format!(
                "{} a={:.0}ns b={:.3}ns/B R2={:.4} (OLS a={:.0} R2={:.4})",
                op.name(),
                fit.intercept,
                fit.slope,
                fit.r_squared,
                ols.intercept,
                ols.r_squared
            ));
        }
        let detail = parts.join("; ");
        ensure(!failed, || detail.clone())?;
        Ok(detail)
    });
}

fn field_ranges(img: &[u8]) -> Vec<(&'static str, std::ops::Range<usize>)> {
    let parsed = SignedImage::parse(img).unwrap();
    let l = parsed.payload.len();
    let p = parsed.pubkey.len();
    let mut out = vec![
        ("magic", 0..4),
        ("tag", 4..5),
        ("length", 5..9),
        ("payload", 9..9 + l),
        ("pubkey_len", 9 + l..11 + l),
    ];
    if p > 0 {
        out.push(("pubkey", 11 + l..11 + l + p));
    }
    out.push(("signature", 11 + l + p..img.len()));
    out
}

#[test]
fn c09_boot_tamper() {
    criterion(9, "secure-boot tamper detection", Duration::from_secs(30), || {
        let keys = common::vendor_keys();
        let rom = RomState::for_public_key(keys.public_der());
        let images = ImageSet::build(&keys.signing_key()).unwrap();
        let clean = boot_chain(&rom, &images);
        ensure(
            clean.status == BootStatus::Booted
                && clean.stages.len() == 5
                && clean.stages.iter().all(|(_, v)| v.is_ok()),
            || format!("clean chain: {clean}"),
        )?;
        let mut rng = seeded(9, "boot-tamper");
        let mut flips = 0;
        for round in 0..25 {
            for (si, stage) in Stage::CHAIN.into_iter().enumerate() {
                let fields = field_ranges(images.get(stage));
                let (fname, range) = fields[(round + si) % fields.len()].clone();
                let byte = rng.gen_range(range);
                let bit = rng.gen_range(0..8);
                let mut t = images.clone();
                t.get_mut(stage)[byte] ^= 1 << bit;
                let r = boot_chain(&rom, &t);
                let ok = match r.status {
                    BootStatus::HaltedAt(h) => {
                        Stage::CHAIN.iter().position(|s| *s == h).unwrap() <= si
                    }
                    BootStatus::Booted => false,
                };
                ensure(ok, || format!("{stage:?} {fname} byte {byte} bit {bit}: {r}"))?;
                flips += 1;
            }
        }
        Ok(format!("{flips}/{flips} flips halted at or before the tampered stage; clean chain BOOTED"))
    });
}

#[test]
fn c10_key_confinement() {
    criterion(10, "platform keys never leave key management", Duration::from_secs(30), || {
        let keys = common::vendor_keys();
        let secrets = keys.secret_fingerprints();
        let mut p = Platform::boot_self_signed(keys).map_err(|e| e.to_string())?;
        let hits = Arc::new(AtomicU64::new(0));
        let responses = Arc::new(AtomicU64::new(0));
        {
            let (hits, responses, secrets) = (hits.clone(), responses.clone(), secrets.clone());
            p.secure_world().unwrap().executor_mut().set_response_tap(Some(Box::new(move |bytes: &[u8]| {
                responses.fetch_add(1, Ordering::Relaxed);
                if secrets.iter().any(|s| contains(bytes, s)) {
                    hits.fetch_add(1, Ordering::Relaxed);
                }
            })));
        }
        let mut texts: Vec<String> = Vec::new();
        let mut blobs: Vec<Vec<u8>> = Vec::new();
        for name in SCENARIOS {
            let r = run(&mut p, &builtin(name).unwrap()).map_err(|e| e.to_string())?;
            texts.extend(r.lines);
        }
        for payload in [&b"abc"[..], &[0u8; 300], b"attestation"] {
            let (_, out) = p.smc_invoke(2, 0, Some(payload)).map_err(|e| e.to_string())?;
            blobs.extend(out);
        }
        let cfg = BenchConfig {
            rounds: 1,
            switch_iters: 4,
            crypto_iters: 1,
            crypto_rounds: 1,
            rsa_iters: 1,
            rsa_rounds: 1,
            ..BenchConfig::default()
        };
        for suite in [Suite::Ipc, Suite::Switch, Suite::Crypto] {
            let recs = run_suite(&mut p, suite, &cfg).map_err(|e| e.to_string())?;
            texts.push(to_csv(&recs));
        }

        // Error paths: bad unseal requests, failing TAs, unbooted platform.
        let root = p.secure_world().unwrap();
        let c = root.create_client(100, 8192).unwrap();
        for blob in &blobs {
            let mut bad = blob.clone();
            bad[20] ^= 4;
            let req = ServiceRequest::new(ServiceId::Unseal, bad);
            match c.key_mgmt.invoke(&mut root.port(c.tcb), &req) {
                Err(e) => texts.push(e.to_string()),
                Ok(_) => return Err("tampered blob unsealed".into()),
            }
            let req = ServiceRequest::new(ServiceId::Seal, blob.clone());
            blobs_push(&mut texts, c.key_mgmt.invoke(&mut root.port(c.tcb), &req));
        }
        for id in [ServiceId::Attest, ServiceId::GetAttestPubkey] {
            let req = ServiceRequest::new(id, b"claims".to_vec());
            blobs_push(&mut texts, c.key_mgmt.invoke(&mut root.port(c.tcb), &req));
        }
        let req = ServiceRequest { service_id: 0x99, payload: vec![1] };
        blobs_push(&mut texts, c.key_mgmt.invoke(&mut root.port(c.tcb), &req));
        texts.extend(root.register_ta(microtee::trusted_apps::increment_spec()).err().map(|e| e.to_string()));
        texts.extend(root.executor().log_lines().iter().cloned());
        let mut unbooted = Platform::boot(
            &RomState::new([0; 32]),
            &ImageSet::build(&common::vendor_keys().signing_key()).unwrap(),
            common::vendor_keys(),
        )
        .unwrap();
        texts.extend(unbooted.smc(3, 0).err().map(|e| e.to_string()));
        texts.push(unbooted.report().to_string());

        let mut leaks = hits.load(Ordering::Relaxed);
        for b in &blobs {
            leaks += secrets.iter().filter(|s| contains(b, s)).count() as u64;
        }
        for t in &texts {
            let bytes = t.as_bytes();
            leaks += secrets
                .iter()
                .filter(|s| contains(bytes, s) || contains(bytes, hex::encode(s).as_bytes()))
                .count() as u64;
        }
        let scanned = format!(
            "{} service responses, {} sealed blobs, {} log/error/output texts",
            responses.load(Ordering::Relaxed),
            blobs.len(),
            texts.len()
        );
        ensure(leaks == 0, || format!("{leaks} occurrences of key material in {scanned}"))?;
        ensure(responses.load(Ordering::Relaxed) > 0, || "tap saw no responses".into())?;
        Ok(format!("0 occurrences in {scanned}"))
    });
}

fn blobs_push(texts: &mut Vec<String>, r: Result<Vec<u8>, impl std::fmt::Display>) {
    match r {
        Ok(bytes) => texts.push(hex::encode(bytes)),
        Err(e) => texts.push(e.to_string()),
    }
}

#[test]
fn c11_seal_and_attest() {
    criterion(11, "seal/unseal and attestation", Duration::from_secs(60), || {
        let mut root = common::root();
        let c = root.create_client(100, 8192).unwrap();
        let mut km = |id: ServiceId, payload: Vec<u8>| {
            c.key_mgmt
                .request(&mut root.port(c.tcb), &ServiceRequest::new(id, payload))
                .map_err(|e| e.to_string())
        };
        let mut rng = seeded(11, "seal-payloads");
        for i in 0..1000 {
            let mut data = vec![0u8; rng.gen_range(1..=2048)];
            rng.fill_bytes(&mut data);
            let blob = km(ServiceId::Seal, data.clone())?;
            ensure(blob.status == Status::Ok, || format!("seal {i}: {:?}", blob.status))?;
            let back = km(ServiceId::Unseal, blob.payload)?;
            ensure(back.status == Status::Ok && back.payload == data, || format!("roundtrip {i}"))?;
        }

        let sealed = km(ServiceId::Seal, vec![0x42; 64])?.payload;
        ensure(sealed.len() == SealedBlob::sealed_len(64), || "unexpected blob size".into())?;
        let mut flips = 0;
        for bit in 0..sealed.len() * 8 {
            let mut bad = sealed.clone();
            bad[bit / 8] ^= 1 << (bit % 8);
            let r = km(ServiceId::Unseal, bad)?;
            ensure(r.status == Status::IntegrityFail && r.payload.is_empty(), || {
                format!("flip of bit {bit}: {:?}", r.status)
            })?;
            flips += 1;
        }

        let pk_der = km(ServiceId::GetAttestPubkey, Vec::new())?.payload;
        let pk = parse_public_key(&pk_der).map_err(|e| e.to_string())?;
        let claims = b"ta=3;measurement=0011223344556677".to_vec();
        let sig = km(ServiceId::Attest, claims.clone())?.payload;
        ensure(rsa_verify(&pk, &claims, &sig), || "attestation does not verify".into())?;
        for i in 0..claims.len() {
            let mut t = claims.clone();
            t[i] ^= 0x01;
            ensure(!rsa_verify(&pk, &t, &sig), || format!("tampered claim byte {i} verified"))?;
        }
        Ok(format!("1000 roundtrips, {flips}/{flips} flips INTEGRITY_FAIL, attestation verifies"))
    });
}
