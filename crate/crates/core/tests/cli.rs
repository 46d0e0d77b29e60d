use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use microtee::harness::bench::CSV_HEADER;
use microtee::secure_boot::{ImageSet, RomState, Stage};
use microtee::security_services::keys::KeyBundle;

fn microtee(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_microtee"))
        .args(args)
        .env_remove("MICROTEE_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Provision keys and sign all five images through the CLI.
fn provision(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let keys = dir.join("keys.bin");
    let o = microtee(&["provision-keys", "--out", p(&keys), "--seed", "5"]);
    assert!(o.status.success(), "{o:?}");
    let images = dir.join("images");
    fs::create_dir(&images).unwrap();
    for stage in Stage::CHAIN {
        let src = dir.join(format!("{}.bin", stage.name()));
        fs::write(&src, format!("{} payload", stage.name())).unwrap();
        let out = images.join(stage.file_name());
        let o = microtee(&[
            "sign-image",
            "--stage",
            stage.name(),
            "--in",
            p(&src),
            "--out",
            p(&out),
            "--keys",
            p(&keys),
        ]);
        assert!(o.status.success(), "{o:?}");
    }
    (keys, images)
}

#[test]
fn run_increment_prints_result() {
    let o = microtee(&["run", "--scenario", "increment"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "3 0 -> 1\n");
}

#[test]
fn run_is_deterministic() {
    for name in ["wraparound", "crypto", "unknown"] {
        let a = microtee(&["run", "--scenario", name]);
        let b = microtee(&["run", "--scenario", name]);
        assert_eq!(a.status.code(), Some(0), "{name}");
        assert_eq!(stdout(&a), stdout(&b));
    }
    assert_eq!(stdout(&microtee(&["run", "--scenario", "unknown"])), "99 0 -> IGNORED\n");
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        &["run", "--scenario", "nope"][..],
        &["bench", "--suite", "gpu", "--csv", "x.csv"],
        &["frobnicate"],
        &["run"],
    ] {
        let o = microtee(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn signed_images_boot_and_tampered_bl1_halts() {
    let dir = tempfile::tempdir().unwrap();
    let (keys, images) = provision(dir.path());

    // Files produced by the CLI match what the library would build.
    let bundle = KeyBundle::decode(&fs::read(&keys).unwrap()).unwrap();
    let set = ImageSet::load(&images).unwrap();
    let rom = RomState::for_public_key(bundle.public_der());
    assert!(microtee::secure_boot::boot_chain(&rom, &set).ree_available());

    let o = microtee(&["boot", "--images", p(&images), "--keys", p(&keys)]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert!(stdout(&o).trim_end().ends_with("BOOTED"));

    let o = microtee(&["run", "--scenario", "crypto", "--images", p(&images), "--keys", p(&keys)]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");

    let bl1 = images.join(Stage::Bl1.file_name());
    let mut bytes = fs::read(&bl1).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x10;
    fs::write(&bl1, bytes).unwrap();
    let o = microtee(&["boot", "--images", p(&images), "--keys", p(&keys)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("HALTED_AT(BL1)"), "{}", stdout(&o));
}

#[test]
fn tampered_mobile_os_keeps_secure_world_but_run_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (keys, images) = provision(dir.path());
    let os = images.join(Stage::MobileOs.file_name());
    let mut bytes = fs::read(&os).unwrap();
    bytes[12] ^= 1;
    fs::write(&os, bytes).unwrap();
    let o = microtee(&["boot", "--images", p(&images), "--keys", p(&keys)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("HALTED_AT(MOBILE_OS)"));
    let o = microtee(&["run", "--scenario", "increment", "--images", p(&images), "--keys", p(&keys)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn provision_keys_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(microtee(&["provision-keys", "--out", p(&a), "--seed", "9"]).status.success());
    assert!(microtee(&["provision-keys", "--out", p(&b), "--seed", "9"]).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(KeyBundle::decode(&fs::read(&a).unwrap()).is_ok());
}

#[test]
fn bench_ipc_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("out.csv");
    let o = microtee(&["bench", "--suite", "ipc", "--csv", p(&csv)]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], CSV_HEADER);
    let params: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(params, ["send_0w", "reply_0w", "send_10w", "reply_10w"]);
    for l in &lines[1..] {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols.len(), 5);
        assert_eq!(cols[0], "ipc");
        assert_eq!(cols[2], "16");
        assert!(cols[3].parse::<f64>().unwrap() >= 0.0);
    }
    let refs = fs::read_to_string(dir.path().join("out.csv.ref.csv")).unwrap();
    assert!(refs.contains("ipc,send_0w,295.8"));
}

#[test]
fn bench_switch_counts_four() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("s.csv");
    let o = microtee(&["bench", "--suite", "switch", "--csv", p(&csv)]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let text = fs::read_to_string(&csv).unwrap();
    let row = text.lines().nth(1).unwrap();
    assert!(row.starts_with("switch,"));
    assert!(row.ends_with(",4"), "{row}");
}
