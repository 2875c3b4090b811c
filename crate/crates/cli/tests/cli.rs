use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapid_core::testkit::{synthesize, write_pcap, Host};
use tapid_core::MacAddr;

const TARGET: Ipv4Addr = Ipv4Addr::new(192, 0, 2, 7);

fn tapid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tapid"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn three_hosts(dir: &Path) -> PathBuf {
    let path = dir.join("three_hosts.pcap");
    let hosts = [Host::v4(1), Host::v4(2), Host::v4(3)];
    write_pcap(
        &path,
        &synthesize(100, 1_000_000_000, 1500, |i| hosts[i % 3]),
        65_535,
    )
    .unwrap();
    path
}

fn target_mix(dir: &Path) -> PathBuf {
    let path = dir.join("mix.pcap");
    let target = Host {
        mac: MacAddr([0x02, 0, 0, 0, 0, 0x77]),
        ip: Some(TARGET.into()),
    };
    let other = Host::v4(9);
    write_pcap(
        &path,
        &synthesize(1_000, 1_000_000_000, 1500, |i| {
            if i % 4 == 0 {
                target
            } else {
                other
            }
        }),
        65_535,
    )
    .unwrap();
    path
}

fn logged_run(dir: &Path) -> PathBuf {
    let pcap = target_mix(dir);
    let log = dir.join("audit.log");
    let out = tapid(&[
        "run",
        "--replay",
        pcap.to_str().unwrap(),
        "--plugin",
        "known_ip",
        "--param",
        "known_address=192.0.2.7",
        "--log",
        "--now",
        "2015-06-01 12:00",
        "--audit-out",
        log.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out), "matched=250 total=1000 address=192.0.2.7\n");
    log
}

#[test]
fn source_listing_prints_one_line_per_sender() {
    let dir = tempfile::tempdir().unwrap();
    let pcap = three_hosts(dir.path());
    let out = tapid(&[
        "run",
        "--replay",
        pcap.to_str().unwrap(),
        "--plugin",
        "source_addr",
        "--no-log",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 3);
}

#[test]
fn run_subcommand_may_be_omitted() {
    let dir = tempfile::tempdir().unwrap();
    let pcap = three_hosts(dir.path());
    let p = pcap.to_str().unwrap();
    let short = tapid(&["--replay", p, "--plugin", "source_addr", "--no-log"]);
    let long = tapid(&["run", "--replay", p, "--plugin", "source_addr", "--no-log"]);
    assert!(short.status.success(), "{}", stderr(&short));
    assert_eq!(short.stdout, long.stdout);
}

#[test]
fn repeated_runs_print_identical_output() {
    let dir = tempfile::tempdir().unwrap();
    let pcap = three_hosts(dir.path());
    let args = [
        "run",
        "--replay",
        pcap.to_str().unwrap(),
        "--plugin",
        "source_addr",
        "--no-log",
    ];
    let first = tapid(&args);
    let second = tapid(&args);
    assert!(first.status.success());
    assert_eq!(first.stdout, second.stdout);
}

#[test]
fn params_file_is_read_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let pcap = target_mix(dir.path());
    let params = dir.path().join("params.toml");
    std::fs::write(&params, "known_address = \"198.51.100.1\"\n").unwrap();
    let base = [
        "run",
        "--replay",
        pcap.to_str().unwrap(),
        "--plugin",
        "known_ip",
        "--no-log",
    ];

    let out = tapid(&[&base[..], &["--params-file", params.to_str().unwrap()]].concat());
    assert_eq!(stdout(&out), "matched=0 total=1000 address=198.51.100.1\n");
    let out = tapid(
        &[
            &base[..],
            &[
                "--params-file",
                params.to_str().unwrap(),
                "--param",
                "known_address=192.0.2.7",
            ],
        ]
        .concat(),
    );
    assert_eq!(stdout(&out), "matched=250 total=1000 address=192.0.2.7\n");
}

#[test]
fn logged_run_verifies_and_alteration_is_located() {
    let dir = tempfile::tempdir().unwrap();
    let log = logged_run(dir.path());

    let out = tapid(&["verify", log.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout(&out), "Intact\n");

    let export = tapid(&["export", log.to_str().unwrap()]);
    assert!(export.status.success());
    assert!(stdout(&export).contains("matched=250"));

    let text = std::fs::read_to_string(&log).unwrap();
    std::fs::write(&log, text.replacen("matched=250", "matched=251", 1)).unwrap();
    let out = tapid(&["verify", log.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).starts_with("BrokenAt("), "{}", stdout(&out));
}

#[test]
fn irrelevant_result_is_not_printed() {
    let dir = tempfile::tempdir().unwrap();
    let pcap = target_mix(dir.path());
    let log = dir.path().join("a.log");
    let out = tapid(&[
        "run",
        "--replay",
        pcap.to_str().unwrap(),
        "--plugin",
        "source_addr",
        "--log",
        "--now",
        "2015-06-01 12:00",
        "--audit-out",
        log.to_str().unwrap(),
        "--relevance",
        "irrelevant",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.contains("DestructionRecorded"));
    assert_eq!(
        stdout(&tapid(&["verify", log.to_str().unwrap()])),
        "Intact\n"
    );
}

#[test]
fn failures_exit_with_documented_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.pcap");
    let out = tapid(&[
        "run",
        "--replay",
        missing.to_str().unwrap(),
        "--plugin",
        "source_addr",
        "--no-log",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(out.stdout.is_empty());
    assert_eq!(stderr(&out).lines().count(), 1);

    let pcap = three_hosts(dir.path());
    let p = pcap.to_str().unwrap();
    // Logging without a time anchor.
    let out = tapid(&["run", "--replay", p, "--plugin", "source_addr", "--log"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("MissingTimeAnchor"));
    // Unknown plugin, missing parameter, bad snap length.
    assert_eq!(
        tapid(&["run", "--replay", p, "--plugin", "nope", "--no-log"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        tapid(&["run", "--replay", p, "--plugin", "known_ip", "--no-log"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        tapid(&[
            "run",
            "--replay",
            p,
            "--plugin",
            "source_addr",
            "--no-log",
            "--snap",
            "10"
        ])
        .status
        .code(),
        Some(2)
    );
    // Neither --log nor --no-log.
    assert_eq!(
        tapid(&["run", "--replay", p, "--plugin", "source_addr"])
            .status
            .code(),
        Some(2)
    );

    let not_pcap = dir.path().join("notes.txt");
    std::fs::write(&not_pcap, "hello, this is not a capture file").unwrap();
    let out = tapid(&[
        "run",
        "--replay",
        not_pcap.to_str().unwrap(),
        "--plugin",
        "source_addr",
        "--no-log",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("BadFileMagic"));

    let out = tapid(&["verify", dir.path().join("none.log").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn existing_audit_file_is_not_overwritten() {
    let dir = tempfile::tempdir().unwrap();
    let pcap = three_hosts(dir.path());
    let log = dir.path().join("taken.log");
    std::fs::write(&log, "keep me\n").unwrap();
    let out = tapid(&[
        "run",
        "--replay",
        pcap.to_str().unwrap(),
        "--plugin",
        "source_addr",
        "--log",
        "--now",
        "2015-06-01 12:00",
        "--audit-out",
        log.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(std::fs::read_to_string(&log).unwrap(), "keep me\n");
}

#[test]
fn lossless_experiment_receives_everything() {
    let out = tapid(&["tap-experiment", "--sent", "10000", "--trials", "2"]);
    assert!(out.status.success());
    assert_eq!(
        stdout(&out),
        "10,000 10,000\n10,000 10,000\nmean 10,000 10,000.0\n"
    );
}

#[test]
fn seeded_experiment_is_reproducible() {
    let args = [
        "tap-experiment",
        "--sent",
        "10000",
        "--trials",
        "5",
        "--exchange-loss",
        "1e-4",
        "--seed",
        "11",
    ];
    let first = tapid(&args);
    assert!(first.status.success());
    assert_eq!(first.stdout, tapid(&args).stdout);
    let text = stdout(&first);
    let received: Vec<u64> = text
        .lines()
        .take(5)
        .map(|l| {
            l.split_whitespace()
                .nth(1)
                .unwrap()
                .replace(',', "")
                .parse()
                .unwrap()
        })
        .collect();
    assert_eq!(received, vec![9_998, 10_000, 9_999, 9_999, 9_999], "{text}");
    assert_eq!(text.lines().last(), Some("mean 10,000 9,999.0"));

    // Same numbers from the generator directly: two legs per exchange, each
    // lost with 1 - sqrt(1 - 1e-4).
    let p = 1.0 - (1.0f64 - 1e-4).sqrt();
    let expect: Vec<u64> = (11..16)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10_000)
                .filter(|_| {
                    let legs: [f64; 2] = [rng.random(), rng.random()];
                    legs.iter().all(|x| *x >= p)
                })
                .count() as u64
        })
        .collect();
    assert_eq!(received, expect);
}

#[test]
fn zero_sent_prints_zero() {
    let out = tapid(&[
        "tap-experiment",
        "--sent",
        "0",
        "--trials",
        "1",
        "--exchange-loss",
        "1e-4",
    ]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).lines().next(), Some("0 0"));
}

#[test]
fn help_documents_exit_codes() {
    let out = tapid(&["run", "--help"]);
    assert!(stdout(&out).contains("Exit codes"));
}

#[test]
fn interrupt_stops_the_run_and_prints_partial_result() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("slow.pcap");
    // One frame every 100 ms, so a paced replay takes 100 s.
    let target = Host {
        mac: MacAddr([0x02, 0, 0, 0, 0, 0x77]),
        ip: Some(TARGET.into()),
    };
    write_pcap(
        &path,
        &synthesize(1_000, 100_000_000_000, 200, |_| target),
        65_535,
    )
    .unwrap();
    let child = Command::new(env!("CARGO_BIN_EXE_tapid"))
        .args([
            "run",
            "--replay",
            path.to_str().unwrap(),
            "--plugin",
            "known_ip",
        ])
        .args([
            "--param",
            "known_address=192.0.2.7",
            "--no-log",
            "--realtime",
        ])
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    std::thread::sleep(std::time::Duration::from_millis(800));
    let status = Command::new("kill")
        .args(["-INT", &child.id().to_string()])
        .status()
        .unwrap();
    assert!(status.success());
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let line = stdout(&out);
    let total: u64 = line
        .split_whitespace()
        .find_map(|f| f.strip_prefix("total="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((1..1_000).contains(&total), "{line}");
    assert!(line.starts_with(&format!("matched={total} total={total} ")));
}
