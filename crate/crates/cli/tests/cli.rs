use std::process::Command;

const CEMU: &str = env!("CARGO_BIN_EXE_cemu");

fn help(sub: &str) -> String {
    let out = Command::new(CEMU).args([sub, "--help"]).output().unwrap();
    assert!(out.status.success());
    String::from_utf8(out.stdout).unwrap().to_lowercase()
}

#[test]
fn worker_takes_no_emulation_flags() {
    let text = help("worker");
    assert!(text.contains("--config"));
    for word in ["emulat", "inject", "delay"] {
        assert!(!text.contains(word), "worker help mentions {word}:\n{text}");
    }
}

#[test]
fn unknown_profile_is_an_error() {
    let out = Command::new(CEMU)
        .args([
            "worker",
            "--config",
            "/nonexistent.toml",
            "--rank",
            "0",
            "--profile",
            "huge",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn whatif_rejects_negative_delays() {
    let out = Command::new(CEMU)
        .args(["whatif", "--delays-ms=-1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("≥ 0"));
}
