use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "classes=6\nheldout_classes=3\nsamples_per_class=24\neval_seen_per_class=6\n\
points=32\nepochs=3\nwarmup_epochs=1\nbatch_size=8\n";

fn tamm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tamm"))
        .current_dir(dir)
        .env_remove("TAMM_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tamm(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    tamm(dir, args).status.code().unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.cfg"), SMALL).unwrap();
    ok(dir.path(), &["datagen", "--config", "s.cfg", "-o", "d.tamm"]);
    dir
}

#[test]
fn pipeline_and_reports() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["pretrain", "--stage", "1", "--data", "d.tamm", "--config", "s.cfg", "-o", "s1.ck"]);
    ok(d, &["pretrain", "--stage", "2", "--data", "d.tamm", "--config", "s.cfg", "--cia", "s1.ck", "-o", "s2.ck"]);
    let zs = ok(d, &["eval", "--task", "zeroshot", "--ckpt", "s2.ck", "--data", "d.tamm", "--mode", "all", "-k", "1,2", "--out", "zs.csv"]);
    assert_eq!(zs.lines().count(), 1 + 3 * 2, "{zs}");
    ok(d, &["eval", "--task", "linear", "--ckpt", "s2.ck", "--data", "d.tamm", "--out", "lin.csv"]);
    let fs = ok(d, &["eval", "--task", "fewshot", "--ckpt", "s2.ck", "--data", "d.tamm", "--ways", "2", "--shots", "1", "--trials", "2"]);
    assert!(fs.contains("fewshot_2way1shot_mean"), "{fs}");
    let rt = ok(d, &["eval", "--task", "retrieve", "--ckpt", "s2.ck", "--data", "d.tamm", "-k", "1", "--views", "2"]);
    assert!(rt.contains("text_to_point_p@1") && rt.contains("image_to_point_p@1"), "{rt}");
    let rep = ok(d, &["report", "zs.csv", "lin.csv", "s2.ck.metrics.csv"]);
    assert!(rep.contains("zeroshot_top2") && rep.contains("linear_probe_acc"), "{rep}");
    // Final epoch only.
    let epochs: Vec<&str> = rep
        .lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>())
        .filter(|c| c.len() == 5 && c[3] == "loss_text")
        .map(|c| c[2])
        .collect();
    assert_eq!(epochs, ["3"], "{rep}");
}

#[test]
fn resume_matches_uninterrupted() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["pretrain", "--stage", "1", "--data", "d.tamm", "--config", "s.cfg", "-o", "s1.ck"]);
    let stage2 = ["pretrain", "--stage", "2", "--data", "d.tamm", "--config", "s.cfg", "--cia", "s1.ck"];
    ok(d, &[&stage2[..], &["-o", "full.ck"]].concat());
    ok(d, &[&stage2[..], &["-o", "part.ck", "--max-steps", "5"]].concat());
    ok(d, &["pretrain", "--resume", "part.ck", "--data", "d.tamm", "-o", "part.ck", "--max-steps", "4"]);
    ok(d, &["pretrain", "--resume", "part.ck", "--data", "d.tamm", "-o", "part.ck"]);
    assert_eq!(std::fs::read(d.join("full.ck")).unwrap(), std::fs::read(d.join("part.ck")).unwrap());
    assert_eq!(
        std::fs::read_to_string(d.join("full.ck.metrics.csv")).unwrap(),
        std::fs::read_to_string(d.join("part.ck.metrics.csv")).unwrap()
    );
}

#[test]
fn exit_codes() {
    let dir = setup();
    let d = dir.path();
    // Unknown key.
    std::fs::write(d.join("bad.cfg"), "epochz=3\n").unwrap();
    assert_eq!(code(d, &["datagen", "--config", "bad.cfg", "-o", "x.tamm"]), 2);
    assert_eq!(code(d, &["datagen", "--set", "classes=abc", "-o", "x.tamm"]), 2);
    // Missing artifacts.
    assert_eq!(code(d, &["pretrain", "--stage", "1", "--data", "nope.tamm", "-o", "x.ck"]), 3);
    assert_eq!(code(d, &["pretrain", "--stage", "2", "--data", "d.tamm", "--config", "s.cfg", "-o", "x.ck"]), 3);
    assert_eq!(code(d, &["eval", "--task", "zeroshot", "--ckpt", "nope.ck", "--data", "d.tamm"]), 3);
    // Feature-dim mismatch.
    ok(d, &["datagen", "--config", "s.cfg", "--set", "feature_dim=32", "-o", "d32.tamm"]);
    ok(d, &["pretrain", "--stage", "1", "--data", "d.tamm", "--config", "s.cfg", "--epochs", "2", "-o", "s1.ck"]);
    let out = tamm(d, &["eval", "--task", "zeroshot", "--ckpt", "s1.ck", "--data", "d32.tamm"]);
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("64") && err.contains("32"), "{err}");
    // Corrupt file.
    std::fs::write(d.join("junk.ck"), b"TAMKgarbage").unwrap();
    assert_eq!(code(d, &["eval", "--task", "zeroshot", "--ckpt", "junk.ck", "--data", "d.tamm"]), 4);
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("s.cfg"), format!("{SMALL}seed=1\n")).unwrap();
    let run = |env: Option<&str>, extra: &[&str], out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_tamm"));
        c.current_dir(d).env_remove("TAMM_SEED");
        if let Some(s) = env {
            c.env("TAMM_SEED", s);
        }
        let o = c.args([&["datagen", "--config", "s.cfg", "-o", out][..], extra].concat()).output().unwrap();
        assert!(o.status.success());
        std::fs::read(d.join(out)).unwrap()
    };
    let file = run(None, &[], "a.tamm");
    let env = run(Some("2"), &[], "b.tamm");
    let flag = run(Some("2"), &["--seed", "1"], "c.tamm");
    assert_ne!(file, env);
    assert_eq!(file, flag);
}

#[test]
fn gradcheck_negative_control() {
    let d = std::env::temp_dir();
    let out = ok(&d, &["gradcheck"]);
    assert!(out.contains("all 14 ops"), "{out}");
    let bad = tamm(&d, &["gradcheck", "--corrupt", "gelu"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("gelu"));
    assert_eq!(code(&d, &["gradcheck", "--corrupt", "nonsense"]), 2);
}
