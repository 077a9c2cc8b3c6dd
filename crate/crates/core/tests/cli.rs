use std::path::Path;
use std::process::{Command, Output};

use drnet::pipeline::{read_image, synth_clean, write_image};

fn drnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drnet")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = drnet(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn init_fuse_restore_inspect_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, fused) = (dir.path().join("m.ckpt"), dir.path().join("f.ckpt"));
    let (input, output) = (dir.path().join("in.ppm"), dir.path().join("out.ppm"));
    write_image(&input, &synth_clean(1, 24, 40)).unwrap();

    assert!(ok(&["init", "--seed", "3", "--out", s(&ckpt)]).contains("initialized"));
    ok(&["fuse", "--ckpt", s(&ckpt), "--task", "derain", "--out", s(&fused)]);
    ok(&["restore", "--ckpt", s(&fused), "--input", s(&input), "--output", s(&output)]);
    assert_eq!(read_image(&output).unwrap().shape(), &[3, 24, 40]);

    let seq = dir.path().join("seq.ppm");
    ok(&["restore", "--ckpt", s(&ckpt), "--input", s(&input), "--output", s(&seq), "--tasks", "derain"]);
    assert_eq!(std::fs::read(&seq).unwrap(), std::fs::read(&output).unwrap());

    let info = ok(&["inspect", "--ckpt", s(&fused)]);
    assert!(info.contains("fused:derain"));
    let info = ok(&["inspect", "--ckpt", s(&ckpt), "--similarity", "--bank", "2"]);
    assert!(info.contains("mode            train") && info.contains("blind"));

    let metrics = ok(&["metrics", "--ref", s(&input), "--test", s(&input)]);
    assert!(metrics.contains("psnr 99.0000") && metrics.contains("ssim 1.000000"));
}

#[test]
fn train_writes_a_new_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ok(&["init", "--out", s(&a)]);
    let log = ok(&["train", "--ckpt", s(&a), "--tasks", "denoise,blind", "--steps", "3", "--log-every", "1", "--out", s(&b)]);
    assert_eq!(log.lines().filter(|l| l.starts_with("step")).count(), 3);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, fused) = (dir.path().join("m.ckpt"), dir.path().join("f.ckpt"));
    let image = dir.path().join("in.ppm");
    write_image(&image, &synth_clean(2, 8, 8)).unwrap();
    ok(&["init", "--out", s(&ckpt)]);
    ok(&["fuse", "--ckpt", s(&ckpt), "--task", "dehaze", "--out", s(&fused)]);
    let code = |args: &[&str]| drnet(args).status.code();

    assert_eq!(code(&["fuse", "--ckpt", s(&ckpt), "--task", "sharpen", "--out", s(&fused)]), Some(2));
    assert_eq!(code(&["restore", "--ckpt", s(&ckpt), "--input", s(&image), "--output", s(&image)]), Some(2));
    assert_eq!(code(&["bench"]), Some(2));
    assert_eq!(code(&["fuse", "--ckpt", s(&fused), "--task", "denoise", "--out", s(&fused)]), Some(3));

    let mut bytes = std::fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 5] ^= 0x40;
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, &bytes).unwrap();
    let out = drnet(&["inspect", "--ckpt", s(&bad)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
