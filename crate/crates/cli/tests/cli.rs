use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maskvid::trainer::TrainConfig;
use tempfile::TempDir;

fn maskvid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskvid"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.batch_size = 4;
    c.pairs_per_epoch = 8;
    c.epochs = 4;
    c.warmup_epochs = 1;
    c.decoder.width = 32;
    c.checkpoint_every = 4;
    c
}

fn gen(dir: &Path, seed: &str, sequences: &str) -> PathBuf {
    let out = dir.join(format!("data{seed}"));
    let o = maskvid(&["gen-data", "--seed", seed, "--sequences", sequences, "--frames", "5", "--size", "32", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_layout_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let a = gen(tmp.path(), "3", "4");
    let dirs: Vec<_> = fs::read_dir(&a).unwrap().collect();
    assert_eq!(dirs.len(), 4);
    assert!(a.join("seq0000/00004.ppm").is_file());
    assert!(a.join("seq0000/labels/00004.pgm").is_file());

    let b = tmp.path().join("again");
    let o = maskvid(&["gen-data", "--seed", "3", "--sequences", "4", "--frames", "5", "--size", "32", "--out", s(&b)]);
    assert_eq!(code(&o), 0);
    assert_eq!(tree(&a), tree(&b));

    let o = maskvid(&["gen-data", "--seed", "3", "--sequences", "4", "--frames", "5", "--size", "32", "--out", s(&b)]);
    assert_eq!(code(&o), 2, "refuses to overwrite");
    let o = maskvid(&["gen-data", "--seed", "3", "--sequences", "4", "--frames", "5", "--size", "32", "--out", s(&b), "--force"]);
    assert_eq!(code(&o), 0);

    let o = maskvid(&["gen-data", "--size", "36", "--out", s(&tmp.path().join("bad"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn pretrain_outputs_and_errors() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), "1", "3");
    let cfg_path = tmp.path().join("run.cfg");
    let text = tiny_config().to_text();
    fs::write(&cfg_path, &text).unwrap();

    let out = tmp.path().join("run");
    let o = maskvid(&["pretrain", "--config", s(&cfg_path), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,l_online,l_target,l_consistency,l_total,lr");
    assert_eq!(lines.len(), 1 + 8);
    assert!(lines[8].starts_with("8,"));
    assert!(out.join("final.vmc").is_file());
    assert!(out.join("ckpt_000004.vmc").is_file());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"].as_str().unwrap(), text);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 40);
    assert_eq!(manifest["end_step"], 8);

    // fixed seed: identical CSV on a second run
    let again = tmp.path().join("again");
    let o = maskvid(&["pretrain", "--config", s(&cfg_path), "--data", s(&data), "--out", s(&again)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(again.join("loss.csv")).unwrap(), csv);

    // resume from step 4 reproduces rows 5..8
    let resumed = tmp.path().join("resumed");
    let o = maskvid(&[
        "pretrain", "--config", s(&cfg_path), "--data", s(&data), "--out", s(&resumed),
        "--resume", s(&out.join("ckpt_000004.vmc")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let tail: Vec<String> = fs::read_to_string(resumed.join("loss.csv")).unwrap().lines().skip(1).map(String::from).collect();
    assert_eq!(tail, lines[5..].iter().map(|l| l.to_string()).collect::<Vec<_>>());
    assert_eq!(fs::read(resumed.join("final.vmc")).unwrap(), fs::read(out.join("final.vmc")).unwrap());

    let o = maskvid(&["pretrain", "--config", s(&cfg_path), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(code(&o), 2, "existing output");

    let broken = tmp.path().join("broken.cfg");
    fs::write(&broken, text.replace("gamma = 1\n", "")).unwrap();
    let o = maskvid(&["pretrain", "--config", s(&broken), "--data", s(&data), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gamma"), "{}", stderr(&o));

    let o = maskvid(&["pretrain", "--config", s(&cfg_path), "--data", s(&tmp.path().join("nope")), "--out", s(&tmp.path().join("y"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn reconstruct_and_eval() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), "2", "2");
    let cfg_path = tmp.path().join("run.cfg");
    let mut cfg = tiny_config();
    cfg.epochs = 2;
    cfg.warmup_epochs = 0;
    cfg.checkpoint_every = 0;
    fs::write(&cfg_path, cfg.to_text()).unwrap();
    let run = tmp.path().join("run");
    let o = maskvid(&["pretrain", "--config", s(&cfg_path), "--data", s(&data), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = run.join("final.vmc");
    let f1 = data.join("seq0000/00000.ppm");
    let f2 = data.join("seq0000/00001.ppm");

    let rec = |out: &Path, ratio: &str| {
        maskvid(&[
            "reconstruct", "--ckpt", s(&ckpt), "--pair", s(&f1), s(&f2), "--ratio", ratio, "--seed", "5", "--out", s(out),
        ])
    };
    assert_eq!(code(&rec(&tmp.path().join("r1"), "1.0")), 2);

    let zero = tmp.path().join("r0");
    assert_eq!(code(&rec(&zero, "0")), 0);
    assert_eq!(fs::read(zero.join("frame1_recon.ppm")).unwrap(), fs::read(&f1).unwrap());
    assert_eq!(fs::read(zero.join("frame2_recon.ppm")).unwrap(), fs::read(&f2).unwrap());

    let a = tmp.path().join("ra");
    let b = tmp.path().join("rb");
    assert_eq!(code(&rec(&a, "0.6")), 0);
    assert_eq!(code(&rec(&b, "0.6")), 0);
    assert_eq!(tree(&a), tree(&b));
    let dump = fs::read_to_string(a.join("mask.txt")).unwrap();
    let masked = dump.lines().skip(1).flat_map(|l| l.chars()).filter(|&c| c == '0').count();
    assert_eq!(masked, (0.6f64 * 16.0).floor() as usize);
    assert_ne!(fs::read(a.join("frame1_recon.ppm")).unwrap(), fs::read(&f1).unwrap());

    let e1 = tmp.path().join("eval1.jsonl");
    let e2 = tmp.path().join("eval2.jsonl");
    let o = maskvid(&["eval", "--random-init", "--data", s(&data), "--out", s(&e1)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = maskvid(&["eval", "--random-init", "--data", s(&data), "--out", s(&e2)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(&e1).unwrap(), fs::read(&e2).unwrap());
    let text = fs::read_to_string(&e1).unwrap();
    let records: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2 + 1);
    assert_eq!(records[0]["name"], "seq0000");
    assert!(records[0]["mean_iou"].as_f64().unwrap() <= 1.0);
    assert_eq!(records[2]["summary"], true);
    assert_eq!(code(&maskvid(&["eval", "--random-init", "--data", s(&data), "--out", s(&e1)])), 2);

    let o = maskvid(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&tmp.path().join("e3.jsonl"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}
