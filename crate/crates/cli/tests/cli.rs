use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn micc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_micc")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &str = r#"{
    "image_size": 16, "scales": [4, 8], "patch_channels": 4,
    "d_model": 8, "heads": 2, "layers": 1, "ffn_width": 16, "max_len": 10,
    "proj_dim": 6, "proj_hidden": 10, "fusion_hidden": 5, "classifier_hidden": 7,
    "pretrain": {"learning_rate": 0.001, "batch_size": 8, "epochs": 2},
    "train": {"learning_rate": 0.001, "batch_size": 8, "epochs": 2}
}"#;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (pairs, rumor, cfg) = (d.join("pairs"), d.join("rumor"), d.join("cfg.json"));
    fs::write(&cfg, TINY).unwrap();

    let out = micc(&["gen-data", "--kind", "pairs", "--n", "24", "--seed", "1", "--out", s(&pairs), "--image-size", "16"]);
    assert_eq!(code(&out), 0, "{out:?}");
    let out = micc(&["gen-data", "--kind", "rumor", "--n", "30", "--seed", "2", "--out", s(&rumor), "--image-size", "16"]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert_eq!(fs::read_to_string(rumor.join("records.jsonl")).unwrap().lines().count(), 30);
    let out = micc(&["gen-data", "--kind", "rumor", "--n", "4", "--out", s(&d.join("r0")), "--max-claims", "0"]);
    assert_eq!(code(&out), 1, "{out:?}");

    let (stage1, stage2, log) = (d.join("s1.ckpt"), d.join("s2.ckpt"), d.join("train.csv"));
    let out = micc(&["pretrain", "--config", s(&cfg), "--data", s(&pairs), "--out", s(&stage1)]);
    assert_eq!(code(&out), 0, "{out:?}");
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("pretrain,")).count(), 6);
    assert!(text.lines().filter(|l| l.starts_with("pretrain,")).all(|l| l.split(',').count() == 4));

    let out = micc(&["train", "--init", s(&stage1), "--data", s(&rumor), "--out", s(&stage2), "--log", s(&log), "--seed", "5"]);
    assert_eq!(code(&out), 0, "{out:?}");
    let logged = fs::read_to_string(&log).unwrap();
    assert_eq!(logged, stdout(&out));
    assert!(logged.contains("# split train=24 validation=3 test=3"));
    assert_eq!(logged.lines().filter(|l| l.contains(",validation,")).count(), 2);

    let (align, fusion) = (d.join("align.csv"), d.join("fusion.csv"));
    let args = ["eval", "--ckpt", s(&stage2), "--data", s(&rumor), "--dump-alignment", s(&align), "--dump-fusion", s(&fusion)];
    let first = micc(&args);
    assert_eq!(code(&first), 0, "{first:?}");
    assert!(stdout(&first).starts_with("dataset,split,acc,prec,rec,f1,tp,tn,fp,fn\nrumor,test,"));
    assert_eq!(stdout(&micc(&args)), stdout(&first));
    assert!(fs::read_to_string(&align).unwrap().starts_with("id,scale,patch,score,selected\n"));
    assert!(fs::read_to_string(&fusion).unwrap().lines().count() > 1);

    let image = rumor.join("images/sample-00000.png");
    let out = micc(&["infer", "--ckpt", s(&stage2), "--text", "red circle", "--image", s(&image)]);
    assert_eq!(code(&out), 0, "{out:?}");
    let text = stdout(&out);
    let y: f64 = text.lines().next().unwrap().strip_prefix("y_hat,").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&y));
    // K = 2 at both scales
    assert_eq!(text.lines().skip(3).count(), 4);
    assert_eq!(stdout(&micc(&["infer", "--ckpt", s(&stage2), "--text", "red circle", "--image", s(&image)])), text);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (cfg, pairs, rumor) = (d.join("cfg.json"), d.join("pairs"), d.join("rumor"));
    fs::write(&cfg, TINY).unwrap();

    let out = micc(&["train", "--data", "x", "--out", "y", "--no-align-global", "--cosine-relevance"]);
    assert_eq!(code(&out), 1);
    assert_eq!(code(&micc(&["bogus"])), 1);
    assert_eq!(code(&micc(&["--help"])), 0);

    fs::write(d.join("bad.json"), r#"{"lambda": 3.0}"#).unwrap();
    let out = micc(&["pretrain", "--config", s(&d.join("bad.json")), "--data", "x", "--out", "y"]);
    assert_eq!(code(&out), 1);

    let out = micc(&["pretrain", "--config", s(&cfg), "--data", s(&d.join("missing")), "--out", s(&d.join("o"))]);
    assert_eq!(code(&out), 2);

    micc(&["gen-data", "--kind", "rumor", "--n", "10", "--out", s(&rumor), "--image-size", "16"]);
    let out = micc(&["pretrain", "--config", s(&cfg), "--data", s(&rumor), "--out", s(&d.join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("label"));

    fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&micc(&["eval", "--ckpt", s(&d.join("junk.ckpt")), "--data", s(&rumor)])), 2);

    micc(&["gen-data", "--kind", "pairs", "--n", "16", "--out", s(&pairs), "--image-size", "16"]);
    let out = micc(&["pretrain", "--config", s(&cfg), "--data", s(&pairs), "--out", s(&d.join("o")), "--lr", "1e300"]);
    assert_eq!(code(&out), 3, "{out:?}");
}

#[test]
fn gradcheck_command() {
    let out = micc(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{out:?}");
    let text = stdout(&out);
    assert!(text.lines().any(|l| l.starts_with("pass attention")));
    assert!(text.lines().any(|l| l.starts_with("pass end-to-end/full")));
    assert!(text.trim_end().ends_with("gradient checks passed"));
    assert_eq!(code(&micc(&["gradcheck", "--tolerance", "0"])), 3);
}
