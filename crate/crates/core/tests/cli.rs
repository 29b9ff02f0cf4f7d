//! End-to-end runs of the binary on a small synthetic idx dataset.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_keyguard");

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Class `c` is a bright bar at row `2c+4` plus deterministic noise.
fn write_idx(dir: &Path, prefix: &str, n: usize, offset: usize) {
    let mut images = Vec::new();
    for v in [0x0803u32, n as u32, 28, 28] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    let mut labels = Vec::new();
    for v in [0x0801u32, n as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    for i in 0..n {
        let c = (i + offset) % 10;
        labels.push(c as u8);
        for p in 0..784 {
            let row = p / 28;
            let noise = ((p * 31 + (i + offset) * 17) % 23) as u8;
            images.push(if row == 2 * c + 4 || row == 2 * c + 5 { 230 } else { noise });
        }
    }
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
}

#[test]
fn flops_csv_and_markdown() {
    let dir = tempfile::tempdir().unwrap();
    let csv = stdout(&run(&["flops", "--model", "lenet5", "--degree", "2"], dir.path()));
    assert!(csv.starts_with("# flops"));
    assert!(csv.trim_end().ends_with("total,lenet5,,416520,18912,12922,448354,7.6429"));
    let md = stdout(&run(&["flops", "--format", "markdown"], dir.path()));
    assert!(md.contains("| lenet5 | 416520 | 18912 | 12922 | 448354 | 7.64% |"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["flops", "--model", "vgg99"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
    fs::write(dir.path().join("bad.cfg"), "[train]\nkey = 2x^2+3x+5<6\nwarmup = 3\n").unwrap();
    let o = run(&["train", "--config", "bad.cfg", "--out", "m.ckpt", "--data", "."], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warmup"));
    assert_eq!(run(&["no-such-command"], dir.path()).status.code(), Some(2));
}

#[test]
fn train_attack_transfer_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_idx(d, "train", 400, 0);
    write_idx(d, "t10k", 60, 3);
    let train_cfg = |key: &str, seed: u64| {
        format!(
            "[train]\nkey = {key}\nseed = {seed}\nepochs = 1\nbatch_size = 50\noptimizer = adam\nlr = 0.001\ninit_samples = 100\nlambda = 1\n"
        )
    };
    fs::write(d.join("a.cfg"), train_cfg("2x^2+3x+5<6", 1)).unwrap();
    fs::write(d.join("b.cfg"), train_cfg("0.1x^2-x+2<3", 2)).unwrap();
    fs::write(
        d.join("attacks.cfg"),
        "[attack]\nattack = fgsm\neps = 0.1\n\n[attack]\nattack = pgd\neps = 0.1\nsteps = 3\n",
    )
    .unwrap();

    for (cfg, out) in [("a.cfg", "a.ckpt"), ("b.cfg", "b.ckpt")] {
        let summary = stdout(&run(&["train", "--config", cfg, "--out", out, "--data", "."], d));
        assert!(summary.starts_with("model,key,seed,lambda,accuracy,clean_fpr,fingerprint\nlenet5,"));
        assert!(d.join(out).exists());
    }

    let attack = stdout(&run(
        &["attack", "--model", "a.ckpt", "--config", "attacks.cfg", "--out", "adv.bin", "--data", ".", "--subset", "20"],
        d,
    ));
    let fields: Vec<&str> = attack.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(fields[0..2], ["fgsm eps=0.1", "20"]);
    assert!((fields[4].parse::<f64>().unwrap() - 0.1).abs() < 1e-6);

    let csv = stdout(&run(
        &[
            "transfer", "--source", "a.ckpt", "--target", "b.ckpt", "--config", "attacks.cfg", "--data", ".", "--subset",
            "40", "--markdown", "table.md",
        ],
        d,
    ));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "attack,params,s_acc,t_acc,delta_acc,t_det,l2,linf");
    assert_eq!(lines.len(), 4, "{csv}");
    assert!(lines[1].starts_with("clean,"));
    assert!(lines[2].starts_with("fgsm,"));
    assert!(lines[3].starts_with("pgd,"));
    assert!(fs::read_to_string(d.join("table.md")).unwrap().contains("Δ_Acc"));

    fs::write(d.join("rows.csv"), &csv).unwrap();
    let md = stdout(&run(&["report", "--in", "rows.csv"], d));
    assert_eq!(md.lines().count(), 2 + 3);
    let round = stdout(&run(&["report", "--in", "rows.csv", "--format", "csv"], d));
    assert_eq!(round, csv);
}
