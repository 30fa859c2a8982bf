use std::path::Path;
use std::process::{Command, Output};

use moe_lens_core::report::parse_p6;

fn moe_lens(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moe-lens"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = moe_lens(args, cwd);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Body lines of a CSV artifact, provenance comments stripped.
fn csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn synth_model(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "synth",
        "--seed",
        "3",
        "--layers",
        "2",
        "--experts",
        "4",
        "--d-hid",
        "12",
        "--d-mid",
        "16",
        "--vocab",
        "30",
        "--out",
        "m",
    ];
    args.extend(extra);
    ok(&args, dir);
}

#[test]
fn unknown_subcommand_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(moe_lens(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(
        moe_lens(&["matrix-sim", "--bogus"], dir.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn synth_requires_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = moe_lens(&["synth", "--out", "m"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
    assert!(!dir.path().join("m/model.moel").exists());
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "synth", "--mode", "upcycled", "--noise", "0.3", "--seed", "7", "--d-hid", "8", "--d-mid",
        "8", "--out", "a",
    ];
    let first = ok(&args, dir.path());
    let second = ok(&args, dir.path());
    assert_eq!(first, second);
    assert!(first.contains("model.moel\tsha256:"));
    assert!(first.contains("reference.moel\tsha256:"));
    let other = ok(
        &[
            "synth", "--mode", "upcycled", "--noise", "0.3", "--seed", "8", "--d-hid", "8",
            "--d-mid", "8", "--out", "b",
        ],
        dir.path(),
    );
    assert_ne!(
        first.lines().next().unwrap().split('\t').nth(1),
        other.lines().next().unwrap().split('\t').nth(1)
    );
}

#[test]
fn invalid_synth_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = moe_lens(
        &[
            "synth",
            "--seed",
            "1",
            "--experts",
            "4",
            "--top-k",
            "5",
            "--out",
            "m",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let out = moe_lens(
        &[
            "synth",
            "--seed",
            "1",
            "--layers",
            "3",
            "--experts",
            "4,4",
            "--out",
            "m",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let out = moe_lens(
        &["synth", "--seed", "1", "--noise", "0.5", "--out", "m"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn matrix_sim_shape_and_format() {
    let dir = tempfile::tempdir().unwrap();
    synth_model(dir.path(), &[]);
    ok(
        &[
            "matrix-sim",
            "--model",
            "m/model.moel",
            "--layer",
            "0",
            "--which",
            "act",
            "--out",
            "o",
        ],
        dir.path(),
    );
    let rows = csv(&dir.path().join("o/matrix_sim_L0_act.csv"));
    assert_eq!(rows[0], vec!["", "0", "1", "2", "3"]);
    assert_eq!(rows.len(), 5);
    for (i, row) in rows[1..].iter().enumerate() {
        assert_eq!(row[0], i.to_string());
        assert_eq!(row[i + 1], "1.000000");
        for v in &row[1..] {
            let (int, frac) = v.split_once('.').unwrap();
            assert_eq!(frac.len(), 6);
            assert!(int
                .trim_start_matches('-')
                .chars()
                .all(|c| c.is_ascii_digit()));
        }
    }
    let ppm = std::fs::read(dir.path().join("o/matrix_sim_L0_act.ppm")).unwrap();
    let (w, h, _) = parse_p6(&ppm).unwrap();
    assert_eq!((w, h), (64, 64));
    let text = std::fs::read_to_string(dir.path().join("o/matrix_sim_L0_act.csv")).unwrap();
    assert!(text.contains("# checkpoint: sha256:"));
    assert!(text.contains("# command: moe-lens matrix-sim"));
    let range =
        std::fs::read_to_string(dir.path().join("o/matrix_sim_L0_act.ppm.range.txt")).unwrap();
    assert!(range.contains("min -1.000000") && range.contains("max 1.000000"));
}

#[test]
fn gate_corr_average_row_matches_layers() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &[
            "synth",
            "--seed",
            "5",
            "--layers",
            "3",
            "--experts",
            "6",
            "--d-hid",
            "10",
            "--d-mid",
            "12",
            "--out",
            "m",
        ],
        dir.path(),
    );
    ok(
        &[
            "gate-corr",
            "--model",
            "m/model.moel",
            "--which",
            "act",
            "--out",
            "o",
        ],
        dir.path(),
    );
    let rows = csv(&dir.path().join("o/gate_corr_act.csv"));
    assert_eq!(rows[0], vec!["layer", "R", "R2"]);
    assert_eq!(rows.len(), 5);
    let mut r2 = Vec::new();
    for (i, row) in rows[1..4].iter().enumerate() {
        assert_eq!(row[0], i.to_string());
        let r: f64 = row[1].parse().unwrap();
        let sq: f64 = row[2].parse().unwrap();
        assert!((r * r - sq).abs() < 2e-6);
        r2.push(sq);
    }
    assert_eq!(rows[4][0], "R2_avg");
    assert_eq!(rows[4][1], "");
    let avg: f64 = rows[4][2].parse().unwrap();
    assert!((avg - r2.iter().sum::<f64>() / 3.0).abs() < 2e-6);
    let pairs = csv(&dir.path().join("o/gate_corr_pairs_L0_act.csv"));
    assert_eq!(pairs.len(), 1 + 15);
}

#[test]
fn gate_from_act_gives_unit_correlation() {
    let dir = tempfile::tempdir().unwrap();
    synth_model(dir.path(), &["--gate-from-act"]);
    ok(
        &[
            "gate-corr",
            "--model",
            "m/model.moel",
            "--which",
            "act",
            "--out",
            "o",
        ],
        dir.path(),
    );
    let rows = csv(&dir.path().join("o/gate_corr_act.csv"));
    assert_eq!(rows[1][1], "1.000000");
    assert_eq!(rows[2][1], "1.000000");
}

#[test]
fn dense_layer_needs_reference() {
    let dir = tempfile::tempdir().unwrap();
    synth_model(dir.path(), &["--experts", "4,1"]);
    let out = moe_lens(
        &[
            "matrix-sim",
            "--model",
            "m/model.moel",
            "--layer",
            "1",
            "--out",
            "o",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    // `all` skips the dense layer
    ok(
        &["matrix-sim", "--model", "m/model.moel", "--out", "o"],
        dir.path(),
    );
    assert!(dir.path().join("o/matrix_sim_L0_up.csv").exists());
    assert!(!dir.path().join("o/matrix_sim_L1_up.csv").exists());
}

#[test]
fn reference_appended_as_f() {
    let dir = tempfile::tempdir().unwrap();
    synth_model(dir.path(), &["--mode", "upcycled"]);
    ok(
        &[
            "neuron-avg-sim",
            "--model",
            "m/model.moel",
            "--ref",
            "m/reference.moel",
            "--which",
            "up",
            "--out",
            "o",
        ],
        dir.path(),
    );
    let rows = csv(&dir.path().join("o/neuron_avg_sim_L1_up.csv"));
    assert_eq!(rows[0].last().unwrap(), "F");
    // zero noise: every expert is the base FFN
    assert!(rows[1..]
        .iter()
        .all(|r| r[1..].iter().all(|v| v == "1.000000")));
    let summary = csv(&dir.path().join("o/neuron_avg_sim_summary.csv"));
    assert_eq!(summary[0], vec!["layer", "which", "S_ee", "S_ef"]);
    assert_eq!(summary[1][3], "1.000000");
}

#[test]
fn dynamic_commands_on_corpus() {
    let dir = tempfile::tempdir().unwrap();
    synth_model(dir.path(), &["--shared", "1"]);
    std::fs::write(dir.path().join("c.txt"), "0 1 2\n29 7\n").unwrap();
    let with = |cmd: &str| {
        ok(
            &[
                cmd,
                "--model",
                "m/model.moel",
                "--corpus",
                "c.txt",
                "--out",
                "o",
            ],
            dir.path(),
        )
    };
    with("out-sim");
    let rows = csv(&dir.path().join("o/out_sim_T0_L0.csv"));
    assert_eq!(rows[0].len(), 1 + 4 + 1);
    assert_eq!(rows[0].iter().filter(|l| l.ends_with('*')).count(), 2);
    assert_eq!(rows[0].last().unwrap(), "SE0");
    assert!(dir.path().join("o/out_sim_T4_L1.ppm").exists());

    with("route-log");
    let log = csv(&dir.path().join("o/route_log.csv"));
    assert_eq!(log.len(), 1 + 5 * 2 * 2);

    with("norm-rank");
    let nr = csv(&dir.path().join("o/norm_rank.csv"));
    let total: u64 = nr[1..]
        .iter()
        .flat_map(|r| r[1..].iter())
        .map(|v| v.parse::<u64>().unwrap())
        .sum();
    assert_eq!(total, 5 * 2 * 4);

    ok(
        &[
            "act-ratio",
            "--model",
            "m/model.moel",
            "--corpus",
            "c.txt",
            "--threshold",
            "0",
            "--out",
            "o",
        ],
        dir.path(),
    );
    let ar = csv(&dir.path().join("o/act_ratio.csv"));
    assert_eq!(ar.last().unwrap()[0], "all");

    with("avg-out-sim");
    let avg = csv(&dir.path().join("o/avg_out_sim_L0.csv"));
    for row in &avg[1..] {
        for v in &row[1..] {
            let v: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }

    ok(
        &[
            "trace",
            "--model",
            "m/model.moel",
            "--corpus",
            "c.txt",
            "--out",
            "t",
        ],
        dir.path(),
    );
    assert!(!dir.path().join("t/trace_experts.csv").exists());
    let trace = csv(&dir.path().join("t/trace.csv"));
    assert_eq!(trace.len(), 1 + 10);
    ok(
        &[
            "trace",
            "--model",
            "m/model.moel",
            "--corpus",
            "c.txt",
            "--k-override",
            "all",
            "--out",
            "t",
        ],
        dir.path(),
    );
    assert_eq!(
        csv(&dir.path().join("t/trace_experts.csv")).len(),
        1 + 5 * 2 * 4
    );
}

#[test]
fn bad_corpus_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    synth_model(dir.path(), &[]);
    std::fs::write(dir.path().join("c.txt"), "1 2 30\n").unwrap();
    let out = moe_lens(
        &[
            "route-log",
            "--model",
            "m/model.moel",
            "--corpus",
            "c.txt",
            "--out",
            "o",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("out of range"));
    std::fs::write(dir.path().join("e.txt"), "\n").unwrap();
    let out = moe_lens(
        &[
            "route-log",
            "--model",
            "m/model.moel",
            "--corpus",
            "e.txt",
            "--out",
            "o",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn corrupt_checkpoint_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    synth_model(dir.path(), &[]);
    let p = dir.path().join("m/model.moel");
    let mut bytes = std::fs::read(&p).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&p, bytes).unwrap();
    let out = moe_lens(
        &["gate-sim", "--model", "m/model.moel", "--out", "o"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("payload length"));
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    synth_model(dir.path(), &[]);
    std::fs::write(dir.path().join("c.txt"), "0 1 2 3 4 5 6 7 8 9\n10 11 12\n").unwrap();
    let run = |threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_moe-lens"))
            .args([
                "avg-out-sim",
                "--model",
                "m/model.moel",
                "--corpus",
                "c.txt",
                "--out",
                "o",
            ])
            .env("MOE_LENS_THREADS", threads)
            .current_dir(dir.path())
            .output()
            .unwrap();
        (
            out.status.code(),
            std::fs::read(dir.path().join("o/avg_out_sim_L1.csv")).ok(),
        )
    };
    let (c1, one) = run("1");
    let (c4, four) = run("4");
    assert_eq!((c1, c4), (Some(0), Some(0)));
    assert_eq!(one, four);
    assert_eq!(run("zero").0, Some(1));
}

#[test]
fn pca_flags_outliers_column() {
    let dir = tempfile::tempdir().unwrap();
    synth_model(dir.path(), &["--experts", "6"]);
    ok(
        &[
            "pca",
            "--model",
            "m/model.moel",
            "--which",
            "down",
            "--dims",
            "3",
            "--out",
            "o",
        ],
        dir.path(),
    );
    let rows = csv(&dir.path().join("o/pca_L0_down.csv"));
    assert_eq!(rows[0], vec!["label", "pc1", "pc2", "pc3", "outlier"]);
    assert_eq!(rows.len(), 7);
    let var = csv(&dir.path().join("o/pca_variance_L0_down.csv"));
    let v: Vec<f64> = var[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(v.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(
        moe_lens(
            &[
                "pca",
                "--model",
                "m/model.moel",
                "--dims",
                "4",
                "--out",
                "o"
            ],
            dir.path()
        )
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn report_bundle_lists_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    synth_model(dir.path(), &["--mode", "upcycled", "--noise", "0.5"]);
    std::fs::write(dir.path().join("c.txt"), "3 4 5\n").unwrap();
    ok(
        &[
            "report",
            "--model",
            "m/model.moel",
            "--ref",
            "m/reference.moel",
            "--corpus",
            "c.txt",
            "--out",
            "r",
        ],
        dir.path(),
    );
    let index = csv(&dir.path().join("r/report_index.csv"));
    let names: Vec<&str> = index[1..].iter().map(|r| r[0].as_str()).collect();
    for want in [
        "matrix_sim_L0_up.csv",
        "gate_corr_act.csv",
        "reorder_summary.csv",
        "pca_L1_act.csv",
        "route_log.csv",
        "norm_rank.ppm",
    ] {
        assert!(names.contains(&want), "{want} missing");
    }
    for n in names {
        assert!(dir.path().join("r").join(n).exists());
    }
}
