use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ofl::manifest::RunManifest;
use ofl::table::Csv;
use ofl_core::gradcheck::CHECKS;

fn ofl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ofl"))
        .args(args)
        .env("OFL_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ofl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    ofl(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, count: &str, seed: &str) {
    ok(&[
        "gen",
        "--count",
        count,
        "--seed",
        seed,
        "--points",
        "96",
        "--out",
        s(dir),
    ]);
}

#[test]
fn gen_is_deterministic_and_verifiable() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen(&a, "2", "7");
    gen(&b, "2", "7");
    for name in ["scene_0000.ofp", "scene_0001.ofp", "manifest.txt"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let m = RunManifest::read(&a.join("dataset.json")).unwrap();
    assert_eq!(m.scene.unwrap().points, 96);
    assert!(ok(&["verify", "--data", s(&a)]).contains("0 inconsistent"));

    assert_eq!(
        code(&["gen", "--count", "0", "--out", s(&t.path().join("z"))]),
        2
    );
    assert_eq!(
        code(&[
            "gen",
            "--count",
            "1",
            "--points",
            "10",
            "--out",
            s(&t.path().join("z"))
        ]),
        2
    );
    assert_eq!(
        code(&[
            "gen",
            "--count",
            "1",
            "--coverage",
            "0.9",
            "--out",
            s(&t.path().join("z"))
        ]),
        2
    );
    fs::write(t.path().join("file"), b"x").unwrap();
    assert_eq!(
        code(&[
            "gen",
            "--count",
            "1",
            "--out",
            s(&t.path().join("file").join("sub"))
        ]),
        1
    );
}

#[test]
fn train_then_eval() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen(&data, "2", "1");
    let out = t.path().join("run");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--compact",
        "--epochs",
        "2",
        "--out",
        s(&out),
    ]);
    for f in [
        "train_log.csv",
        "metrics.csv",
        "model.ofl",
        "model.ofl.json",
        "run.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = Csv::read(&out.join("train_log.csv")).unwrap();
    assert_eq!(log.rows.len(), 2);
    assert_eq!(
        log.header,
        [
            "epoch",
            "loss",
            "flow_loss",
            "occ_loss",
            "epe",
            "as",
            "ar",
            "out",
            "occ_acc",
            "epe_l0",
            "epe_l1",
            "epe_l2"
        ]
    );
    let metrics = Csv::read(&out.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.header,
        ["epe", "as", "ar", "out", "occ_acc", "epe_l0", "epe_l1", "epe_l2"]
    );
    let manifest = RunManifest::read(&out.join("run.json")).unwrap();
    assert_eq!(manifest.train.unwrap().epochs, 2);
    assert!(manifest.version.starts_with('v'));

    let printed = ok(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        s(&out.join("model.ofl")),
    ]);
    assert_eq!(Csv::parse(&printed), metrics);

    let perfect = Csv::parse(&ok(&["eval", "--data", s(&data), "--perfect"]));
    assert_eq!(perfect.value(0, "epe"), Some(0.0));
    assert_eq!(perfect.value(0, "as"), Some(1.0));
    assert_eq!(perfect.value(0, "ar"), Some(1.0));
    assert_eq!(perfect.value(0, "out"), Some(0.0));

    assert_eq!(
        code(&[
            "eval",
            "--data",
            s(&data),
            "--checkpoint",
            s(&t.path().join("none.ofl"))
        ]),
        2
    );
    assert_eq!(
        code(&[
            "train",
            "--data",
            s(&data),
            "--alpha",
            "1.5",
            "--out",
            s(&out)
        ]),
        2
    );
    assert_eq!(
        code(&[
            "train",
            "--data",
            s(&data),
            "--beta",
            "0.1",
            "--out",
            s(&out)
        ]),
        2
    );
    assert_eq!(
        code(&[
            "train",
            "--data",
            s(&t.path().join("nothing")),
            "--out",
            s(&out)
        ]),
        2
    );
}

#[test]
fn same_seed_runs_and_resume_agree() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen(&data, "3", "2");
    let run = |dir: &str, epochs: &str, resume: bool| {
        let out = t.path().join(dir);
        let mut args = vec![
            "train",
            "--data",
            s(&data),
            "--compact",
            "--levels",
            "2",
            "--epochs",
            epochs,
            "--decay-interval",
            "2",
            "--checkpoint-every",
            "1",
            "--out",
            s(&out),
        ];
        if resume {
            args.push("--resume");
        }
        ok(&args);
        out
    };
    let a = run("a", "5", false);
    let b = run("b", "5", false);
    assert_eq!(
        fs::read(a.join("train_log.csv")).unwrap(),
        fs::read(b.join("train_log.csv")).unwrap()
    );

    let c = run("c", "2", false);
    run("c", "5", true);
    assert_eq!(
        fs::read(a.join("train_log.csv")).unwrap(),
        fs::read(c.join("train_log.csv")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("model.ofl")).unwrap(),
        fs::read(c.join("model.ofl")).unwrap()
    );
}

#[test]
fn ablate_and_sweep_schemas() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen(&data, "2", "3");
    let ablate = |dir: &str| {
        let out = t.path().join(dir);
        ok(&[
            "ablate",
            "--data",
            s(&data),
            "--compact",
            "--levels",
            "2",
            "--epochs",
            "1",
            "--seeds",
            "2",
            "--out",
            s(&out),
        ]);
        out
    };
    let a = ablate("a1");
    let csv = Csv::read(&a.join("ablation.csv")).unwrap();
    assert_eq!(csv.header, ["config", "epe", "as", "ar", "out"]);
    let names: Vec<_> = csv.rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["neither", "ocv_only", "cmu_only", "both"]);
    let levels = Csv::read(&a.join("ablation_levels.csv")).unwrap();
    assert_eq!(levels.rows.len(), 8);
    let b = ablate("a2");
    assert_eq!(
        fs::read(a.join("ablation.csv")).unwrap(),
        fs::read(b.join("ablation.csv")).unwrap()
    );

    let out = t.path().join("sweep");
    let printed = ok(&[
        "sweep-n",
        "--data",
        s(&data),
        "--compact",
        "--levels",
        "2",
        "--epochs",
        "1",
        "--out",
        s(&out),
    ]);
    let csv = Csv::read(&out.join("sweep_n.csv")).unwrap();
    assert_eq!(Csv::parse(&printed), csv);
    assert_eq!(
        csv.header,
        ["n", "epe", "as", "ar", "out", "occ_acc", "seconds"]
    );
    let ns: Vec<_> = csv.rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(ns, ["8", "16", "32", "64"]);
    for row in 0..4 {
        for col in &csv.header[1..] {
            assert!(csv.value(row, col).unwrap().is_finite());
        }
    }
    let levels = Csv::read(&out.join("sweep_n_levels.csv")).unwrap();
    assert_eq!(levels.header, ["n", "level", "epe"]);
    assert_eq!(levels.rows.len(), 8);
    assert_eq!(
        code(&[
            "sweep-n",
            "--data",
            s(&data),
            "--values",
            "8,0",
            "--out",
            s(&out)
        ]),
        2
    );
}

#[test]
fn render_outputs() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen(&data, "1", "4");
    let pair = data.join("scene_0000.ofp");
    let img = t.path().join("r.ppm");
    ok(&[
        "render",
        "--pair",
        s(&pair),
        "--perfect",
        "--width",
        "300",
        "--height",
        "200",
        "--out",
        s(&img),
    ]);
    let bytes = fs::read(&img).unwrap();
    let header = b"P6\n300 200\n255\n";
    assert!(bytes.starts_with(header));
    let body = &bytes[header.len()..];
    assert_eq!(body.len(), 300 * 200 * 3);
    assert!(!body.chunks(3).any(|p| p == [0, 0, 255]));

    let flow = t.path().join("flow.csv");
    fs::write(&flow, "x,y,z\n0,0,0\n").unwrap();
    assert_eq!(
        code(&[
            "render",
            "--pair",
            s(&pair),
            "--flow",
            s(&flow),
            "--out",
            s(&img)
        ]),
        2
    );
    assert_eq!(
        code(&[
            "render",
            "--pair",
            s(&t.path().join("missing.ofp")),
            "--out",
            s(&img)
        ]),
        1
    );
}

#[test]
fn gradcheck_reports_every_check() {
    let report = ok(&["gradcheck"]);
    for name in CHECKS {
        assert!(
            report
                .lines()
                .any(|l| l.starts_with("PASS") && l.split_whitespace().nth(1) == Some(name)),
            "{name} missing from report"
        );
    }
    let out = ofl(&["gradcheck", "--corrupt", "ocv.aggregate"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ocv.aggregate"), "{err}");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&["train"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(
        code(&[
            "train",
            "--data",
            "x",
            "--out",
            "y",
            "--upsampler",
            "bicubic"
        ]),
        2
    );
}
