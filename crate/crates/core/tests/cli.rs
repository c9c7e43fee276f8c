//! End-to-end tests of the `rfbsr` binary.

use std::path::Path;
use std::process::{Command, Output};

use rfbsr::checkpoint::{Checkpoint, Meta};
use rfbsr::data::{load_image, save_image};
use rfbsr::nn::{Generator, GeneratorConfig};
use rfbsr::Tensor;

fn rfbsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfbsr"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(&o),
        stderr(&o)
    );
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_images(dir: &Path, names: &[&str], h: usize, w: usize) {
    for (i, name) in names.iter().enumerate() {
        let img = Tensor::<f32>::from_fn([1, 3, h, w], |_, c, y, x| {
            ((x * (i + 2) + y * 3 + c * 5) % 17) as f32 / 16.0
        });
        save_image(&img, dir.join(name)).unwrap();
    }
}

const TINY: &str = r#"
[model]
n_rrdb = 1
n_rrfdb = 1
rfb_per_rrfdb = 1
base_channels = 4
growth = 2
scale = 4
upsample_plan = ["nni", "spc"]

[train]
steps = 4
batch_size = 1
checkpoint_every = 2
lr = 1e-3

[data]
patch = 16
"#;

#[test]
fn help_lists_every_flag_and_default() {
    let cases: &[(&str, &[&str], &[&str])] = &[
        (
            "degrade",
            &["--in", "--out", "--scale", "--edge"],
            &["[default: 16]", "[default: replicate]"],
        ),
        (
            "train",
            &["--config", "--steps", "--seed", "--out-dir", "--hr-dir"],
            &[],
        ),
        ("infer", &["--config", "--checkpoint", "--in", "--out", "--force"], &[]),
        (
            "ensemble",
            &["--config", "--n", "--out", "--score-lr", "--score-hr"],
            &["[default: 10]"],
        ),
        (
            "eval",
            &[
                "--config",
                "--sr",
                "--hr",
                "--crop",
                "--no-crop",
                "--on-quantized",
                "--out",
            ],
            &[],
        ),
        (
            "gradcheck",
            &["--instances", "--seed", "--filter"],
            &["[default: 20]", "[default: 0]"],
        ),
        ("params", &["--config"], &[]),
    ];
    for (cmd, flags, defaults) in cases {
        let text = stdout(&ok(rfbsr(&[cmd, "--help"])));
        for needle in flags.iter().chain(defaults.iter()).chain(["--threads"].iter()) {
            assert!(text.contains(needle), "`{cmd} --help` lacks {needle}:\n{text}");
        }
    }
    let top = stdout(&ok(rfbsr(&["--help"])));
    for cmd in ["degrade", "train", "infer", "ensemble", "eval", "gradcheck", "params"] {
        assert!(top.contains(cmd));
    }
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = rfbsr(&["params", "--config", p(&missing)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(
        stderr(&o).lines().any(|l| l.starts_with("error: code=io msg=")),
        "{}",
        stderr(&o)
    );

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nwidth = 3\n").unwrap();
    let o = rfbsr(&["params", "--config", p(&bad)]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("error: code=config"));

    let o = rfbsr(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error: code=usage"));

    let garbage = dir.path().join("g.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let o = rfbsr(&[
        "ensemble",
        "--n",
        "1",
        "--out",
        p(&dir.path().join("o.ckpt")),
        p(&garbage),
    ]);
    assert_eq!(o.status.code(), Some(6));

    let o = rfbsr(&["gradcheck", "--filter", "no_such_case"]);
    assert_eq!(o.status.code(), Some(10));
}

#[test]
fn default_parameter_count() {
    assert_eq!(stdout(&ok(rfbsr(&["params"]))).trim(), "15343875");
}

#[test]
fn gradcheck_subset_reports_csv() {
    let out = stdout(&ok(rfbsr(&[
        "gradcheck",
        "--instances",
        "3",
        "--filter",
        "pixel_shuffle",
    ])));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "case,instances,elements,skipped,max_rel_err,status");
    assert!(
        lines[1].starts_with("pixel_shuffle,3,") && lines[1].ends_with(",PASS"),
        "{out}"
    );
}

#[test]
fn default_model_maps_32_to_512() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GeneratorConfig::default();
    let (_, store) = Generator::build::<f32>(&cfg, 0).unwrap();
    let ckpt = dir.path().join("g.ckpt");
    Checkpoint::from_store(&store, cfg.fingerprint(), Meta::default())
        .write(&ckpt)
        .unwrap();
    let (lr, out) = (dir.path().join("lr"), dir.path().join("sr"));
    write_images(&lr, &["a.png"], 32, 32);
    let o = ok(rfbsr(&[
        "infer",
        "--checkpoint",
        p(&ckpt),
        "--in",
        p(&lr),
        "--out",
        p(&out),
    ]));
    assert_eq!(stdout(&o).trim(), "1");
    assert_eq!(
        load_image::<f32>(out.join("a.png")).unwrap().shape().dims(),
        [1, 3, 512, 512]
    );
}

#[test]
fn degrade_train_ensemble_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (hr, lr) = (root.join("hr"), root.join("lr"));
    write_images(&hr, &["a.png", "b.png"], 32, 40);
    std::fs::create_dir_all(hr.join("sub")).unwrap();
    write_images(&hr.join("sub"), &["c.png"], 24, 24);

    let o = ok(rfbsr(&["degrade", "--in", p(&hr), "--out", p(&lr), "--scale", "4"]));
    assert_eq!(stdout(&o).trim(), "3");
    assert_eq!(
        load_image::<f32>(lr.join("a.png")).unwrap().shape().dims(),
        [1, 3, 8, 10]
    );
    assert_eq!(
        load_image::<f32>(lr.join("sub/c.png")).unwrap().shape().dims(),
        [1, 3, 6, 6]
    );

    let config = root.join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    let run = |out: &Path| {
        ok(rfbsr(&[
            "train",
            "--config",
            p(&config),
            "--hr-dir",
            p(&hr),
            "--out-dir",
            p(out),
            "--seed",
            "3",
        ]))
    };
    let (run1, run2) = (root.join("run1"), root.join("run2"));
    let o = run(&run1);
    let listed: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(listed.len(), 2, "{}", stdout(&o));
    let log = stderr(&o);
    assert!(
        log.contains("# effective config") && log.contains("# seed = 3"),
        "{log}"
    );
    assert_eq!(log.lines().filter(|l| l.starts_with("step ")).count(), 4, "{log}");
    run(&run2);
    for name in ["psnr_00000002.ckpt", "psnr_00000004.ckpt"] {
        assert_eq!(
            std::fs::read(run1.join(name)).unwrap(),
            std::fs::read(run2.join(name)).unwrap()
        );
    }

    let avg = root.join("avg.ckpt");
    let o = ok(rfbsr(&[
        "ensemble",
        "--n",
        "2",
        "--out",
        p(&avg),
        &listed[0],
        &listed[1],
    ]));
    assert_eq!(stdout(&o).trim(), format!("{} 2,4", avg.display()));

    let ranked = root.join("ranked.ckpt");
    let o = ok(rfbsr(&[
        "ensemble",
        "--config",
        p(&config),
        "--n",
        "1",
        "--out",
        p(&ranked),
        "--score-lr",
        p(&lr),
        "--score-hr",
        p(&hr),
        &listed[0],
        &listed[1],
    ]));
    assert!(stdout(&o).starts_with(p(&ranked)));

    let sr = root.join("sr");
    let o = ok(rfbsr(&[
        "infer",
        "--config",
        p(&config),
        "--checkpoint",
        p(&avg),
        "--in",
        p(&lr),
        "--out",
        p(&sr),
    ]));
    assert_eq!(stdout(&o).trim(), "3");
    assert_eq!(
        load_image::<f32>(sr.join("a.png")).unwrap().shape().dims(),
        [1, 3, 32, 40]
    );
    let sr2 = root.join("sr2");
    ok(rfbsr(&[
        "infer",
        "--config",
        p(&config),
        "--checkpoint",
        p(&avg),
        "--in",
        p(&lr),
        "--out",
        p(&sr2),
    ]));
    assert_eq!(
        std::fs::read(sr.join("a.png")).unwrap(),
        std::fs::read(sr2.join("a.png")).unwrap()
    );

    let o = rfbsr(&[
        "infer",
        "--checkpoint",
        p(&avg),
        "--in",
        p(&lr),
        "--out",
        p(&root.join("x")),
    ]);
    assert_eq!(
        o.status.code(),
        Some(6),
        "default architecture must reject the tiny checkpoint"
    );

    let table = stdout(&ok(rfbsr(&["eval", "--sr", p(&hr), "--hr", p(&hr)])));
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 5, "{table}");
    assert!(rows[1..].iter().all(|r| r.contains(",100")), "{table}");
    let csv = root.join("scores.csv");
    ok(rfbsr(&[
        "eval",
        "--sr",
        p(&sr),
        "--hr",
        p(&hr),
        "--no-crop",
        "--on-quantized",
        "--out",
        p(&csv),
    ]));
    let again = stdout(&ok(rfbsr(&[
        "eval",
        "--sr",
        p(&sr),
        "--hr",
        p(&hr),
        "--no-crop",
        "--on-quantized",
    ])));
    assert_eq!(std::fs::read_to_string(&csv).unwrap(), again);
}
