//! The `bnas` binary end to end on generated data.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "preset=tiny\ncells=3\nchannels=4\nepochs=1\nbatch=8\n";

fn bnas(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bnas"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = bnas(dir, args);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(o.status.success(), "{args:?} failed: {err}");
    String::from_utf8(o.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

fn config_hash(manifest: &str) -> String {
    manifest
        .lines()
        .find_map(|l| l.strip_prefix("config_hash="))
        .expect("manifest has a hash")
        .to_string()
}

fn search(dir: &Path, out: &str, seed: &str) -> String {
    ok(
        dir,
        &[
            "search",
            "--config",
            "tiny.cfg",
            "--seed",
            seed,
            "--synthetic",
            "16",
            "--out",
            out,
        ],
    );
    fs::read_to_string(dir.join(out).join("arch.json")).unwrap()
}

#[test]
fn non_positive_gamma_is_a_usage_error() {
    let dir = setup();
    search(dir.path(), "s", "7");
    for gamma in ["--gamma=0", "--gamma=-1"] {
        let o = bnas(
            dir.path(),
            &["derive", "--arch", "s/arch.json", gamma, "--out", "d"],
        );
        assert_eq!(o.status.code(), Some(2));
        let err = String::from_utf8(o.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error kind=usage msg=\""), "{err}");
        assert!(err.contains("gamma"));
    }
    assert!(!dir.path().join("d").exists());
}

#[test]
fn search_is_reproducible_per_seed() {
    let dir = setup();
    let a = search(dir.path(), "a", "7");
    let b = search(dir.path(), "b", "7");
    let c = search(dir.path(), "c", "8");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn zeroise_genotype_with_no_zeroise_flag_is_rejected() {
    let dir = setup();
    search(dir.path(), "s", "7");
    ok(
        dir.path(),
        &[
            "derive",
            "--arch",
            "s/arch.json",
            "--gamma",
            "1",
            "--out",
            "d",
        ],
    );
    let g = fs::read_to_string(dir.path().join("d/genotype.json")).unwrap();
    // force at least one Zeroise edge
    let first = g.find("\"op\":\"").unwrap() + 6;
    let end = first + g[first..].find('"').unwrap();
    let g = format!("{}zeroise{}", &g[..first], &g[end..]);
    fs::write(dir.path().join("z.json"), g).unwrap();
    let o = bnas(
        dir.path(),
        &[
            "--no-zeroise",
            "flops",
            "--genotype",
            "z.json",
            "--out",
            "f",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(
        err.starts_with("error kind=usage") && err.contains("zeroise"),
        "{err}"
    );
}

#[test]
fn missing_inputs_fail_with_one_line() {
    let dir = setup();
    let o = bnas(
        dir.path(),
        &["derive", "--arch", "nope.json", "--gamma", "1"],
    );
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error kind=io"), "{err}");
    let o = bnas(dir.path(), &["search", "--data", "x", "--synthetic", "4"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn tiny_pipeline_writes_every_artifact() {
    let dir = setup();
    let d = dir.path();
    let cfg = ["--config", "tiny.cfg", "--seed", "7"];
    let with =
        |args: &[&str]| -> Vec<String> { cfg.iter().chain(args).map(|s| s.to_string()).collect() };
    let run = |args: &[&str]| {
        let v = with(args);
        ok(d, &v.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let net = [
        "--genotype",
        "d/genotype.json",
        "--cells",
        "3",
        "--channels",
        "4",
    ];

    run(&["search", "--synthetic", "16", "--out", "s"]);
    run(&[
        "derive",
        "--arch",
        "s/arch.json",
        "--gamma",
        "1",
        "--out",
        "d",
    ]);
    run(&[
        &["train"][..],
        &net,
        &["--synthetic", "16", "--grad-log", "--out", "t"],
    ]
    .concat());
    let eval = run(&[
        &["eval"][..],
        &net,
        &[
            "--synthetic",
            "16",
            "--checkpoint",
            "t/weights.ckpt",
            "--out",
            "e",
        ],
    ]
    .concat());
    let flops = run(&[&["flops"][..], &net, &["--out", "f"]].concat());
    run(&[
        &["export"][..],
        &net,
        &["--checkpoint", "t/weights.ckpt", "--out", "x"],
    ]
    .concat());

    for (dir, files) in [
        (
            "s",
            &[
                "arch.json",
                "search_log.csv",
                "supernet.ckpt",
                "manifest.txt",
            ][..],
        ),
        ("d", &["genotype.json", "manifest.txt"]),
        (
            "t",
            &["weights.ckpt", "metrics.csv", "grads.csv", "manifest.txt"],
        ),
        ("e", &["eval_per_class.csv", "manifest.txt"]),
        ("f", &["flops.csv", "manifest.txt"]),
        ("x", &["frozen.bin", "manifest.txt"]),
    ] {
        for f in files {
            assert!(d.join(dir).join(f).is_file(), "{dir}/{f} missing");
        }
    }
    let hash = config_hash(&fs::read_to_string(d.join("s/manifest.txt")).unwrap());
    assert_eq!(hash.len(), 64);
    for dir in ["d", "t", "e", "f", "x"] {
        assert_eq!(
            config_hash(&fs::read_to_string(d.join(dir).join("manifest.txt")).unwrap()),
            hash
        );
    }
    for f in ["s/arch.json", "d/genotype.json"] {
        assert!(
            fs::read_to_string(d.join(f)).unwrap().contains(&hash),
            "{f} lacks the hash"
        );
    }
    assert!(eval.starts_with("top1="));
    assert!(flops.contains("memory savings") && flops.contains("speed-up"));
    let metrics = fs::read_to_string(d.join("t/metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().count(),
        3,
        "header plus train and test rows"
    );
}
