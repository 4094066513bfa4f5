use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn progtta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_progtta"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL_SPEC: &str =
    "dim = 6\ntasks = 3\ntrain_trajectories = 12\neval_trajectories = 4\nmin_len = 6\nmax_len = 10\n";
const SMALL_CONFIG: &str =
    "epochs = 2\nbatch_size = 4\nadapt_dim = 4\nhead_hidden = 8\nwindow_len = 4\nwindows_per_traj = 2\nlr = 1e-2\n";

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(ws.path("spec.txt"), SMALL_SPEC).unwrap();
        fs::write(ws.path("train.txt"), SMALL_CONFIG).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn synth(&self) -> String {
        let out = progtta(&["synth", "--spec", &self.arg("spec.txt"), "--out", &self.arg("data")]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        self.arg("data/manifest.txt")
    }

    fn train(&self, manifest: &str, extra: &[&str]) -> String {
        let (model, config) = (self.arg("model.ttpm"), self.arg("train.txt"));
        let mut args = vec!["train", "--data", manifest, "--config", &config, "--out", &model];
        args.extend_from_slice(extra);
        let out = progtta(&args);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        model
    }
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&progtta(&["--help"])), 0);
    assert_eq!(code(&progtta(&["--version"])), 0);
    assert_eq!(code(&progtta(&["eval", "--help"])), 0);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&progtta(&[])), 1);
    assert_eq!(code(&progtta(&["frobnicate"])), 1);
    assert_eq!(code(&progtta(&["eval", "--model", "m"])), 1);
    assert_eq!(code(&progtta(&["--jobs", "0", "gradcheck"])), 1);
}

#[test]
fn synth_refuses_a_non_empty_directory() {
    let ws = Workspace::new();
    ws.synth();
    for name in ["train", "id", "es", "em", "es_em"] {
        assert!(ws.path(&format!("data/{name}.ttpe")).exists(), "{name}");
    }
    let again = progtta(&["synth", "--spec", &ws.arg("spec.txt"), "--out", &ws.arg("data")]);
    assert_eq!(code(&again), 1);
    let forced = progtta(&[
        "synth",
        "--spec",
        &ws.arg("spec.txt"),
        "--out",
        &ws.arg("data"),
        "--force",
    ]);
    assert_eq!(code(&forced), 0);
}

#[test]
fn train_eval_and_report() {
    let ws = Workspace::new();
    let manifest = ws.synth();
    let model = ws.train(&manifest, &["--seed", "3"]);
    let log = fs::read_to_string(format!("{model}.log.csv")).unwrap();
    assert!(log.starts_with("epoch,pred_loss,self_loss,lr\n"));
    assert_eq!(log.lines().count(), 3);

    let json = ws.arg("im.json");
    let preds = ws.arg("im.csv");
    let out = progtta(&[
        "eval",
        "--model",
        &model,
        "--data",
        &manifest,
        "--variant",
        "ttt-im",
        "--format",
        "json",
        "--out",
        &json,
        "--predictions",
        &preds,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(&preds).unwrap();
    assert!(csv.lines().count() > 16);

    let tsv = progtta(&[
        "eval",
        "--model",
        &model,
        "--data",
        &manifest,
        "--variant",
        "ttt-ex",
        "--k",
        "3",
        "--eta",
        "0.5",
    ]);
    assert_eq!(code(&tsv), 0);
    let text = stdout(&tsv);
    assert!(text.contains("TTT-EX"));
    for split in ["id", "es", "em", "es_em"] {
        assert!(text.contains(split), "{split} missing from {text}");
    }

    let clip = ws.arg("clip.json");
    assert_eq!(
        code(&progtta(&[
            "baseline", "--method", "clip", "--data", &manifest, "--format", "json", "--out", &clip
        ])),
        0
    );
    let merged = progtta(&["report", &json, &clip, "--format", "md"]);
    assert_eq!(code(&merged), 0);
    let table = stdout(&merged);
    assert!(table.contains("TTT-IM") && table.contains("CLIP"), "{table}");
    assert!(table.starts_with('|'));
}

#[test]
fn training_is_reproducible_from_the_command_line() {
    let ws = Workspace::new();
    let manifest = ws.synth();
    let a = fs::read(ws.train(&manifest, &[])).unwrap();
    let b = fs::read(ws.train(&manifest, &["--jobs", "2"])).unwrap();
    assert_eq!(a, b);
    let first = fs::read(ws.train(&manifest, &["--meta-grad", "first-order"])).unwrap();
    assert_ne!(a, first);
}

#[test]
fn baselines_need_their_inputs() {
    let ws = Workspace::new();
    let manifest = ws.synth();
    assert_eq!(
        code(&progtta(&["baseline", "--method", "vlmrm", "--data", &manifest])),
        1
    );
    assert_eq!(
        code(&progtta(&["baseline", "--method", "clipft", "--data", &manifest])),
        1
    );
    let with_base = progtta(&[
        "baseline",
        "--method",
        "vlmrm",
        "--data",
        &manifest,
        "--baseline-embedding",
        &ws.arg("data/baseline.ttpv"),
    ]);
    assert_eq!(code(&with_base), 0, "{}", String::from_utf8_lossy(&with_base.stderr));
    assert!(stdout(&with_base).contains("VLM-RM"));

    let model = ws.train(&manifest, &["--clipft"]);
    let ft = progtta(&["baseline", "--method", "clipft", "--data", &manifest, "--model", &model]);
    assert_eq!(code(&ft), 0, "{}", String::from_utf8_lossy(&ft.stderr));
    assert!(stdout(&ft).contains("CLIP-FT"));
}

#[test]
fn clip_is_near_perfect_without_nuisance() {
    let ws = Workspace::new();
    let spec = format!("{SMALL_SPEC}noise_scale = 0\nenv_scale = 0\nbackground_scale = 0\nembodiment_angle = 0\n");
    fs::write(ws.path("clean.txt"), spec).unwrap();
    assert_eq!(
        code(&progtta(&[
            "synth",
            "--spec",
            &ws.arg("clean.txt"),
            "--out",
            &ws.arg("clean")
        ])),
        0
    );
    let out = progtta(&[
        "baseline",
        "--method",
        "clip",
        "--data",
        &ws.arg("clean/manifest.txt"),
        "--format",
        "json",
    ]);
    assert_eq!(code(&out), 0);
    let reports: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let datasets = reports[0]["datasets"].as_array().unwrap();
    assert_eq!(datasets.len(), 4);
    for d in datasets {
        assert!(d["mean_voc"].as_f64().unwrap() > 0.99, "{d}");
    }
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let ws = Workspace::new();
    let manifest = ws.synth();
    let model = ws.train(&manifest, &[]);
    assert_eq!(
        code(&progtta(&[
            "eval",
            "--model",
            &model,
            "--data",
            &manifest,
            "--variant",
            "ttt-xx"
        ])),
        1
    );
    assert_eq!(
        code(&progtta(&[
            "eval",
            "--model",
            &model,
            "--data",
            &manifest,
            "--variant",
            "ttt-im",
            "--k",
            "2"
        ])),
        1
    );
    assert_eq!(
        code(&progtta(&[
            "eval",
            "--model",
            &ws.arg("missing.ttpm"),
            "--data",
            &manifest
        ])),
        2
    );
    fs::write(ws.path("junk.ttpm"), b"TTPMjunk").unwrap();
    assert_eq!(
        code(&progtta(&[
            "eval",
            "--model",
            &ws.arg("junk.ttpm"),
            "--data",
            &manifest
        ])),
        2
    );

    fs::write(
        ws.path("explode.txt"),
        format!("{SMALL_CONFIG}lr = 1e300\nwarmup_frac = 0\n"),
    )
    .unwrap();
    let out = progtta(&[
        "train",
        "--data",
        &manifest,
        "--config",
        &ws.arg("explode.txt"),
        "--out",
        &ws.arg("nan.ttpm"),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_passes() {
    let out = progtta(&["gradcheck", "--second-order"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.starts_with("suite\tgroup"));
    assert!(!text.contains("FAIL"));
    assert!(text.contains("window_loss"));
}

#[test]
fn sweep_trains_every_grid_point() {
    let ws = Workspace::new();
    let manifest = ws.synth();
    let out = progtta(&[
        "sweep",
        "--data",
        &manifest,
        "--config",
        &ws.arg("train.txt"),
        "--grid",
        "lambda=0,0.5",
        "--grid",
        "epochs=1",
        "--out-dir",
        &ws.arg("sweep"),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(ws.path("sweep/sweep.tsv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(Path::new(&ws.arg("sweep/point001.ttpm")).exists());
    assert_eq!(
        code(&progtta(&[
            "sweep",
            "--data",
            &manifest,
            "--grid",
            "nope",
            "--out-dir",
            &ws.arg("s2")
        ])),
        1
    );
}
