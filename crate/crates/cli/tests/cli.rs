use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use motionflow::checkpoint::Checkpoint;
use motionflow::predictor::VectorFieldPredictor;
use motionflow::rng::stream_rng;
use motionflow::sampler::{generate_window, SampleOptions, WindowConditions, WindowState};
use motionflow::sequence::SequenceFile;
use motionflow::synth::{gen_clip, Dataset};
use serde_json::Value;

const TINY: &str = r#"
[predictor]
hidden = 16
heads = 2
blocks = 1
window = 8
preceding = 2

[scene]
clips = 24
heldout_clips = 4
frames = 16

[train]
steps = 30
batch = 4
log_every = 10

[eval]
clips = 4
emotion_clips = 1
energy_rows = 64
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Env {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
        Env { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.path("run.toml");
        Command::new(env!("CARGO_BIN_EXE_motionflow"))
            .current_dir(self.dir.path())
            .arg("--config")
            .arg(&config)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Value {
        let mut full = args.to_vec();
        full.push("--json");
        let out = self.run(&full);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        serde_json::from_slice(&out.stdout).unwrap()
    }

    fn code(&self, args: &[&str]) -> i32 {
        self.run(args).status.code().unwrap()
    }

    /// Train and held-out data plus a short-trained checkpoint.
    fn trained(&self) -> &Self {
        self.ok(&["gen-data", "--out", "train.mfds"]);
        self.ok(&["gen-data", "--heldout", "--out", "heldout.mfds"]);
        self.ok(&["train", "--data", "train.mfds", "--out", "model.mfck"]);
        self
    }
}

fn load_seq(p: &Path) -> SequenceFile {
    SequenceFile::load(p).unwrap()
}

#[test]
fn gen_data_is_reproducible_and_guards_outputs() {
    let env = Env::new();
    let a = env.ok(&["gen-data", "--out", "a.mfds"]);
    let b = env.ok(&["gen-data", "--out", "b.mfds"]);
    assert_eq!(a["manifest"]["checksum"], b["manifest"]["checksum"]);
    assert_eq!(a["manifest"]["clips"], 24);
    assert_eq!(Dataset::load(&env.path("a.mfds")).unwrap().len(), 24);
    assert!(env.path("a.json").exists());
    assert!(env.path("a.config.toml").exists());

    assert_eq!(env.code(&["gen-data", "--out", "a.mfds"]), 2);
    env.ok(&["gen-data", "--out", "a.mfds", "--force", "--clips", "5"]);
    assert_eq!(Dataset::load(&env.path("a.mfds")).unwrap().len(), 5);
    assert_eq!(
        env.code(&["gen-data", "--out", "c.mfds", "--clips", "0"]),
        3
    );

    let held = env.ok(&["gen-data", "--heldout", "--out", "h.mfds"]);
    assert_eq!(held["manifest"]["first_clip"], 24);
    assert_eq!(held["manifest"]["clips"], 4);
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let env = Env::new();
    env.ok(&["gen-data", "--out", "train.mfds"]);
    env.ok(&[
        "--set",
        "train.lr=0.0",
        "train",
        "--data",
        "train.mfds",
        "--out",
        "m.mfck",
    ]);
    let ck = Checkpoint::load(&env.path("m.mfck")).unwrap();
    let fresh = VectorFieldPredictor::new(ck.config.clone(), 0).unwrap();
    assert_eq!(
        ck.predictor().unwrap().params().to_flat(),
        fresh.params().to_flat()
    );
    let curve = std::fs::read_to_string(env.path("m.loss.csv")).unwrap();
    assert!(curve.lines().count() > 2);
}

#[test]
fn diverging_training_exits_numerical() {
    let env = Env::new();
    env.ok(&["gen-data", "--out", "train.mfds"]);
    let code = env.code(&[
        "--set",
        "train.lr=1e250",
        "--set",
        "train.grad_clip=0.0",
        "train",
        "--data",
        "train.mfds",
        "--out",
        "m.mfck",
    ]);
    assert_eq!(code, 4);
    assert!(env.path("nan_snapshot.json").exists());
}

#[test]
fn sample_is_reproducible_and_counts_calls() {
    let env = Env::new();
    env.trained();
    let a = env.ok(&[
        "sample",
        "--checkpoint",
        "model.mfck",
        "--windows",
        "3",
        "--nfe",
        "4",
        "--out",
        "a.mfsq",
    ]);
    let b = env.ok(&[
        "sample",
        "--checkpoint",
        "model.mfck",
        "--windows",
        "3",
        "--nfe",
        "4",
        "--out",
        "b.mfsq",
    ]);
    assert_eq!(a["payload_hash"], b["payload_hash"]);
    assert_eq!(a["frames"], 24);
    assert_eq!(a["calls"], 3 * 4 * 3);
    let single = env.ok(&[
        "sample",
        "--checkpoint",
        "model.mfck",
        "--nfe",
        "5",
        "--guidance",
        "none",
        "--out",
        "c.mfsq",
    ]);
    assert_eq!(single["calls"], 5);
    let seq = load_seq(&env.path("a.mfsq"));
    assert_eq!(seq.provenance["windows"], 3);
    assert!(seq.provenance["config_hash"].is_string());

    // mismatched predictor config is refused
    assert_eq!(
        env.code(&[
            "--set",
            "predictor.hidden=32",
            "sample",
            "--checkpoint",
            "model.mfck",
            "--out",
            "d.mfsq"
        ]),
        2
    );
}

#[test]
fn one_window_matches_library_generate_window() {
    let env = Env::new();
    env.trained();
    env.ok(&[
        "sample",
        "--checkpoint",
        "model.mfck",
        "--clip",
        "3",
        "--nfe",
        "6",
        "--out",
        "one.mfsq",
        "--trajectory",
        "traj",
    ]);
    let seq = load_seq(&env.path("one.mfsq"));

    let ck = Checkpoint::load(&env.path("model.mfck")).unwrap();
    let p = ck.predictor().unwrap();
    let cfg = motionflow::config::RunConfig::from_toml_str(TINY).unwrap();
    let mut spec = cfg.scene_spec();
    spec.frames = p.config().window;
    let basis = spec.basis().unwrap();
    let clip = gen_clip(&spec, &basis, 3).unwrap();
    let cond = WindowConditions {
        audio: &clip.audio,
        emotion: &clip.emotion,
        source_motion: &clip.source_motion,
        extra: None,
    };
    let opts = SampleOptions {
        nfe: 6,
        ..SampleOptions::default()
    };
    let mut rng = stream_rng(cfg.eval.seed, 0x5a);
    let w = generate_window(&p, &WindowState::initial(&p), &cond, &opts, &mut rng).unwrap();
    assert_eq!(seq.latents, w.latents);
    assert!(env.path("traj/traj.bin").exists());
    let inspected = env.ok(&["inspect", "traj/traj.bin"]);
    assert_eq!(inspected["states"], 7);
}

#[test]
fn edit_shifts_only_the_chosen_coefficient() {
    let env = Env::new();
    env.trained();
    env.ok(&[
        "sample",
        "--checkpoint",
        "model.mfck",
        "--windows",
        "2",
        "--nfe",
        "3",
        "--out",
        "s.mfsq",
    ]);
    let zero = env.ok(&[
        "edit", "--input", "s.mfsq", "--index", "2", "--delta", "0", "--out", "z.mfsq",
    ]);
    assert_eq!(zero["payload_hash_before"], zero["payload_hash_after"]);
    env.ok(&[
        "edit", "--input", "s.mfsq", "--index", "2", "--delta", "-1.5", "--out", "e.mfsq",
    ]);
    let (before, after) = (load_seq(&env.path("s.mfsq")), load_seq(&env.path("e.mfsq")));
    let (pb, pa) = (
        before.basis.project_rows(&before.latents).unwrap(),
        after.basis.project_rows(&after.latents).unwrap(),
    );
    for f in 0..pb.rows() {
        for m in 0..pb.cols() {
            let want = pb.get(f, m) + if m == 2 { -1.5 } else { 0.0 };
            assert!((pa.get(f, m) - want).abs() <= 1e-9);
        }
    }
    assert_eq!(
        env.code(&[
            "edit", "--input", "s.mfsq", "--index", "99", "--delta", "1", "--out", "x.mfsq"
        ]),
        2
    );
    assert_eq!(
        env.code(&[
            "edit", "--input", "s.mfsq", "--index", "1", "--delta", "1", "--out", "s.mfsq",
            "--force"
        ]),
        2
    );
    assert_eq!(load_seq(&env.path("s.mfsq")), before);
}

#[test]
fn sweep_writes_agreeing_csv_and_json() {
    let env = Env::new();
    env.trained();
    let doc = env.ok(&[
        "sweep",
        "--checkpoint",
        "model.mfck",
        "--heldout",
        "heldout.mfds",
        "--axis",
        "nfe",
        "--values",
        "2,5",
        "--out",
        "nfe",
    ]);
    let rows = doc["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["calls_per_window"], 15);
    let csv = std::fs::read_to_string(env.path("nfe.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    let header: Vec<&str> = lines[0].split(',').collect();
    for (row, line) in rows.iter().zip(&lines[1..]) {
        for (k, cell) in header.iter().zip(line.split(',')) {
            match &row[*k] {
                Value::Number(n) => {
                    assert_eq!(cell.parse::<f64>().unwrap(), n.as_f64().unwrap(), "{k}")
                }
                Value::String(s) => assert_eq!(cell, s),
                Value::Null => assert!(cell.is_empty()),
                other => panic!("unexpected {other}"),
            }
        }
    }
    let json: Value =
        serde_json::from_str(&std::fs::read_to_string(env.path("nfe.json")).unwrap()).unwrap();
    assert_eq!(&json, &doc);

    let one = env.ok(&[
        "sweep",
        "--checkpoint",
        "model.mfck",
        "--heldout",
        "heldout.mfds",
        "--axis",
        "solver",
        "--values",
        "midpoint",
        "--out",
        "s",
    ]);
    assert_eq!(one["rows"].as_array().unwrap().len(), 1);
    assert_eq!(
        env.code(&[
            "sweep",
            "--checkpoint",
            "model.mfck",
            "--heldout",
            "heldout.mfds",
            "--axis",
            "depth",
            "--values",
            "1"
        ]),
        2
    );
}

#[test]
fn baseline_sweep_and_eval() {
    let env = Env::new();
    env.trained();
    env.ok(&[
        "train",
        "--data",
        "train.mfds",
        "--parameterization",
        "eps",
        "--steps",
        "10",
        "--out",
        "eps.mfck",
    ]);
    let doc = env.ok(&[
        "sweep",
        "--heldout",
        "heldout.mfds",
        "--axis",
        "baseline",
        "--values",
        "model.mfck,eps.mfck",
        "--ddim-steps",
        "5",
        "--out",
        "b",
    ]);
    let rows = doc["rows"].as_array().unwrap();
    assert_eq!(rows[0]["parameterization"], "flow");
    assert_eq!(rows[1]["parameterization"], "eps");
    assert_eq!(rows[1]["calls_per_window"], 15);

    let report = env.ok(&[
        "eval",
        "--checkpoint",
        "model.mfck",
        "--heldout",
        "heldout.mfds",
        "--nfe",
        "3",
        "--out",
        "m.json",
    ]);
    for k in [
        "coeff_correlation",
        "energy_distance",
        "energy_floor",
        "field_mse",
        "boundary_jump_ratio",
        "final_train_loss",
    ] {
        assert!(report[k].as_f64().unwrap().is_finite(), "{k}");
    }
    assert!(report["config_hash"].is_string());
    assert_eq!(
        env.code(&[
            "eval",
            "--checkpoint",
            "model.mfck",
            "--heldout",
            "heldout.mfds",
            "--clips",
            "0"
        ]),
        3
    );
}

#[test]
fn inspect_recognizes_every_format() {
    let env = Env::new();
    env.trained();
    env.ok(&[
        "sample",
        "--checkpoint",
        "model.mfck",
        "--out",
        "s.mfsq",
        "--nfe",
        "2",
    ]);
    assert_eq!(env.ok(&["inspect", "train.mfds"])["kind"], "dataset");
    let ck = env.ok(&["inspect", "model.mfck"]);
    assert_eq!(ck["kind"], "checkpoint");
    assert_eq!(ck["parameterization"], "flow");
    assert_eq!(env.ok(&["inspect", "s.mfsq"])["kind"], "sequence");
    std::fs::write(env.path("junk.bin"), b"nothing here").unwrap();
    assert_eq!(env.code(&["inspect", "junk.bin"]), 3);
    assert_eq!(env.code(&["bogus-verb"]), 2);
}
