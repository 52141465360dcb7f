use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use motionflow::checkpoint::Checkpoint;
use motionflow::config::RunConfig;
use motionflow::eval::{evaluate, EvalConfig, Generator, MetricsReport};
use motionflow::format::{checksum_hex, write_file};
use motionflow::objective::Parameterization;
use motionflow::predictor::VectorFieldPredictor;
use motionflow::rng::stream_rng;
use motionflow::sampler::{
    dump_trajectory, generate_sequence_with, redirect_emotion, GuidanceSpec, SequenceConditions,
    Solver,
};
use motionflow::sequence::SequenceFile;
use motionflow::synth::{gen_clip, make_dataset, Dataset};
use motionflow::train::{train, TrainOptions};
use motionflow::{Error, Result, Tensor2};
use serde_json::{json, Value};

use crate::{Cli, Command, Global};

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Number of clips; defaults to `scene.clips` (or `scene.heldout_clips`).
    #[arg(long)]
    pub clips: Option<usize>,
    /// Index of the first clip in the scene's clip sequence.
    #[arg(long)]
    pub first_clip: Option<u64>,
    /// Generate the held-out split, which starts right after the training clips.
    #[arg(long)]
    pub heldout: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training dataset; defaults to `paths.data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// flow, eps or x0.
    #[arg(long)]
    pub parameterization: Option<String>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct SamplingFlags {
    #[arg(long)]
    pub nfe: Option<usize>,
    /// euler or midpoint.
    #[arg(long)]
    pub solver: Option<String>,
    /// none, single or incremental.
    #[arg(long)]
    pub guidance: Option<String>,
    /// Scale for single guidance.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub gamma_a: Option<f64>,
    #[arg(long)]
    pub gamma_e: Option<f64>,
    /// DDIM steps for diffusion checkpoints.
    #[arg(long)]
    pub ddim_steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Defaults to `paths.checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Take the driving signal from this dataset (with `--clip`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Clip of `--data`, or scene clip index when no dataset is given.
    #[arg(long, default_value_t = 0)]
    pub clip: u64,
    #[arg(long, default_value_t = 1)]
    pub windows: usize,
    /// Redirect the emotion label to this one-hot class.
    #[arg(long)]
    pub emotion: Option<usize>,
    /// Dump the first window's integration trajectory into this directory.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    #[command(flatten)]
    pub sampling: SamplingFlags,
}

#[derive(Args, Debug)]
pub struct EditArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub index: usize,
    #[arg(long, allow_hyphen_values = true)]
    pub delta: f64,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `paths.heldout`.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    /// nfe, gamma-a, gamma-e, solver or baseline.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated values; checkpoint paths for `baseline`.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub values: Vec<String>,
    /// Held-out clips per run; defaults to `eval.clips`.
    #[arg(long)]
    pub clips: Option<usize>,
    #[command(flatten)]
    pub sampling: SamplingFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long)]
    pub clips: Option<usize>,
    /// Also report sliced Wasserstein.
    #[arg(long)]
    pub sliced_wasserstein: bool,
    #[command(flatten)]
    pub sampling: SamplingFlags,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub path: PathBuf,
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let g = &cli.global;
    match &cli.command {
        Command::GenData(a) => gen_data(g, &cfg, a),
        Command::Train(a) => train_cmd(g, &cfg, a),
        Command::Sample(a) => sample(g, &cfg, a),
        Command::Edit(a) => edit(g, a),
        Command::Sweep(a) => sweep(g, &cfg, a),
        Command::Eval(a) => eval_cmd(g, &cfg, a),
        Command::Inspect(a) => inspect(g, a),
    }
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let text = match &g.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::with_overrides(&text, &g.overrides)?;
    if let Some(seed) = g.seed {
        cfg.reseed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn user_config(g: &Global) -> bool {
    g.config.is_some() || !g.overrides.is_empty()
}

fn emit(g: &Global, text: &str, value: &Value) {
    if g.json {
        println!(
            "{}",
            serde_json::to_string_pretty(value).expect("json value")
        );
    } else {
        println!("{text}");
    }
}

fn claim(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Usage(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path
        .file_stem()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// Writes the run config next to `output`.
fn echo_config(cfg: &RunConfig, output: &Path) -> Result<()> {
    let text = format!("# config hash {}\n{}", cfg.hash(), cfg.to_toml_string());
    write_file(&sibling(output, ".config.toml"), text.as_bytes())
}

fn required(path: Option<&PathBuf>, fallback: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    path.or(fallback)
        .cloned()
        .ok_or_else(|| Error::Usage(format!("no {what} given")))
}

fn gen_data(g: &Global, cfg: &RunConfig, a: &GenDataArgs) -> Result<()> {
    let (default_first, default_count, default_path, configured) = if a.heldout {
        (
            cfg.scene.clips as u64,
            cfg.scene.heldout_clips,
            "data/heldout.mfds",
            &cfg.paths.heldout,
        )
    } else {
        (0, cfg.scene.clips, "data/train.mfds", &cfg.paths.data)
    };
    let out = g
        .out
        .clone()
        .or_else(|| configured.clone())
        .unwrap_or_else(|| default_path.into());
    claim(&out, g.force)?;
    let spec = cfg.scene_spec();
    let data = make_dataset(
        &spec,
        a.first_clip.unwrap_or(default_first),
        a.clips.unwrap_or(default_count),
    )?;
    let manifest = data.save(&out)?;
    echo_config(cfg, &out)?;
    let text = format!(
        "wrote {} ({} clips x {} frames, first clip {})\nspec {} seed {}\nemotion counts {:?}\nchecksum {}",
        out.display(),
        manifest.clips,
        manifest.frames,
        manifest.first_clip,
        manifest.spec_hash,
        manifest.seed,
        manifest.emotion_counts,
        manifest.checksum
    );
    emit(
        g,
        &text,
        &json!({ "path": out, "config_hash": cfg.hash(), "manifest": manifest }),
    );
    Ok(())
}

fn check_dataset(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    let p = &cfg.predictor;
    let s = &data.spec;
    let mut diffs = Vec::new();
    if s.latent_dim != p.latent_dim {
        diffs.push(format!(
            "latent dim: predictor {}, dataset {}",
            p.latent_dim, s.latent_dim
        ));
    }
    if s.audio_dim != p.audio_dim {
        diffs.push(format!(
            "audio dim: predictor {}, dataset {}",
            p.audio_dim, s.audio_dim
        ));
    }
    if s.frames < p.window {
        diffs.push(format!(
            "clips of {} frames are shorter than the window {}",
            s.frames, p.window
        ));
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "dataset does not fit the predictor: {}",
            diffs.join("; ")
        )))
    }
}

fn train_cmd(g: &Global, cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
    }
    if let Some(tag) = &a.parameterization {
        cfg.train.parameterization = Parameterization::from_tag(tag)?;
    }
    cfg.validate()?;
    let data_path = required(
        a.data.as_ref(),
        cfg.paths.data.as_ref(),
        "training dataset (--data)",
    )?;
    let out = g
        .out
        .clone()
        .or_else(|| cfg.paths.checkpoint.clone())
        .unwrap_or_else(|| "model.mfck".into());
    claim(&out, g.force)?;
    let data_bytes = std::fs::read(&data_path)
        .map_err(|e| Error::Data(format!("{}: {e}", data_path.display())))?;
    let data = Dataset::from_bytes(&data_bytes)?;
    check_dataset(&cfg, &data)?;

    let mut p = VectorFieldPredictor::new(cfg.predictor.clone(), cfg.train.seed)?;
    let opts = TrainOptions {
        snapshot_dir: out.parent().map(Path::to_path_buf),
        verbose: g.verbose,
    };
    let report = train(&mut p, &data, &cfg.train, &opts)?;
    let meta = json!({
        "config_hash": cfg.hash(),
        "seed": cfg.train.seed,
        "steps": cfg.train.steps,
        "final_loss": report.final_loss(),
        "dataset": data_path,
        "dataset_checksum": checksum_hex(&data_bytes),
        "run_config": cfg.to_toml_string(),
    });
    Checkpoint::from_predictor(&p, cfg.train.parameterization, meta.clone()).save(&out)?;
    let curve = sibling(&out, ".loss.csv");
    report.write_csv(&curve)?;
    echo_config(&cfg, &out)?;
    let text = format!(
        "trained {} steps in {:.1}s, final loss {:.5}\ncheckpoint {}\nloss curve {}",
        cfg.train.steps,
        report.wall_secs,
        report.final_loss(),
        out.display(),
        curve.display()
    );
    emit(
        g,
        &text,
        &json!({ "checkpoint": out, "loss_curve": curve, "wall_secs": report.wall_secs, "meta": meta }),
    );
    Ok(())
}

/// Loads a checkpoint; an explicitly given config must agree with it.
fn load_model(
    g: &Global,
    cfg: &RunConfig,
    path: &Path,
) -> Result<(Checkpoint, VectorFieldPredictor)> {
    let ck = Checkpoint::load(path)?;
    if user_config(g) {
        ck.ensure_compatible(&cfg.predictor, None)?;
    }
    let p = ck.predictor()?;
    Ok((ck, p))
}

fn apply_sampling(cfg: &mut RunConfig, f: &SamplingFlags) -> Result<()> {
    if let Some(n) = f.nfe {
        cfg.sample.nfe = n;
    }
    if let Some(s) = &f.solver {
        cfg.sample.solver = s.parse::<Solver>()?;
    }
    if let Some(n) = f.ddim_steps {
        cfg.ddim.steps = n;
    }
    let mode = f.guidance.as_deref();
    let mut g = cfg.sample.guidance;
    g = match mode {
        None => g,
        Some("none") => GuidanceSpec::None,
        Some("single") => GuidanceSpec::Single { gamma: 1.0 },
        Some("incremental") => match g {
            GuidanceSpec::Incremental { .. } => g,
            _ => GuidanceSpec::default(),
        },
        Some(other) => return Err(Error::Usage(format!("unknown guidance mode `{other}`"))),
    };
    if let Some(gamma) = f.gamma {
        g = GuidanceSpec::Single { gamma };
    }
    if f.gamma_a.is_some() || f.gamma_e.is_some() {
        let (da, de) = match g {
            GuidanceSpec::Incremental { gamma_a, gamma_e } => (gamma_a, gamma_e),
            _ => match GuidanceSpec::default() {
                GuidanceSpec::Incremental { gamma_a, gamma_e } => (gamma_a, gamma_e),
                _ => unreachable!("default guidance is incremental"),
            },
        };
        g = GuidanceSpec::Incremental {
            gamma_a: f.gamma_a.unwrap_or(da),
            gamma_e: f.gamma_e.unwrap_or(de),
        };
    }
    cfg.sample.guidance = g;
    if mode.is_some() || f.gamma.is_some() || f.gamma_a.is_some() || f.gamma_e.is_some() {
        cfg.ddim.guidance = g;
    }
    cfg.validate()
}

fn generator(cfg: &RunConfig, param: Parameterization) -> Generator {
    match param {
        Parameterization::Flow => Generator::Flow(cfg.sample),
        p => Generator::Ddim {
            parameterization: p,
            options: cfg.ddim,
            schedule_steps: cfg.train.diffusion_steps,
        },
    }
}

fn sample(g: &Global, cfg: &RunConfig, a: &SampleArgs) -> Result<()> {
    let mut cfg = cfg.clone();
    apply_sampling(&mut cfg, &a.sampling)?;
    if a.windows == 0 {
        return Err(Error::Usage("--windows must be positive".into()));
    }
    let ck_path = required(
        a.checkpoint.as_ref(),
        cfg.paths.checkpoint.as_ref(),
        "checkpoint (--checkpoint)",
    )?;
    let out = g.out.clone().unwrap_or_else(|| "sample.mfsq".into());
    claim(&out, g.force)?;
    let (ck, p) = load_model(g, &cfg, &ck_path)?;
    let pc = p.config().clone();
    let frames = a.windows * pc.window;

    let (clip, basis, source) = match &a.data {
        Some(path) => {
            let data = Dataset::load(path)?;
            let clip = data
                .clips
                .get(a.clip as usize)
                .cloned()
                .ok_or(Error::Index {
                    index: a.clip as usize,
                    len: data.len(),
                })?;
            (clip, data.basis, json!({ "dataset": path, "clip": a.clip }))
        }
        None => {
            let mut spec = cfg.scene_spec();
            spec.frames = frames;
            let basis = spec.basis()?;
            (
                gen_clip(&spec, &basis, a.clip)?,
                basis,
                json!({ "scene_hash": spec.hash(), "clip": a.clip }),
            )
        }
    };
    if clip.audio.cols() != pc.audio_dim || basis.dims() != pc.latent_dim {
        return Err(Error::Config(
            "driving input does not match the checkpoint's dimensions".into(),
        ));
    }
    let mut audio = Tensor2::zeros(frames, pc.audio_dim);
    let avail = clip.audio.rows().min(frames);
    audio.set_rows(0, &clip.audio.slice_rows(0, avail));
    let emotion = match a.emotion {
        Some(e) => redirect_emotion(&clip.emotion, e)?,
        None => clip.emotion.clone(),
    };
    let seq = SequenceConditions {
        audio,
        emotion,
        source_motion: clip.source_motion.clone(),
        extra: None,
    };

    let gen = generator(&cfg, ck.parameterization);
    let mut window = gen.window_sampler(&p)?;
    let mut first_traj = None;
    let mut rng = stream_rng(cfg.eval.seed, 0x5a);
    p.reset_call_count();
    let started = Instant::now();
    let latents = generate_sequence_with(&p, &seq, &mut rng, |s, c, r| {
        let w = window(s, c, r)?;
        if first_traj.is_none() {
            first_traj = Some(w.trajectory.clone());
        }
        Ok(w)
    })?;
    let secs = started.elapsed().as_secs_f64();
    let calls = p.call_count();
    if let (Some(dir), Some(traj)) = (&a.trajectory, &first_traj) {
        dump_trajectory(dir, traj)?;
    }
    let provenance = json!({
        "config_hash": cfg.hash(),
        "checkpoint_config_hash": ck.config.hash(),
        "checkpoint_meta": ck.meta,
        "seed": cfg.eval.seed,
        "generator": gen,
        "windows": a.windows,
        "driving": source,
        "emotion_override": a.emotion,
    });
    let file = SequenceFile::new(latents, basis, provenance)?;
    file.save(&out)?;
    echo_config(&cfg, &out)?;
    let text = format!(
        "wrote {} ({} frames, {} windows)\npredictor calls {} ({} per window), {:.1} ms",
        out.display(),
        file.frames(),
        a.windows,
        calls,
        gen.calls_per_window(),
        secs * 1e3
    );
    emit(
        g,
        &text,
        &json!({
            "path": out,
            "frames": file.frames(),
            "windows": a.windows,
            "calls": calls,
            "calls_per_window": gen.calls_per_window(),
            "payload_hash": file.payload_hash(),
            "secs": secs,
        }),
    );
    Ok(())
}

fn mean_columns(t: &Tensor2) -> Vec<f64> {
    (0..t.cols())
        .map(|c| (0..t.rows()).map(|r| t.get(r, c)).sum::<f64>() / t.rows().max(1) as f64)
        .collect()
}

fn edit(g: &Global, a: &EditArgs) -> Result<()> {
    let out = g
        .out
        .clone()
        .ok_or_else(|| Error::Usage("edit needs --out".into()))?;
    if out == a.input || (out.exists() && out.canonicalize().ok() == a.input.canonicalize().ok()) {
        return Err(Error::Usage(
            "edit never overwrites its input; choose another --out".into(),
        ));
    }
    claim(&out, g.force)?;
    let before = SequenceFile::load(&a.input)?;
    let after = before.edit(a.index, a.delta)?;
    after.save(&out)?;
    let (mb, ma) = (mean_columns(&before.coeffs), mean_columns(&after.coeffs));
    let mut text = format!(
        "wrote {}\n  m   mean before   mean after        shift\n",
        out.display()
    );
    for m in 0..mb.len() {
        text.push_str(&format!(
            "{m:>3} {:>13.6} {:>12.6} {:>12.6}\n",
            mb[m],
            ma[m],
            ma[m] - mb[m]
        ));
    }
    emit(
        g,
        text.trim_end(),
        &json!({
            "path": out,
            "index": a.index,
            "delta": a.delta,
            "mean_before": mb,
            "mean_after": ma,
            "payload_hash_before": before.payload_hash(),
            "payload_hash_after": after.payload_hash(),
        }),
    );
    Ok(())
}

fn eval_config(cfg: &RunConfig, clips: Option<usize>) -> EvalConfig {
    let mut e = cfg.eval.clone();
    if let Some(c) = clips {
        e.clips = c;
        e.emotion_clips = e.emotion_clips.min(c);
    }
    e
}

fn heldout_set(cfg: &RunConfig, path: Option<&PathBuf>) -> Result<Dataset> {
    let path = required(
        path,
        cfg.paths.heldout.as_ref(),
        "held-out dataset (--heldout)",
    )?;
    let data = Dataset::load(&path)?;
    check_dataset(cfg, &data)?;
    Ok(data)
}

fn with_train_loss(mut m: MetricsReport, ck: &Checkpoint) -> MetricsReport {
    m.final_train_loss = ck.meta.get("final_loss").and_then(Value::as_f64);
    m
}

fn eval_cmd(g: &Global, cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let mut cfg = cfg.clone();
    apply_sampling(&mut cfg, &a.sampling)?;
    let ck_path = required(
        a.checkpoint.as_ref(),
        cfg.paths.checkpoint.as_ref(),
        "checkpoint (--checkpoint)",
    )?;
    let (ck, p) = load_model(g, &cfg, &ck_path)?;
    let heldout = heldout_set(&cfg, a.heldout.as_ref())?;
    let mut ecfg = eval_config(&cfg, a.clips);
    ecfg.sliced_wasserstein |= a.sliced_wasserstein;
    let gen = generator(&cfg, ck.parameterization);
    let report = with_train_loss(evaluate(&p, &gen, &heldout, &ecfg)?, &ck);
    let value = serde_json::to_value(&report)?;
    if let Some(out) = &g.out {
        claim(out, g.force)?;
        write_file(out, serde_json::to_string_pretty(&value)?.as_bytes())?;
        echo_config(&cfg, out)?;
    }
    let text = format!(
        "coefficient correlation {:.4}\nenergy distance {:.5} (oracle floor {:.5})\nfield mse {:.5}\nboundary jump ratio {:.3}\nemotion cosine {:.4}\n{:.2} ms per window, {} calls per window",
        report.coeff_correlation,
        report.energy_distance,
        report.energy_floor,
        report.field_mse,
        report.boundary_jump_ratio,
        report.emotion_cosine,
        report.secs_per_window * 1e3,
        report.calls_per_window
    );
    emit(g, &text, &value);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    Nfe,
    GammaA,
    GammaE,
    Solver,
    Baseline,
}

impl Axis {
    fn parse(s: &str) -> Result<Axis> {
        Ok(match s {
            "nfe" => Axis::Nfe,
            "gamma-a" => Axis::GammaA,
            "gamma-e" => Axis::GammaE,
            "solver" => Axis::Solver,
            "baseline" => Axis::Baseline,
            other => {
                return Err(Error::Usage(format!(
                    "unknown axis `{other}`; expected nfe, gamma-a, gamma-e, solver or baseline"
                )))
            }
        })
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Usage(format!("bad sweep value `{s}`")))
}

const REPORT_COLUMNS: [&str; 15] = [
    "config_hash",
    "seed",
    "parameterization",
    "final_train_loss",
    "field_mse",
    "coeff_correlation",
    "energy_distance",
    "energy_floor",
    "boundary_jump_ratio",
    "emotion_cosine",
    "sliced_wasserstein",
    "secs_per_window",
    "calls_per_window",
    "counted_calls",
    "windows",
];

fn csv_cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn sweep(g: &Global, cfg: &RunConfig, a: &SweepArgs) -> Result<()> {
    let axis = Axis::parse(&a.axis)?;
    let values: Vec<&str> = a
        .values
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .collect();
    if values.is_empty() {
        return Err(Error::Usage("--values must not be empty".into()));
    }
    let mut base = cfg.clone();
    apply_sampling(&mut base, &a.sampling)?;
    let out = g.out.clone().unwrap_or_else(|| "sweep".into());
    let (csv_path, json_path) = (out.with_extension("csv"), out.with_extension("json"));
    claim(&csv_path, g.force)?;
    claim(&json_path, g.force)?;
    let heldout = heldout_set(&base, a.heldout.as_ref())?;
    let ecfg = eval_config(&base, a.clips);
    let shared = match axis {
        Axis::Baseline => None,
        _ => {
            let path = required(
                a.checkpoint.as_ref(),
                base.paths.checkpoint.as_ref(),
                "checkpoint (--checkpoint)",
            )?;
            Some(load_model(g, &base, &path)?)
        }
    };

    let mut rows = Vec::new();
    for v in values {
        let mut run = base.clone();
        let loaded;
        let (ck, p) = match (&shared, axis) {
            (Some((ck, p)), _) => (ck, p),
            (None, _) => {
                loaded = load_model(g, &run, Path::new(v))?;
                (&loaded.0, &loaded.1)
            }
        };
        let incremental = |run: &RunConfig| match run.sample.guidance {
            GuidanceSpec::Incremental { gamma_a, gamma_e } => (gamma_a, gamma_e),
            _ => (2.0, 1.0),
        };
        match axis {
            Axis::Nfe => {
                let n: usize = parse_num(v)?;
                run.sample.nfe = n;
                run.ddim.steps = n;
            }
            Axis::GammaA | Axis::GammaE => {
                let x: f64 = parse_num(v)?;
                let (ga, ge) = incremental(&run);
                let spec = if axis == Axis::GammaA {
                    GuidanceSpec::Incremental {
                        gamma_a: x,
                        gamma_e: ge,
                    }
                } else {
                    GuidanceSpec::Incremental {
                        gamma_a: ga,
                        gamma_e: x,
                    }
                };
                run.sample.guidance = spec;
                run.ddim.guidance = spec;
            }
            Axis::Solver => {
                run.sample.solver = v
                    .parse::<Solver>()
                    .map_err(|e| Error::Usage(e.to_string()))?
            }
            Axis::Baseline => {}
        }
        run.validate()?;
        let gen = generator(&run, ck.parameterization);
        log::info!("sweep {} = {v}", a.axis);
        let report = with_train_loss(evaluate(p, &gen, &heldout, &ecfg)?, ck);
        let mut row = serde_json::Map::new();
        row.insert("axis".into(), json!(a.axis));
        row.insert("value".into(), json!(v));
        row.insert("run_config_hash".into(), json!(run.hash()));
        if let Value::Object(fields) = serde_json::to_value(&report)? {
            row.extend(fields);
        }
        rows.push(Value::Object(row));
    }

    let mut header = vec!["axis", "value", "run_config_hash"];
    header.extend(REPORT_COLUMNS);
    let mut csv = header.join(",") + "\n";
    for r in &rows {
        let cells: Vec<String> = header.iter().map(|k| csv_cell(&r[*k])).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    write_file(&csv_path, csv.as_bytes())?;
    let doc = json!({ "axis": a.axis, "config_hash": base.hash(), "rows": rows });
    write_file(&json_path, serde_json::to_string_pretty(&doc)?.as_bytes())?;
    echo_config(&base, &json_path)?;

    let mut text = format!(
        "{:<12} {:>10} {:>10} {:>12} {:>10}\n",
        a.axis, "pearson", "energy", "ms/window", "calls/win"
    );
    for r in &rows {
        text.push_str(&format!(
            "{:<12} {:>10.4} {:>10.5} {:>12.2} {:>10}\n",
            csv_cell(&r["value"]),
            r["coeff_correlation"].as_f64().unwrap_or(f64::NAN),
            r["energy_distance"].as_f64().unwrap_or(f64::NAN),
            r["secs_per_window"].as_f64().unwrap_or(f64::NAN) * 1e3,
            r["calls_per_window"]
        ));
    }
    text.push_str(&format!(
        "wrote {} and {}",
        csv_path.display(),
        json_path.display()
    ));
    emit(g, &text, &doc);
    Ok(())
}

fn inspect(g: &Global, a: &InspectArgs) -> Result<()> {
    let bytes =
        std::fs::read(&a.path).map_err(|e| Error::Data(format!("{}: {e}", a.path.display())))?;
    let magic = bytes.get(..4).unwrap_or_default();
    let value = match magic {
        b"MFDS" => {
            let d = Dataset::from_bytes(&bytes)?;
            json!({
                "kind": "dataset",
                "clips": d.len(),
                "first_clip": d.first_clip,
                "frames": d.spec.frames,
                "latent_dim": d.spec.latent_dim,
                "motion_dims": d.spec.motion_dims,
                "audio_dim": d.spec.audio_dim,
                "seed": d.spec.seed,
                "spec_hash": d.spec.hash(),
                "emotion_counts": d.emotion_counts(),
                "checksum": checksum_hex(&bytes),
            })
        }
        b"MFCK" => {
            let ck = Checkpoint::from_bytes(&bytes)?;
            json!({
                "kind": "checkpoint",
                "parameterization": ck.parameterization.tag(),
                "config_hash": ck.config.hash(),
                "config": ck.config,
                "parameters": ck.params.len(),
                "meta": ck.meta,
                "checksum": checksum_hex(&bytes),
            })
        }
        b"MFSQ" => {
            let s = SequenceFile::from_bytes(&bytes)?;
            json!({
                "kind": "sequence",
                "frames": s.frames(),
                "latent_dim": s.latents.cols(),
                "motion_dims": s.coeffs.cols(),
                "mean_coefficients": mean_columns(&s.coeffs),
                "payload_hash": s.payload_hash(),
                "provenance": s.provenance,
                "checksum": checksum_hex(&bytes),
            })
        }
        b"MFTJ" => {
            let mut r = motionflow::format::BlobReader::open(&bytes, b"MFTJ")?;
            let steps = r.usize()?;
            let first = r.tensor()?;
            json!({ "kind": "trajectory", "states": steps, "rows": first.rows(), "cols": first.cols() })
        }
        _ => {
            return Err(Error::Data(format!(
                "{}: unrecognized file",
                a.path.display()
            )))
        }
    };
    let text = serde_json::to_string_pretty(&value)?;
    emit(g, &text, &value);
    Ok(())
}
