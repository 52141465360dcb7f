//! Guided ODE sampling and sliding-window generation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{write_file, BlobWriter};
use crate::objective::DropoutMask;
use crate::predictor::{DrivingInputs, VectorFieldPredictor, EMOTION_DIMS};
use crate::rng::{normal_matrix, Rng};
use crate::tensor::Tensor2;

pub const DEFAULT_NFE: usize = 10;

/// Classifier-free guidance mode and scales.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum GuidanceSpec {
    None,
    Single { gamma: f64 },
    Incremental { gamma_a: f64, gamma_e: f64 },
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        GuidanceSpec::Incremental {
            gamma_a: 2.0,
            gamma_e: 1.0,
        }
    }
}

impl GuidanceSpec {
    /// Predictor evaluations per field evaluation.
    pub fn calls_per_eval(&self) -> usize {
        match self {
            GuidanceSpec::None => 1,
            GuidanceSpec::Single { .. } => 2,
            GuidanceSpec::Incremental { .. } => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = match *self {
            GuidanceSpec::None => true,
            GuidanceSpec::Single { gamma } => gamma.is_finite(),
            GuidanceSpec::Incremental { gamma_a, gamma_e } => {
                gamma_a.is_finite() && gamma_e.is_finite()
            }
        };
        if finite {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "guidance scales must be finite: {self:?}"
            )))
        }
    }
}

/// Mask for "everything the guidance can remove": source, emotion and audio.
/// Preceding context is never part of the guided condition.
fn with_base(base: DropoutMask, source: bool, emotion: bool, audio: bool) -> DropoutMask {
    DropoutMask {
        drop_source: base.drop_source || source,
        drop_emotion: base.drop_emotion || emotion,
        drop_audio: base.drop_audio || audio,
        drop_preceding: base.drop_preceding,
    }
}

fn raw(
    p: &VectorFieldPredictor,
    x: &Tensor2,
    inputs: &DrivingInputs,
    t: f64,
    mask: DropoutMask,
) -> Result<Tensor2> {
    let bundle = p.condition_with_nulls(inputs, t, mask)?;
    p.predict_field(x, &bundle)
}

/// `γ·v(x, c) + (1 − γ)·v(x, ∅)`.
pub fn cfv(
    p: &VectorFieldPredictor,
    x: &Tensor2,
    inputs: &DrivingInputs,
    t: f64,
    gamma: f64,
) -> Result<Tensor2> {
    cfv_with_base(p, x, inputs, t, gamma, DropoutMask::NONE)
}

fn cfv_with_base(
    p: &VectorFieldPredictor,
    x: &Tensor2,
    inputs: &DrivingInputs,
    t: f64,
    gamma: f64,
    base: DropoutMask,
) -> Result<Tensor2> {
    let cond = raw(p, x, inputs, t, base)?;
    let uncond = raw(p, x, inputs, t, with_base(base, true, true, true))?;
    Ok(cond.zip_map(&uncond, |c, u| gamma * c + (1.0 - gamma) * u))
}

/// `v(c∖{a,e}) + γ_a·[v(c∖e) − v(c∖{a,e})] + γ_e·[v(c) − v(c∖e)]`.
pub fn incremental_cfv(
    p: &VectorFieldPredictor,
    x: &Tensor2,
    inputs: &DrivingInputs,
    t: f64,
    gamma_a: f64,
    gamma_e: f64,
) -> Result<Tensor2> {
    incremental_with_base(p, x, inputs, t, gamma_a, gamma_e, DropoutMask::NONE)
}

fn incremental_with_base(
    p: &VectorFieldPredictor,
    x: &Tensor2,
    inputs: &DrivingInputs,
    t: f64,
    gamma_a: f64,
    gamma_e: f64,
    base: DropoutMask,
) -> Result<Tensor2> {
    let none = raw(p, x, inputs, t, with_base(base, false, true, true))?;
    let audio = raw(p, x, inputs, t, with_base(base, false, true, false))?;
    let full = raw(p, x, inputs, t, base)?;
    let mut out = none.clone();
    for i in 0..out.len() {
        let (n, a, f) = (none.data()[i], audio.data()[i], full.data()[i]);
        out.data_mut()[i] = n + gamma_a * (a - n) + gamma_e * (f - a);
    }
    Ok(out)
}

/// Evaluates the predictor under `guidance` with `base` nulls always applied.
pub fn guided_output(
    p: &VectorFieldPredictor,
    x: &Tensor2,
    inputs: &DrivingInputs,
    t: f64,
    guidance: GuidanceSpec,
    base: DropoutMask,
) -> Result<Tensor2> {
    match guidance {
        GuidanceSpec::None => raw(p, x, inputs, t, base),
        GuidanceSpec::Single { gamma } => cfv_with_base(p, x, inputs, t, gamma, base),
        GuidanceSpec::Incremental { gamma_a, gamma_e } => {
            incremental_with_base(p, x, inputs, t, gamma_a, gamma_e, base)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    #[default]
    Euler,
    Midpoint,
}

impl Solver {
    pub fn evals_per_step(self) -> usize {
        match self {
            Solver::Euler => 1,
            Solver::Midpoint => 2,
        }
    }
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Solver::Euler),
            "midpoint" => Ok(Solver::Midpoint),
            _ => Err(Error::Usage(format!("unknown solver '{s}'"))),
        }
    }
}

fn checked(v: Tensor2, step: usize) -> Result<Tensor2> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical {
            step,
            msg: "non-finite field value".into(),
        })
    }
}

/// Fixed-step integration on the grid `t_k = k / nfe`. `project` is applied
/// to the initial state, to the midpoint probe and after every step.
pub fn integrate<F, P>(
    solver: Solver,
    mut field: F,
    x0: &Tensor2,
    nfe: usize,
    mut project: P,
) -> Result<Vec<Tensor2>>
where
    F: FnMut(&Tensor2, f64) -> Result<Tensor2>,
    P: FnMut(&mut Tensor2),
{
    if nfe == 0 {
        return Err(Error::Config("nfe must be at least 1".into()));
    }
    let h = 1.0 / nfe as f64;
    let mut x = x0.clone();
    project(&mut x);
    let mut traj = Vec::with_capacity(nfe + 1);
    traj.push(x.clone());
    for k in 0..nfe {
        let t = k as f64 * h;
        let v = checked(field(&x, t)?, k)?;
        v.ensure_same_shape(&x, "field output")?;
        let dx = match solver {
            Solver::Euler => v,
            Solver::Midpoint => {
                let mut mid = x.clone();
                mid.axpy(0.5 * h, &v);
                project(&mut mid);
                checked(field(&mid, t + 0.5 * h)?, k)?
            }
        };
        dx.ensure_same_shape(&x, "field output")?;
        x.axpy(h, &dx);
        project(&mut x);
        if !x.is_finite() {
            return Err(Error::Numerical {
                step: k,
                msg: "state diverged".into(),
            });
        }
        traj.push(x.clone());
    }
    Ok(traj)
}

pub fn euler_integrate<F>(field: F, x0: &Tensor2, nfe: usize) -> Result<Vec<Tensor2>>
where
    F: FnMut(&Tensor2, f64) -> Result<Tensor2>,
{
    integrate(Solver::Euler, field, x0, nfe, |_| {})
}

pub fn midpoint_integrate<F>(field: F, x0: &Tensor2, nfe: usize) -> Result<Vec<Tensor2>>
where
    F: FnMut(&Tensor2, f64) -> Result<Tensor2>,
{
    integrate(Solver::Midpoint, field, x0, nfe, |_| {})
}

/// Context carried from one window to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowState {
    /// `L' x d`
    pub preceding_motion: Tensor2,
    /// `L' x d_a`
    pub preceding_audio: Tensor2,
    pub preceding_extra: Option<Tensor2>,
    pub window_index: usize,
    /// Set for the first window, whose preceding blocks are zeros.
    pub null_preceding: bool,
}

impl WindowState {
    pub fn initial(p: &VectorFieldPredictor) -> WindowState {
        let cfg = p.config();
        WindowState {
            preceding_motion: Tensor2::zeros(cfg.preceding, cfg.latent_dim),
            preceding_audio: Tensor2::zeros(cfg.preceding, cfg.audio_dim),
            preceding_extra: (cfg.extra_dims > 0)
                .then(|| Tensor2::zeros(cfg.preceding, cfg.extra_dims)),
            window_index: 0,
            null_preceding: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleOptions {
    pub guidance: GuidanceSpec,
    pub nfe: usize,
    pub solver: Solver,
    /// Hold the preceding rows at their known values during integration.
    pub clamp_preceding: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            guidance: GuidanceSpec::default(),
            nfe: DEFAULT_NFE,
            solver: Solver::Euler,
            clamp_preceding: true,
        }
    }
}

/// Per-window conditioning for the generated frames.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowConditions<'a> {
    /// `L x d_a` audio of the frames to generate.
    pub audio: &'a Tensor2,
    pub emotion: &'a [f64],
    pub source_motion: &'a [f64],
    /// `L x d_x` when the predictor has an extra channel.
    pub extra: Option<&'a Tensor2>,
}

#[derive(Clone, Debug)]
pub struct WindowOutput {
    /// `L x d`
    pub latents: Tensor2,
    pub state: WindowState,
    /// Full `(L' + L) x d` states, `nfe + 1` of them.
    pub trajectory: Vec<Tensor2>,
}

/// Assembles the `(L' + L)` driving inputs for one window.
pub fn window_inputs(state: &WindowState, cond: &WindowConditions<'_>) -> Result<DrivingInputs> {
    let extra = match (&state.preceding_extra, cond.extra) {
        (Some(pre), Some(x)) => Some(Tensor2::concat_rows(&[pre, x])?),
        (None, None) => None,
        _ => {
            return Err(Error::Shape(
                "extra channel presence differs between state and window".into(),
            ))
        }
    };
    Ok(DrivingInputs {
        audio: Tensor2::concat_rows(&[&state.preceding_audio, cond.audio])?,
        emotion: cond.emotion.to_vec(),
        source_motion: cond.source_motion.to_vec(),
        extra,
    })
}

/// Generates one window of `L` latents and the state for the next window.
pub fn generate_window(
    p: &VectorFieldPredictor,
    state: &WindowState,
    cond: &WindowConditions<'_>,
    opts: &SampleOptions,
    rng: &mut Rng,
) -> Result<WindowOutput> {
    opts.guidance.validate()?;
    let cfg = p.config();
    if cond.audio.shape() != (cfg.window, cfg.audio_dim) {
        return Err(Error::Shape(format!(
            "window audio must be {}x{}, got {:?}",
            cfg.window,
            cfg.audio_dim,
            cond.audio.shape()
        )));
    }
    if state.preceding_motion.shape() != (cfg.preceding, cfg.latent_dim) {
        return Err(Error::Shape(
            "preceding motion does not match predictor config".into(),
        ));
    }
    let inputs = window_inputs(state, cond)?;
    let base = DropoutMask {
        drop_preceding: state.null_preceding,
        ..DropoutMask::NONE
    };
    let pre_rows = cfg.preceding;
    let known = if state.null_preceding {
        Tensor2::zeros(pre_rows, cfg.latent_dim)
    } else {
        state.preceding_motion.clone()
    };
    let x0 = normal_matrix(rng, cfg.total_frames(), cfg.latent_dim);
    let clamp = opts.clamp_preceding;
    let field = |x: &Tensor2, t: f64| {
        let mut v = guided_output(p, x, &inputs, t, opts.guidance, base)?;
        if clamp {
            v.set_rows(0, &Tensor2::zeros(pre_rows, cfg.latent_dim));
        }
        Ok(v)
    };
    let project = |x: &mut Tensor2| {
        if clamp {
            x.set_rows(0, &known);
        }
    };
    let trajectory = integrate(opts.solver, field, &x0, opts.nfe, project)?;
    let last = trajectory.last().expect("nfe >= 1");
    let latents = last.slice_rows(pre_rows, cfg.window);
    let keep = cfg.window - pre_rows.min(cfg.window);
    let next = WindowState {
        preceding_motion: tail_rows(&latents, pre_rows, keep),
        preceding_audio: tail_rows(cond.audio, pre_rows, keep),
        preceding_extra: cond.extra.map(|e| tail_rows(e, pre_rows, keep)),
        window_index: state.window_index + 1,
        null_preceding: false,
    };
    Ok(WindowOutput {
        latents,
        state: next,
        trajectory,
    })
}

fn tail_rows(t: &Tensor2, count: usize, start: usize) -> Tensor2 {
    t.slice_rows(start, count)
}

/// Full-sequence driving signals.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceConditions {
    /// `N x d_a`
    pub audio: Tensor2,
    pub emotion: Vec<f64>,
    pub source_motion: Vec<f64>,
    pub extra: Option<Tensor2>,
}

/// Sliding-window generation of `N` frames. A trailing partial window is
/// padded with zero audio and truncated.
pub fn generate_sequence(
    p: &VectorFieldPredictor,
    seq: &SequenceConditions,
    opts: &SampleOptions,
    rng: &mut Rng,
) -> Result<Tensor2> {
    generate_sequence_with(p, seq, rng, |state, cond, rng| {
        generate_window(p, state, cond, opts, rng)
    })
}

/// Sliding-window driver around any single-window sampler.
pub fn generate_sequence_with<W>(
    p: &VectorFieldPredictor,
    seq: &SequenceConditions,
    rng: &mut Rng,
    mut window_fn: W,
) -> Result<Tensor2>
where
    W: FnMut(&WindowState, &WindowConditions<'_>, &mut Rng) -> Result<WindowOutput>,
{
    let cfg = p.config();
    let n = seq.audio.rows();
    if seq.audio.cols() != cfg.audio_dim {
        return Err(Error::Dim {
            expected: cfg.audio_dim,
            got: seq.audio.cols(),
        });
    }
    let pad = |t: &Tensor2, start: usize| {
        let avail = (t.rows() - start).min(cfg.window);
        let mut w = Tensor2::zeros(cfg.window, t.cols());
        w.set_rows(0, &t.slice_rows(start, avail));
        w
    };
    let mut state = WindowState::initial(p);
    let mut out = Tensor2::zeros(n, cfg.latent_dim);
    let mut start = 0;
    while start < n {
        let audio = pad(&seq.audio, start);
        let extra = seq.extra.as_ref().map(|e| pad(e, start));
        let cond = WindowConditions {
            audio: &audio,
            emotion: &seq.emotion,
            source_motion: &seq.source_motion,
            extra: extra.as_ref(),
        };
        let w = window_fn(&state, &cond, rng)?;
        let take = (n - start).min(cfg.window);
        out.set_rows(start, &w.latents.slice_rows(0, take));
        state = w.state;
        start += cfg.window;
    }
    Ok(out)
}

/// One-hot emotion label at `target`.
pub fn redirect_emotion(predicted: &[f64], target: usize) -> Result<Vec<f64>> {
    if predicted.len() != EMOTION_DIMS {
        return Err(Error::Dim {
            expected: EMOTION_DIMS,
            got: predicted.len(),
        });
    }
    if target >= EMOTION_DIMS {
        return Err(Error::Index {
            index: target,
            len: EMOTION_DIMS,
        });
    }
    let mut v = vec![0.0; EMOTION_DIMS];
    v[target] = 1.0;
    Ok(v)
}

#[derive(Serialize)]
struct TrajectoryIndex {
    steps: usize,
    rows: usize,
    cols: usize,
    times: Vec<f64>,
    payload: String,
}

/// Writes `traj.bin` (all states, row-major) and `traj.json` into `dir`.
pub fn dump_trajectory(dir: &Path, traj: &[Tensor2]) -> Result<()> {
    let first = traj
        .first()
        .ok_or_else(|| Error::State("empty trajectory".into()))?;
    let mut w = BlobWriter::new(b"MFTJ", 1);
    w.u64(traj.len() as u64);
    for s in traj {
        w.tensor(s);
    }
    let bytes = w.finish();
    write_file(&dir.join("traj.bin"), &bytes)?;
    let steps = traj.len() - 1;
    let index = TrajectoryIndex {
        steps,
        rows: first.rows(),
        cols: first.cols(),
        times: (0..=steps)
            .map(|k| k as f64 / steps.max(1) as f64)
            .collect(),
        payload: "traj.bin".into(),
    };
    write_file(
        &dir.join("traj.json"),
        serde_json::to_string_pretty(&index)?.as_bytes(),
    )
}
