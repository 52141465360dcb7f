//! Minibatch training for the flow objective and the diffusion baselines.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    forward_noise, taped_eps_loss, taped_x0_loss, NoiseSchedule, DEFAULT_STEPS,
};
use crate::error::{Error, Result};
use crate::format::write_file;
use crate::nn::{AdamConfig, AdamState, Gradients, Tape};
use crate::objective::{
    ot_interpolate, sample_dropout, taped_total_loss, target_field, DropoutConfig, DropoutMask,
    LossWeights, Parameterization, TrainingItem,
};
use crate::predictor::{DrivingInputs, VectorFieldPredictor};
use crate::rng::{derive_seed, normal_matrix, stream_rng, Rng};
use crate::synth::{window_starts, Dataset};
use crate::tensor::Tensor2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate at the last step as a fraction of `lr` (cosine decay).
    pub lr_final_frac: f64,
    pub warmup: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub weights: LossWeights,
    pub dropout: DropoutConfig,
    pub seed: u64,
    pub log_every: usize,
    pub parameterization: Parameterization,
    pub diffusion_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch: 8,
            lr: 1e-3,
            lr_final_frac: 0.1,
            warmup: 100,
            grad_clip: 1.0,
            weights: LossWeights::default(),
            dropout: DropoutConfig::default(),
            seed: 0,
            log_every: 50,
            parameterization: Parameterization::Flow,
            diffusion_steps: DEFAULT_STEPS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.lr_final_frac) {
            return Err(Error::Config(
                "learning rate must be finite and non-negative".into(),
            ));
        }
        if self.grad_clip < 0.0 || self.log_every == 0 || self.diffusion_steps == 0 {
            return Err(Error::Config(
                "grad_clip >= 0, log_every >= 1, diffusion_steps >= 1 required".into(),
            ));
        }
        if self.weights.ot < 0.0 || self.weights.vel < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        self.dropout.validate()
    }

    /// Warmup then cosine decay to `lr * lr_final_frac`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.lr_final_frac + (1.0 - self.lr_final_frac) * cos)
    }
}

/// Network input and targets for one item.
#[derive(Clone, Debug)]
pub struct Assembled {
    pub x_t: Tensor2,
    pub inputs: DrivingInputs,
    /// Flow: `x1 − x0` on the generated rows. Diffusion: `ε` (noise) or the
    /// full clean block `[preceding | target]` (clean sample).
    pub target: Tensor2,
    /// Preceding rows as the network sees them.
    pub preceding: Tensor2,
    /// Value fed to the time embedding.
    pub time: f64,
}

fn preceding_input(item: &TrainingItem, mask: &DropoutMask) -> Tensor2 {
    if mask.drop_preceding {
        Tensor2::zeros(item.preceding_motion.rows(), item.preceding_motion.cols())
    } else {
        item.preceding_motion.clone()
    }
}

fn nulled_inputs(item: &TrainingItem, mask: &DropoutMask) -> DrivingInputs {
    DrivingInputs {
        audio: item.audio.clone(),
        emotion: item.emotion.clone(),
        source_motion: item.source_motion.clone(),
        extra: item.extra.clone(),
    }
    .with_nulls(mask, item.preceding_motion.rows())
}

/// Flow sample: known preceding rows followed by the OT interpolant.
pub fn assemble_flow(
    item: &TrainingItem,
    mask: &DropoutMask,
    t: f64,
    noise: &Tensor2,
) -> Result<Assembled> {
    let pre = preceding_input(item, mask);
    let point = ot_interpolate(noise, &item.target_motion, t)?;
    Ok(Assembled {
        x_t: Tensor2::concat_rows(&[&pre, &point.x_t])?,
        inputs: nulled_inputs(item, mask),
        target: target_field(noise, &item.target_motion)?,
        preceding: pre,
        time: t,
    })
}

/// Diffusion sample at integer step `t`.
pub fn assemble_diffusion(
    item: &TrainingItem,
    mask: &DropoutMask,
    t: usize,
    noise: &Tensor2,
    schedule: &NoiseSchedule,
    param: Parameterization,
) -> Result<Assembled> {
    let pre = preceding_input(item, mask);
    let noisy = forward_noise(&item.target_motion, t, noise, schedule)?;
    let target = match param {
        Parameterization::Epsilon => noise.clone(),
        Parameterization::X0 => Tensor2::concat_rows(&[&pre, &item.target_motion])?,
        Parameterization::Flow => return Err(Error::Config("flow items use assemble_flow".into())),
    };
    Ok(Assembled {
        x_t: Tensor2::concat_rows(&[&pre, &noisy])?,
        inputs: nulled_inputs(item, mask),
        target,
        preceding: pre,
        time: schedule.normalized_time(t),
    })
}

#[derive(Clone, Debug, Serialize)]
struct BatchEntry {
    clip: usize,
    start: usize,
    time: f64,
    mask: DropoutMask,
}

/// Draws one item, its dropout mask, and assembles the sample.
fn draw(
    data: &Dataset,
    starts: &[usize],
    cfg: &TrainConfig,
    p: &VectorFieldPredictor,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(Assembled, BatchEntry)> {
    let pc = p.config();
    let clip = rng.gen_range(0..data.len());
    let start = *starts.choose(rng).expect("non-empty starts");
    let item = data.training_item(clip, start, pc.window, pc.preceding)?;
    let mut mask = sample_dropout(rng, &cfg.dropout);
    mask.drop_preceding |= item.first_window;
    let noise = normal_matrix(rng, pc.window, pc.latent_dim);
    let a = match cfg.parameterization {
        Parameterization::Flow => {
            let t: f64 = rng.gen_range(0.0..1.0);
            assemble_flow(&item, &mask, t, &noise)?
        }
        param => {
            let t = rng.gen_range(1..=schedule.steps());
            assemble_diffusion(&item, &mask, t, &noise, schedule, param)?
        }
    };
    let time = a.time;
    Ok((
        a,
        BatchEntry {
            clip,
            start,
            time,
            mask,
        },
    ))
}

/// Records the loss for one sample; returns `(loss node, term a, term b)`.
fn sample_loss(
    tape: &mut Tape<'_>,
    p: &VectorFieldPredictor,
    a: &Assembled,
    cfg: &TrainConfig,
) -> Result<(crate::nn::Var, f64, f64)> {
    let out = p.record(tape, &a.x_t, &a.inputs, a.time)?;
    match cfg.parameterization {
        Parameterization::Flow => taped_total_loss(tape, out, &a.target, &a.preceding, cfg.weights),
        Parameterization::Epsilon => {
            let l = taped_eps_loss(tape, out, a.preceding.rows(), &a.target)?;
            let v = tape.scalar(l);
            Ok((l, v, 0.0))
        }
        Parameterization::X0 => {
            let l = taped_x0_loss(tape, out, &a.target)?;
            let v = tape.scalar(l);
            Ok((l, v, 0.0))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub term_a: f64,
    pub term_b: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Interval means, one per `log_every` steps.
    pub records: Vec<LossRecord>,
    /// Batch-mean loss of every step.
    pub step_losses: Vec<f64>,
    pub wall_secs: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "step,loss,term_a,term_b,lr,grad_norm")?;
        for r in &self.records {
            writeln!(
                buf,
                "{},{},{},{},{},{}",
                r.step, r.loss, r.term_a, r.term_b, r.lr, r.grad_norm
            )?;
        }
        write_file(path, &buf)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where a diagnostic snapshot goes if the loss turns non-finite.
    pub snapshot_dir: Option<PathBuf>,
    pub verbose: bool,
}

/// Runs `cfg.steps` Adam steps on batches drawn from `data`.
pub fn train(
    p: &mut VectorFieldPredictor,
    data: &Dataset,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    let pc = p.config().clone();
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if data.spec.latent_dim != pc.latent_dim || data.spec.audio_dim != pc.audio_dim {
        return Err(Error::Config(format!(
            "dataset dims (d={}, d_a={}) do not match predictor (d={}, d_a={})",
            data.spec.latent_dim, data.spec.audio_dim, pc.latent_dim, pc.audio_dim
        )));
    }
    let starts = window_starts(data.spec.frames, pc.window, pc.preceding);
    if starts.is_empty() {
        return Err(Error::Data(format!(
            "clips of {} frames are shorter than a window",
            data.spec.frames
        )));
    }
    let schedule = NoiseSchedule::cosine(cfg.diffusion_steps)?;
    let mut adam = AdamState::new(p.params());
    let mut report = TrainReport::default();
    let (mut acc, mut acc_a, mut acc_b, mut acc_g) = (0.0, 0.0, 0.0, 0.0);
    let started = Instant::now();
    for step in 0..cfg.steps {
        let mut rng = stream_rng(derive_seed(cfg.seed, step as u64), 0x7a1);
        let mut grads: Option<Gradients> = None;
        let (mut loss_sum, mut a_sum, mut b_sum) = (0.0, 0.0, 0.0);
        let mut entries = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let (sample, entry) = draw(data, &starts, cfg, p, &schedule, &mut rng)?;
            entries.push(entry);
            let mut tape = Tape::new(p.params());
            let (loss, ta, tb) = sample_loss(&mut tape, p, &sample, cfg)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(nan_abort(step, &entries, value, opts));
            }
            loss_sum += value;
            a_sum += ta;
            b_sum += tb;
            let g = tape.backward(loss)?;
            match grads.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => grads = Some(g),
            }
        }
        let mut grads = grads.expect("batch >= 1");
        grads.scale(1.0 / cfg.batch as f64);
        let gnorm = grads.norm();
        if !gnorm.is_finite() {
            return Err(nan_abort(step, &entries, gnorm, opts));
        }
        if cfg.grad_clip > 0.0 && gnorm > cfg.grad_clip {
            grads.scale(cfg.grad_clip / gnorm);
        }
        let lr = cfg.lr_at(step);
        adam.step(
            p.params_mut(),
            &grads,
            &AdamConfig {
                lr,
                ..AdamConfig::default()
            },
        )?;

        let n = cfg.batch as f64;
        report.step_losses.push(loss_sum / n);
        acc += loss_sum / n;
        acc_a += a_sum / n;
        acc_b += b_sum / n;
        acc_g += gnorm;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            let k = ((step % cfg.log_every) + 1) as f64;
            let rec = LossRecord {
                step: step + 1,
                loss: acc / k,
                term_a: acc_a / k,
                term_b: acc_b / k,
                lr,
                grad_norm: acc_g / k,
            };
            if opts.verbose {
                log::info!(
                    "step {} loss {:.5} ({:.5} + {:.5}) lr {:.2e}",
                    rec.step,
                    rec.loss,
                    rec.term_a,
                    rec.term_b,
                    lr
                );
            }
            report.records.push(rec);
            (acc, acc_a, acc_b, acc_g) = (0.0, 0.0, 0.0, 0.0);
        }
    }
    report.wall_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

fn nan_abort(step: usize, entries: &[BatchEntry], value: f64, opts: &TrainOptions) -> Error {
    let snapshot =
        serde_json::json!({ "step": step, "value": value.to_string(), "batch": entries });
    if let Some(dir) = &opts.snapshot_dir {
        let path = dir.join("nan_snapshot.json");
        if let Err(e) = write_file(&path, snapshot.to_string().as_bytes()) {
            log::warn!("could not write snapshot: {e}");
        }
    }
    Error::Numerical {
        step,
        msg: format!("non-finite training loss; batch {snapshot}"),
    }
}
