//! Diffusion baselines on the shared backbone: cosine schedule, noise and
//! clean-sample parameterizations, deterministic DDIM sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tape::row_diff;
use crate::nn::{Tape, Var};
use crate::objective::{DropoutMask, Parameterization};
use crate::predictor::VectorFieldPredictor;
use crate::rng::{normal_matrix, Rng};
use crate::sampler::{
    guided_output, window_inputs, GuidanceSpec, WindowConditions, WindowOutput, WindowState,
};
use crate::tensor::Tensor2;

pub const DEFAULT_STEPS: usize = 500;
pub const DEFAULT_DDIM_STEPS: usize = 50;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Cosine variance schedule. Index `t` runs over `1..=steps`; `alpha_bar(0)`
/// is 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let mut betas = Vec::with_capacity(steps);
        let mut alpha_bars = vec![1.0];
        for t in 1..=steps {
            let beta = (1.0 - f(t) / f(t - 1)).min(MAX_BETA);
            betas.push(beta);
            alpha_bars.push(alpha_bars[t - 1] * (1.0 - beta));
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index {
                index: t,
                len: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    /// `ᾱ_t`, accepting `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t > self.steps() {
            return Err(Error::Index {
                index: t,
                len: self.steps(),
            });
        }
        Ok(self.alpha_bars[t])
    }

    /// `t / steps`, the value fed to the time embedding.
    pub fn normalized_time(&self, t: usize) -> f64 {
        t as f64 / self.steps() as f64
    }

    /// Evenly strided timesteps, descending: `1 + k * steps / count`.
    pub fn ddim_timesteps(&self, count: usize) -> Result<Vec<usize>> {
        if count == 0 || count > self.steps() {
            return Err(Error::Config(format!(
                "ddim steps must be in 1..={}",
                self.steps()
            )));
        }
        let stride = self.steps() / count;
        Ok((0..count).rev().map(|k| 1 + k * stride).collect())
    }
}

/// `√ᾱ_t·x0 + √(1 − ᾱ_t)·ε`.
pub fn forward_noise(
    x0: &Tensor2,
    t: usize,
    eps: &Tensor2,
    schedule: &NoiseSchedule,
) -> Result<Tensor2> {
    schedule.check(t)?;
    x0.ensure_same_shape(eps, "forward_noise")?;
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

/// Clean sample implied by a noise prediction.
pub fn x0_from_eps(x_t: &Tensor2, eps: &Tensor2, alpha_bar: f64) -> Tensor2 {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x_t.zip_map(eps, |x, e| (x - b * e) / a)
}

/// Noise implied by a clean-sample prediction.
pub fn eps_from_x0(x_t: &Tensor2, x0: &Tensor2, alpha_bar: f64) -> Tensor2 {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x_t.zip_map(x0, |x, c| (x - a * c) / b)
}

fn mean_sq(a: &Tensor2, b: &Tensor2) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.len().max(1) as f64
}

/// Mean squared error against the injected noise.
pub fn loss_eps(predicted: &Tensor2, eps: &Tensor2) -> Result<f64> {
    predicted.ensure_same_shape(eps, "loss_eps")?;
    Ok(mean_sq(predicted, eps))
}

/// `(simple, velocity)`: MSE against the clean sample and MSE between
/// one-frame differences.
pub fn loss_x0(predicted: &Tensor2, x0: &Tensor2) -> Result<(f64, f64)> {
    predicted.ensure_same_shape(x0, "loss_x0")?;
    let vel = if x0.rows() >= 2 {
        mean_sq(&row_diff(predicted)?, &row_diff(x0)?)
    } else {
        0.0
    };
    Ok((mean_sq(predicted, x0), vel))
}

/// Taped noise-prediction loss over the generated rows
/// (`predicted` is `[preceding | generated]`).
pub fn taped_eps_loss(
    tape: &mut Tape<'_>,
    predicted: Var,
    preceding: usize,
    eps: &Tensor2,
) -> Result<Var> {
    let gen = tape.slice_rows(predicted, preceding, eps.rows());
    tape.mean_sq_diff(gen, eps.clone())
}

/// Taped clean-sample loss over all rows, plus the velocity term.
pub fn taped_x0_loss(tape: &mut Tape<'_>, predicted: Var, x0_full: &Tensor2) -> Result<Var> {
    let simple = tape.mean_sq_diff(predicted, x0_full.clone())?;
    if x0_full.rows() < 2 {
        return Ok(simple);
    }
    let d = tape.row_diff(predicted)?;
    let vel = tape.mean_sq_diff(d, row_diff(x0_full)?)?;
    tape.add(simple, vel)
}

/// Deterministic DDIM over `timesteps` (descending). `model(x_t, t)` returns
/// the raw prediction under `param`; `project` is applied to every state and
/// to each clean-sample estimate. Returns the visited states.
pub fn ddim_integrate<F, P>(
    schedule: &NoiseSchedule,
    timesteps: &[usize],
    param: Parameterization,
    x_start: &Tensor2,
    mut model: F,
    mut project: P,
) -> Result<Vec<Tensor2>>
where
    F: FnMut(&Tensor2, usize) -> Result<Tensor2>,
    P: FnMut(&mut Tensor2),
{
    if param == Parameterization::Flow {
        return Err(Error::Config(
            "ddim needs a diffusion parameterization".into(),
        ));
    }
    let mut x = x_start.clone();
    project(&mut x);
    let mut traj = vec![x.clone()];
    for (k, &t) in timesteps.iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let prev = timesteps.get(k + 1).copied().unwrap_or(0);
        let ab_prev = schedule.alpha_bar(prev)?;
        let out = model(&x, t)?;
        out.ensure_same_shape(&x, "ddim model output")?;
        let (mut x0, eps) = match param {
            Parameterization::Epsilon => (x0_from_eps(&x, &out, ab), out),
            _ => (out.clone(), eps_from_x0(&x, &out, ab)),
        };
        project(&mut x0);
        let (a, b) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        x = x0.zip_map(&eps, |c, e| a * c + b * e);
        project(&mut x);
        if !x.is_finite() {
            return Err(Error::Numerical {
                step: k,
                msg: format!("ddim state diverged at t={t}"),
            });
        }
        traj.push(x.clone());
    }
    Ok(traj)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdimOptions {
    pub steps: usize,
    pub guidance: GuidanceSpec,
    pub clamp_preceding: bool,
}

impl Default for DdimOptions {
    fn default() -> Self {
        DdimOptions {
            steps: DEFAULT_DDIM_STEPS,
            guidance: GuidanceSpec::Incremental {
                gamma_a: 1.0,
                gamma_e: 1.0,
            },
            clamp_preceding: true,
        }
    }
}

/// Diffusion counterpart of [`crate::sampler::generate_window`].
pub fn ddim_window(
    p: &VectorFieldPredictor,
    schedule: &NoiseSchedule,
    param: Parameterization,
    state: &WindowState,
    cond: &WindowConditions<'_>,
    opts: &DdimOptions,
    rng: &mut Rng,
) -> Result<WindowOutput> {
    opts.guidance.validate()?;
    let cfg = p.config();
    if cond.audio.shape() != (cfg.window, cfg.audio_dim) {
        return Err(Error::Shape(format!(
            "window audio must be {}x{}",
            cfg.window, cfg.audio_dim
        )));
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
    let timesteps = schedule.ddim_timesteps(opts.steps)?;
    let x_start = normal_matrix(rng, cfg.total_frames(), cfg.latent_dim);
    let clamp = opts.clamp_preceding;
    let trajectory = ddim_integrate(
        schedule,
        &timesteps,
        param,
        &x_start,
        |x, t| {
            guided_output(
                p,
                x,
                &inputs,
                schedule.normalized_time(t),
                opts.guidance,
                base,
            )
        },
        |x| {
            if clamp {
                x.set_rows(0, &known);
            }
        },
    )?;
    let latents = trajectory
        .last()
        .expect("non-empty")
        .slice_rows(pre_rows, cfg.window);
    let keep = cfg.window - pre_rows.min(cfg.window);
    let next = WindowState {
        preceding_motion: latents.slice_rows(keep, pre_rows),
        preceding_audio: cond.audio.slice_rows(keep, pre_rows),
        preceding_extra: cond.extra.map(|e| e.slice_rows(keep, pre_rows)),
        window_index: state.window_index + 1,
        null_preceding: false,
    };
    Ok(WindowOutput {
        latents,
        state: next,
        trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream_rng};

    #[test]
    fn schedule_shape() {
        let s = NoiseSchedule::cosine(DEFAULT_STEPS).unwrap();
        assert_eq!(s.steps(), 500);
        for t in 1..=500 {
            let b = s.beta(t).unwrap();
            assert!(b > 0.0 && b < 1.0);
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
            if t > 1 {
                assert!(b >= s.beta(t - 1).unwrap());
            }
        }
        assert!(s.alpha_bar(1).unwrap() > 0.9999);
        assert!(s.beta(0).is_err() && s.beta(501).is_err());
    }

    #[test]
    fn ddim_grid() {
        let s = NoiseSchedule::cosine(500).unwrap();
        let ts = s.ddim_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (491, 1));
        assert!(ts.windows(2).all(|w| w[0] - w[1] == 10));
    }

    #[test]
    fn forward_noise_identities() {
        let s = NoiseSchedule::cosine(500).unwrap();
        let mut r = stream_rng(1, 0);
        let x0 = normal_matrix(&mut r, 3, 4);
        let eps = normal_matrix(&mut r, 3, 4);
        let z = Tensor2::zeros(3, 4);
        let near = forward_noise(&x0, 1, &eps, &s).unwrap();
        let ab1 = s.alpha_bar(1).unwrap();
        let eps_max = eps.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let x_max = x0.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(
            near.max_abs_diff(&x0)
                <= (1.0 - ab1.sqrt()) * x_max + (1.0 - ab1).sqrt() * eps_max + 1e-12
        );
        assert!((1.0 - ab1).sqrt() < 0.01);
        let scaled = forward_noise(&x0, 200, &z, &s).unwrap();
        assert!(scaled.max_abs_diff(&x0.scale(s.alpha_bar(200).unwrap().sqrt())) <= 1e-15);
        let xt = forward_noise(&x0, 250, &eps, &s).unwrap();
        assert!(x0_from_eps(&xt, &eps, s.alpha_bar(250).unwrap()).max_abs_diff(&x0) <= 1e-12);
        assert!(matches!(
            forward_noise(&x0, 0, &eps, &s),
            Err(Error::Index { index: 0, .. })
        ));
        assert!(matches!(
            forward_noise(&x0, 501, &eps, &s),
            Err(Error::Index { index: 501, .. })
        ));
    }

    #[test]
    fn parameterization_duality() {
        let mut r = stream_rng(2, 0);
        let xt = normal_matrix(&mut r, 4, 3);
        let eps = normal_matrix(&mut r, 4, 3);
        for ab in [0.9, 0.5, 0.01] {
            let back = eps_from_x0(&xt, &x0_from_eps(&xt, &eps, ab), ab);
            assert!(back.max_abs_diff(&eps) <= 1e-12);
        }
    }

    #[test]
    fn losses() {
        let a = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0], vec![4.0, 4.0]]).unwrap();
        assert_eq!(loss_eps(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_eps(&a.map(|v| v + 1.0), &a).unwrap(), 1.0);
        assert_eq!(loss_x0(&a, &a).unwrap(), (0.0, 0.0));
        let (simple, vel) = loss_x0(&a.map(|v| v + 2.0), &a).unwrap();
        assert_eq!((simple, vel), (4.0, 0.0));
        // hand case: diffs of a are [[2,3],[1,-1]]; of b are [[0,0],[0,0]]
        let b = Tensor2::filled(3, 2, 1.0);
        let (_, vel) = loss_x0(&a, &b).unwrap();
        assert!((vel - (4.0 + 9.0 + 1.0 + 1.0) / 4.0).abs() <= 1e-15);
        assert!(loss_eps(&a, &b.slice_rows(0, 2)).is_err());
    }

    #[test]
    fn taped_losses_match_plain() {
        let mut r = stream_rng(3, 0);
        let pred = normal_matrix(&mut r, 5, 2);
        let x0 = normal_matrix(&mut r, 5, 2);
        let params = crate::nn::PredictorParams::new();
        let mut tape = Tape::new(&params);
        let v = tape.input(pred.clone());
        let l = taped_x0_loss(&mut tape, v, &x0).unwrap();
        let (s, vel) = loss_x0(&pred, &x0).unwrap();
        assert!((tape.scalar(l) - s - vel).abs() <= 1e-12);
        let e = taped_eps_loss(&mut tape, v, 2, &x0.slice_rows(2, 3)).unwrap();
        assert!(
            (tape.scalar(e) - loss_eps(&pred.slice_rows(2, 3), &x0.slice_rows(2, 3)).unwrap())
                .abs()
                <= 1e-12
        );
    }

    #[test]
    fn oracle_eps_recovers_x0() {
        let s = NoiseSchedule::cosine(500).unwrap();
        let mut r = stream_rng(4, 0);
        let x0 = normal_matrix(&mut r, 3, 2);
        let eps = normal_matrix(&mut r, 3, 2);
        let ts = s.ddim_timesteps(50).unwrap();
        let start = forward_noise(&x0, ts[0], &eps, &s).unwrap();
        let traj = ddim_integrate(
            &s,
            &ts,
            Parameterization::Epsilon,
            &start,
            |_, _| Ok(eps.clone()),
            |_| {},
        )
        .unwrap();
        assert!(traj.last().unwrap().max_abs_diff(&x0) <= 1e-9);
        let traj = ddim_integrate(
            &s,
            &ts,
            Parameterization::X0,
            &start,
            |_, _| Ok(x0.clone()),
            |_| {},
        )
        .unwrap();
        assert!(traj.last().unwrap().max_abs_diff(&x0) <= 1e-12);
    }

    #[test]
    fn stepwise_forward_matches_closed_form() {
        let s = NoiseSchedule::cosine(500).unwrap();
        let n = 100_000;
        let x0 = 1.5;
        let t = 120;
        let mut r = stream_rng(5, 0);
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let mut x = x0;
            for k in 1..=t {
                let b = s.beta(k).unwrap();
                x = (1.0 - b).sqrt() * x + b.sqrt() * normal(&mut r);
            }
            sum += x;
            sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        let ab = s.alpha_bar(t).unwrap();
        let (m, v) = (ab.sqrt() * x0, 1.0 - ab);
        assert!(
            (mean - m).abs() <= 3.0 * (v / n as f64).sqrt(),
            "mean {mean} vs {m}"
        );
        // variance of the sample variance of a Gaussian: 2σ⁴/(n−1)
        assert!(
            (var - v).abs() <= 3.0 * (2.0 * v * v / (n - 1) as f64).sqrt(),
            "var {var} vs {v}"
        );
    }

    #[test]
    fn ddim_window_is_deterministic_and_counts_calls() {
        let cfg = crate::predictor::PredictorConfig {
            latent_dim: 3,
            audio_dim: 2,
            hidden: 8,
            heads: 2,
            blocks: 1,
            window: 4,
            preceding: 1,
            ..crate::predictor::PredictorConfig::desk()
        };
        let mut p = VectorFieldPredictor::new(cfg, 1).unwrap();
        let mut r = stream_rng(6, 0);
        p.params_mut()
            .for_each_flat_mut(|_, v| *v += 0.1 * normal(&mut r));
        let s = NoiseSchedule::cosine(500).unwrap();
        let audio = normal_matrix(&mut r, 4, 2);
        let emotion = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let src = [0.1, 0.2, 0.3];
        let cond = WindowConditions {
            audio: &audio,
            emotion: &emotion,
            source_motion: &src,
            extra: None,
        };
        let st = WindowState::initial(&p);
        let opts = DdimOptions::default();
        p.reset_call_count();
        let a = ddim_window(
            &p,
            &s,
            Parameterization::X0,
            &st,
            &cond,
            &opts,
            &mut stream_rng(9, 0),
        )
        .unwrap();
        assert_eq!(p.call_count(), 50 * 3);
        let b = ddim_window(
            &p,
            &s,
            Parameterization::X0,
            &st,
            &cond,
            &opts,
            &mut stream_rng(9, 0),
        )
        .unwrap();
        assert_eq!(a.latents, b.latents);
        assert!(ddim_window(
            &p,
            &s,
            Parameterization::Flow,
            &st,
            &cond,
            &opts,
            &mut stream_rng(9, 0)
        )
        .is_err());
    }
}
