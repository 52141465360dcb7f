//! Oracle-based evaluation of trained models on held-out synthetic clips.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_window, DdimOptions, NoiseSchedule, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::metrics::{energy_distance, pearson, sliced_wasserstein, subsample_rows, FrameDeltas};
use crate::objective::{DropoutMask, Parameterization};
use crate::predictor::VectorFieldPredictor;
use crate::rng::{derive_seed, normal_matrix, stream_rng};
use crate::sampler::{
    generate_sequence_with, generate_window, redirect_emotion, SampleOptions, SequenceConditions,
    WindowConditions, WindowOutput, WindowState,
};
use crate::synth::{make_dataset, window_starts, Clip, Dataset, NEUTRAL};
use crate::tensor::Tensor2;
use crate::train::{assemble_diffusion, assemble_flow};

/// How a model turns noise into a window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Generator {
    Flow(SampleOptions),
    Ddim {
        parameterization: Parameterization,
        options: DdimOptions,
        schedule_steps: usize,
    },
}

impl Generator {
    pub fn ddim(parameterization: Parameterization) -> Generator {
        Generator::Ddim {
            parameterization,
            options: DdimOptions::default(),
            schedule_steps: DEFAULT_STEPS,
        }
    }

    pub fn parameterization(&self) -> Parameterization {
        match self {
            Generator::Flow(_) => Parameterization::Flow,
            Generator::Ddim {
                parameterization, ..
            } => *parameterization,
        }
    }

    /// Predictor evaluations per window.
    pub fn calls_per_window(&self) -> usize {
        match self {
            Generator::Flow(o) => o.nfe * o.solver.evals_per_step() * o.guidance.calls_per_eval(),
            Generator::Ddim { options, .. } => options.steps * options.guidance.calls_per_eval(),
        }
    }

    /// Builds a reusable single-window sampler.
    pub fn window_sampler<'a>(
        &'a self,
        p: &'a VectorFieldPredictor,
    ) -> Result<
        impl FnMut(&WindowState, &WindowConditions<'_>, &mut crate::rng::Rng) -> Result<WindowOutput>
            + 'a,
    > {
        let schedule = match self {
            Generator::Ddim { schedule_steps, .. } => Some(NoiseSchedule::cosine(*schedule_steps)?),
            Generator::Flow(_) => None,
        };
        Ok(
            move |state: &WindowState, cond: &WindowConditions<'_>, rng: &mut crate::rng::Rng| {
                match self {
                    Generator::Flow(o) => generate_window(p, state, cond, o, rng),
                    Generator::Ddim {
                        parameterization,
                        options,
                        ..
                    } => ddim_window(
                        p,
                        schedule.as_ref().expect("built above"),
                        *parameterization,
                        state,
                        cond,
                        options,
                        rng,
                    ),
                }
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Held-out clips used for generation metrics.
    pub clips: usize,
    /// Clips used for the emotion-redirection check.
    pub emotion_clips: usize,
    /// Row cap per side for the energy distance.
    pub energy_rows: usize,
    pub sliced_wasserstein: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            clips: 100,
            emotion_clips: 8,
            energy_rows: 800,
            sliced_wasserstein: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub parameterization: String,
    pub final_train_loss: Option<f64>,
    /// Prediction error against the analytic target on held-out pairs.
    pub field_mse: f64,
    /// Mean per-clip, per-direction Pearson r of generated vs oracle
    /// coefficient trajectories.
    pub coeff_correlation: f64,
    pub energy_distance: f64,
    /// Energy distance between two independent oracle samples.
    pub energy_floor: f64,
    /// Mean boundary jump over median intra-window delta.
    pub boundary_jump_ratio: f64,
    /// Cosine between generated and oracle emotion shifts, averaged over
    /// non-neutral emotions.
    pub emotion_cosine: f64,
    pub sliced_wasserstein: Option<f64>,
    /// Wall-clock of window generation only.
    pub secs_per_window: f64,
    pub calls_per_window: usize,
    /// Predictor calls actually counted during generation.
    pub counted_calls: usize,
    pub windows: usize,
}

fn conditions(clip: &Clip, emotion: Option<Vec<f64>>) -> SequenceConditions {
    SequenceConditions {
        audio: clip.audio.clone(),
        emotion: emotion.unwrap_or_else(|| clip.emotion.clone()),
        source_motion: clip.source_motion.clone(),
        extra: None,
    }
}

/// Prediction MSE against the analytic target (flow field, noise or clean
/// sample) over one random window per clip, no dropout.
pub fn field_mse(
    p: &VectorFieldPredictor,
    param: Parameterization,
    data: &Dataset,
    clips: usize,
    seed: u64,
) -> Result<f64> {
    let pc = p.config();
    let starts = window_starts(data.spec.frames, pc.window, pc.preceding);
    let schedule = NoiseSchedule::cosine(DEFAULT_STEPS)?;
    let mut rng = stream_rng(seed, 0xf1e1d);
    let mut total = 0.0;
    let n = clips.min(data.len());
    for c in 0..n {
        let start = starts[rng.gen_range(0..starts.len())];
        let item = data.training_item(c, start, pc.window, pc.preceding)?;
        let mask = DropoutMask {
            drop_preceding: item.first_window,
            ..DropoutMask::NONE
        };
        let noise = normal_matrix(&mut rng, pc.window, pc.latent_dim);
        let a = match param {
            Parameterization::Flow => assemble_flow(&item, &mask, rng.gen_range(0.0..1.0), &noise)?,
            _ => assemble_diffusion(
                &item,
                &mask,
                rng.gen_range(1..=schedule.steps()),
                &noise,
                &schedule,
                param,
            )?,
        };
        let bundle = p.condition_with_nulls(&a.inputs, a.time, DropoutMask::NONE)?;
        let out = p.predict_field(&a.x_t, &bundle)?;
        let pred = if out.rows() == a.target.rows() {
            out
        } else {
            out.slice_rows(pc.preceding, pc.window)
        };
        total += pred
            .sub(&a.target)
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            / pred.len() as f64;
    }
    p.reset_call_count();
    Ok(total / n.max(1) as f64)
}

/// Generated sequences (one per clip) plus timing.
pub struct Generated {
    pub sequences: Vec<Tensor2>,
    pub secs: f64,
    pub windows: usize,
    pub calls: usize,
}

/// Overrides the emotion vector fed for a clip.
pub type EmotionFn<'a> = &'a dyn Fn(&Clip) -> Result<Vec<f64>>;

pub fn generate_for_clips(
    p: &VectorFieldPredictor,
    gen: &Generator,
    clips: &[Clip],
    seed: u64,
    emotion: Option<EmotionFn<'_>>,
) -> Result<Generated> {
    let mut sampler = gen.window_sampler(p)?;
    let mut out = Vec::with_capacity(clips.len());
    let mut secs = 0.0;
    let mut windows = 0;
    p.reset_call_count();
    for (i, clip) in clips.iter().enumerate() {
        let label = emotion.map(|f| f(clip)).transpose()?;
        let cond = conditions(clip, label);
        let mut rng = stream_rng(derive_seed(seed, i as u64), 0x6e7);
        let started = Instant::now();
        let seq = generate_sequence_with(p, &cond, &mut rng, |s, c, r| {
            windows += 1;
            sampler(s, c, r)
        })?;
        secs += started.elapsed().as_secs_f64();
        out.push(seq);
    }
    let calls = p.call_count();
    p.reset_call_count();
    Ok(Generated {
        sequences: out,
        secs,
        windows,
        calls,
    })
}

fn stack(rows: &[Tensor2]) -> Result<Tensor2> {
    let refs: Vec<&Tensor2> = rows.iter().collect();
    Tensor2::concat_rows(&refs)
}

/// Mean per-clip, per-direction correlation of coefficient trajectories.
pub fn coefficient_correlation(
    data: &Dataset,
    clips: &[Clip],
    sequences: &[Tensor2],
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (clip, seq) in clips.iter().zip(sequences) {
        let coeffs = data.basis.project_rows(seq)?;
        for m in 0..coeffs.cols() {
            let a: Vec<f64> = (0..coeffs.rows()).map(|l| coeffs.get(l, m)).collect();
            let b: Vec<f64> = (0..coeffs.rows()).map(|l| clip.coeffs.get(l, m)).collect();
            total += pearson(&a, &b)?;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Cosine between generated and oracle coefficient shifts when the emotion
/// label is redirected from neutral to each other class.
pub fn emotion_effect(
    p: &VectorFieldPredictor,
    gen: &Generator,
    data: &Dataset,
    clips: &[Clip],
    seed: u64,
) -> Result<f64> {
    let mean_coeffs = |label: usize| -> Result<Vec<f64>> {
        let f = move |c: &Clip| redirect_emotion(&c.emotion, label);
        let g = generate_for_clips(p, gen, clips, seed, Some(&f))?;
        let coeffs = data.basis.project_rows(&stack(&g.sequences)?)?;
        Ok((0..coeffs.cols())
            .map(|m| {
                (0..coeffs.rows()).map(|l| coeffs.get(l, m)).sum::<f64>() / coeffs.rows() as f64
            })
            .collect())
    };
    let neutral = mean_coeffs(NEUTRAL)?;
    let mut total = 0.0;
    let mut n = 0;
    for e in 0..crate::predictor::EMOTION_DIMS {
        if e == NEUTRAL {
            continue;
        }
        let shifted = mean_coeffs(e)?;
        let got: Vec<f64> = shifted.iter().zip(&neutral).map(|(a, b)| a - b).collect();
        let want: Vec<f64> = (0..got.len())
            .map(|m| data.spec.offsets.get(e, m) - data.spec.offsets.get(NEUTRAL, m))
            .collect();
        let dot = crate::tensor::dot(&got, &want);
        let norms = crate::tensor::dot(&got, &got).sqrt() * crate::tensor::dot(&want, &want).sqrt();
        total += if norms > 0.0 { dot / norms } else { 0.0 };
        n += 1;
    }
    Ok(total / n as f64)
}

/// Energy distance between two independent oracle samples of the same size
/// as the evaluation set.
pub fn oracle_energy_floor(heldout: &Dataset, clips: usize, rows: usize, seed: u64) -> Result<f64> {
    let other = make_dataset(&heldout.spec, heldout.first_clip + 1_000_000, clips)?;
    let a = stack(
        &heldout.clips[..clips]
            .iter()
            .map(|c| c.motion.clone())
            .collect::<Vec<_>>(),
    )?;
    let b = stack(
        &other
            .clips
            .iter()
            .map(|c| c.motion.clone())
            .collect::<Vec<_>>(),
    )?;
    energy_distance(
        &subsample_rows(&a, rows, seed),
        &subsample_rows(&b, rows, seed ^ 1),
    )
}

/// Full metrics report on the first `cfg.clips` held-out clips.
pub fn evaluate(
    p: &VectorFieldPredictor,
    gen: &Generator,
    heldout: &Dataset,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if heldout.is_empty() || cfg.clips == 0 {
        return Err(Error::Data("held-out set is empty".into()));
    }
    let n = cfg.clips.min(heldout.len());
    let clips = &heldout.clips[..n];
    let param = gen.parameterization();
    let field = field_mse(p, param, heldout, n, cfg.seed)?;
    let g = generate_for_clips(p, gen, clips, cfg.seed, None)?;
    let corr = coefficient_correlation(heldout, clips, &g.sequences)?;
    let generated = stack(&g.sequences)?;
    let oracle = stack(&clips.iter().map(|c| c.motion.clone()).collect::<Vec<_>>())?;
    let (gs, os) = (
        subsample_rows(&generated, cfg.energy_rows, cfg.seed),
        subsample_rows(&oracle, cfg.energy_rows, cfg.seed ^ 1),
    );
    let ed = energy_distance(&gs, &os)?;
    let floor = oracle_energy_floor(heldout, n, cfg.energy_rows, cfg.seed)?;
    let mut deltas = FrameDeltas::default();
    for s in &g.sequences {
        deltas.extend(FrameDeltas::of(s, p.config().window));
    }
    let emo_clips = &clips[..cfg.emotion_clips.min(n)];
    let emotion_cosine = if emo_clips.is_empty() {
        f64::NAN
    } else {
        emotion_effect(p, gen, heldout, emo_clips, cfg.seed)?
    };
    let sw = if cfg.sliced_wasserstein {
        Some(sliced_wasserstein(&gs, &os, 64, cfg.seed)?)
    } else {
        None
    };
    Ok(MetricsReport {
        config_hash: p.config().hash(),
        seed: cfg.seed,
        parameterization: param.tag().into(),
        final_train_loss: None,
        field_mse: field,
        coeff_correlation: corr,
        energy_distance: ed,
        energy_floor: floor,
        boundary_jump_ratio: deltas.jump_ratio(),
        emotion_cosine,
        sliced_wasserstein: sw,
        secs_per_window: g.secs / g.windows.max(1) as f64,
        calls_per_window: gen.calls_per_window(),
        counted_calls: g.calls,
        windows: g.windows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::PredictorConfig;
    use crate::synth::SceneSpec;

    fn setup() -> (VectorFieldPredictor, Dataset) {
        let spec = SceneSpec::seeded(1, 6, 3, 4, 16);
        let data = make_dataset(&spec, 100, 6).unwrap();
        let cfg = PredictorConfig {
            latent_dim: 6,
            audio_dim: 4,
            hidden: 16,
            heads: 2,
            blocks: 1,
            window: 8,
            preceding: 2,
            ..PredictorConfig::desk()
        };
        (VectorFieldPredictor::new(cfg, 2).unwrap(), data)
    }

    #[test]
    fn oracle_sequences_correlate_perfectly() {
        let (_, data) = setup();
        let seqs: Vec<Tensor2> = data.clips.iter().map(|c| c.motion.clone()).collect();
        assert!((coefficient_correlation(&data, &data.clips, &seqs).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn untrained_model_has_low_correlation_and_exact_call_count() {
        let (p, data) = setup();
        let gen = Generator::Flow(SampleOptions {
            nfe: 3,
            ..SampleOptions::default()
        });
        let cfg = EvalConfig {
            clips: 6,
            emotion_clips: 2,
            energy_rows: 100,
            sliced_wasserstein: true,
            seed: 0,
        };
        let r = evaluate(&p, &gen, &data, &cfg).unwrap();
        assert!(r.coeff_correlation.abs() < 0.3, "{}", r.coeff_correlation);
        assert_eq!(r.windows, 12);
        assert_eq!(r.counted_calls, 12 * 3 * 3);
        assert_eq!(r.calls_per_window, 9);
        assert!(r.sliced_wasserstein.unwrap() > 0.0);
        assert!(r.energy_distance > r.energy_floor);
    }

    #[test]
    fn ddim_generator_counts() {
        let (p, data) = setup();
        let gen = Generator::ddim(Parameterization::Epsilon);
        let g = generate_for_clips(&p, &gen, &data.clips[..1], 0, None).unwrap();
        assert_eq!(g.windows, 2);
        assert_eq!(g.calls, 2 * 50 * 3);
        assert_eq!(gen.calls_per_window(), 150);
    }

    #[test]
    fn empty_heldout_rejected() {
        let (p, mut data) = setup();
        data.clips.clear();
        let gen = Generator::Flow(SampleOptions::default());
        assert!(matches!(
            evaluate(&p, &gen, &data, &EvalConfig::default()),
            Err(Error::Data(_))
        ));
    }
}
