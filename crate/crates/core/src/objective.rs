//! Optimal-transport conditional flow matching objective.
//!
//! Noise `x0` and data `x1` are joined by the straight path
//! `x_t = (1 - t) x0 + t x1`, whose constant velocity `x1 - x0` is the
//! regression target. The predictor additionally reconstructs the preceding
//! window it was given as context, and a one-frame difference penalty ties
//! the temporal structure of its output to the stitched target.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tape::{row_diff, Tape, Var};
use crate::rng::Rng;
use crate::tensor::Tensor2;

/// A point on the probability path at flow time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPoint {
    pub t: f64,
    pub x_t: Tensor2,
}

/// `(1 - t) x0 + t x1`; exact at both endpoints.
pub fn ot_interpolate(x0: &Tensor2, x1: &Tensor2, t: f64) -> Result<FlowPoint> {
    x0.ensure_same_shape(x1, "ot_interpolate")?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("flow time {t} outside [0, 1]")));
    }
    let x_t = if t == 0.0 {
        x0.clone()
    } else if t == 1.0 {
        x1.clone()
    } else {
        x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b)
    };
    Ok(FlowPoint { t, x_t })
}

/// Conditional OT velocity `x1 - x0`; the same at every flow time.
pub fn target_field(x0: &Tensor2, x1: &Tensor2) -> Result<Tensor2> {
    x0.ensure_same_shape(x1, "target_field")?;
    Ok(x1.sub(x0))
}

/// Time-indexed form of [`target_field`]; `t` is accepted and ignored.
pub fn target_field_at(x0: &Tensor2, x1: &Tensor2, _t: f64) -> Result<Tensor2> {
    target_field(x0, x1)
}

/// `log N(x | t x1, (1 - t)² I)`
pub fn conditional_path_logpdf(x: &Tensor2, x1: &Tensor2, t: f64) -> Result<f64> {
    x.ensure_same_shape(x1, "conditional_path_logpdf")?;
    if t >= 1.0 {
        return Err(Error::Degenerate(
            "conditional path collapses to a point mass at t = 1".into(),
        ));
    }
    if t < 0.0 {
        return Err(Error::Config(format!("flow time {t} outside [0, 1)")));
    }
    let sigma = 1.0 - t;
    let n = x.len() as f64;
    let sq: f64 = x
        .data()
        .iter()
        .zip(x1.data())
        .map(|(a, b)| (a - t * b).powi(2))
        .sum();
    Ok(-0.5 * n * (2.0 * std::f64::consts::PI * sigma * sigma).ln() - 0.5 * sq / (sigma * sigma))
}

fn mean_abs(a: &Tensor2, b: &Tensor2) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.len().max(1) as f64
}

/// Mean-reduced L1 on the generated rows plus mean-reduced L1 on the
/// preceding rows. `predicted` is `[preceding | generated]`.
pub fn cfm_loss(
    predicted: &Tensor2,
    target_u: &Tensor2,
    preceding_target: &Tensor2,
) -> Result<f64> {
    let (pre, gen) = split_prediction(predicted, preceding_target, target_u)?;
    let mut loss = mean_abs(&gen, target_u);
    if preceding_target.rows() > 0 {
        loss += mean_abs(&pre, preceding_target);
    }
    Ok(loss)
}

fn split_prediction(
    predicted: &Tensor2,
    preceding: &Tensor2,
    target_u: &Tensor2,
) -> Result<(Tensor2, Tensor2)> {
    let (lp, l) = (preceding.rows(), target_u.rows());
    if predicted.rows() != lp + l
        || predicted.cols() != target_u.cols()
        || preceding.cols() != target_u.cols()
    {
        return Err(Error::Shape(format!(
            "prediction {}x{} does not split into {lp} preceding + {l} generated rows of width {}",
            predicted.rows(),
            predicted.cols(),
            target_u.cols()
        )));
    }
    Ok((predicted.slice_rows(0, lp), predicted.slice_rows(lp, l)))
}

/// `[preceding | target_u]`, the sequence the velocity penalty compares to.
pub fn stitched_target(preceding_target: &Tensor2, target_u: &Tensor2) -> Result<Tensor2> {
    Tensor2::concat_rows(&[preceding_target, target_u])
}

/// Mean L1 between one-frame differences of prediction and stitched target.
pub fn velocity_loss(predicted: &Tensor2, stitched: &Tensor2) -> Result<f64> {
    predicted.ensure_same_shape(stitched, "velocity_loss")?;
    Ok(mean_abs(&row_diff(predicted)?, &row_diff(stitched)?))
}

/// Balancing weights of the two loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub ot: f64,
    pub vel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ot: 1.0, vel: 1.0 }
    }
}

pub fn total_loss(cfm: f64, vel: f64, w: LossWeights) -> Result<f64> {
    if w.ot < 0.0 || w.vel < 0.0 {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    Ok(w.ot * cfm + w.vel * vel)
}

/// Taped objective: returns the scalar total loss node together with the
/// values of its two terms.
pub fn taped_total_loss(
    tape: &mut Tape<'_>,
    predicted: Var,
    target_u: &Tensor2,
    preceding_target: &Tensor2,
    w: LossWeights,
) -> Result<(Var, f64, f64)> {
    let (lp, l) = (preceding_target.rows(), target_u.rows());
    let pred_val = tape.value(predicted);
    split_prediction(pred_val, preceding_target, target_u)?;
    let gen = tape.slice_rows(predicted, lp, l);
    let mut cfm = tape.mean_abs_diff(gen, target_u.clone())?;
    if lp > 0 {
        let pre = tape.slice_rows(predicted, 0, lp);
        let pre_loss = tape.mean_abs_diff(pre, preceding_target.clone())?;
        cfm = tape.add(cfm, pre_loss)?;
    }
    let cfm_value = tape.scalar(cfm);
    let mut loss = tape.scale(cfm, w.ot);
    let mut vel_value = 0.0;
    if lp + l >= 2 {
        let stitched = stitched_target(preceding_target, target_u)?;
        let dp = tape.row_diff(predicted)?;
        let vel = tape.mean_abs_diff(dp, row_diff(&stitched)?)?;
        vel_value = tape.scalar(vel);
        let vel = tape.scale(vel, w.vel);
        loss = tape.add(loss, vel)?;
    }
    Ok((loss, cfm_value, vel_value))
}

/// One supervised window.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingItem {
    /// `L x d`
    pub target_motion: Tensor2,
    /// `L' x d`; zeros for a first window.
    pub preceding_motion: Tensor2,
    /// `(L' + L) x d_a`
    pub audio: Tensor2,
    pub emotion: Vec<f64>,
    pub source_motion: Vec<f64>,
    pub extra: Option<Tensor2>,
    /// No true predecessor: the preceding channel is always nulled.
    pub first_window: bool,
}

impl TrainingItem {
    pub fn validate(&self, window: usize, preceding: usize) -> Result<()> {
        let d = self.target_motion.cols();
        if self.target_motion.rows() != window
            || self.preceding_motion.shape() != (preceding, d)
            || self.audio.rows() != preceding + window
            || self.source_motion.len() != d
        {
            return Err(Error::Shape(format!(
                "training item does not match L={window}, L'={preceding}"
            )));
        }
        if let Some(x) = &self.extra {
            if x.rows() != preceding + window {
                return Err(Error::Shape("extra channel length mismatch".into()));
            }
        }
        let sum: f64 = self.emotion.iter().sum();
        if self.emotion.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Data(format!(
                "emotion label is not a distribution (sum {sum})"
            )));
        }
        Ok(())
    }
}

/// What the predictor output regresses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    /// Flow-matching vector field.
    #[default]
    Flow,
    /// Diffusion noise prediction.
    Epsilon,
    /// Diffusion clean-sample prediction.
    X0,
}

impl Parameterization {
    pub fn tag(self) -> &'static str {
        match self {
            Parameterization::Flow => "flow",
            Parameterization::Epsilon => "eps",
            Parameterization::X0 => "x0",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "flow" => Ok(Parameterization::Flow),
            "eps" => Ok(Parameterization::Epsilon),
            "x0" => Ok(Parameterization::X0),
            _ => Err(Error::Usage(format!("unknown parameterization '{tag}'"))),
        }
    }
}

/// Which condition channels are replaced by the null token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropoutMask {
    pub drop_source: bool,
    pub drop_emotion: bool,
    pub drop_audio: bool,
    pub drop_preceding: bool,
}

impl DropoutMask {
    pub const NONE: DropoutMask = DropoutMask {
        drop_source: false,
        drop_emotion: false,
        drop_audio: false,
        drop_preceding: false,
    };
    pub const ALL: DropoutMask = DropoutMask {
        drop_source: true,
        drop_emotion: true,
        drop_audio: true,
        drop_preceding: true,
    };
}

/// Per-channel drop probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DropoutConfig {
    pub source: f64,
    pub emotion: f64,
    pub audio: f64,
    pub preceding: f64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            source: 0.1,
            emotion: 0.1,
            audio: 0.1,
            preceding: 0.5,
        }
    }
}

impl DropoutConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("source", self.source),
            ("emotion", self.emotion),
            ("audio", self.audio),
            ("preceding", self.preceding),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "dropout probability for {name} is {p}, outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Independent Bernoulli draw per channel.
pub fn sample_dropout(rng: &mut Rng, cfg: &DropoutConfig) -> DropoutMask {
    // p = 0 never fires and p = 1 always fires because gen::<f64>() is in [0, 1)
    let mut draw = |p: f64| rng.gen::<f64>() < p;
    DropoutMask {
        drop_source: draw(cfg.source),
        drop_emotion: draw(cfg.emotion),
        drop_audio: draw(cfg.audio),
        drop_preceding: draw(cfg.preceding),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::PredictorParams;
    use crate::rng::{self, normal_matrix, stream_rng};

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let mut r = stream_rng(1, 0);
        let x0 = normal_matrix(&mut r, 4, 3);
        let x1 = normal_matrix(&mut r, 4, 3);
        assert_eq!(ot_interpolate(&x0, &x1, 0.0).unwrap().x_t, x0);
        assert_eq!(ot_interpolate(&x0, &x1, 1.0).unwrap().x_t, x1);
        let mid = ot_interpolate(&Tensor2::zeros(2, 2), &Tensor2::filled(2, 2, 2.0), 0.5).unwrap();
        assert_eq!(mid.x_t, Tensor2::filled(2, 2, 1.0));
        assert!(ot_interpolate(&x0, &Tensor2::zeros(1, 1), 0.3).is_err());
    }

    #[test]
    fn target_field_is_time_free() {
        let mut r = stream_rng(2, 0);
        let x0 = normal_matrix(&mut r, 3, 2);
        let x1 = normal_matrix(&mut r, 3, 2);
        let f0 = target_field_at(&x0, &x1, 0.1).unwrap();
        for t in [0.0, 0.25, 0.5, 0.99, 1.0] {
            assert_eq!(target_field_at(&x0, &x1, t).unwrap(), f0);
        }
        assert!(target_field(&x0, &x0)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn logpdf_cases() {
        let x = Tensor2::from_vec(1, 3, vec![0.3, -1.0, 2.0]).unwrap();
        let x1 = Tensor2::from_vec(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let std_normal: f64 = x
            .data()
            .iter()
            .map(|v| -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * v * v)
            .sum();
        assert!((conditional_path_logpdf(&x, &x1, 0.0).unwrap() - std_normal).abs() < 1e-12);
        let t = 0.4;
        let at_mean = x1.scale(t);
        let want = -1.5 * (2.0 * std::f64::consts::PI * 0.36f64).ln();
        assert!((conditional_path_logpdf(&at_mean, &x1, t).unwrap() - want).abs() < 1e-12);
        assert!(matches!(
            conditional_path_logpdf(&x, &x1, 1.0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn cfm_loss_cases() {
        let mut r = stream_rng(3, 0);
        let pre = normal_matrix(&mut r, 2, 3);
        let u = normal_matrix(&mut r, 4, 3);
        let pred = stitched_target(&pre, &u).unwrap();
        assert_eq!(cfm_loss(&pred, &u, &pre).unwrap(), 0.0);
        let shifted = pred.map(|v| v + 1.0);
        assert!((cfm_loss(&shifted, &u, &pre).unwrap() - 2.0).abs() < 1e-12);
        assert!(cfm_loss(&u, &u, &pre).is_err());
    }

    #[test]
    fn cfm_loss_matches_scalar_loop() {
        let mut r = stream_rng(4, 0);
        let pre = normal_matrix(&mut r, 3, 5);
        let u = normal_matrix(&mut r, 7, 5);
        let pred = normal_matrix(&mut r, 10, 5);
        let mut a = 0.0;
        for l in 0..7 {
            for c in 0..5 {
                a += (pred.get(3 + l, c) - u.get(l, c)).abs();
            }
        }
        let mut b = 0.0;
        for l in 0..3 {
            for c in 0..5 {
                b += (pred.get(l, c) - pre.get(l, c)).abs();
            }
        }
        let want = a / 35.0 + b / 15.0;
        assert!((cfm_loss(&pred, &u, &pre).unwrap() - want).abs() <= 1e-12);
    }

    #[test]
    fn velocity_loss_cases() {
        let mut r = stream_rng(5, 0);
        let target = normal_matrix(&mut r, 5, 2);
        assert_eq!(velocity_loss(&target, &target).unwrap(), 0.0);
        let offset = target.map(|v| v + 3.0);
        assert!(velocity_loss(&offset, &target).unwrap() < 1e-12);
        // 3 frames, 1 channel: pred (0, 1, 3) target (0, 2, 2)
        let p = Tensor2::from_vec(3, 1, vec![0.0, 1.0, 3.0]).unwrap();
        let t = Tensor2::from_vec(3, 1, vec![0.0, 2.0, 2.0]).unwrap();
        // diffs (1, 2) vs (2, 0) -> |−1| + |2| over 2
        assert!((velocity_loss(&p, &t).unwrap() - 1.5).abs() < 1e-15);
        assert!(velocity_loss(&Tensor2::zeros(1, 2), &Tensor2::zeros(1, 2)).is_err());
    }

    #[test]
    fn total_loss_weights() {
        assert_eq!(total_loss(0.5, 0.25, LossWeights::default()).unwrap(), 0.75);
        assert_eq!(
            total_loss(0.5, 0.25, LossWeights { ot: 1.0, vel: 0.0 }).unwrap(),
            0.5
        );
        assert_eq!(
            total_loss(0.5, 0.25, LossWeights { ot: 2.0, vel: 2.0 }).unwrap(),
            1.5
        );
        assert!(total_loss(0.5, 0.25, LossWeights { ot: -1.0, vel: 0.0 }).is_err());
    }

    #[test]
    fn taped_loss_agrees_with_direct() {
        let mut r = stream_rng(6, 0);
        let pre = normal_matrix(&mut r, 2, 3);
        let u = normal_matrix(&mut r, 5, 3);
        let pred = normal_matrix(&mut r, 7, 3);
        let params = PredictorParams::new();
        let mut tape = Tape::new(&params);
        let pv = tape.input(pred.clone());
        let w = LossWeights { ot: 0.7, vel: 1.3 };
        let (loss, c, v) = taped_total_loss(&mut tape, pv, &u, &pre, w).unwrap();
        let want_c = cfm_loss(&pred, &u, &pre).unwrap();
        let want_v = velocity_loss(&pred, &stitched_target(&pre, &u).unwrap()).unwrap();
        assert!((c - want_c).abs() < 1e-15);
        assert!((v - want_v).abs() < 1e-15);
        assert!((tape.scalar(loss) - total_loss(want_c, want_v, w).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn dropout_extremes() {
        let mut r = stream_rng(7, 0);
        let never = DropoutConfig {
            source: 0.0,
            emotion: 0.0,
            audio: 0.0,
            preceding: 0.0,
        };
        let always = DropoutConfig {
            source: 1.0,
            emotion: 1.0,
            audio: 1.0,
            preceding: 1.0,
        };
        for _ in 0..10_000 {
            assert_eq!(sample_dropout(&mut r, &never), DropoutMask::NONE);
        }
        for _ in 0..1000 {
            assert_eq!(sample_dropout(&mut r, &always), DropoutMask::ALL);
        }
        assert!(DropoutConfig {
            audio: 1.5,
            ..DropoutConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn dropout_rate_within_binomial_bound() {
        let mut r = rng::stream_rng(8, 0);
        let cfg = DropoutConfig::default();
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let m = sample_dropout(&mut r, &cfg);
            counts[0] += m.drop_source as usize;
            counts[1] += m.drop_emotion as usize;
            counts[2] += m.drop_audio as usize;
            counts[3] += m.drop_preceding as usize;
        }
        for c in &counts[..3] {
            assert!((*c as f64 / n as f64 - 0.1).abs() <= 0.01);
        }
        assert!((counts[3] as f64 / n as f64 - 0.5).abs() <= 0.01);
    }
}
