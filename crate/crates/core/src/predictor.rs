//! Transformer vector-field predictor.
//!
//! Each frame's driving signals are mapped to a per-frame condition row
//! (`ToCondition`) to which the flow-time embedding is added. Inside every
//! block, a per-frame linear map (`ToScaleShift`) turns that row into the
//! shift, scale and gate of two modulation stages, so a frame is only ever
//! modulated by its own condition. Temporal mixing happens exclusively in the
//! banded self-attention, which bounds the receptive field to
//! `blocks * half_width` frames on each side.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::short_hash;
use crate::nn::layers::{sinusoidal_embed, sinusoidal_position, Attention, Dense};
use crate::nn::{PredictorParams, Tape, Var};
use crate::objective::DropoutMask;
use crate::rng;
use crate::tensor::Tensor2;

pub const EMOTION_DIMS: usize = 7;

/// How driving conditions enter each block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    /// Frame-wise adaptive layer norm and gating.
    FrameAdaln,
    /// Ablation: a banded cross-attention sublayer over the condition rows.
    CrossAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    /// Motion latent width `d`.
    pub latent_dim: usize,
    pub audio_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Attention half-width `T`.
    pub half_width: usize,
    pub blocks: usize,
    /// Generated frames per window `L`.
    pub window: usize,
    /// Preceding context frames `L'`.
    pub preceding: usize,
    pub emotion_dims: usize,
    pub extra_dims: usize,
    pub mlp_ratio: usize,
    pub conditioning: Conditioning,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PredictorConfig {
    /// CPU-scale defaults.
    pub fn desk() -> Self {
        Self {
            latent_dim: 16,
            audio_dim: 8,
            hidden: 64,
            heads: 4,
            half_width: 2,
            blocks: 4,
            window: 24,
            preceding: 6,
            emotion_dims: EMOTION_DIMS,
            extra_dims: 0,
            mlp_ratio: 4,
            conditioning: Conditioning::FrameAdaln,
        }
    }

    /// Published model dimensions (depth and MLP ratio are not published).
    pub fn paper_scale() -> Self {
        Self {
            latent_dim: 512,
            audio_dim: 768,
            hidden: 1024,
            heads: 8,
            half_width: 2,
            window: 50,
            preceding: 10,
            ..Self::desk()
        }
    }

    pub fn total_frames(&self) -> usize {
        self.window + self.preceding
    }

    pub fn condition_input_dim(&self) -> usize {
        self.audio_dim + self.emotion_dims + self.latent_dim + self.extra_dims
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("audio_dim", self.audio_dim),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("window", self.window),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !self.hidden.is_multiple_of(2) {
            return Err(Error::Config(
                "hidden size must be even for sinusoidal embeddings".into(),
            ));
        }
        if self.emotion_dims != EMOTION_DIMS {
            return Err(Error::Config(format!(
                "emotion label must have {EMOTION_DIMS} entries"
            )));
        }
        Ok(())
    }

    /// Stable short hash of the configuration.
    pub fn hash(&self) -> String {
        short_hash(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    /// Field-by-field differences against `other`.
    pub fn mismatches(&self, other: &PredictorConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("serializes");
        let b = serde_json::to_value(other).expect("serializes");
        let (a, b) = (
            a.as_object().expect("struct"),
            b.as_object().expect("struct"),
        );
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, v)| {
                format!(
                    "{k}: expected {v}, found {}",
                    b.get(k).map_or("nothing".into(), |x| x.to_string())
                )
            })
            .collect()
    }
}

/// Raw per-window driving signals before condition construction.
#[derive(Clone, Debug, PartialEq)]
pub struct DrivingInputs {
    /// `(L' + L) x d_a`; rows `0..L'` are the preceding window's audio.
    pub audio: Tensor2,
    pub emotion: Vec<f64>,
    pub source_motion: Vec<f64>,
    /// Optional extra per-frame channel, `(L' + L) x d_x`.
    pub extra: Option<Tensor2>,
}

impl DrivingInputs {
    /// Replaces dropped channels with the all-zero null token. Audio and the
    /// extra channel are nulled on the generated rows by `drop_audio` and on
    /// the preceding rows by `drop_preceding`.
    pub fn with_nulls(&self, mask: &DropoutMask, preceding: usize) -> DrivingInputs {
        let mut out = self.clone();
        let null_rows = |t: &mut Tensor2| {
            let rows = t.rows();
            if mask.drop_preceding {
                t.set_rows(0, &Tensor2::zeros(preceding.min(rows), t.cols()));
            }
            if mask.drop_audio && rows > preceding {
                t.set_rows(preceding, &Tensor2::zeros(rows - preceding, t.cols()));
            }
        };
        null_rows(&mut out.audio);
        if let Some(extra) = out.extra.as_mut() {
            null_rows(extra);
        }
        if mask.drop_emotion {
            out.emotion.iter_mut().for_each(|v| *v = 0.0);
        }
        if mask.drop_source {
            out.source_motion.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }
}

/// Per-frame condition rows for one flow time.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    /// `(L' + L) x h`
    pub rows: Tensor2,
    pub t: f64,
    pub nulls: DropoutMask,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    scale_shift: Option<Dense>,
    attn: Attention,
    cross: Option<Attention>,
    mlp_in: Dense,
    mlp_out: Dense,
}

/// Which modulation stage of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Around the attention sublayer.
    Attention,
    /// Around the MLP sublayer.
    Mlp,
}

impl Stage {
    fn offset(self, hidden: usize) -> usize {
        match self {
            Stage::Attention => 0,
            Stage::Mlp => 3 * hidden,
        }
    }
}

/// The vector-field network `v_t(x_t, c_t; θ)`.
#[derive(Debug)]
pub struct VectorFieldPredictor {
    config: PredictorConfig,
    params: PredictorParams,
    to_condition: Dense,
    input: Dense,
    blocks: Vec<Block>,
    output: Dense,
    calls: AtomicUsize,
}

impl Clone for VectorFieldPredictor {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            to_condition: self.to_condition,
            input: self.input,
            blocks: self.blocks.clone(),
            output: self.output,
            calls: AtomicUsize::new(self.calls.load(Ordering::Relaxed)),
        }
    }
}

impl VectorFieldPredictor {
    /// Registers every parameter in a fixed order. Dense layers start from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; `ToScaleShift` and the output
    /// projection start at zero.
    pub fn new(config: PredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream_rng(seed, 0x9a7a);
        let mut params = PredictorParams::new();
        let h = config.hidden;
        let to_condition = Dense::uniform(
            &mut params,
            "to_condition",
            config.condition_input_dim(),
            h,
            &mut rng,
        );
        let input = Dense::uniform(&mut params, "input", config.latent_dim, h, &mut rng);
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let name = format!("block{b}");
            let scale_shift = match config.conditioning {
                Conditioning::FrameAdaln => Some(Dense::zeroed(
                    &mut params,
                    &format!("{name}.to_scale_shift"),
                    h,
                    6 * h,
                )),
                Conditioning::CrossAttention => None,
            };
            let attn = Attention::new(
                &mut params,
                &format!("{name}.attn"),
                h,
                config.heads,
                &mut rng,
            )?;
            let cross = match config.conditioning {
                Conditioning::CrossAttention => Some(Attention::new(
                    &mut params,
                    &format!("{name}.cross"),
                    h,
                    config.heads,
                    &mut rng,
                )?),
                Conditioning::FrameAdaln => None,
            };
            let mlp_in = Dense::uniform(
                &mut params,
                &format!("{name}.mlp_in"),
                h,
                config.mlp_ratio * h,
                &mut rng,
            );
            let mlp_out = Dense::uniform(
                &mut params,
                &format!("{name}.mlp_out"),
                config.mlp_ratio * h,
                h,
                &mut rng,
            );
            blocks.push(Block {
                scale_shift,
                attn,
                cross,
                mlp_in,
                mlp_out,
            });
        }
        let output = Dense::zeroed(&mut params, "output", h, config.latent_dim);
        Ok(Self {
            config,
            params,
            to_condition,
            input,
            blocks,
            output,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn params(&self) -> &PredictorParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut PredictorParams {
        &mut self.params
    }

    /// Installs parameter values loaded from elsewhere; layouts must agree.
    pub fn load_params(&mut self, params: &PredictorParams) -> Result<()> {
        self.params.replace_values(params)
    }

    /// Number of `predict_field` evaluations since the last reset.
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_call_count(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    fn check_inputs(&self, inputs: &DrivingInputs) -> Result<()> {
        let c = &self.config;
        let n = c.total_frames();
        if inputs.audio.shape() != (n, c.audio_dim) {
            return Err(Error::Shape(format!(
                "audio {}x{}, expected {n}x{}",
                inputs.audio.rows(),
                inputs.audio.cols(),
                c.audio_dim
            )));
        }
        if inputs.emotion.len() != c.emotion_dims {
            return Err(Error::Dim {
                expected: c.emotion_dims,
                got: inputs.emotion.len(),
            });
        }
        if inputs.source_motion.len() != c.latent_dim {
            return Err(Error::Dim {
                expected: c.latent_dim,
                got: inputs.source_motion.len(),
            });
        }
        match (&inputs.extra, c.extra_dims) {
            (None, 0) => Ok(()),
            (Some(e), k) if e.shape() == (n, k) => Ok(()),
            (Some(e), k) => Err(Error::Shape(format!(
                "extra channel {}x{}, expected {n}x{k}",
                e.rows(),
                e.cols()
            ))),
            (None, k) => Err(Error::Shape(format!(
                "config expects an extra channel of width {k}"
            ))),
        }
    }

    /// Per-frame `concat(audio_l, emotion, source_motion, extra_l)`.
    fn condition_features(&self, inputs: &DrivingInputs) -> Result<Tensor2> {
        self.check_inputs(inputs)?;
        let n = self.config.total_frames();
        let mut rows = Vec::with_capacity(n);
        for l in 0..n {
            let mut r = Vec::with_capacity(self.config.condition_input_dim());
            r.extend_from_slice(inputs.audio.row(l));
            r.extend_from_slice(&inputs.emotion);
            r.extend_from_slice(&inputs.source_motion);
            if let Some(e) = &inputs.extra {
                r.extend_from_slice(e.row(l));
            }
            rows.push(r);
        }
        Tensor2::from_rows(&rows)
    }

    fn condition_var(&self, tape: &mut Tape<'_>, inputs: &DrivingInputs, t: f64) -> Result<Var> {
        let feats = tape.input(self.condition_features(inputs)?);
        let mapped = self.to_condition.forward(tape, feats)?;
        let emb = tape.input(Tensor2::row_vector(&sinusoidal_embed(
            t,
            self.config.hidden,
        )?));
        tape.add_bias(mapped, emb)
    }

    /// `ToCondition(concat(...)) + Emb(t)` for every frame. `inputs` should
    /// already carry any null tokens; `nulls` is recorded for provenance.
    pub fn to_condition(
        &self,
        inputs: &DrivingInputs,
        t: f64,
        nulls: DropoutMask,
    ) -> Result<ConditionBundle> {
        let mut tape = Tape::new(&self.params);
        let c = self.condition_var(&mut tape, inputs, t)?;
        Ok(ConditionBundle {
            rows: tape.value(c).clone(),
            t,
            nulls,
        })
    }

    /// Convenience: apply `mask` to `inputs` then build the condition.
    pub fn condition_with_nulls(
        &self,
        inputs: &DrivingInputs,
        t: f64,
        mask: DropoutMask,
    ) -> Result<ConditionBundle> {
        self.to_condition(&inputs.with_nulls(&mask, self.config.preceding), t, mask)
    }

    fn modulation_slice(
        &self,
        tape: &mut Tape<'_>,
        modulation: Var,
        stage: Stage,
        part: usize,
    ) -> Var {
        let h = self.config.hidden;
        tape.slice_cols(modulation, stage.offset(h) + part * h, h)
    }

    /// `(1 + γ) ⊙ LN(X) + β` using the stage's `(α, β, γ)` triple.
    fn adaln_taped(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        modulation: Var,
        stage: Stage,
    ) -> Result<Var> {
        let beta = self.modulation_slice(tape, modulation, stage, 1);
        let gamma = self.modulation_slice(tape, modulation, stage, 2);
        let normed = tape.layer_norm(x);
        let scale = tape.add_scalar(gamma, 1.0);
        let scaled = tape.mul(scale, normed)?;
        tape.add(scaled, beta)
    }

    /// `(1 + α) ⊙ X`
    fn gate_taped(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        modulation: Var,
        stage: Stage,
    ) -> Result<Var> {
        let alpha = self.modulation_slice(tape, modulation, stage, 0);
        let gate = tape.add_scalar(alpha, 1.0);
        tape.mul(gate, x)
    }

    fn block_scale_shift(&self, block: usize) -> Result<Dense> {
        self.blocks
            .get(block)
            .ok_or(Error::Index {
                index: block,
                len: self.blocks.len(),
            })?
            .scale_shift
            .ok_or_else(|| Error::Config("cross-attention conditioning has no ToScaleShift".into()))
    }

    fn check_hidden(&self, x: &Tensor2, bundle: &ConditionBundle) -> Result<()> {
        let want = (self.config.total_frames(), self.config.hidden);
        if x.shape() != want || bundle.rows.shape() != want {
            return Err(Error::Shape(format!(
                "hidden {}x{} and condition {}x{} must both be {}x{}",
                x.rows(),
                x.cols(),
                bundle.rows.rows(),
                bundle.rows.cols(),
                want.0,
                want.1
            )));
        }
        Ok(())
    }

    /// Frame-wise adaptive layer norm of block `block` at `stage`.
    pub fn frame_wise_adaln(
        &self,
        block: usize,
        x: &Tensor2,
        bundle: &ConditionBundle,
        stage: Stage,
    ) -> Result<Tensor2> {
        self.check_hidden(x, bundle)?;
        let ss = self.block_scale_shift(block)?;
        let mut tape = Tape::new(&self.params);
        let c = tape.input(bundle.rows.clone());
        let m = ss.forward(&mut tape, c)?;
        let xv = tape.input(x.clone());
        let y = self.adaln_taped(&mut tape, xv, m, stage)?;
        Ok(tape.value(y).clone())
    }

    /// Frame-wise gate of block `block` at `stage`.
    pub fn frame_wise_gate(
        &self,
        block: usize,
        x: &Tensor2,
        bundle: &ConditionBundle,
        stage: Stage,
    ) -> Result<Tensor2> {
        self.check_hidden(x, bundle)?;
        let ss = self.block_scale_shift(block)?;
        let mut tape = Tape::new(&self.params);
        let c = tape.input(bundle.rows.clone());
        let m = ss.forward(&mut tape, c)?;
        let xv = tape.input(x.clone());
        let y = self.gate_taped(&mut tape, xv, m, stage)?;
        Ok(tape.value(y).clone())
    }

    fn positions(&self) -> Result<Tensor2> {
        let n = self.config.total_frames();
        let rows = (0..n)
            .map(|l| sinusoidal_position(l as f64, self.config.hidden))
            .collect::<Result<Vec<_>>>()?;
        Tensor2::from_rows(&rows)
    }

    /// Network body given the latent input and condition nodes.
    pub fn forward_taped(&self, tape: &mut Tape<'_>, x_t: Var, cond: Var) -> Result<Var> {
        let half = Some(self.config.half_width);
        let projected = self.input.forward(tape, x_t)?;
        let pos = tape.input(self.positions()?);
        let mut x = tape.add(projected, pos)?;
        for block in &self.blocks {
            match block.scale_shift {
                Some(ss) => {
                    let m = ss.forward(tape, cond)?;
                    let a_in = self.adaln_taped(tape, x, m, Stage::Attention)?;
                    let a = block.attn.forward(tape, a_in, a_in, half)?;
                    let a = self.gate_taped(tape, a, m, Stage::Attention)?;
                    x = tape.add(x, a)?;
                    let f_in = self.adaln_taped(tape, x, m, Stage::Mlp)?;
                    let f = self.mlp(tape, block, f_in)?;
                    let f = self.gate_taped(tape, f, m, Stage::Mlp)?;
                    x = tape.add(x, f)?;
                }
                None => {
                    let cross = block.cross.expect("cross-attention block");
                    let n = tape.layer_norm(x);
                    let a = block.attn.forward(tape, n, n, half)?;
                    x = tape.add(x, a)?;
                    let n = tape.layer_norm(x);
                    let a = cross.forward(tape, n, cond, half)?;
                    x = tape.add(x, a)?;
                    let n = tape.layer_norm(x);
                    let f = self.mlp(tape, block, n)?;
                    x = tape.add(x, f)?;
                }
            }
        }
        let n = tape.layer_norm(x);
        self.output.forward(tape, n)
    }

    fn mlp(&self, tape: &mut Tape<'_>, block: &Block, x: Var) -> Result<Var> {
        let hdn = block.mlp_in.forward(tape, x)?;
        let act = tape.gelu(hdn);
        block.mlp_out.forward(tape, act)
    }

    fn check_latent(&self, x_t: &Tensor2) -> Result<()> {
        let want = (self.config.total_frames(), self.config.latent_dim);
        if x_t.shape() != want {
            return Err(Error::Shape(format!(
                "latent input {}x{}, expected {}x{}",
                x_t.rows(),
                x_t.cols(),
                want.0,
                want.1
            )));
        }
        Ok(())
    }

    /// Records a full forward pass from raw inputs so gradients reach
    /// `ToCondition` as well. Returns the output node.
    pub fn record(
        &self,
        tape: &mut Tape<'_>,
        x_t: &Tensor2,
        inputs: &DrivingInputs,
        t: f64,
    ) -> Result<Var> {
        self.check_latent(x_t)?;
        let cond = self.condition_var(tape, inputs, t)?;
        let x = tape.input(x_t.clone());
        self.forward_taped(tape, x, cond)
    }

    /// `v_t(x_t, c_t; θ)` as a `(L' + L) x d` field.
    pub fn predict_field(&self, x_t: &Tensor2, bundle: &ConditionBundle) -> Result<Tensor2> {
        self.check_latent(x_t)?;
        if bundle.rows.shape() != (self.config.total_frames(), self.config.hidden) {
            return Err(Error::Shape(
                "condition bundle does not match predictor config".into(),
            ));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut tape = Tape::new(&self.params);
        let cond = tape.input(bundle.rows.clone());
        let x = tape.input(x_t.clone());
        let out = self.forward_taped(&mut tape, x, cond)?;
        Ok(tape.value(out).clone())
    }
}
