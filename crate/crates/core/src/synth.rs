//! Synthetic scenes with a known driving-to-motion law.
//!
//! Coefficients follow `λ(l) = EMA(a)(l)·Aᵀ + offset[emotion]`, composed over
//! a seeded orthonormal basis. Identity latents live in the orthogonal
//! complement of that basis.

use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{checksum_hex, short_hash, write_file, BlobReader, BlobWriter};
use crate::motion_space::{IdentityLatent, MotionBasis};
use crate::objective::TrainingItem;
use crate::predictor::EMOTION_DIMS;
use crate::rng::{derive_seed, normal, normal_matrix, stream_rng};
use crate::tensor::Tensor2;

const DATASET_MAGIC: &[u8; 4] = b"MFDS";
const DATASET_VERSION: u32 = 1;
const SINUSOIDS: usize = 3;

/// Index of the neutral emotion, whose offset is zero.
pub const NEUTRAL: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrivingParams {
    /// Frequency band in cycles per frame.
    pub band: (f64, f64),
    pub noise: f64,
}

impl Default for DrivingParams {
    fn default() -> Self {
        DrivingParams {
            band: (0.02, 0.12),
            noise: 0.05,
        }
    }
}

/// Three seeded sinusoids per channel plus Gaussian noise. Amplitudes give
/// each channel unit variance before noise.
pub fn gen_driving(seed: u64, frames: usize, audio_dim: usize) -> Tensor2 {
    gen_driving_with(seed, frames, audio_dim, &DrivingParams::default())
}

pub fn gen_driving_with(seed: u64, frames: usize, audio_dim: usize, p: &DrivingParams) -> Tensor2 {
    let mut rng = stream_rng(seed, 0xd41e);
    let amp = (2.0 / SINUSOIDS as f64).sqrt();
    let tau = std::f64::consts::TAU;
    let waves: Vec<[(f64, f64); SINUSOIDS]> = (0..audio_dim)
        .map(|_| {
            std::array::from_fn(|k| {
                (
                    sub_band_frequency(&mut rng, p.band, k),
                    rng.gen_range(0.0..tau),
                )
            })
        })
        .collect();
    let mut out = Tensor2::zeros(frames, audio_dim);
    for l in 0..frames {
        for (c, w) in waves.iter().enumerate() {
            let s: f64 = w
                .iter()
                .map(|(f, ph)| amp * (tau * f * l as f64 + ph).sin())
                .sum();
            out.set(l, c, s);
        }
    }
    if p.noise > 0.0 {
        for v in out.data_mut() {
            *v += p.noise * normal(&mut rng);
        }
    }
    out
}

/// Draws from the middle 60% of the `k`-th third of `band`, keeping the three
/// frequencies of a channel apart so they do not beat.
fn sub_band_frequency(rng: &mut crate::rng::Rng, band: (f64, f64), k: usize) -> f64 {
    let width = (band.1 - band.0) / SINUSOIDS as f64;
    let lo = band.0 + width * (k as f64 + 0.2);
    lo + rng.gen_range(0.0..=0.6 * width)
}

/// Exponential moving average with the given half-life, seeded with the
/// first row.
pub fn ema(x: &Tensor2, half_life: f64) -> Tensor2 {
    let alpha = 1.0 - 0.5f64.powf(1.0 / half_life);
    let mut out = x.clone();
    for l in 1..x.rows() {
        for c in 0..x.cols() {
            let prev = out.get(l - 1, c);
            out.set(l, c, prev + alpha * (x.get(l, c) - prev));
        }
    }
    out
}

/// Scene generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub latent_dim: usize,
    pub motion_dims: usize,
    pub audio_dim: usize,
    pub identities: usize,
    pub frames: usize,
    pub emotion_probs: Vec<f64>,
    pub half_life: f64,
    /// `7 x M`, row [`NEUTRAL`] is zero.
    pub offsets: Tensor2,
    /// `M x d_a`
    pub drive_map: Tensor2,
    pub driving: DrivingParams,
    /// Peak probability of the soft emotion label.
    pub label_confidence: f64,
}

impl SceneSpec {
    /// Desk-scale defaults with seeded offsets and driving map.
    pub fn desk(seed: u64) -> SceneSpec {
        SceneSpec::seeded(seed, 16, 8, 8, 48)
    }

    pub fn seeded(
        seed: u64,
        latent_dim: usize,
        motion_dims: usize,
        audio_dim: usize,
        frames: usize,
    ) -> SceneSpec {
        let mut rng = stream_rng(seed, 0x5ce7e);
        let mut offsets = normal_matrix(&mut rng, EMOTION_DIMS, motion_dims).scale(0.7);
        offsets.row_mut(NEUTRAL).iter_mut().for_each(|v| *v = 0.0);
        let drive_map =
            normal_matrix(&mut rng, motion_dims, audio_dim).scale(1.0 / (audio_dim as f64).sqrt());
        let mut emotion_probs = vec![0.7 / (EMOTION_DIMS - 1) as f64; EMOTION_DIMS];
        emotion_probs[NEUTRAL] = 0.3;
        SceneSpec {
            seed,
            latent_dim,
            motion_dims,
            audio_dim,
            identities: 50,
            frames,
            emotion_probs,
            half_life: 4.0,
            offsets,
            drive_map,
            driving: DrivingParams::default(),
            label_confidence: 0.85,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene spec: {m}")));
        if self.half_life < 1.0 || !self.half_life.is_finite() {
            return bad("half-life must be at least 1 frame");
        }
        if self.motion_dims == 0 || self.motion_dims > self.latent_dim {
            return bad("motion dims must be in 1..=latent dim");
        }
        if self.identities == 0 || self.frames < 2 || self.audio_dim == 0 {
            return bad("identities, frames and audio dim must be positive (frames >= 2)");
        }
        if self.offsets.shape() != (EMOTION_DIMS, self.motion_dims) {
            return bad("offsets must be 7 x M");
        }
        if self.drive_map.shape() != (self.motion_dims, self.audio_dim) {
            return bad("driving map must be M x d_a");
        }
        if !self.offsets.is_finite() || !self.drive_map.is_finite() {
            return bad("non-finite offsets or map");
        }
        let sum: f64 = self.emotion_probs.iter().sum();
        if self.emotion_probs.len() != EMOTION_DIMS
            || self.emotion_probs.iter().any(|p| !(0.0..=1.0).contains(p))
            || (sum - 1.0).abs() > 1e-9
        {
            return bad("emotion distribution must be 7 probabilities summing to 1");
        }
        if !(0.0..=1.0).contains(&self.label_confidence)
            || self.label_confidence < 1.0 / EMOTION_DIMS as f64
        {
            return bad("label confidence must be in [1/7, 1]");
        }
        if self.driving.band.0 <= 0.0
            || self.driving.band.1 < self.driving.band.0
            || self.driving.noise < 0.0
        {
            return bad("invalid driving band or noise");
        }
        Ok(())
    }

    pub fn basis(&self) -> Result<MotionBasis> {
        MotionBasis::seeded(
            derive_seed(self.seed, 0xba515),
            self.motion_dims,
            self.latent_dim,
        )
    }

    pub fn hash(&self) -> String {
        short_hash(
            serde_json::to_string(self)
                .expect("serializable")
                .as_bytes(),
        )
    }
}

/// Oracle coefficients `EMA(driving)·Aᵀ + offset[emotion]`, `frames x M`.
pub fn oracle_coefficients(
    spec: &SceneSpec,
    driving: &Tensor2,
    emotion_index: usize,
) -> Result<Tensor2> {
    if emotion_index >= EMOTION_DIMS {
        return Err(Error::Index {
            index: emotion_index,
            len: EMOTION_DIMS,
        });
    }
    if driving.cols() != spec.audio_dim {
        return Err(Error::Dim {
            expected: spec.audio_dim,
            got: driving.cols(),
        });
    }
    let mut coeffs = ema(driving, spec.half_life).matmul(&spec.drive_map.transpose())?;
    let offset = spec.offsets.row(emotion_index).to_vec();
    for l in 0..coeffs.rows() {
        for (v, o) in coeffs.row_mut(l).iter_mut().zip(&offset) {
            *v += o;
        }
    }
    Ok(coeffs)
}

/// `(identity, motion, coefficients)` for one clip.
pub fn gen_ground_truth(
    spec: &SceneSpec,
    basis: &MotionBasis,
    driving: &Tensor2,
    emotion_index: usize,
    identity_seed: u64,
) -> Result<(IdentityLatent, Tensor2, Tensor2)> {
    let coeffs = oracle_coefficients(spec, driving, emotion_index)?;
    let motion = basis.compose_rows(&coeffs)?;
    let identity = basis.sample_complement(&mut stream_rng(identity_seed, 0x1d));
    Ok((identity, motion, coeffs))
}

/// Soft label peaked at `index`.
fn soft_label(index: usize, confidence: f64, rng: &mut crate::rng::Rng) -> Vec<f64> {
    let mut rest: Vec<f64> = (0..EMOTION_DIMS)
        .map(|_| rng.gen_range(0.05..1.0))
        .collect();
    rest[index] = 0.0;
    let total: f64 = rest.iter().sum();
    let mut label: Vec<f64> = rest
        .iter()
        .map(|r| (1.0 - confidence) * r / total)
        .collect();
    label[index] = confidence;
    label
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub audio: Tensor2,
    pub emotion_index: usize,
    pub emotion: Vec<f64>,
    pub identity_index: usize,
    pub identity: IdentityLatent,
    pub source_motion: Vec<f64>,
    /// `frames x d`
    pub motion: Tensor2,
    /// `frames x M`
    pub coeffs: Tensor2,
}

/// Deterministic clip `index` of the scene.
pub fn gen_clip(spec: &SceneSpec, basis: &MotionBasis, index: u64) -> Result<Clip> {
    let clip_seed = derive_seed(spec.seed, index);
    let mut rng = stream_rng(clip_seed, 0xc11);
    let weights =
        WeightedIndex::new(&spec.emotion_probs).map_err(|e| Error::Config(e.to_string()))?;
    let emotion_index = weights.sample(&mut rng);
    let identity_index = rng.gen_range(0..spec.identities);
    let emotion = soft_label(emotion_index, spec.label_confidence, &mut rng);
    let audio = gen_driving_with(
        derive_seed(clip_seed, 1),
        spec.frames,
        spec.audio_dim,
        &spec.driving,
    );
    let id_seed = derive_seed(spec.seed, 0x1d00_0000 + identity_index as u64);
    let (identity, motion, coeffs) = gen_ground_truth(spec, basis, &audio, emotion_index, id_seed)?;
    let mut src_rng = stream_rng(id_seed, 0x5c);
    let src_coeffs: Vec<f64> = (0..spec.motion_dims)
        .map(|_| 0.5 * normal(&mut src_rng))
        .collect();
    let source_motion = basis
        .compose(&crate::motion_space::CoefficientVector(src_coeffs))?
        .0;
    Ok(Clip {
        audio,
        emotion_index,
        emotion,
        identity_index,
        identity,
        source_motion,
        motion,
        coeffs,
    })
}

/// Valid window starts for window length `window` and context `preceding`:
/// 0 (a first window) and every start with a full preceding block.
pub fn window_starts(frames: usize, window: usize, preceding: usize) -> Vec<usize> {
    if frames < window {
        return Vec::new();
    }
    let mut v = vec![0];
    v.extend(preceding.max(1)..=frames - window);
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub basis: MotionBasis,
    /// Index of the first clip in the scene's clip sequence.
    pub first_clip: u64,
    pub clips: Vec<Clip>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub spec_hash: String,
    pub seed: u64,
    pub first_clip: u64,
    pub clips: usize,
    pub frames: usize,
    pub latent_dim: usize,
    pub motion_dims: usize,
    pub audio_dim: usize,
    pub emotion_counts: Vec<usize>,
    pub checksum: String,
    pub payload: String,
}

/// Generates clips `first_clip .. first_clip + count`.
pub fn make_dataset(spec: &SceneSpec, first_clip: u64, count: usize) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Data("dataset must contain at least one clip".into()));
    }
    let basis = spec.basis()?;
    let clips = (0..count as u64)
        .map(|i| gen_clip(spec, &basis, first_clip + i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        basis,
        first_clip,
        clips,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn emotion_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; EMOTION_DIMS];
        for c in &self.clips {
            counts[c.emotion_index] += 1;
        }
        counts
    }

    /// Supervised window of clip `clip` starting at frame `start`.
    pub fn training_item(
        &self,
        clip: usize,
        start: usize,
        window: usize,
        preceding: usize,
    ) -> Result<TrainingItem> {
        let c = self.clips.get(clip).ok_or(Error::Index {
            index: clip,
            len: self.clips.len(),
        })?;
        let frames = c.motion.rows();
        if start + window > frames {
            return Err(Error::Index {
                index: start + window,
                len: frames,
            });
        }
        let first_window = start < preceding || start == 0;
        if first_window && start != 0 {
            return Err(Error::Data(format!(
                "start {start} has only a partial preceding block"
            )));
        }
        let d = c.motion.cols();
        let da = c.audio.cols();
        let (preceding_motion, pre_audio) = if first_window {
            (Tensor2::zeros(preceding, d), Tensor2::zeros(preceding, da))
        } else {
            (
                c.motion.slice_rows(start - preceding, preceding),
                c.audio.slice_rows(start - preceding, preceding),
            )
        };
        Ok(TrainingItem {
            target_motion: c.motion.slice_rows(start, window),
            preceding_motion,
            audio: Tensor2::concat_rows(&[&pre_audio, &c.audio.slice_rows(start, window)])?,
            emotion: c.emotion.clone(),
            source_motion: c.source_motion.clone(),
            extra: None,
            first_window,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BlobWriter::new(DATASET_MAGIC, DATASET_VERSION);
        w.str(&serde_json::to_string(&self.spec).expect("serializable"));
        w.bytes(&self.basis.to_bytes());
        w.u64(self.first_clip);
        w.u64(self.clips.len() as u64);
        for c in &self.clips {
            w.u32(c.emotion_index as u32).u32(c.identity_index as u32);
            w.f64s(&c.emotion)
                .f64s(&c.identity.0)
                .f64s(&c.source_motion);
            w.tensor(&c.audio).tensor(&c.motion).tensor(&c.coeffs);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = BlobReader::open(bytes, DATASET_MAGIC)?;
        if r.version != DATASET_VERSION {
            return Err(Error::Data(format!(
                "unsupported dataset version {}",
                r.version
            )));
        }
        let spec: SceneSpec =
            serde_json::from_str(&r.str()?).map_err(|e| Error::Data(e.to_string()))?;
        let basis = MotionBasis::from_bytes(r.bytes()?)?;
        let first_clip = r.u64()?;
        let n = r.usize()?;
        let d = spec.latent_dim;
        let mut clips = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let emotion_index = r.u32()? as usize;
            let identity_index = r.u32()? as usize;
            let emotion = r.f64s(EMOTION_DIMS)?;
            let identity = IdentityLatent(r.f64s(d)?);
            let source_motion = r.f64s(d)?;
            let audio = r.tensor()?;
            let motion = r.tensor()?;
            let coeffs = r.tensor()?;
            if emotion_index >= EMOTION_DIMS {
                return Err(Error::Data(format!(
                    "emotion index {emotion_index} out of range"
                )));
            }
            clips.push(Clip {
                audio,
                emotion_index,
                emotion,
                identity_index,
                identity,
                source_motion,
                motion,
                coeffs,
            });
        }
        if !r.is_exhausted() {
            return Err(Error::Data("trailing bytes in dataset".into()));
        }
        Ok(Dataset {
            spec,
            basis,
            first_clip,
            clips,
        })
    }

    pub fn manifest_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the container at `path` and a JSON manifest next to it.
    pub fn save(&self, path: &Path) -> Result<Manifest> {
        let bytes = self.to_bytes();
        write_file(path, &bytes)?;
        let manifest = Manifest {
            format: "MFDS".into(),
            version: DATASET_VERSION,
            spec_hash: self.spec.hash(),
            seed: self.spec.seed,
            first_clip: self.first_clip,
            clips: self.clips.len(),
            frames: self.spec.frames,
            latent_dim: self.spec.latent_dim,
            motion_dims: self.spec.motion_dims,
            audio_dim: self.spec.audio_dim,
            emotion_counts: self.emotion_counts(),
            checksum: checksum_hex(&bytes),
            payload: path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
        };
        write_file(
            &Self::manifest_path(path),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Dataset::from_bytes(&bytes)
    }
}
