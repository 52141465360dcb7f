//! Orthonormal motion-basis algebra.
//!
//! A motion latent is a linear combination of `M` orthonormal directions in a
//! `d`-dimensional latent space. Coefficients are recovered in closed form by
//! inner products, which makes single-direction edits exact: shifting one
//! coefficient never disturbs the others.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{BlobReader, BlobWriter};
use crate::rng::{self, Rng};
use crate::tensor::{dot, Tensor2};

const BASIS_MAGIC: &[u8; 4] = b"MFBS";
const BASIS_VERSION: u32 = 1;
const RANK_TOL: f64 = 1e-12;

/// `M` orthonormal direction rows in a `d`-dimensional space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionBasis {
    vectors: Tensor2,
}

/// A `d`-dimensional motion latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionLatent(pub Vec<f64>);

/// Per-direction intensities, one per basis row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector(pub Vec<f64>);

/// Latent component orthogonal to the motion span.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityLatent(pub Vec<f64>);

impl MotionBasis {
    /// Orthonormalizes the rows of `raw` with modified Gram-Schmidt followed by
    /// one re-orthogonalization pass.
    pub fn orthonormalize(raw: &Tensor2) -> Result<Self> {
        let (count, dims) = raw.shape();
        if count > dims {
            return Err(Error::Config(format!(
                "basis of {count} directions cannot fit in {dims} dimensions"
            )));
        }
        let mut out = Tensor2::zeros(count, dims);
        for i in 0..count {
            let mut v = raw.row(i).to_vec();
            for _pass in 0..2 {
                for j in 0..i {
                    let q = out.row(j);
                    let c = dot(&v, q);
                    for (vk, qk) in v.iter_mut().zip(q) {
                        *vk -= c * qk;
                    }
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm.is_nan() || norm < RANK_TOL {
                return Err(Error::Rank { row: i, norm });
            }
            for (o, vk) in out.row_mut(i).iter_mut().zip(&v) {
                *o = vk / norm;
            }
        }
        Ok(Self { vectors: out })
    }

    /// Basis spanned by a seeded standard-normal `count x dims` matrix.
    pub fn seeded(seed: u64, count: usize, dims: usize) -> Result<Self> {
        let mut rng = rng::stream_rng(seed, 0xba5e);
        Self::orthonormalize(&rng::normal_matrix(&mut rng, count, dims))
    }

    pub fn dims(&self) -> usize {
        self.vectors.cols()
    }

    pub fn count(&self) -> usize {
        self.vectors.rows()
    }

    pub fn vectors(&self) -> &Tensor2 {
        &self.vectors
    }

    pub fn direction(&self, m: usize) -> &[f64] {
        self.vectors.row(m)
    }

    /// Largest entry of `|V Vᵀ − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let m = self.count();
        let mut worst = 0.0f64;
        for i in 0..m {
            for j in 0..m {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(self.direction(i), self.direction(j)) - target).abs());
            }
        }
        worst
    }

    fn check_dims(&self, got: usize) -> Result<()> {
        if got != self.dims() {
            return Err(Error::Dim {
                expected: self.dims(),
                got,
            });
        }
        Ok(())
    }

    /// `Σₘ λₘ vₘ`
    pub fn compose(&self, lambda: &CoefficientVector) -> Result<MotionLatent> {
        if lambda.0.len() != self.count() {
            return Err(Error::Dim {
                expected: self.count(),
                got: lambda.0.len(),
            });
        }
        let mut out = vec![0.0; self.dims()];
        for (m, &l) in lambda.0.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(self.direction(m)) {
                *o += l * v;
            }
        }
        Ok(MotionLatent(out))
    }

    /// `λₖ = ⟨w, vₖ⟩`
    pub fn project(&self, w: &MotionLatent) -> Result<CoefficientVector> {
        self.project_slice(&w.0)
    }

    pub fn project_slice(&self, w: &[f64]) -> Result<CoefficientVector> {
        self.check_dims(w.len())?;
        Ok(CoefficientVector(
            (0..self.count())
                .map(|k| dot(w, self.direction(k)))
                .collect(),
        ))
    }

    /// Shifts coefficient `index` by `delta`, leaving every other coefficient
    /// and the off-span component untouched.
    pub fn edit_lambda(&self, w: &MotionLatent, index: usize, delta: f64) -> Result<MotionLatent> {
        self.check_dims(w.0.len())?;
        if index >= self.count() {
            return Err(Error::Index {
                index,
                len: self.count(),
            });
        }
        if delta == 0.0 {
            return Ok(w.clone());
        }
        let v = self.direction(index);
        Ok(MotionLatent(
            w.0.iter().zip(v).map(|(x, vk)| x + delta * vk).collect(),
        ))
    }

    /// Splits `full` into its off-span identity part and in-span motion part.
    pub fn decompose(&self, full: &[f64]) -> Result<(IdentityLatent, MotionLatent)> {
        let motion = self.compose(&self.project_slice(full)?)?;
        let identity = full.iter().zip(&motion.0).map(|(f, m)| f - m).collect();
        Ok((IdentityLatent(identity), motion))
    }

    /// Draws a standard-normal vector and removes its in-span component.
    pub fn sample_complement(&self, rng: &mut Rng) -> IdentityLatent {
        let mut v: Vec<f64> = (0..self.dims()).map(|_| rng::normal(rng)).collect();
        for _pass in 0..2 {
            for m in 0..self.count() {
                let q = self.direction(m);
                let c = dot(&v, q);
                for (vk, qk) in v.iter_mut().zip(q) {
                    *vk -= c * qk;
                }
            }
        }
        IdentityLatent(v)
    }

    /// Projects every row of a `frames x d` matrix, giving `frames x M`.
    pub fn project_rows(&self, latents: &Tensor2) -> Result<Tensor2> {
        self.check_dims(latents.cols())?;
        let mut out = Tensor2::zeros(latents.rows(), self.count());
        crate::tensor::gemm_acc(latents, false, &self.vectors, true, &mut out);
        Ok(out)
    }

    /// Composes every row of a `frames x M` matrix, giving `frames x d`.
    pub fn compose_rows(&self, coeffs: &Tensor2) -> Result<Tensor2> {
        if coeffs.cols() != self.count() {
            return Err(Error::Dim {
                expected: self.count(),
                got: coeffs.cols(),
            });
        }
        coeffs.matmul(&self.vectors)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BlobWriter::new(BASIS_MAGIC, BASIS_VERSION);
        w.u64(self.dims() as u64)
            .u64(self.count() as u64)
            .f64s(self.vectors.data());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BlobReader::open(bytes, BASIS_MAGIC)?;
        if r.version != BASIS_VERSION {
            return Err(Error::Data(format!(
                "unsupported basis version {}",
                r.version
            )));
        }
        let dims = r.usize()?;
        let count = r.usize()?;
        let payload = r.f64s(dims * count)?;
        if !r.is_exhausted() {
            return Err(Error::Data("trailing bytes after basis payload".into()));
        }
        Ok(Self {
            vectors: Tensor2::from_vec(count, dims, payload)?,
        })
    }

    /// Lossless JSON dump for debugging.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&BasisJson {
            dims: self.dims(),
            count: self.count(),
            vectors: self.vectors.row_iter().map(<[f64]>::to_vec).collect(),
        })
        .expect("plain numeric structure serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: BasisJson = serde_json::from_str(s)?;
        let vectors = Tensor2::from_rows(&j.vectors)?;
        if vectors.shape() != (j.count, j.dims) {
            return Err(Error::Data(
                "basis JSON shape disagrees with its header".into(),
            ));
        }
        Ok(Self { vectors })
    }
}

#[derive(Serialize, Deserialize)]
struct BasisJson {
    dims: usize,
    count: usize,
    vectors: Vec<Vec<f64>>,
}
