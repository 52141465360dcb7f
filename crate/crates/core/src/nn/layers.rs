use crate::error::{Error, Result};
use crate::nn::params::{ParamId, PredictorParams};
use crate::nn::tape::{Tape, Var};
use crate::rng::Rng;
use crate::tensor::Tensor2;

/// Scale applied to continuous flow time before the sinusoidal embedding.
pub const TIME_POSITION_SCALE: f64 = 1000.0;

/// Fully connected layer `x W + b` with `W: in x out`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn uniform(
        params: &mut PredictorParams,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let w = params.register_uniform(&format!("{name}.weight"), fan_in, fan_out, fan_in, rng);
        let b = params.register_uniform(&format!("{name}.bias"), 1, fan_out, fan_in, rng);
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn zeroed(params: &mut PredictorParams, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = params.register_zeros(&format!("{name}.weight"), fan_in, fan_out);
        let b = params.register_zeros(&format!("{name}.bias"), 1, fan_out);
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }
}

/// Untaped `x W + b`.
pub fn dense(x: &Tensor2, w: &Tensor2, b: &[f64]) -> Result<Tensor2> {
    if b.len() != w.cols() {
        return Err(Error::Shape(format!(
            "bias of {} for {} outputs",
            b.len(),
            w.cols()
        )));
    }
    let mut out = x.matmul(w)?;
    for r in 0..out.rows() {
        for (o, bv) in out.row_mut(r).iter_mut().zip(b) {
            *o += bv;
        }
    }
    Ok(out)
}

/// Untaped per-row layer normalization (no affine).
pub fn layer_norm(x: &Tensor2) -> Tensor2 {
    let p = PredictorParams::new();
    let mut tape = Tape::new(&p);
    let v = tape.input(x.clone());
    let y = tape.layer_norm(v);
    tape.value(y).clone()
}

/// Multi-head attention projections.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub out: Dense,
    pub heads: usize,
}

impl Attention {
    pub fn new(
        params: &mut PredictorParams,
        name: &str,
        hidden: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !hidden.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "hidden size {hidden} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Dense::uniform(params, &format!("{name}.q"), hidden, hidden, rng),
            k: Dense::uniform(params, &format!("{name}.k"), hidden, hidden, rng),
            v: Dense::uniform(params, &format!("{name}.v"), hidden, hidden, rng),
            out: Dense::uniform(params, &format!("{name}.out"), hidden, hidden, rng),
            heads,
        })
    }

    /// Banded attention: query row `l` sees key rows `[l - T, l + T]` clipped
    /// to the sequence. `context` supplies keys and values; pass `x` itself
    /// for self-attention. `half_width = None` disables the mask.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        context: Var,
        half_width: Option<usize>,
    ) -> Result<Var> {
        let hidden = self.q.fan_out;
        if !hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {hidden} is not divisible by {} heads",
                self.heads
            )));
        }
        let head_dim = hidden / self.heads;
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, context)?;
        let v = self.v.forward(tape, context)?;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let band = half_width.unwrap_or(usize::MAX);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim);
            let kh = tape.slice_cols(k, h * head_dim, head_dim);
            let vh = tape.slice_cols(v, h * head_dim, head_dim);
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.band_softmax(scores, band);
            outs.push(tape.matmul(probs, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        self.out.forward(tape, merged)
    }
}

/// Self-attention over the rows of `x` with a fresh set of projections held in
/// `params`; convenience wrapper used where no tape is needed.
pub fn banded_self_attention(
    x: &Tensor2,
    attn: &Attention,
    params: &PredictorParams,
    half_width: Option<usize>,
) -> Result<Tensor2> {
    let mut tape = Tape::new(params);
    let xv = tape.input(x.clone());
    let y = attn.forward(&mut tape, xv, xv, half_width)?;
    Ok(tape.value(y).clone())
}

/// Interleaved sin/cos embedding of a continuous position:
/// `e[2i] = sin(p ω_i)`, `e[2i+1] = cos(p ω_i)`, `ω_i = 10000^(-2i/dim)`.
pub fn sinusoidal_position(position: f64, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "sinusoidal embedding needs an even width, got {dim}"
        )));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        let a = position * freq;
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

/// Flow-time embedding `Emb(t)` for `t ∈ [0, 1]`.
pub fn sinusoidal_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    sinusoidal_position(t * TIME_POSITION_SCALE, dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn dense_identity_and_hand_case() {
        let x = Tensor2::from_vec(2, 2, vec![1.0, -2.0, 0.5, 4.0]).unwrap();
        assert_eq!(dense(&x, &Tensor2::identity(2), &[0.0, 0.0]).unwrap(), x);
        let x = Tensor2::row_vector(&[1.0, 2.0]);
        let w = Tensor2::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(dense(&x, &w, &[5.0]).unwrap().data(), &[16.0]);
    }

    #[test]
    fn dense_matches_triple_loop() {
        let mut r = rng::stream_rng(1, 0);
        let x = rng::normal_matrix(&mut r, 5, 7);
        let w = rng::normal_matrix(&mut r, 7, 3);
        let b: Vec<f64> = (0..3).map(|_| rng::normal(&mut r)).collect();
        let got = dense(&x, &w, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = b[j];
                for k in 0..7 {
                    s += x.get(i, k) * w.get(k, j);
                }
                assert!((got.get(i, j) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn dense_shape_errors() {
        let x = Tensor2::zeros(2, 3);
        assert!(matches!(
            dense(&x, &Tensor2::zeros(2, 2), &[0.0, 0.0]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            dense(&x, &Tensor2::zeros(3, 2), &[0.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn layer_norm_cases() {
        let c = layer_norm(&Tensor2::filled(1, 4, 3.5));
        assert!(c.data().iter().all(|&v| v == 0.0));
        let y = layer_norm(&Tensor2::row_vector(&[1.0, -1.0]));
        // var = 1, so the output is (1, -1) / sqrt(1 + eps)
        for (a, b) in y.data().iter().zip([1.0, -1.0]) {
            assert!((a - b).abs() < 1e-5);
        }
        let mut r = rng::stream_rng(2, 0);
        let x = rng::normal_matrix(&mut r, 3, 32).scale(4.0);
        let y = layer_norm(&x);
        for row in y.row_iter() {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() <= 1e-9);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn sinusoid_at_zero_and_range() {
        let e = sinusoidal_embed(0.0, 8).unwrap();
        for i in 0..4 {
            assert_eq!(e[2 * i], 0.0);
            assert_eq!(e[2 * i + 1], 1.0);
        }
        for t in [0.0, 0.13, 0.5, 0.999, 1.0] {
            assert!(sinusoidal_embed(t, 64)
                .unwrap()
                .iter()
                .all(|v| (-1.0..=1.0).contains(v)));
        }
        let a = sinusoidal_embed(0.4, 64).unwrap();
        let b = sinusoidal_embed(0.4 + 1e-9, 64).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-5));
    }

    #[test]
    fn odd_embedding_width_rejected() {
        assert!(matches!(sinusoidal_embed(0.5, 7), Err(Error::Config(_))));
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut p = PredictorParams::new();
        let mut r = rng::stream_rng(0, 0);
        assert!(matches!(
            Attention::new(&mut p, "a", 10, 3, &mut r),
            Err(Error::Config(_))
        ));
    }

    fn attention_fixture(hidden: usize, heads: usize) -> (PredictorParams, Attention) {
        let mut p = PredictorParams::new();
        let mut r = rng::stream_rng(4, 0);
        let a = Attention::new(&mut p, "attn", hidden, heads, &mut r).unwrap();
        (p, a)
    }

    #[test]
    fn wide_band_equals_unmasked() {
        let (p, a) = attention_fixture(8, 2);
        let mut r = rng::stream_rng(5, 0);
        let x = rng::normal_matrix(&mut r, 6, 8);
        let banded = banded_self_attention(&x, &a, &p, Some(6)).unwrap();
        let full = banded_self_attention(&x, &a, &p, None).unwrap();
        assert_eq!(banded, full);
    }

    #[test]
    fn zero_width_band_returns_value_rows() {
        let (mut p, a) = attention_fixture(4, 1);
        // q = k = 0, v = identity, out = identity
        for d in [a.q, a.k] {
            *p.get_mut(d.w) = Tensor2::zeros(4, 4);
            *p.get_mut(d.b) = Tensor2::zeros(1, 4);
        }
        for d in [a.v, a.out] {
            *p.get_mut(d.w) = Tensor2::identity(4);
            *p.get_mut(d.b) = Tensor2::zeros(1, 4);
        }
        let mut r = rng::stream_rng(6, 0);
        let x = rng::normal_matrix(&mut r, 5, 4);
        let y = banded_self_attention(&x, &a, &p, Some(0)).unwrap();
        assert!(y.max_abs_diff(&x) <= 1e-15);
    }

    #[test]
    fn frames_outside_band_do_not_leak() {
        let (p, a) = attention_fixture(8, 2);
        let mut r = rng::stream_rng(7, 0);
        let x = rng::normal_matrix(&mut r, 10, 8);
        let t = 2;
        let l = 3;
        let mut x2 = x.clone();
        for c in 0..8 {
            x2.set(l + t + 1, c, x.get(l + t + 1, c) + 5.0);
        }
        let y1 = banded_self_attention(&x, &a, &p, Some(t)).unwrap();
        let y2 = banded_self_attention(&x2, &a, &p, Some(t)).unwrap();
        for c in 0..8 {
            assert!((y1.get(l, c) - y2.get(l, c)).abs() <= 1e-12);
        }
        // frame l + t does see it
        assert!((0..8).any(|c| (y1.get(l + t, c) - y2.get(l + t, c)).abs() > 1e-6));
    }
}
